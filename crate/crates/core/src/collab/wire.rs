//! Length-prefixed binary message format: 4-byte little-endian payload
//! length, 1-byte variant tag (0 frame, 1 keyframe, 2 pose update, 3 end of
//! stream), then the fields in declaration order, little-endian, floats as
//! 8 bytes. The provenance ids and camera center travel with the keypoints:
//! they stand in for the descriptor payload a real system would ship.

use super::{AgentMessage, KeyframeSubmission};
use crate::features::FrameFeatures;
use crate::ids::{AgentId, FrameId, LandmarkId};
use crate::{Pixel, Point, Pose};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::io::Read;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("malformed field: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn pose(&mut self, p: &Pose) {
        let q = p.rotation.quaternion();
        for v in [q.w, q.i, q.j, q.k, p.translation.x, p.translation.y, p.translation.z] {
            self.f64(v);
        }
    }
    fn frame(&mut self, f: &FrameFeatures) {
        self.u64(f.frame_id.0);
        self.u32(f.agent_id.0);
        self.f64(f.timestamp);
        let c = f.truth_center();
        self.f64(c.x);
        self.f64(c.y);
        self.f64(c.z);
        self.u32(f.len() as u32);
        for (kp, id) in f.keypoints.iter().zip(f.truth_provenance()) {
            self.f64(kp.x);
            self.f64(kp.y);
            self.u64(id.0);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.pos + n > self.buf.len() {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn pose(&mut self) -> Result<Pose, WireError> {
        let w = self.f64()?;
        let i = self.f64()?;
        let j = self.f64()?;
        let k = self.f64()?;
        let t = Vector3::new(self.f64()?, self.f64()?, self.f64()?);
        let q = Quaternion::new(w, i, j, k);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(WireError::Malformed("rotation quaternion not unit"));
        }
        // Bit-exact roundtrip: the sender ships unit quaternions.
        Ok(Pose::new(UnitQuaternion::new_unchecked(q), t))
    }
    fn frame(&mut self) -> Result<FrameFeatures, WireError> {
        let frame_id = FrameId(self.u64()?);
        let agent_id = AgentId(self.u32()?);
        let timestamp = self.f64()?;
        let center = Point::new(self.f64()?, self.f64()?, self.f64()?);
        let n = self.u32()? as usize;
        if n > 10_000_000 {
            return Err(WireError::Malformed("keypoint count"));
        }
        let mut keypoints = Vec::with_capacity(n);
        let mut provenance = Vec::with_capacity(n);
        for _ in 0..n {
            let u = self.f64()?;
            let v = self.f64()?;
            keypoints.push(Pixel::new(u, v));
            provenance.push(LandmarkId(self.u64()?));
        }
        Ok(FrameFeatures::from_parts(
            frame_id, agent_id, timestamp, keypoints, provenance, center,
        ))
    }
}

/// Encode a message including its length prefix.
pub fn encode_message(msg: &AgentMessage) -> Vec<u8> {
    let mut w = Writer::new();
    match msg {
        AgentMessage::FrameSubmission { agent, frame } => {
            w.u8(0);
            w.u32(agent.0);
            w.frame(frame);
        }
        AgentMessage::KeyframeSubmission(k) => {
            w.u8(1);
            w.u32(k.agent.0);
            w.frame(&k.frame);
            w.pose(&k.pose);
            w.u32(k.landmarks.len() as u32);
            for lm in &k.landmarks {
                match lm {
                    Some(p) => {
                        w.u8(1);
                        w.f64(p.x);
                        w.f64(p.y);
                        w.f64(p.z);
                    }
                    None => w.u8(0),
                }
            }
        }
        AgentMessage::PoseUpdate { frame, pose } => {
            w.u8(2);
            w.u64(frame.0);
            w.pose(pose);
        }
        AgentMessage::EndOfStream { agent } => {
            w.u8(3);
            w.u32(agent.0);
        }
    }
    let mut out = Vec::with_capacity(w.buf.len() + 4);
    out.extend_from_slice(&(w.buf.len() as u32).to_le_bytes());
    out.extend_from_slice(&w.buf);
    out
}

/// Decode one length-prefixed message; returns it with the bytes consumed.
pub fn decode_message(bytes: &[u8]) -> Result<(AgentMessage, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated);
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + len {
        return Err(WireError::Truncated);
    }
    let mut r = Reader {
        buf: &bytes[4..4 + len],
        pos: 0,
    };
    let msg = match r.u8()? {
        0 => AgentMessage::FrameSubmission {
            agent: AgentId(r.u32()?),
            frame: r.frame()?,
        },
        1 => {
            let agent = AgentId(r.u32()?);
            let frame = r.frame()?;
            let pose = r.pose()?;
            let n = r.u32()? as usize;
            let mut landmarks = Vec::with_capacity(n);
            for _ in 0..n {
                landmarks.push(match r.u8()? {
                    0 => None,
                    1 => Some(Point::new(r.f64()?, r.f64()?, r.f64()?)),
                    _ => return Err(WireError::Malformed("landmark flag")),
                });
            }
            AgentMessage::KeyframeSubmission(KeyframeSubmission {
                agent,
                frame,
                pose,
                landmarks,
            })
        }
        2 => AgentMessage::PoseUpdate {
            frame: FrameId(r.u64()?),
            pose: r.pose()?,
        },
        3 => AgentMessage::EndOfStream {
            agent: AgentId(r.u32()?),
        },
        tag => return Err(WireError::UnknownTag(tag)),
    };
    if r.pos != r.buf.len() {
        return Err(WireError::Malformed("trailing bytes"));
    }
    Ok((msg, 4 + len))
}

/// Read one message from a stream; `Ok(None)` on clean end of stream.
pub fn read_message<R: Read>(reader: &mut R) -> Result<Option<AgentMessage>, WireError> {
    let mut len_buf = [0u8; 4];
    match reader.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload)?;
    let mut framed = Vec::with_capacity(4 + len);
    framed.extend_from_slice(&len_buf);
    framed.extend_from_slice(&payload);
    decode_message(&framed).map(|(m, _)| Some(m))
}
