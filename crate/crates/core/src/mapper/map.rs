use crate::features::FrameFeatures;
use crate::geometry::project;
use crate::ids::{AgentId, FrameId, LandmarkId};
use crate::{CameraIntrinsics, Landmark, Pixel, Point, Pose, Similarity};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

/// A frame held by a map. Only the keypoints cross over from the feature
/// stream; the map never sees the simulation's hidden ground-truth channel.
#[derive(Debug, Clone)]
pub struct MapFrame {
    /// `Some` once the frame is registered.
    pub pose: Option<Pose>,
    pub intrinsics: CameraIntrinsics,
    pub agent_id: AgentId,
    pub timestamp: f64,
    pub keypoints: Vec<Pixel>,
    /// Landmark linked to each keypoint, if any.
    pub feature_landmark: Vec<Option<LandmarkId>>,
}

impl MapFrame {
    pub fn registered(&self) -> bool {
        self.pose.is_some()
    }
}

/// Registered frames plus triangulated landmarks and their observations.
#[derive(Debug, Clone, Default)]
pub struct SparseMap {
    pub frames: BTreeMap<FrameId, MapFrame>,
    pub landmarks: BTreeMap<LandmarkId, Landmark>,
    /// The two frames fixing the gauge: first fully fixed, second holding
    /// the baseline scale.
    pub gauge: Option<(FrameId, FrameId)>,
    next_landmark: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapAuditError {
    #[error("observation references missing frame {0}")]
    MissingFrame(FrameId),
    #[error("observation references unregistered frame {0}")]
    UnregisteredFrame(FrameId),
    #[error("observation keypoint index out of range in frame {0}")]
    BadKeypointIndex(FrameId),
    #[error("landmark {0} has fewer than two observations")]
    UnderSupported(LandmarkId),
    #[error("landmark {0} behind camera of frame {1}")]
    BehindCamera(LandmarkId, FrameId),
    #[error("frame {0} feature link disagrees with landmark {1}")]
    InconsistentLink(FrameId, LandmarkId),
    #[error("gauge frame {0} is not registered")]
    UnregisteredGauge(FrameId),
}

impl SparseMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert an unregistered frame from its detected features.
    pub fn add_frame(&mut self, features: &FrameFeatures, k: &CameraIntrinsics) {
        let n = features.len();
        self.frames.insert(
            features.frame_id,
            MapFrame {
                pose: None,
                intrinsics: *k,
                agent_id: features.agent_id,
                timestamp: features.timestamp,
                keypoints: features.keypoints.clone(),
                feature_landmark: vec![None; n],
            },
        );
    }

    pub fn registered_frames(&self) -> impl Iterator<Item = (FrameId, &MapFrame)> {
        self.frames
            .iter()
            .filter(|(_, f)| f.registered())
            .map(|(id, f)| (*id, f))
    }

    pub fn registered_count(&self) -> usize {
        self.frames.values().filter(|f| f.registered()).count()
    }

    pub fn allocate_landmark(&mut self, position: Point) -> LandmarkId {
        let id = LandmarkId(self.next_landmark);
        self.next_landmark += 1;
        self.landmarks.insert(
            id,
            Landmark {
                id,
                position,
                observations: Vec::new(),
            },
        );
        id
    }

    /// Link keypoint `feature` of `frame` to `landmark`.
    pub fn add_observation(&mut self, frame: FrameId, feature: usize, landmark: LandmarkId) {
        let lm = self.landmarks.get_mut(&landmark).expect("landmark exists");
        lm.observations.push((frame, feature));
        let f = self.frames.get_mut(&frame).expect("frame exists");
        f.feature_landmark[feature] = Some(landmark);
    }

    pub fn remove_landmark(&mut self, id: LandmarkId) {
        if let Some(lm) = self.landmarks.remove(&id) {
            for (frame, feature) in lm.observations {
                if let Some(f) = self.frames.get_mut(&frame) {
                    f.feature_landmark[feature] = None;
                }
            }
        }
    }

    /// Pixel of an observation.
    pub fn observation_pixel(&self, frame: FrameId, feature: usize) -> Pixel {
        self.frames[&frame].keypoints[feature]
    }

    /// Reprojection error of one observation; `None` when the landmark is
    /// behind the camera.
    pub fn reprojection_error(&self, lm: &Landmark, frame: FrameId, feature: usize) -> Option<f64> {
        let f = &self.frames[&frame];
        let pose = f.pose.as_ref()?;
        let proj = project(&lm.position, pose, &f.intrinsics)?;
        Some((proj - f.keypoints[feature]).norm())
    }

    /// Unweighted RMS reprojection error over all observations; behind-camera
    /// observations are counted at the filter threshold scale of 1e4 px.
    pub fn rms_reprojection(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for lm in self.landmarks.values() {
            for &(frame, feature) in &lm.observations {
                let e = self.reprojection_error(lm, frame, feature).unwrap_or(1e4);
                sum += e * e;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }

    pub fn observation_count(&self) -> usize {
        self.landmarks.values().map(|l| l.observations.len()).sum()
    }

    /// Frames of the map grouped per agent.
    pub fn agents(&self) -> Vec<AgentId> {
        let mut out: Vec<AgentId> = self
            .registered_frames()
            .map(|(_, f)| f.agent_id)
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Apply a similarity transform to the whole reconstruction (poses and
    /// landmarks). Pixel observations stay valid because projection is
    /// invariant to a uniform rescale of camera-frame coordinates.
    pub fn apply_similarity(&mut self, sim: &Similarity) {
        for lm in self.landmarks.values_mut() {
            lm.position = sim.apply(&lm.position);
        }
        let rot = sim.rotation;
        for frame in self.frames.values_mut() {
            if let Some(pose) = frame.pose.as_mut() {
                let new_rot = pose.rotation * rot.inverse();
                let new_center = sim.apply(&pose.center());
                *pose = Pose::new(new_rot, -(new_rot * new_center.coords));
            }
        }
    }

    /// Structural invariants; run after every public mapping operation in
    /// tests and after merges in the server.
    pub fn audit(&self) -> Result<(), MapAuditError> {
        if let Some((g1, g2)) = self.gauge {
            for g in [g1, g2] {
                if !self.frames.get(&g).map(|f| f.registered()).unwrap_or(false) {
                    return Err(MapAuditError::UnregisteredGauge(g));
                }
            }
        }
        for (id, lm) in &self.landmarks {
            if lm.observations.len() < 2 {
                return Err(MapAuditError::UnderSupported(*id));
            }
            for &(frame, feature) in &lm.observations {
                let f = self
                    .frames
                    .get(&frame)
                    .ok_or(MapAuditError::MissingFrame(frame))?;
                let Some(pose) = f.pose.as_ref() else {
                    return Err(MapAuditError::UnregisteredFrame(frame));
                };
                if feature >= f.keypoints.len() {
                    return Err(MapAuditError::BadKeypointIndex(frame));
                }
                if f.feature_landmark[feature] != Some(*id) {
                    return Err(MapAuditError::InconsistentLink(frame, *id));
                }
                if pose.transform(&lm.position).z <= 0.0 {
                    return Err(MapAuditError::BehindCamera(*id, frame));
                }
            }
        }
        Ok(())
    }
}

/// Text export: `frame <id> <agent> <t> qw qx qy qz tx ty tz` per registered
/// frame, then `pt <id> x y z <n_obs>` per landmark.
pub fn write_map<W: Write>(out: &mut W, map: &SparseMap) -> std::io::Result<()> {
    for (id, frame) in map.registered_frames() {
        let pose = frame.pose.as_ref().unwrap();
        let q = pose.rotation.quaternion();
        let t = pose.translation;
        writeln!(
            out,
            "frame {} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            id, frame.agent_id, frame.timestamp, q.w, q.i, q.j, q.k, t.x, t.y, t.z
        )?;
    }
    for (id, lm) in &map.landmarks {
        writeln!(
            out,
            "pt {} {:?} {:?} {:?} {}",
            id,
            lm.position.x,
            lm.position.y,
            lm.position.z,
            lm.observations.len()
        )?;
    }
    Ok(())
}
