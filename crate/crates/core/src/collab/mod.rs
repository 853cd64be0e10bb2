//! Centralized collaboration back-end: message protocol, transport,
//! the two-mode mapping server (incremental server-client mapping and
//! keyframe-based collaborative tracking), and session drivers.

mod driver;
mod server;
mod transport;
mod wire;

pub use driver::{run_otf, run_slam, OtfOutcome, SlamOutcome};
pub use server::{CollabConfig, MergeEvent, Server, ServerError, ServerMode, SubMap};
pub use transport::{DeliveryMode, Transport};
pub use wire::{decode_message, encode_message, read_message, WireError};

use crate::features::FrameFeatures;
use crate::ids::{AgentId, FrameId};
use crate::{Point, Pose};

/// Keyframe payload uploaded by a tracking agent: pose estimate, features,
/// and the locally triangulated landmark position per keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeSubmission {
    pub agent: AgentId,
    pub frame: FrameFeatures,
    pub pose: Pose,
    pub landmarks: Vec<Option<Point>>,
}

/// Protocol messages exchanged between agents and the server.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentMessage {
    /// Raw frame features for the server-side incremental mapper.
    FrameSubmission { agent: AgentId, frame: FrameFeatures },
    /// Tracked keyframe for the collaborative tracking back-end.
    KeyframeSubmission(KeyframeSubmission),
    /// Server-corrected pose, flowing back to the owning agent.
    PoseUpdate { frame: FrameId, pose: Pose },
    /// The agent's stream terminated normally.
    EndOfStream { agent: AgentId },
}

impl AgentMessage {
    pub fn agent(&self) -> Option<AgentId> {
        match self {
            AgentMessage::FrameSubmission { agent, .. } => Some(*agent),
            AgentMessage::KeyframeSubmission(k) => Some(k.agent),
            AgentMessage::EndOfStream { agent } => Some(*agent),
            AgentMessage::PoseUpdate { .. } => None,
        }
    }

    /// Timestamp used by the deterministic total order; end-of-stream sorts
    /// after every frame.
    pub fn timestamp(&self) -> f64 {
        match self {
            AgentMessage::FrameSubmission { frame, .. } => frame.timestamp,
            AgentMessage::KeyframeSubmission(k) => k.frame.timestamp,
            AgentMessage::PoseUpdate { .. } => f64::NEG_INFINITY,
            AgentMessage::EndOfStream { .. } => f64::INFINITY,
        }
    }
}
