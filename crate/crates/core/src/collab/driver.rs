use super::server::{CollabConfig, MergeEvent, Server, ServerError, ServerMode};
use super::transport::{DeliveryMode, Transport};
use super::AgentMessage;
use crate::agent::{AgentConfig, Frontend};
use crate::eval::{TrajectoryEstimate, TrajectorySample};
use crate::features::{FeatureModel, FrameFeatures};
use crate::ids::{AgentId, FrameId, SubmapId};
use crate::mapper::SparseMap;
use crate::scenario::{mix_seed, World};
use crate::CameraIntrinsics;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Result of a server-client mapping session.
#[derive(Debug)]
pub struct OtfOutcome {
    /// Final sub-map reconstructions in creation order.
    pub maps: Vec<SparseMap>,
    pub merge_log: Vec<MergeEvent>,
    /// Structural hash of the final server state.
    pub fingerprint: u64,
    pub estimate: TrajectoryEstimate,
}

/// Replay per-agent frame streams through the server-client mapper.
#[allow(clippy::too_many_arguments)]
pub fn run_otf(
    streams: &BTreeMap<AgentId, Vec<FrameFeatures>>,
    world: &World,
    intrinsics: &CameraIntrinsics,
    model: &FeatureModel,
    cfg: CollabConfig,
    mode: DeliveryMode,
    seed: u64,
    disconnect: Option<(AgentId, usize)>,
) -> Result<OtfOutcome, ServerError> {
    let mut transport = Transport::new();
    for (agent, frames) in streams {
        let mut msgs: Vec<AgentMessage> = frames
            .iter()
            .map(|f| AgentMessage::FrameSubmission {
                agent: *agent,
                frame: f.clone(),
            })
            .collect();
        msgs.push(AgentMessage::EndOfStream { agent: *agent });
        transport.send(*agent, &msgs);
    }
    if let Some((agent, keep)) = disconnect {
        transport.disconnect_after(agent, keep);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x17_1f));
    let messages = transport.deliver(mode, &mut rng);

    let mut server = Server::new(ServerMode::Otf, world, *intrinsics, *model, cfg);
    for msg in messages {
        server.ingest(msg)?;
    }
    server.finalize();
    server
        .audit_partition()
        .map_err(|_| ServerError::MalformedMessage("sub-map partition violated"))?;

    let maps: Vec<SparseMap> = server.submaps().into_iter().map(|s| s.map).collect();
    let totals: BTreeMap<AgentId, usize> = streams
        .iter()
        .map(|(a, frames)| (*a, frames.len()))
        .collect();
    let estimate = TrajectoryEstimate::from_maps("otf", &maps, totals);
    Ok(OtfOutcome {
        fingerprint: server.fingerprint(),
        merge_log: server.merge_log().to_vec(),
        maps,
        estimate,
    })
}

/// Result of a collaborative tracking session.
#[derive(Debug)]
pub struct SlamOutcome {
    pub maps: Vec<SparseMap>,
    pub merge_log: Vec<MergeEvent>,
    pub estimate: TrajectoryEstimate,
    /// Tracked frames and total frames per agent.
    pub completeness: BTreeMap<AgentId, (usize, usize)>,
    /// Frame index (within the agent stream) where tracking was lost.
    pub loss_frame: BTreeMap<AgentId, usize>,
}

/// Run tracking front-ends over per-agent streams with a centralized
/// back-end. Frames are processed in global timestamp order; keyframe
/// submissions reach the server immediately and pose corrections flow back
/// before the next frame.
#[allow(clippy::too_many_arguments)]
pub fn run_slam(
    streams: &BTreeMap<AgentId, Vec<FrameFeatures>>,
    world: &World,
    intrinsics: &CameraIntrinsics,
    model: &FeatureModel,
    collab_cfg: CollabConfig,
    agent_cfg: AgentConfig,
    seed: u64,
) -> Result<SlamOutcome, ServerError> {
    let match_seed = collab_cfg.match_seed;
    let mut server = Server::new(ServerMode::Slam, world, *intrinsics, *model, collab_cfg);
    let mut frontends: BTreeMap<AgentId, Frontend> = streams
        .keys()
        .map(|agent| {
            (
                *agent,
                Frontend::new(
                    *agent,
                    *intrinsics,
                    agent_cfg,
                    crate::geometry::RansacParams::default(),
                    mix_seed(seed, agent.0 as u64),
                ),
            )
        })
        .collect();

    // Interleave frames by (timestamp, agent).
    let mut events: Vec<(f64, AgentId, usize)> = streams
        .iter()
        .flat_map(|(agent, frames)| {
            frames
                .iter()
                .enumerate()
                .map(|(i, f)| (f.timestamp, *agent, i))
        })
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut frame_owner: BTreeMap<FrameId, AgentId> = BTreeMap::new();
    let mut loss_frame: BTreeMap<AgentId, usize> = BTreeMap::new();
    for (_, agent, index) in events {
        let frame = streams[&agent][index].clone();
        let frontend = frontends.get_mut(&agent).unwrap();
        let was_tracking = !matches!(frontend.state(), crate::agent::TrackingState::Lost { .. });
        let out = frontend
            .process_frame(frame, world, model)
            .map_err(|_| ServerError::MalformedMessage("agent stream out of order"))?;
        if was_tracking && matches!(out.state, crate::agent::TrackingState::Lost { .. }) {
            loss_frame.entry(agent).or_insert(index);
        }
        for submission in out.keyframes {
            frame_owner.insert(submission.frame.frame_id, agent);
            let updates = server.ingest(AgentMessage::KeyframeSubmission(submission))?;
            route_updates(&mut frontends, &frame_owner, &updates);
        }
    }
    for agent in streams.keys() {
        let updates = server.ingest(AgentMessage::EndOfStream { agent: *agent })?;
        route_updates(&mut frontends, &frame_owner, &updates);
    }
    let _ = match_seed;

    // Components: compress surviving sub-map ids into 0..n in id order.
    let submaps = server.submaps();
    let comp_index: BTreeMap<SubmapId, u32> = submaps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i as u32))
        .collect();
    let mut estimate = TrajectoryEstimate::new("slam");
    let mut completeness = BTreeMap::new();
    for (agent, frontend) in &frontends {
        let component = server
            .agent_component(*agent)
            .and_then(|sid| comp_index.get(&sid).copied())
            .unwrap_or(u32::MAX - agent.0);
        for (t, frame_id, pose) in frontend.trajectory() {
            estimate.push(
                *agent,
                TrajectorySample {
                    timestamp: *t,
                    frame_id: *frame_id,
                    center: pose.center(),
                    rotation: pose.rotation,
                    component,
                },
            );
        }
        estimate
            .total_frames
            .insert(*agent, frontend.total_frames());
        completeness.insert(
            *agent,
            (frontend.trajectory().len(), frontend.total_frames()),
        );
    }

    Ok(SlamOutcome {
        maps: submaps.into_iter().map(|s| s.map).collect(),
        merge_log: server.merge_log().to_vec(),
        estimate,
        completeness,
        loss_frame,
    })
}

fn route_updates(
    frontends: &mut BTreeMap<AgentId, Frontend>,
    frame_owner: &BTreeMap<FrameId, AgentId>,
    updates: &[(FrameId, crate::Pose)],
) {
    let mut per_agent: BTreeMap<AgentId, Vec<(FrameId, crate::Pose)>> = BTreeMap::new();
    for (frame, pose) in updates {
        if let Some(agent) = frame_owner.get(frame) {
            per_agent.entry(*agent).or_default().push((*frame, *pose));
        }
    }
    for (agent, list) in per_agent {
        if let Some(frontend) = frontends.get_mut(&agent) {
            // Corrections for keyframes this front-end produced.
            let _ = frontend.apply_pose_update(&list);
        }
    }
}
