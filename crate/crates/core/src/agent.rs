//! Tracking front-end of the collaborative pipeline: per-frame pose
//! tracking against a local keyframe map, keyframe selection and upload,
//! unrecoverable tracking loss, and application of server pose corrections.

use crate::collab::KeyframeSubmission;
use crate::features::{match_frames, pair_rng, FeatureModel, FrameFeatures};
use crate::geometry::{
    estimate_relative_pose, project, solve_pnp, triangulate, RansacParams,
};
use crate::ids::{AgentId, FrameId, LandmarkId};
use crate::scenario::World;
use crate::{CameraIntrinsics, Pixel, Point, Pose};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct AgentConfig {
    /// Tracking is lost when the resection inlier count drops below this.
    pub t_lost: usize,
    /// New keyframe when the tracked fraction against the reference
    /// keyframe falls below this.
    pub keyframe_ratio: f64,
    /// New keyframe after at most this many frames regardless of overlap.
    pub keyframe_max_gap: usize,
    /// Video rate the front-end expects, Hz.
    pub frame_rate: f64,
    /// Keyframes whose landmarks form the local tracking map.
    pub local_window: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            t_lost: 20,
            keyframe_ratio: 0.9,
            keyframe_max_gap: 30,
            frame_rate: 30.0,
            local_window: 10,
        }
    }
}

/// Tracking life cycle; `Lost` is absorbing by construction: no transition
/// leads out of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingState {
    Initializing,
    Tracking { reference_keyframe: FrameId },
    Lost { last_tracked: FrameId },
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("frame at t={t} arrived after t={last}")]
    OutOfOrderFrame { t: f64, last: f64 },
    #[error("pose update for unknown frame {0}")]
    UnknownFrame(FrameId),
}

#[derive(Debug, Clone)]
struct Keyframe {
    frame_id: FrameId,
    features: FrameFeatures,
    pose: Pose,
    /// Local landmark linked to each keypoint.
    links: Vec<Option<LandmarkId>>,
}

#[derive(Debug, Clone)]
struct LocalLandmark {
    position: Point,
    /// Observations in keyframes: (keyframe id, keypoint index).
    observations: Vec<(FrameId, usize)>,
}

/// Outcome of processing one frame.
#[derive(Debug)]
pub struct ProcessOutcome {
    pub state: TrackingState,
    pub pose: Option<Pose>,
    pub keyframes: Vec<KeyframeSubmission>,
}

/// Single-agent tracking front-end over one ordered frame stream.
#[derive(Debug)]
pub struct Frontend {
    pub agent_id: AgentId,
    config: AgentConfig,
    ransac: RansacParams,
    intrinsics: CameraIntrinsics,
    match_seed: u64,
    state: TrackingState,
    keyframes: Vec<Keyframe>,
    landmarks: BTreeMap<LandmarkId, LocalLandmark>,
    next_landmark: u64,
    /// Tracked poses in order: (timestamp, frame, pose).
    trajectory: Vec<(f64, FrameId, Pose)>,
    /// Last two tracked poses for the constant-velocity prediction.
    recent: Vec<(f64, Pose)>,
    pending_init: Vec<FrameFeatures>,
    frames_since_keyframe: usize,
    total_frames: usize,
    last_timestamp: Option<f64>,
}

impl Frontend {
    pub fn new(
        agent_id: AgentId,
        intrinsics: CameraIntrinsics,
        config: AgentConfig,
        ransac: RansacParams,
        match_seed: u64,
    ) -> Self {
        Self {
            agent_id,
            config,
            ransac,
            intrinsics,
            match_seed,
            state: TrackingState::Initializing,
            keyframes: Vec::new(),
            landmarks: BTreeMap::new(),
            next_landmark: 0,
            trajectory: Vec::new(),
            recent: Vec::new(),
            pending_init: Vec::new(),
            frames_since_keyframe: 0,
            total_frames: 0,
            last_timestamp: None,
        }
    }

    pub fn state(&self) -> TrackingState {
        self.state
    }

    pub fn trajectory(&self) -> &[(f64, FrameId, Pose)] {
        &self.trajectory
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn completeness(&self) -> f64 {
        if self.total_frames == 0 {
            return 0.0;
        }
        self.trajectory.len() as f64 / self.total_frames as f64
    }

    pub fn keyframe_ids(&self) -> Vec<FrameId> {
        self.keyframes.iter().map(|k| k.frame_id).collect()
    }

    fn allocate_landmark(&mut self, position: Point) -> LandmarkId {
        let id = LandmarkId(self.next_landmark);
        self.next_landmark += 1;
        self.landmarks.insert(
            id,
            LocalLandmark {
                position,
                observations: Vec::new(),
            },
        );
        id
    }

    fn link(&mut self, kf_index: usize, feature: usize, landmark: LandmarkId) {
        let kf = &mut self.keyframes[kf_index];
        if kf.links[feature].is_some() {
            return;
        }
        kf.links[feature] = Some(landmark);
        self.landmarks
            .get_mut(&landmark)
            .unwrap()
            .observations
            .push((kf.frame_id, feature));
    }

    /// Process the next frame of the stream, in timestamp order.
    pub fn process_frame(
        &mut self,
        frame: FrameFeatures,
        world: &World,
        model: &FeatureModel,
    ) -> Result<ProcessOutcome, AgentError> {
        if let Some(last) = self.last_timestamp {
            if frame.timestamp <= last {
                return Err(AgentError::OutOfOrderFrame {
                    t: frame.timestamp,
                    last,
                });
            }
        }
        self.last_timestamp = Some(frame.timestamp);
        self.total_frames += 1;

        match self.state {
            TrackingState::Lost { .. } => Ok(ProcessOutcome {
                state: self.state,
                pose: None,
                keyframes: Vec::new(),
            }),
            TrackingState::Initializing => Ok(self.try_initialize(frame, world, model)),
            TrackingState::Tracking { .. } => Ok(self.track(frame, world, model)),
        }
    }

    fn try_initialize(
        &mut self,
        frame: FrameFeatures,
        world: &World,
        model: &FeatureModel,
    ) -> ProcessOutcome {
        // Try the new frame against buffered ones, oldest first so the
        // baseline is as long as possible. A high-rate stream needs a buffer
        // spanning a second or two before the parallax clears the
        // triangulation floor; cap the resection attempts per frame to
        // bound the per-frame cost.
        type InitSeed = (usize, crate::geometry::RelativePose<f64>, Vec<(usize, usize)>);
        let mut chosen: Option<InitSeed> = None;
        for (idx, earlier) in self.pending_init.iter().enumerate().take(12) {
            let mut rng = pair_rng(self.match_seed, earlier.frame_id, frame.frame_id);
            let matches = match_frames(earlier, &frame, model, world, &mut rng);
            if matches.len() < 8 {
                continue;
            }
            let pixel_pairs: Vec<(Pixel, Pixel)> = matches
                .pairs
                .iter()
                .map(|&(i, j)| (earlier.keypoints[i], frame.keypoints[j]))
                .collect();
            if let Ok(rel) = estimate_relative_pose(
                &pixel_pairs,
                &self.intrinsics,
                &self.intrinsics,
                &self.ransac,
                &mut rng,
            ) {
                chosen = Some((idx, rel, matches.pairs));
                break;
            }
        }

        let Some((idx, rel, pairs)) = chosen else {
            self.pending_init.push(frame);
            let cap = (3.0 * self.config.frame_rate).ceil() as usize;
            if self.pending_init.len() > cap.max(10) {
                self.pending_init.remove(0);
            }
            return ProcessOutcome {
                state: self.state,
                pose: None,
                keyframes: Vec::new(),
            };
        };

        let earlier = self.pending_init.remove(idx);
        let pose_a = Pose::identity();
        let pose_b = rel.pose;
        // Triangulate the inlier matches into the first local landmarks.
        let mut links_a = vec![None; earlier.len()];
        let mut links_b = vec![None; frame.len()];
        let mut created = 0usize;
        let mut staged: Vec<(usize, usize, Point)> = Vec::new();
        for (pi, &(ia, ib)) in pairs.iter().enumerate() {
            if !rel.inliers[pi] {
                continue;
            }
            let obs = [
                (pose_a, self.intrinsics, earlier.keypoints[ia]),
                (pose_b, self.intrinsics, frame.keypoints[ib]),
            ];
            if let Ok(point) = triangulate(&obs, self.ransac.min_triangulation_angle) {
                staged.push((ia, ib, point));
            }
        }
        if staged.len() < self.ransac.min_rel_pose_inliers {
            // Not a usable map seed; keep gathering.
            self.pending_init.insert(idx, earlier);
            self.pending_init.push(frame);
            return ProcessOutcome {
                state: self.state,
                pose: None,
                keyframes: Vec::new(),
            };
        }

        for (ia, ib, point) in staged {
            let id = self.allocate_landmark(point);
            links_a[ia] = Some(id);
            links_b[ib] = Some(id);
            created += 1;
        }
        let _ = created;

        let kf_a = Keyframe {
            frame_id: earlier.frame_id,
            features: earlier.clone(),
            pose: pose_a,
            links: links_a,
        };
        let kf_b = Keyframe {
            frame_id: frame.frame_id,
            features: frame.clone(),
            pose: pose_b,
            links: links_b,
        };
        // Register observations.
        for (kf_idx, kf) in [kf_a, kf_b].into_iter().enumerate() {
            self.keyframes.push(kf);
            let last = self.keyframes.len() - 1;
            let links: Vec<(usize, LandmarkId)> = self.keyframes[last]
                .links
                .iter()
                .enumerate()
                .filter_map(|(f, l)| l.map(|l| (f, l)))
                .collect();
            for (feature, lm) in links {
                self.landmarks
                    .get_mut(&lm)
                    .unwrap()
                    .observations
                    .push((self.keyframes[last].frame_id, feature));
            }
            let _ = kf_idx;
        }

        self.trajectory
            .push((earlier.timestamp, earlier.frame_id, pose_a));
        self.trajectory
            .push((frame.timestamp, frame.frame_id, pose_b));

        // Backfill the frames buffered during initialization by resecting
        // them against the fresh map, so a clean start loses nothing.
        let leftovers = std::mem::take(&mut self.pending_init);
        for buffered in leftovers {
            let mut corr: Vec<(Point, Pixel)> = Vec::new();
            let mut seen = std::collections::BTreeSet::new();
            for kf in &self.keyframes {
                let mut rng = pair_rng(self.match_seed, buffered.frame_id, kf.frame_id);
                let matches = match_frames(&buffered, &kf.features, model, world, &mut rng);
                for &(i_b, i_kf) in &matches.pairs {
                    if let Some(lm) = kf.links[i_kf] {
                        if seen.insert(lm) {
                            corr.push((self.landmarks[&lm].position, buffered.keypoints[i_b]));
                        }
                    }
                }
            }
            if corr.len() < self.config.t_lost.max(4) {
                continue;
            }
            let mut rng = pair_rng(self.match_seed ^ 0x7ac4, buffered.frame_id, buffered.frame_id);
            if let Ok(sol) = solve_pnp(&corr, &self.intrinsics, &self.ransac, &mut rng) {
                if sol.inlier_count() >= self.config.t_lost {
                    self.trajectory
                        .push((buffered.timestamp, buffered.frame_id, sol.pose));
                }
            }
        }
        self.trajectory.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.recent = self
            .trajectory
            .iter()
            .rev()
            .take(2)
            .rev()
            .map(|(t, _, p)| (*t, *p))
            .collect();
        self.frames_since_keyframe = 0;
        self.state = TrackingState::Tracking {
            reference_keyframe: frame.frame_id,
        };

        let submissions = vec![
            self.submission_for(self.keyframes.len() - 2),
            self.submission_for(self.keyframes.len() - 1),
        ];
        ProcessOutcome {
            state: self.state,
            pose: Some(pose_b),
            keyframes: submissions,
        }
    }

    fn submission_for(&self, kf_index: usize) -> KeyframeSubmission {
        let kf = &self.keyframes[kf_index];
        KeyframeSubmission {
            agent: self.agent_id,
            frame: kf.features.clone(),
            pose: kf.pose,
            landmarks: kf
                .links
                .iter()
                .map(|l| l.map(|id| self.landmarks[&id].position))
                .collect(),
        }
    }

    /// Constant-velocity pose prediction from the last two tracked poses.
    fn predict(&self) -> Option<Pose> {
        match self.recent.as_slice() {
            [] => None,
            [(_, last)] => Some(*last),
            [.., (_, prev), (_, last)] => Some(last.compose(&prev.inverse()).compose(last)),
        }
    }

    fn track(
        &mut self,
        frame: FrameFeatures,
        world: &World,
        model: &FeatureModel,
    ) -> ProcessOutcome {
        let last_tracked = self.trajectory.last().map(|(_, f, _)| *f).unwrap();
        let predicted = self.predict();

        // 2D-3D correspondences against the local-map keyframes.
        let window_start = self.keyframes.len().saturating_sub(self.config.local_window);
        let mut corr: Vec<(LandmarkId, usize)> = Vec::new();
        let mut seen_landmarks = std::collections::BTreeSet::new();
        let mut seen_features = std::collections::BTreeSet::new();
        let mut kf_matches: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
        for kf_index in (window_start..self.keyframes.len()).rev() {
            let kf = &self.keyframes[kf_index];
            let mut rng = pair_rng(self.match_seed, frame.frame_id, kf.frame_id);
            let matches = match_frames(&frame, &kf.features, model, world, &mut rng);
            for &(i_f, i_kf) in &matches.pairs {
                if let Some(lm) = kf.links[i_kf] {
                    if seen_landmarks.contains(&lm) || seen_features.contains(&i_f) {
                        continue;
                    }
                    // Gate by the motion prediction: the landmark must fall
                    // inside the predicted view.
                    if let Some(pred) = &predicted {
                        let visible = project(&self.landmarks[&lm].position, pred, &self.intrinsics)
                            .map(|px| {
                                px.x > -100.0
                                    && px.y > -100.0
                                    && px.x < self.intrinsics.width as f64 + 100.0
                                    && px.y < self.intrinsics.height as f64 + 100.0
                            })
                            .unwrap_or(false);
                        if !visible {
                            continue;
                        }
                    }
                    seen_landmarks.insert(lm);
                    seen_features.insert(i_f);
                    corr.push((lm, i_f));
                }
            }
            kf_matches.push((kf_index, matches.pairs));
        }

        let lost = |this: &mut Self| {
            this.state = TrackingState::Lost { last_tracked };
            ProcessOutcome {
                state: this.state,
                pose: None,
                keyframes: Vec::new(),
            }
        };

        if corr.len() < self.config.t_lost.max(4) {
            return lost(self);
        }
        let points: Vec<(Point, Pixel)> = corr
            .iter()
            .map(|&(lm, f)| (self.landmarks[&lm].position, frame.keypoints[f]))
            .collect();
        let mut rng = pair_rng(self.match_seed ^ 0x7ac4, frame.frame_id, frame.frame_id);
        let solution = match solve_pnp(&points, &self.intrinsics, &self.ransac, &mut rng) {
            Ok(s) => s,
            Err(_) => return lost(self),
        };
        let inliers = solution.inlier_count();
        if inliers < self.config.t_lost {
            return lost(self);
        }

        let pose = solution.pose;
        self.trajectory.push((frame.timestamp, frame.frame_id, pose));
        self.recent.push((frame.timestamp, pose));
        if self.recent.len() > 2 {
            self.recent.remove(0);
        }
        self.frames_since_keyframe += 1;

        // Keyframe rule: thin overlap with the reference keyframe or a gap.
        let TrackingState::Tracking { reference_keyframe } = self.state else {
            unreachable!()
        };
        let ref_kf = self
            .keyframes
            .iter()
            .find(|k| k.frame_id == reference_keyframe)
            .expect("reference keyframe exists");
        let ref_landmarks = ref_kf.links.iter().flatten().count().max(1);
        let tracked_fraction = inliers as f64 / ref_landmarks as f64;
        let need_keyframe = tracked_fraction < self.config.keyframe_ratio
            || self.frames_since_keyframe >= self.config.keyframe_max_gap;
        let mut submissions = Vec::new();
        if need_keyframe {
            let kf_index =
                self.promote_keyframe(frame.clone(), pose, &solution.inliers, &corr, &kf_matches);
            self.frames_since_keyframe = 0;
            self.state = TrackingState::Tracking {
                reference_keyframe: frame.frame_id,
            };
            submissions.push(self.submission_for(kf_index));
        }

        ProcessOutcome {
            state: self.state,
            pose: Some(pose),
            keyframes: submissions,
        }
    }

    /// Turn a tracked frame into a keyframe: link its resection inliers,
    /// then triangulate fresh landmarks against the local-map keyframes.
    fn promote_keyframe(
        &mut self,
        frame: FrameFeatures,
        pose: Pose,
        pnp_inliers: &[bool],
        corr: &[(LandmarkId, usize)],
        kf_matches: &[(usize, Vec<(usize, usize)>)],
    ) -> usize {
        let mut links = vec![None; frame.len()];
        for (ci, &(lm, feature)) in corr.iter().enumerate() {
            if pnp_inliers[ci] {
                links[feature] = Some(lm);
            }
        }
        let kf = Keyframe {
            frame_id: frame.frame_id,
            features: frame,
            pose,
            links,
        };
        self.keyframes.push(kf);
        let new_index = self.keyframes.len() - 1;
        let new_id = self.keyframes[new_index].frame_id;
        let linked: Vec<(usize, LandmarkId)> = self.keyframes[new_index]
            .links
            .iter()
            .enumerate()
            .filter_map(|(f, l)| l.map(|l| (f, l)))
            .collect();
        for (feature, lm) in linked {
            self.landmarks
                .get_mut(&lm)
                .unwrap()
                .observations
                .push((new_id, feature));
        }

        // Opportunistic expansion against the matched keyframes.
        for (kf_index, pairs) in kf_matches {
            let (other_pose, other_id) = {
                let kf = &self.keyframes[*kf_index];
                (kf.pose, kf.frame_id)
            };
            if other_id == new_id {
                continue;
            }
            for &(i_f, i_kf) in pairs {
                if self.keyframes[new_index].links[i_f].is_some()
                    || self.keyframes[*kf_index].links[i_kf].is_some()
                {
                    continue;
                }
                let px_new = self.keyframes[new_index].features.keypoints[i_f];
                let px_old = self.keyframes[*kf_index].features.keypoints[i_kf];
                let obs = [
                    (pose, self.intrinsics, px_new),
                    (other_pose, self.intrinsics, px_old),
                ];
                let Ok(point) = triangulate(&obs, self.ransac.min_triangulation_angle) else {
                    continue;
                };
                let within = |p: &Pose, px: &Pixel| {
                    project(&point, p, &self.intrinsics)
                        .map(|proj| (proj - px).norm() <= self.ransac.inlier_threshold_px)
                        .unwrap_or(false)
                };
                if within(&pose, &px_new) && within(&other_pose, &px_old) {
                    let id = self.allocate_landmark(point);
                    self.link(new_index, i_f, id);
                    self.link(*kf_index, i_kf, id);
                }
            }
        }
        new_index
    }

    /// Overwrite keyframe poses with server corrections; non-keyframe poses
    /// ride along rigidly with their nearest preceding keyframe, and local
    /// landmarks re-triangulate from the corrected keyframes.
    pub fn apply_pose_update(&mut self, updates: &[(FrameId, Pose)]) -> Result<(), AgentError> {
        if updates.is_empty() {
            return Ok(());
        }
        let kf_index: BTreeMap<FrameId, usize> = self
            .keyframes
            .iter()
            .enumerate()
            .map(|(i, k)| (k.frame_id, i))
            .collect();
        for (frame, _) in updates {
            if !kf_index.contains_key(frame) {
                return Err(AgentError::UnknownFrame(*frame));
            }
        }

        let old_poses: BTreeMap<FrameId, Pose> = self
            .keyframes
            .iter()
            .map(|k| (k.frame_id, k.pose))
            .collect();
        for (frame, pose) in updates {
            self.keyframes[kf_index[frame]].pose = *pose;
        }
        let new_poses: BTreeMap<FrameId, Pose> = self
            .keyframes
            .iter()
            .map(|k| (k.frame_id, k.pose))
            .collect();

        // Keyframe timestamps for the preceding-keyframe search.
        let kf_times: Vec<(f64, FrameId)> = self
            .keyframes
            .iter()
            .map(|k| (k.features.timestamp, k.frame_id))
            .collect();
        for (t, frame_id, pose) in self.trajectory.iter_mut() {
            if let Some(new_pose) = new_poses.get(frame_id) {
                *pose = *new_pose;
                continue;
            }
            // Nearest keyframe at or before this frame (first keyframe as a
            // fallback for pre-init frames).
            let anchor = kf_times
                .iter()
                .rev()
                .find(|(kt, _)| *kt <= *t + 1e-9)
                .or_else(|| kf_times.first().map(|v| {
                    let _ = v;
                    &kf_times[0]
                }))
                .map(|(_, id)| *id);
            if let Some(anchor) = anchor {
                let relative = pose.compose(&old_poses[&anchor].inverse());
                *pose = relative.compose(&new_poses[&anchor]);
            }
        }
        // Keep the motion prediction consistent with the rewritten tail.
        let n = self.trajectory.len();
        self.recent = self
            .trajectory
            .iter()
            .skip(n.saturating_sub(2))
            .map(|(t, _, p)| (*t, *p))
            .collect();

        // Re-triangulate local landmarks from the corrected keyframes.
        let ids: Vec<LandmarkId> = self.landmarks.keys().copied().collect();
        for id in ids {
            let lm = &self.landmarks[&id];
            let obs: Vec<_> = lm
                .observations
                .iter()
                .filter_map(|(kf_id, feature)| {
                    kf_index.get(kf_id).map(|&i| {
                        let kf = &self.keyframes[i];
                        (kf.pose, self.intrinsics, kf.features.keypoints[*feature])
                    })
                })
                .collect();
            if obs.len() >= 2 {
                if let Ok(point) = triangulate(&obs, self.ransac.min_triangulation_angle) {
                    self.landmarks.get_mut(&id).unwrap().position = point;
                }
            }
        }
        Ok(())
    }
}
