use super::{AgentMessage, KeyframeSubmission};
use crate::features::{match_frames, pair_rng, FeatureModel, FrameFeatures};
use crate::geometry::{estimate_relative_pose, solve_pnp, umeyama_align};
use crate::ids::{AgentId, FrameId, LandmarkId, SubmapId};
use crate::mapper::{
    bundle_adjust, bundle_adjust_local, filter_outliers, initialize_map, register_at_pose,
    register_frame, select_initial_pair, similarity_weights, MapperConfig, MatchGraph, SparseMap,
    WeightMode,
};
use crate::scenario::{mix_seed, World};
use crate::{CameraIntrinsics, Pixel, Point, Pose};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerMode {
    /// Asynchronous frame ingestion with sub-map growth and merging.
    Otf,
    /// Keyframe ingestion from tracking agents with place recognition.
    Slam,
}

#[derive(Debug, Clone)]
pub struct CollabConfig {
    /// Bridge frames required before two sub-maps merge.
    pub n_merge: usize,
    /// Retrieval depth: registered frames considered when placing a new one.
    /// `usize::MAX` means exhaustive retrieval.
    pub retrieval_k: usize,
    /// Place-recognition similarity threshold.
    pub s_pr: f64,
    /// Matches to a sub-map required before a bridge resection is attempted.
    pub min_bridge_matches: usize,
    pub mapper: MapperConfig,
    pub match_seed: u64,
}

impl Default for CollabConfig {
    fn default() -> Self {
        Self {
            n_merge: 3,
            retrieval_k: 10,
            s_pr: 0.15,
            min_bridge_matches: 12,
            mapper: MapperConfig::default(),
            match_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeEvent {
    pub absorbed: SubmapId,
    pub into: SubmapId,
    pub bridges: usize,
}

#[derive(Debug)]
pub struct SubMap {
    pub id: SubmapId,
    pub map: SparseMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServerError {
    #[error("message kind does not match the server mode")]
    ModeMismatch,
    #[error("malformed message: {0}")]
    MalformedMessage(&'static str),
}

/// Centralized mapping back-end. Owns the received features, the pairwise
/// match graph, and the sub-map registry; never reads the hidden provenance
/// channel itself (matching is delegated to the feature matcher, which
/// plays the role of the descriptor pipeline).
pub struct Server<'w> {
    mode: ServerMode,
    cfg: CollabConfig,
    world: &'w World,
    model: FeatureModel,
    intrinsics: CameraIntrinsics,
    features: BTreeMap<FrameId, FrameFeatures>,
    graph: MatchGraph,
    submaps: BTreeMap<SubmapId, SparseMap>,
    next_submap: u64,
    registered_in: BTreeMap<FrameId, SubmapId>,
    buffer: BTreeSet<FrameId>,
    merge_log: Vec<MergeEvent>,
    regs_since_gba: BTreeMap<SubmapId, usize>,
    agent_submap: BTreeMap<AgentId, SubmapId>,
    keyframe_landmark_hints: BTreeMap<FrameId, Vec<Option<Point>>>,
    agents_seen: BTreeSet<AgentId>,
    agents_ended: BTreeSet<AgentId>,
    last_timestamp: BTreeMap<AgentId, f64>,
    /// Accumulated cross-sub-map bridges (slam): frame with a pose in both.
    slam_bridges: BTreeMap<(SubmapId, SubmapId), BTreeMap<FrameId, (Pose, Pose)>>,
    last_merge_survivor: Option<SubmapId>,
}

impl<'w> Server<'w> {
    pub fn new(
        mode: ServerMode,
        world: &'w World,
        intrinsics: CameraIntrinsics,
        model: FeatureModel,
        cfg: CollabConfig,
    ) -> Self {
        Self {
            mode,
            cfg,
            world,
            model,
            intrinsics,
            features: BTreeMap::new(),
            graph: MatchGraph::new(),
            submaps: BTreeMap::new(),
            next_submap: 0,
            registered_in: BTreeMap::new(),
            buffer: BTreeSet::new(),
            merge_log: Vec::new(),
            regs_since_gba: BTreeMap::new(),
            agent_submap: BTreeMap::new(),
            keyframe_landmark_hints: BTreeMap::new(),
            agents_seen: BTreeSet::new(),
            agents_ended: BTreeSet::new(),
            last_timestamp: BTreeMap::new(),
            slam_bridges: BTreeMap::new(),
            last_merge_survivor: None,
        }
    }

    pub fn mode(&self) -> ServerMode {
        self.mode
    }

    pub fn merge_log(&self) -> &[MergeEvent] {
        &self.merge_log
    }

    /// Sub-maps in creation order.
    pub fn submaps(&self) -> Vec<SubMap> {
        self.submaps
            .iter()
            .map(|(id, map)| SubMap {
                id: *id,
                map: map.clone(),
            })
            .collect()
    }

    pub fn submap_count(&self) -> usize {
        self.submaps.len()
    }

    pub fn registered_frames(&self) -> BTreeSet<FrameId> {
        self.registered_in.keys().copied().collect()
    }

    pub fn component_of(&self, frame: FrameId) -> Option<SubmapId> {
        self.registered_in.get(&frame).copied()
    }

    pub fn agent_component(&self, agent: AgentId) -> Option<SubmapId> {
        self.agent_submap.get(&agent).copied()
    }

    /// Structural hash of the registry for determinism checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for (sid, map) in &self.submaps {
            mix(sid.0);
            for (fid, frame) in map.registered_frames() {
                mix(fid.0);
                let pose = frame.pose.unwrap();
                let q = pose.rotation.quaternion();
                for v in [q.w, q.i, q.j, q.k] {
                    mix(v.to_bits());
                }
                for v in pose.translation.iter() {
                    mix(v.to_bits());
                }
            }
            mix(map.landmarks.len() as u64);
        }
        for fid in &self.buffer {
            mix(fid.0 ^ 0xdead);
        }
        h
    }

    /// Sub-maps must partition the registered frames.
    pub fn audit_partition(&self) -> Result<(), String> {
        let mut seen: BTreeMap<FrameId, SubmapId> = BTreeMap::new();
        for (sid, map) in &self.submaps {
            for (fid, _) in map.registered_frames() {
                if let Some(prev) = seen.insert(fid, *sid) {
                    return Err(format!("frame {fid} in sub-maps {prev} and {sid}"));
                }
                if self.registered_in.get(&fid) != Some(sid) {
                    return Err(format!("frame {fid} registry mismatch"));
                }
                if self.buffer.contains(&fid) {
                    return Err(format!("frame {fid} both registered and buffered"));
                }
            }
        }
        if seen.len() != self.registered_in.len() {
            return Err("registry size mismatch".into());
        }
        Ok(())
    }

    fn rng_for(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.match_seed, salt))
    }

    /// Store features and match them against everything already known.
    fn add_features(&mut self, frame: FrameFeatures) {
        let fid = frame.frame_id;
        if self.features.contains_key(&fid) {
            return;
        }
        for other in self.features.values() {
            let mut rng = pair_rng(self.cfg.match_seed, other.frame_id, fid);
            self.graph
                .insert(match_frames(other, &frame, &self.model, self.world, &mut rng));
        }
        self.features.insert(fid, frame);
    }

    /// Ingest one message; returns the pose updates produced by global
    /// adjustments or merges (slam mode).
    pub fn ingest(&mut self, msg: AgentMessage) -> Result<Vec<(FrameId, Pose)>, ServerError> {
        if let Some(agent) = msg.agent() {
            self.agents_seen.insert(agent);
            let t = msg.timestamp();
            if t.is_finite() {
                if let Some(last) = self.last_timestamp.get(&agent) {
                    if t < *last {
                        return Err(ServerError::MalformedMessage(
                            "timestamps must be non-decreasing per agent",
                        ));
                    }
                }
                self.last_timestamp.insert(agent, t);
            }
        }
        match (self.mode, msg) {
            (ServerMode::Otf, AgentMessage::FrameSubmission { frame, .. }) => {
                self.ingest_frame_otf(frame);
                debug_assert!(self.audit_partition().is_ok());
                Ok(Vec::new())
            }
            (ServerMode::Slam, AgentMessage::KeyframeSubmission(sub)) => {
                let updates = self.ingest_keyframe(sub);
                debug_assert!(self.audit_partition().is_ok());
                Ok(updates)
            }
            (_, AgentMessage::EndOfStream { agent }) => {
                self.agents_ended.insert(agent);
                if self.agents_ended.len() == self.agents_seen.len() {
                    Ok(self.finalize())
                } else {
                    Ok(Vec::new())
                }
            }
            (_, AgentMessage::PoseUpdate { .. }) => Err(ServerError::MalformedMessage(
                "pose updates flow from the server, not into it",
            )),
            _ => Err(ServerError::ModeMismatch),
        }
    }

    /// Force final settling: drain the buffer, merge, and polish every
    /// sub-map with a global adjustment.
    pub fn finalize(&mut self) -> Vec<(FrameId, Pose)> {
        let mut updates = Vec::new();
        if self.mode == ServerMode::Otf {
            self.settle();
        } else {
            while self.try_slam_merges(&mut updates) {}
        }
        let sids: Vec<SubmapId> = self.submaps.keys().copied().collect();
        for sid in sids {
            updates.extend(self.global_adjust(sid));
        }
        updates
    }

    // ---- otf mode ----

    fn ingest_frame_otf(&mut self, frame: FrameFeatures) {
        let fid = frame.frame_id;
        self.add_features(frame);
        match self.try_place(fid) {
            Some(sid) => {
                self.finish_registration(sid, fid);
            }
            None => {
                self.buffer.insert(fid);
            }
        }
        self.settle();
    }

    /// Similarity-ranked registration attempt across sub-maps.
    fn try_place(&mut self, fid: FrameId) -> Option<SubmapId> {
        // Rank registered frames by similarity, keep the top k, group by
        // sub-map in best-first order.
        let query = &self.features[&fid];
        let mut scored: Vec<(f64, FrameId, SubmapId)> = self
            .registered_in
            .iter()
            .filter_map(|(rf, sid)| {
                let count = self.graph.count(fid, *rf);
                if count == 0 {
                    return None;
                }
                let denom = query.len().min(self.features[rf].len());
                if denom == 0 {
                    return None;
                }
                Some((count as f64 / denom as f64, *rf, *sid))
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(self.cfg.retrieval_k);

        let mut submap_order: Vec<SubmapId> = Vec::new();
        for (_, _, sid) in &scored {
            if !submap_order.contains(sid) {
                submap_order.push(*sid);
            }
        }
        for sid in submap_order {
            let map = self.submaps.get_mut(&sid).unwrap();
            map.add_frame(&self.features[&fid], &self.intrinsics);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.match_seed, 0xC3 ^ fid.0));
            match register_frame(map, fid, &self.graph, &self.cfg.mapper, &mut rng) {
                Ok(_) => return Some(sid),
                Err(_) => {
                    map.frames.remove(&fid);
                }
            }
        }
        None
    }

    fn finish_registration(&mut self, sid: SubmapId, fid: FrameId) {
        self.buffer.remove(&fid);
        self.registered_in.insert(fid, sid);
        let weights = (self.cfg.mapper.ba.weight_mode == WeightMode::Similarity)
            .then(|| similarity_weights(&self.submaps[&sid], &self.graph));
        bundle_adjust_local(
            self.submaps.get_mut(&sid).unwrap(),
            fid,
            &self.cfg.mapper,
            weights.as_ref(),
        );
        let count = self.regs_since_gba.entry(sid).or_insert(0);
        *count += 1;
        if *count >= self.cfg.mapper.global_every {
            *count = 0;
            self.global_adjust(sid);
        }
    }

    /// Drain the buffer and run merges until nothing changes.
    fn settle(&mut self) {
        loop {
            let mut progress = false;
            for fid in self.buffer.clone() {
                if let Some(sid) = self.try_place(fid) {
                    self.finish_registration(sid, fid);
                    progress = true;
                }
            }
            if self.try_init_from_buffer() {
                progress = true;
            }
            if self.check_merge() {
                progress = true;
            }
            if !progress {
                break;
            }
        }
    }

    /// Attempt a new sub-map from the buffered frames.
    fn try_init_from_buffer(&mut self) -> bool {
        if self.buffer.len() < 2 {
            return false;
        }
        let mut staging = SparseMap::new();
        for fid in &self.buffer {
            staging.add_frame(&self.features[fid], &self.intrinsics);
        }
        let mut rng = self.rng_for(0xD4 ^ self.next_submap);
        let Some(init) = select_initial_pair(
            &staging,
            &self.graph,
            &self.buffer,
            &self.cfg.mapper.ransac,
            &mut rng,
        ) else {
            return false;
        };
        let mut map = SparseMap::new();
        map.add_frame(&self.features[&init.frame_a], &self.intrinsics);
        map.add_frame(&self.features[&init.frame_b], &self.intrinsics);
        if initialize_map(&mut map, &init, &self.cfg.mapper).is_err() {
            return false;
        }
        let sid = SubmapId(self.next_submap);
        self.next_submap += 1;
        self.submaps.insert(sid, map);
        for fid in [init.frame_a, init.frame_b] {
            self.buffer.remove(&fid);
            self.registered_in.insert(fid, sid);
        }
        self.regs_since_gba.insert(sid, 2);
        true
    }

    /// Global adjustment plus outlier filtering on one sub-map; returns the
    /// pose updates for frames that moved.
    fn global_adjust(&mut self, sid: SubmapId) -> Vec<(FrameId, Pose)> {
        let map = self.submaps.get_mut(&sid).unwrap();
        let before: BTreeMap<FrameId, Pose> = map
            .registered_frames()
            .map(|(f, fr)| (f, fr.pose.unwrap()))
            .collect();
        let weights = (self.cfg.mapper.ba.weight_mode == WeightMode::Similarity)
            .then(|| similarity_weights(map, &self.graph));
        bundle_adjust(map, &self.cfg.mapper.ba, weights.as_ref());
        filter_outliers(map, self.cfg.mapper.filter_tau_px);
        map.registered_frames()
            .filter_map(|(f, fr)| {
                let pose = fr.pose.unwrap();
                let old = before.get(&f)?;
                let moved = (pose.translation - old.translation).norm()
                    + pose.rotation_angle_to(old);
                (moved > 1e-6).then_some((f, pose))
            })
            .collect()
    }

    /// One merge pass over sub-map pairs; true when a merge happened.
    fn check_merge(&mut self) -> bool {
        let sids: Vec<SubmapId> = self.submaps.keys().copied().collect();
        for i in 0..sids.len() {
            for j in (i + 1)..sids.len() {
                let (a, b) = (sids[i], sids[j]);
                let bridges = self.find_bridges(a, b);
                if bridges.len() >= self.cfg.n_merge && self.merge_submaps(a, b, &bridges) {
                    return true;
                }
            }
        }
        false
    }

    /// Frames registrable in both sub-maps: registered members of either
    /// side re-resected into the other, plus buffered frames resectable in
    /// both. Dry runs only; no map is modified.
    fn find_bridges(&self, a: SubmapId, b: SubmapId) -> Vec<(FrameId, Pose, Pose)> {
        let mut bridges = Vec::new();
        let map_a = &self.submaps[&a];
        let map_b = &self.submaps[&b];
        for (fid, frame) in map_a.registered_frames() {
            if let Some(pose_b) = self.dry_run_resection(fid, map_b) {
                bridges.push((fid, frame.pose.unwrap(), pose_b));
            }
        }
        for (fid, frame) in map_b.registered_frames() {
            if let Some(pose_a) = self.dry_run_resection(fid, map_a) {
                bridges.push((fid, pose_a, frame.pose.unwrap()));
            }
        }
        for fid in &self.buffer {
            if let (Some(pose_a), Some(pose_b)) = (
                self.dry_run_resection(*fid, map_a),
                self.dry_run_resection(*fid, map_b),
            ) {
                bridges.push((*fid, pose_a, pose_b));
            }
        }
        bridges
    }

    /// Resection of a frame against a sub-map without mutating it.
    fn dry_run_resection(&self, fid: FrameId, target: &SparseMap) -> Option<Pose> {
        let query = &self.features[&fid];
        let mut used_landmarks: BTreeSet<LandmarkId> = BTreeSet::new();
        let mut used_features: BTreeSet<usize> = BTreeSet::new();
        let mut corr: Vec<(Point, Pixel)> = Vec::new();
        for neighbor in self.graph.neighbors(fid) {
            let Some(nf) = target.frames.get(&neighbor) else {
                continue;
            };
            if !nf.registered() {
                continue;
            }
            let Some(pairs) = self.graph.pairs(fid, neighbor) else {
                continue;
            };
            for (i_new, i_nb) in pairs {
                let Some(lm) = nf.feature_landmark[i_nb] else {
                    continue;
                };
                if used_landmarks.contains(&lm) || used_features.contains(&i_new) {
                    continue;
                }
                used_landmarks.insert(lm);
                used_features.insert(i_new);
                corr.push((target.landmarks[&lm].position, query.keypoints[i_new]));
            }
        }
        if corr.len() < self.cfg.min_bridge_matches {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.match_seed, 0xE5 ^ fid.0));
        solve_pnp(&corr, &self.intrinsics, &self.cfg.mapper.ransac, &mut rng)
            .ok()
            .map(|s| s.pose)
    }

    /// Merge the smaller sub-map into the larger one through a similarity
    /// estimated from the bridge camera centers.
    fn merge_submaps(
        &mut self,
        a: SubmapId,
        b: SubmapId,
        bridges: &[(FrameId, Pose, Pose)],
    ) -> bool {
        let frames_a = self.submaps[&a].registered_count();
        let frames_b = self.submaps[&b].registered_count();
        // Larger frame count survives; ties go to the lower id.
        let (survivor, absorbed) = if frames_a >= frames_b { (a, b) } else { (b, a) };

        // Bridge centers expressed in (absorbed, survivor) coordinates.
        let mut src = Vec::with_capacity(bridges.len());
        let mut dst = Vec::with_capacity(bridges.len());
        for (_, pose_a, pose_b) in bridges {
            let (pose_abs, pose_sur) = if survivor == a {
                (pose_b, pose_a)
            } else {
                (pose_a, pose_b)
            };
            src.push(pose_abs.center());
            dst.push(pose_sur.center());
        }
        let Ok(sim) = umeyama_align(&src, &dst, true) else {
            return false;
        };

        let mut absorbed_map = self.submaps.remove(&absorbed).unwrap();
        absorbed_map.apply_similarity(&sim);

        // Move frames, clearing links; landmarks get fresh ids on the
        // survivor side.
        let survivor_map = self.submaps.get_mut(&survivor).unwrap();
        let mut moved_frames = Vec::new();
        for (fid, mut frame) in std::mem::take(&mut absorbed_map.frames) {
            frame.feature_landmark = vec![None; frame.keypoints.len()];
            moved_frames.push(fid);
            survivor_map.frames.insert(fid, frame);
        }
        let mut id_map: BTreeMap<LandmarkId, LandmarkId> = BTreeMap::new();
        for (old_id, lm) in &absorbed_map.landmarks {
            let new_id = survivor_map.allocate_landmark(lm.position);
            id_map.insert(*old_id, new_id);
            for &(frame, feature) in &lm.observations {
                survivor_map.add_observation(frame, feature, new_id);
            }
        }
        for fid in &moved_frames {
            self.registered_in.insert(*fid, survivor);
        }
        for sid in self.agent_submap.values_mut() {
            if *sid == absorbed {
                *sid = survivor;
            }
        }

        // Fuse duplicate landmarks through cross matches.
        self.fuse_duplicates(survivor, &moved_frames);

        self.merge_log.push(MergeEvent {
            absorbed,
            into: survivor,
            bridges: bridges.len(),
        });
        self.regs_since_gba.insert(survivor, 0);
        self.global_adjust(survivor);
        self.last_merge_survivor = Some(survivor);
        true
    }

    /// Fuse landmark pairs seen by matched features of merged-in frames when
    /// they mutually reproject within the filter threshold.
    fn fuse_duplicates(&mut self, sid: SubmapId, moved_frames: &[FrameId]) {
        let moved: BTreeSet<FrameId> = moved_frames.iter().copied().collect();
        let map = self.submaps.get_mut(&sid).unwrap();
        let tau = self.cfg.mapper.filter_tau_px;
        for fid in moved_frames {
            for neighbor in self.graph.neighbors(*fid) {
                if moved.contains(&neighbor) {
                    continue;
                }
                if !map.frames.get(&neighbor).is_some_and(|f| f.registered()) {
                    continue;
                }
                let Some(pairs) = self.graph.pairs(*fid, neighbor) else {
                    continue;
                };
                for (i_f, i_nb) in pairs {
                    let (Some(la), Some(lb)) = (
                        map.frames[fid].feature_landmark[i_f],
                        map.frames[&neighbor].feature_landmark[i_nb],
                    ) else {
                        continue;
                    };
                    if la == lb {
                        continue;
                    }
                    // Mutual reprojection test over both observation sets.
                    let lm_a = map.landmarks[&la].clone();
                    let lm_b = map.landmarks[&lb].clone();
                    let mut ok = true;
                    for &(f, feat) in &lm_a.observations {
                        if map.reprojection_error(&lm_b, f, feat).unwrap_or(f64::MAX) > tau {
                            ok = false;
                            break;
                        }
                    }
                    if ok {
                        for &(f, feat) in &lm_b.observations {
                            if map.reprojection_error(&lm_a, f, feat).unwrap_or(f64::MAX) > tau {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    // Rehome a's observations into b.
                    let target_frames: BTreeSet<FrameId> =
                        lm_b.observations.iter().map(|&(f, _)| f).collect();
                    map.remove_landmark(la);
                    for (f, feat) in lm_a.observations {
                        if !target_frames.contains(&f) {
                            map.add_observation(f, feat, lb);
                        }
                    }
                }
            }
        }
    }

    // ---- slam mode ----

    fn ingest_keyframe(&mut self, sub: KeyframeSubmission) -> Vec<(FrameId, Pose)> {
        let fid = sub.frame.frame_id;
        let agent = sub.agent;
        self.keyframe_landmark_hints.insert(fid, sub.landmarks.clone());
        self.add_features(sub.frame.clone());

        let sid = match self.agent_submap.get(&agent) {
            Some(sid) => *sid,
            None => {
                let sid = SubmapId(self.next_submap);
                self.next_submap += 1;
                self.submaps.insert(sid, SparseMap::new());
                self.agent_submap.insert(agent, sid);
                sid
            }
        };

        let map = self.submaps.get_mut(&sid).unwrap();
        map.add_frame(&sub.frame, &self.intrinsics);
        let registered_before = map.registered_count();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.match_seed, 0xF6 ^ fid.0));
        let placed = if registered_before >= 2 {
            // Refine by resection where possible, else trust the proposal.
            register_frame(map, fid, &self.graph, &self.cfg.mapper, &mut rng).is_ok()
        } else {
            false
        };
        if !placed {
            register_at_pose(map, fid, sub.pose, &self.graph, &self.cfg.mapper);
        }
        if registered_before == 1 && map.gauge.is_none() {
            let first = map
                .registered_frames()
                .map(|(f, _)| f)
                .find(|f| *f != fid)
                .unwrap();
            map.gauge = Some((first, fid));
        }
        self.adopt_landmark_hints(sid, fid);
        self.registered_in.insert(fid, sid);

        let mut updates = Vec::new();
        let map = self.submaps.get_mut(&sid).unwrap();
        if map.registered_count() >= 3 {
            bundle_adjust_local(map, fid, &self.cfg.mapper, None);
        }
        let count = self.regs_since_gba.entry(sid).or_insert(0);
        *count += 1;
        if *count >= self.cfg.mapper.global_every {
            *count = 0;
            updates.extend(self.global_adjust(sid));
        }

        // Place recognition across the other sub-maps; accumulate bridges
        // and merge once enough are confirmed.
        let candidates = self.detect_place_match(fid);
        if !candidates.is_empty() {
            let my_pose = self.submaps[&sid].frames[&fid].pose.unwrap();
            let mut target_sids: Vec<SubmapId> = candidates
                .iter()
                .filter_map(|c| self.registered_in.get(c).copied())
                .collect();
            target_sids.sort();
            target_sids.dedup();
            for tsid in target_sids {
                if tsid == sid {
                    continue;
                }
                if let Some(pose_there) = self.dry_run_resection(fid, &self.submaps[&tsid]) {
                    let key = (sid.min(tsid), sid.max(tsid));
                    let entry = self.slam_bridges.entry(key).or_default();
                    let (pose_a, pose_b) = if key.0 == sid {
                        (my_pose, pose_there)
                    } else {
                        (pose_there, my_pose)
                    };
                    entry.insert(fid, (pose_a, pose_b));
                }
            }
            while self.try_slam_merges(&mut updates) {}
        }
        updates
    }

    /// Adopt agent-triangulated landmark positions for features that stayed
    /// unlinked (30 Hz pairs often have too little parallax to triangulate
    /// on the server side).
    fn adopt_landmark_hints(&mut self, sid: SubmapId, fid: FrameId) {
        let Some(hints) = self.keyframe_landmark_hints.get(&fid).cloned() else {
            return;
        };
        let tau = self.cfg.mapper.filter_tau_px;
        let map = self.submaps.get_mut(&sid).unwrap();
        for neighbor in self.graph.neighbors(fid) {
            if !map.frames.get(&neighbor).is_some_and(|f| f.registered()) {
                continue;
            }
            let Some(pairs) = self.graph.pairs(fid, neighbor) else {
                continue;
            };
            for (i_f, i_nb) in pairs {
                if map.frames[&fid].feature_landmark[i_f].is_some()
                    || map.frames[&neighbor].feature_landmark[i_nb].is_some()
                {
                    continue;
                }
                let Some(Some(position)) = hints.get(i_f) else {
                    continue;
                };
                let fits = |frame: FrameId, feature: usize| {
                    let f = &map.frames[&frame];
                    crate::geometry::project(position, &f.pose.unwrap(), &f.intrinsics)
                        .map(|p| (p - f.keypoints[feature]).norm() <= tau)
                        .unwrap_or(false)
                };
                if fits(fid, i_f) && fits(neighbor, i_nb) {
                    let lm = map.allocate_landmark(*position);
                    map.add_observation(fid, i_f, lm);
                    map.add_observation(neighbor, i_nb, lm);
                }
            }
        }
    }

    fn try_slam_merges(&mut self, updates: &mut Vec<(FrameId, Pose)>) -> bool {
        type BridgeSet = ((SubmapId, SubmapId), Vec<(FrameId, Pose, Pose)>);
        let ready: Vec<BridgeSet> = self
            .slam_bridges
            .iter()
            .filter(|(_, frames)| frames.len() >= self.cfg.n_merge)
            .map(|(key, frames)| {
                (
                    *key,
                    frames.iter().map(|(f, (pa, pb))| (*f, *pa, *pb)).collect(),
                )
            })
            .collect();
        for ((a, b), bridges) in ready {
            if !self.submaps.contains_key(&a) || !self.submaps.contains_key(&b) {
                self.slam_bridges.remove(&(a, b));
                continue;
            }
            if self.merge_submaps(a, b, &bridges) {
                self.slam_bridges.remove(&(a, b));
                // A merge moves every absorbed pose through the similarity
                // transform, so every keyframe of the survivor goes out.
                let survivor = self.last_merge_survivor.unwrap_or(a);
                updates.extend(
                    self.submaps[&survivor]
                        .registered_frames()
                        .map(|(f, fr)| (f, fr.pose.unwrap())),
                );
                return true;
            }
            self.slam_bridges.remove(&(a, b));
        }
        false
    }

    /// Registered keyframes of other sub-maps that look like the query
    /// (similarity at least `s_pr`) and pass geometric verification.
    pub fn detect_place_match(&self, fid: FrameId) -> Vec<FrameId> {
        let my_sid = self.registered_in.get(&fid);
        let query = &self.features[&fid];
        let mut out = Vec::new();
        for (other, sid) in &self.registered_in {
            if Some(sid) == my_sid || *other == fid {
                continue;
            }
            let count = self.graph.count(fid, *other);
            if count == 0 {
                continue;
            }
            let denom = query.len().min(self.features[other].len());
            if denom == 0 || (count as f64 / denom as f64) < self.cfg.s_pr {
                continue;
            }
            let Some(pairs) = self.graph.pairs(fid, *other) else {
                continue;
            };
            let pixel_pairs: Vec<(Pixel, Pixel)> = pairs
                .iter()
                .map(|&(i, j)| (query.keypoints[i], self.features[other].keypoints[j]))
                .collect();
            let mut rng = pair_rng(self.cfg.match_seed ^ 0x9a, fid, *other);
            if estimate_relative_pose(
                &pixel_pairs,
                &self.intrinsics,
                &self.intrinsics,
                &self.cfg.mapper.ransac,
                &mut rng,
            )
            .is_ok()
            {
                out.push(*other);
            }
        }
        out
    }
}
