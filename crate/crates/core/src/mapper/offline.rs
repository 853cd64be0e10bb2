use super::adjust::{bundle_adjust, bundle_adjust_local, similarity_weights, WeightMode};
use super::map::SparseMap;
use super::register::{filter_outliers, initialize_map, register_frame, select_initial_pair};
use super::MapperConfig;
use crate::features::{match_frames, pair_rng, FeatureModel, FrameFeatures, MatchSet};
use crate::ids::FrameId;
use crate::scenario::{mix_seed, World};
use crate::CameraIntrinsics;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Pairwise match sets keyed by unordered frame pair.
#[derive(Debug, Clone, Default)]
pub struct MatchGraph {
    sets: BTreeMap<(FrameId, FrameId), MatchSet>,
    adjacency: BTreeMap<FrameId, BTreeSet<FrameId>>,
}

impl MatchGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, set: MatchSet) {
        if set.is_empty() {
            return;
        }
        let (a, b) = (set.frame_a, set.frame_b);
        let key = (a.min(b), a.max(b));
        let canonical = if a <= b {
            set
        } else {
            let mut flipped = MatchSet::empty(b, a);
            flipped.pairs = set.pairs.iter().map(|&(i, j)| (j, i)).collect();
            flipped
        };
        self.adjacency.entry(a).or_default().insert(b);
        self.adjacency.entry(b).or_default().insert(a);
        self.sets.insert(key, canonical);
    }

    pub fn count(&self, a: FrameId, b: FrameId) -> usize {
        self.sets
            .get(&(a.min(b), a.max(b)))
            .map(|s| s.len())
            .unwrap_or(0)
    }

    /// Match pairs oriented `(index in a, index in b)`.
    pub fn pairs(&self, a: FrameId, b: FrameId) -> Option<Vec<(usize, usize)>> {
        let set = self.sets.get(&(a.min(b), a.max(b)))?;
        if a <= b {
            Some(set.pairs.clone())
        } else {
            Some(set.pairs.iter().map(|&(i, j)| (j, i)).collect())
        }
    }

    pub fn neighbors(&self, frame: FrameId) -> Vec<FrameId> {
        self.adjacency
            .get(&frame)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// All stored edges as `(low frame, high frame, set)`.
    pub fn edges(&self) -> impl Iterator<Item = (FrameId, FrameId, &MatchSet)> {
        self.sets.iter().map(|(&(a, b), set)| (a, b, set))
    }

    /// Connected components over frames with at least `min_edge` matches,
    /// restricted to the given frame set. Used as the component oracle.
    pub fn components(&self, frames: &[FrameId], min_edge: usize) -> Vec<Vec<FrameId>> {
        let index: BTreeMap<FrameId, usize> =
            frames.iter().enumerate().map(|(i, f)| (*f, i)).collect();
        let mut parent: Vec<usize> = (0..frames.len()).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            if parent[i] != i {
                let root = find(parent, parent[i]);
                parent[i] = root;
            }
            parent[i]
        }
        for (a, b, set) in self.edges() {
            if set.len() < min_edge {
                continue;
            }
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                continue;
            };
            let (ra, rb) = (find(&mut parent, ia), find(&mut parent, ib));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        let mut groups: BTreeMap<usize, Vec<FrameId>> = BTreeMap::new();
        for (i, f) in frames.iter().enumerate() {
            groups.entry(find(&mut parent, i)).or_default().push(*f);
        }
        groups.into_values().collect()
    }
}

/// Exhaustive pairwise matching over a frame collection.
pub fn exhaustive_match(
    frames: &[FrameFeatures],
    model: &FeatureModel,
    world: &World,
    base_seed: u64,
) -> MatchGraph {
    let mut graph = MatchGraph::new();
    for i in 0..frames.len() {
        for j in (i + 1)..frames.len() {
            let mut rng = pair_rng(base_seed, frames[i].frame_id, frames[j].frame_id);
            graph.insert(match_frames(&frames[i], &frames[j], model, world, &mut rng));
        }
    }
    graph
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReconstructionError {
    #[error("no frame pair can initialize a reconstruction")]
    EmptyReconstruction,
}

#[derive(Debug, Clone, Copy)]
#[derive(Default)]
pub struct OfflineOptions {
    pub mapper: MapperConfig,
    /// Base seed for the deterministic estimator random sources.
    pub seed: u64,
}


/// Incremental offline reconstruction: initial pair, best-first registration
/// with local adjustment per frame, periodic global adjustment and outlier
/// filtering. Frames that never register restart into additional maps, which
/// are returned in creation order.
pub fn reconstruct_offline(
    frames: &[FrameFeatures],
    k: &CameraIntrinsics,
    graph: &MatchGraph,
    opts: &OfflineOptions,
) -> Result<Vec<SparseMap>, ReconstructionError> {
    let cfg = &opts.mapper;
    let mut remaining: BTreeSet<FrameId> = frames.iter().map(|f| f.frame_id).collect();
    let by_id: BTreeMap<FrameId, &FrameFeatures> =
        frames.iter().map(|f| (f.frame_id, f)).collect();
    let mut maps: Vec<SparseMap> = Vec::new();

    loop {
        // Seed a new component.
        let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0xA1 ^ maps.len() as u64));
        let mut map = SparseMap::new();
        for id in &remaining {
            map.add_frame(by_id[id], k);
        }
        let Some(init) = select_initial_pair(&map, graph, &remaining, &cfg.ransac, &mut init_rng)
        else {
            if maps.is_empty() {
                return Err(ReconstructionError::EmptyReconstruction);
            }
            break;
        };
        if initialize_map(&mut map, &init, cfg).is_err() {
            // A thin initialization pair poisons the component; drop the
            // weaker frame of the pair and retry on the rest.
            remaining.remove(&init.frame_b);
            if remaining.len() < 2 {
                if maps.is_empty() {
                    return Err(ReconstructionError::EmptyReconstruction);
                }
                break;
            }
            continue;
        }
        remaining.remove(&init.frame_a);
        remaining.remove(&init.frame_b);
        let mut registrations = 2usize;

        // Best-first growth.
        loop {
            let mut candidates: Vec<(usize, FrameId)> = remaining
                .iter()
                .map(|f| (correspondence_count(&map, graph, *f), *f))
                .filter(|(c, _)| *c >= 4)
                .collect();
            candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut progressed = false;
            for (_, frame_id) in candidates {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, 0xB2 ^ frame_id.0));
                if register_frame(&mut map, frame_id, graph, cfg, &mut rng).is_ok() {
                    remaining.remove(&frame_id);
                    registrations += 1;
                    progressed = true;
                    let weights = (cfg.ba.weight_mode == WeightMode::Similarity)
                        .then(|| similarity_weights(&map, graph));
                    bundle_adjust_local(&mut map, frame_id, cfg, weights.as_ref());
                    if registrations.is_multiple_of(cfg.global_every) {
                        bundle_adjust(&mut map, &cfg.ba, weights.as_ref());
                        filter_outliers(&mut map, cfg.filter_tau_px);
                    }
                    break;
                }
            }
            if !progressed {
                break;
            }
        }

        // Final polish for the component.
        let weights = (cfg.ba.weight_mode == WeightMode::Similarity)
            .then(|| similarity_weights(&map, graph));
        bundle_adjust(&mut map, &cfg.ba, weights.as_ref());
        filter_outliers(&mut map, cfg.filter_tau_px);
        bundle_adjust(&mut map, &cfg.ba, weights.as_ref());
        map.frames.retain(|_, f| f.registered());
        maps.push(map);
        if remaining.len() < 2 {
            break;
        }
    }
    Ok(maps)
}

/// Number of map landmarks reachable from a frame through its matches, the
/// candidate-ranking heuristic for best-first registration.
fn correspondence_count(map: &SparseMap, graph: &MatchGraph, frame: FrameId) -> usize {
    let mut count = 0usize;
    for neighbor in graph.neighbors(frame) {
        let Some(nf) = map.frames.get(&neighbor) else {
            continue;
        };
        if !nf.registered() {
            continue;
        }
        if let Some(pairs) = graph.pairs(frame, neighbor) {
            count += pairs
                .iter()
                .filter(|(_, j)| nf.feature_landmark[*j].is_some())
                .count();
        }
    }
    count
}
