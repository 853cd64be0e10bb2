use super::map::SparseMap;
use super::offline::MatchGraph;
use super::MapperConfig;
use crate::ids::{FrameId, LandmarkId};
use crate::optim::{
    bundle_adjust as solve, BaCamera, BaObservation, BaProblem, BaReport, CameraFreedom, LmConfig,
};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Uniform,
    /// Per-frame weights from mean image similarity to covisible frames.
    Similarity,
}

/// Bundle-adjustment options at the mapping level.
#[derive(Debug, Clone, Copy)]
pub struct BaOptions {
    pub max_iterations: usize,
    /// Huber kink in pixels.
    pub huber_delta: f64,
    pub weight_mode: WeightMode,
    /// Relative cost decrease below which the solve counts as converged.
    pub convergence_tol: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            huber_delta: 2.0,
            weight_mode: WeightMode::Uniform,
            convergence_tol: 1e-9,
        }
    }
}

impl BaOptions {
    fn lm_config(&self) -> LmConfig<f64> {
        LmConfig {
            max_iterations: self.max_iterations,
            huber_delta: self.huber_delta,
            convergence_tol: self.convergence_tol,
            initial_lambda: 1e-6,
        }
    }
}

/// Per-frame similarity weights: the mean similarity score of a frame
/// against the registered frames it shares landmarks with, normalized to
/// mean one so weighted and uniform costs stay comparable.
pub fn similarity_weights(map: &SparseMap, graph: &MatchGraph) -> BTreeMap<FrameId, f64> {
    // Covisibility from shared landmarks.
    let mut covisible: BTreeMap<FrameId, BTreeSet<FrameId>> = BTreeMap::new();
    for lm in map.landmarks.values() {
        for &(fa, _) in &lm.observations {
            for &(fb, _) in &lm.observations {
                if fa != fb {
                    covisible.entry(fa).or_default().insert(fb);
                }
            }
        }
    }
    let mut weights: BTreeMap<FrameId, f64> = BTreeMap::new();
    for (id, frame) in map.registered_frames() {
        let mut scores = Vec::new();
        if let Some(partners) = covisible.get(&id) {
            for partner in partners {
                let count = graph.count(id, *partner);
                if count == 0 {
                    continue;
                }
                let denom = frame
                    .keypoints
                    .len()
                    .min(map.frames[partner].keypoints.len());
                if denom > 0 {
                    scores.push(count as f64 / denom as f64);
                }
            }
        }
        let w = if scores.is_empty() {
            1.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        weights.insert(id, w.max(1e-3));
    }
    let mean: f64 = weights.values().sum::<f64>() / weights.len().max(1) as f64;
    if mean > 0.0 {
        for w in weights.values_mut() {
            *w /= mean;
        }
    }
    weights
}

fn build_problem(
    map: &SparseMap,
    cameras: &[FrameId],
    freedoms: &BTreeMap<FrameId, CameraFreedom>,
    landmark_filter: Option<&BTreeSet<LandmarkId>>,
    weights: Option<&BTreeMap<FrameId, f64>>,
) -> (BaProblem<f64>, Vec<LandmarkId>) {
    let cam_index: BTreeMap<FrameId, usize> =
        cameras.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let ba_cameras: Vec<BaCamera<f64>> = cameras
        .iter()
        .map(|id| {
            let f = &map.frames[id];
            BaCamera {
                pose: f.pose.unwrap(),
                intrinsics: f.intrinsics,
                freedom: freedoms[id],
            }
        })
        .collect();

    let mut landmark_ids = Vec::new();
    let mut positions = Vec::new();
    let mut observations = Vec::new();
    for (id, lm) in &map.landmarks {
        if let Some(filter) = landmark_filter {
            if !filter.contains(id) {
                continue;
            }
        }
        let obs: Vec<&(FrameId, usize)> = lm
            .observations
            .iter()
            .filter(|(f, _)| cam_index.contains_key(f))
            .collect();
        if obs.len() < 2 {
            continue;
        }
        let l_idx = landmark_ids.len();
        landmark_ids.push(*id);
        positions.push(lm.position);
        for (frame, feature) in obs {
            observations.push(BaObservation {
                camera: cam_index[frame],
                landmark: l_idx,
                pixel: map.frames[frame].keypoints[*feature],
                weight: weights.and_then(|w| w.get(frame).copied()).unwrap_or(1.0),
            });
        }
    }
    (
        BaProblem {
            cameras: ba_cameras,
            landmarks: positions,
            observations,
        },
        landmark_ids,
    )
}

fn gauge_freedom(map: &SparseMap, id: FrameId) -> CameraFreedom {
    match map.gauge {
        Some((g1, _)) if g1 == id => CameraFreedom::Fixed,
        Some((_, g2)) if g2 == id => CameraFreedom::FixedBaselineScale,
        _ => CameraFreedom::Variable,
    }
}

/// Global bundle adjustment over every registered frame and landmark. The
/// gauge frames keep the origin and the baseline scale fixed.
pub fn bundle_adjust(
    map: &mut SparseMap,
    opts: &BaOptions,
    weights: Option<&BTreeMap<FrameId, f64>>,
) -> BaReport<f64> {
    let cameras: Vec<FrameId> = map.registered_frames().map(|(id, _)| id).collect();
    let freedoms: BTreeMap<FrameId, CameraFreedom> = cameras
        .iter()
        .map(|id| (*id, gauge_freedom(map, *id)))
        .collect();
    let applied_weights = match opts.weight_mode {
        WeightMode::Uniform => None,
        WeightMode::Similarity => weights,
    };
    let (mut problem, landmark_ids) =
        build_problem(map, &cameras, &freedoms, None, applied_weights);
    let report = solve(&mut problem, &opts.lm_config());
    write_back(map, &cameras, &landmark_ids, &problem);
    report
}

/// Local adjustment around `center`: the center plus its most covisible
/// registered frames move, every other frame observing the touched
/// landmarks stays fixed but keeps contributing residuals.
pub fn bundle_adjust_local(
    map: &mut SparseMap,
    center: FrameId,
    cfg: &MapperConfig,
    weights: Option<&BTreeMap<FrameId, f64>>,
) -> Option<BaReport<f64>> {
    if !map.frames.get(&center)?.registered() {
        return None;
    }

    // Covisibility counts of the center frame.
    let mut counts: BTreeMap<FrameId, usize> = BTreeMap::new();
    let center_frame = &map.frames[&center];
    for lm_id in center_frame.feature_landmark.iter().flatten() {
        for &(other, _) in &map.landmarks[lm_id].observations {
            if other != center {
                *counts.entry(other).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, FrameId)> = counts.into_iter().map(|(f, c)| (c, f)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut variable: BTreeSet<FrameId> = ranked
        .iter()
        .take(cfg.local_window)
        .map(|(_, f)| *f)
        .collect();
    variable.insert(center);

    // Landmarks touched by the variable frames.
    let mut touched: BTreeSet<LandmarkId> = BTreeSet::new();
    for f in &variable {
        for lm in map.frames[f].feature_landmark.iter().flatten() {
            touched.insert(*lm);
        }
    }
    // Support frames observing the touched landmarks.
    let mut cameras: BTreeSet<FrameId> = variable.clone();
    for lm in &touched {
        for &(f, _) in &map.landmarks[lm].observations {
            cameras.insert(f);
        }
    }
    let cameras: Vec<FrameId> = cameras.into_iter().collect();
    let freedoms: BTreeMap<FrameId, CameraFreedom> = cameras
        .iter()
        .map(|id| {
            let freedom = if variable.contains(id) {
                gauge_freedom(map, *id)
            } else {
                CameraFreedom::Fixed
            };
            (*id, freedom)
        })
        .collect();
    let (mut problem, landmark_ids) =
        build_problem(map, &cameras, &freedoms, Some(&touched), weights);
    let report = solve(&mut problem, &cfg.ba.lm_config());
    write_back(map, &cameras, &landmark_ids, &problem);
    Some(report)
}

fn write_back(
    map: &mut SparseMap,
    cameras: &[FrameId],
    landmark_ids: &[LandmarkId],
    problem: &BaProblem<f64>,
) {
    for (i, id) in cameras.iter().enumerate() {
        map.frames.get_mut(id).unwrap().pose = Some(problem.cameras[i].pose);
    }
    for (i, id) in landmark_ids.iter().enumerate() {
        map.landmarks.get_mut(id).unwrap().position = problem.landmarks[i];
    }
}
