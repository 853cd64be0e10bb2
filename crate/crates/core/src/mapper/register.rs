use super::map::SparseMap;
use super::offline::MatchGraph;
use super::MapperConfig;
use crate::geometry::{
    estimate_relative_pose, solve_pnp, triangulate, PnpFailed, RansacParams, RelativePose,
};
use crate::ids::{FrameId, LandmarkId};
use crate::{Pixel, Pose};
use rand::Rng;
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("frame {0} is unknown to the map")]
    UnknownFrame(FrameId),
    #[error("frame {0} is already registered")]
    AlreadyRegistered(FrameId),
    #[error("no 2d-3d correspondences against the map")]
    NoCorrespondences,
    #[error(transparent)]
    Resection(#[from] PnpFailed),
}

/// Two-view seed for a new reconstruction.
#[derive(Debug)]
pub struct InitialPair {
    pub frame_a: FrameId,
    pub frame_b: FrameId,
    pub relative: RelativePose<f64>,
    pub pairs: Vec<(usize, usize)>,
}

/// Pick the eligible frame pair with the highest match count whose relative
/// pose is non-degenerate. `None` when no pair qualifies (for example when
/// every pair is pure rotation).
pub fn select_initial_pair<R: Rng>(
    map: &SparseMap,
    graph: &MatchGraph,
    eligible: &BTreeSet<FrameId>,
    params: &RansacParams,
    rng: &mut R,
) -> Option<InitialPair> {
    let mut candidates: Vec<(usize, FrameId, FrameId)> = graph
        .edges()
        .filter(|(a, b, _)| eligible.contains(a) && eligible.contains(b))
        .map(|(a, b, set)| (set.len(), a, b))
        .collect();
    candidates.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    for (count, a, b) in candidates {
        if count < 8 {
            break;
        }
        let pairs = graph.pairs(a, b)?;
        let fa = &map.frames[&a];
        let fb = &map.frames[&b];
        let pixel_pairs: Vec<(Pixel, Pixel)> = pairs
            .iter()
            .map(|&(i, j)| (fa.keypoints[i], fb.keypoints[j]))
            .collect();
        if let Ok(relative) =
            estimate_relative_pose(&pixel_pairs, &fa.intrinsics, &fb.intrinsics, params, rng)
        {
            return Some(InitialPair {
                frame_a: a,
                frame_b: b,
                relative,
                pairs,
            });
        }
    }
    None
}

#[derive(Debug, Error)]
#[error("two-view initialization produced only {0} landmarks")]
pub struct InitializationTooThin(pub usize);

/// Seed `map` from a selected pair: first frame at the origin, second at the
/// unit-baseline relative pose, inlier matches triangulated. Fixes the gauge
/// to these two frames.
pub fn initialize_map(
    map: &mut SparseMap,
    init: &InitialPair,
    cfg: &MapperConfig,
) -> Result<usize, InitializationTooThin> {
    let pose_a = Pose::identity();
    let pose_b = init.relative.pose;
    let ka = map.frames[&init.frame_a].intrinsics;
    let kb = map.frames[&init.frame_b].intrinsics;

    // Triangulate the candidate landmarks before touching the map.
    let mut accepted: Vec<(usize, usize, crate::Point)> = Vec::new();
    for (idx, &(ia, ib)) in init.pairs.iter().enumerate() {
        if !init.relative.inliers[idx] {
            continue;
        }
        let pxa = map.frames[&init.frame_a].keypoints[ia];
        let pxb = map.frames[&init.frame_b].keypoints[ib];
        let obs = [(pose_a, ka, pxa), (pose_b, kb, pxb)];
        let Ok(point) = triangulate(&obs, cfg.ransac.min_triangulation_angle) else {
            continue;
        };
        let ok = |pose: &Pose, k: &crate::CameraIntrinsics, px: &Pixel| {
            crate::geometry::project(&point, pose, k)
                .map(|p| (p - px).norm() <= cfg.filter_tau_px)
                .unwrap_or(false)
        };
        if ok(&pose_a, &ka, &pxa) && ok(&pose_b, &kb, &pxb) {
            accepted.push((ia, ib, point));
        }
    }
    if accepted.len() < cfg.min_init_landmarks {
        return Err(InitializationTooThin(accepted.len()));
    }

    map.frames.get_mut(&init.frame_a).unwrap().pose = Some(pose_a);
    map.frames.get_mut(&init.frame_b).unwrap().pose = Some(pose_b);
    map.gauge = Some((init.frame_a, init.frame_b));
    for (ia, ib, point) in &accepted {
        let lm = map.allocate_landmark(*point);
        map.add_observation(init.frame_a, *ia, lm);
        map.add_observation(init.frame_b, *ib, lm);
    }
    Ok(accepted.len())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RegistrationStats {
    pub pnp_inliers: usize,
    pub linked_observations: usize,
    pub new_landmarks: usize,
}

/// Register a frame against the map: resection on landmarks reached through
/// matches to registered frames, then expansion by triangulating the
/// leftover matches. The map is untouched on failure.
pub fn register_frame<R: Rng>(
    map: &mut SparseMap,
    frame_id: FrameId,
    graph: &MatchGraph,
    cfg: &MapperConfig,
    rng: &mut R,
) -> Result<RegistrationStats, RegisterError> {
    let frame = map
        .frames
        .get(&frame_id)
        .ok_or(RegisterError::UnknownFrame(frame_id))?;
    if frame.registered() {
        return Err(RegisterError::AlreadyRegistered(frame_id));
    }

    // 2D-3D correspondences, deduplicated per landmark and per keypoint.
    let mut used_landmarks: BTreeSet<LandmarkId> = BTreeSet::new();
    let mut used_features: BTreeSet<usize> = BTreeSet::new();
    let mut correspondences: Vec<(LandmarkId, usize)> = Vec::new();
    for neighbor in graph.neighbors(frame_id) {
        let Some(nf) = map.frames.get(&neighbor) else {
            continue;
        };
        if !nf.registered() {
            continue;
        }
        let Some(pairs) = graph.pairs(frame_id, neighbor) else {
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
            correspondences.push((lm, i_new));
        }
    }
    if correspondences.len() < 4 {
        return Err(RegisterError::NoCorrespondences);
    }

    let points: Vec<(crate::Point, Pixel)> = correspondences
        .iter()
        .map(|&(lm, feat)| (map.landmarks[&lm].position, frame.keypoints[feat]))
        .collect();
    let solution = solve_pnp(&points, &frame.intrinsics, &cfg.ransac, rng)?;

    // Commit: pose, inlier observations, then opportunistic triangulation.
    let pose = solution.pose;
    map.frames.get_mut(&frame_id).unwrap().pose = Some(pose);
    let mut stats = RegistrationStats {
        pnp_inliers: solution.inlier_count(),
        ..Default::default()
    };
    for (idx, &(lm, feat)) in correspondences.iter().enumerate() {
        if solution.inliers[idx] && map.frames[&frame_id].feature_landmark[feat].is_none() {
            map.add_observation(frame_id, feat, lm);
            stats.linked_observations += 1;
        }
    }

    expand_frame(map, frame_id, graph, cfg, &mut stats);
    Ok(stats)
}

/// Register a frame at an externally supplied pose (keyframe insertion):
/// link features to existing landmarks by reprojection agreement through the
/// match graph, then expand new landmarks. Never fails.
pub fn register_at_pose(
    map: &mut SparseMap,
    frame_id: FrameId,
    pose: Pose,
    graph: &MatchGraph,
    cfg: &MapperConfig,
) -> RegistrationStats {
    map.frames.get_mut(&frame_id).unwrap().pose = Some(pose);
    let mut stats = RegistrationStats::default();
    for neighbor in graph.neighbors(frame_id) {
        let Some(nf) = map.frames.get(&neighbor) else {
            continue;
        };
        if !nf.registered() {
            continue;
        }
        let Some(pairs) = graph.pairs(frame_id, neighbor) else {
            continue;
        };
        for (i_new, i_nb) in pairs {
            let Some(lm_id) = map.frames[&neighbor].feature_landmark[i_nb] else {
                continue;
            };
            if map.frames[&frame_id].feature_landmark[i_new].is_some() {
                continue;
            }
            let lm = map.landmarks[&lm_id].clone();
            if lm.observations.iter().any(|&(f, _)| f == frame_id) {
                continue;
            }
            let err = map
                .reprojection_error(&lm, frame_id, i_new)
                .unwrap_or(f64::MAX);
            if err <= cfg.filter_tau_px {
                map.add_observation(frame_id, i_new, lm_id);
                stats.linked_observations += 1;
            }
        }
    }
    expand_frame(map, frame_id, graph, cfg, &mut stats);
    stats
}

/// Triangulate new landmarks between a freshly posed frame and its
/// registered neighbors, and adopt clean extra observations of landmarks the
/// frame already sees.
fn expand_frame(
    map: &mut SparseMap,
    frame_id: FrameId,
    graph: &MatchGraph,
    cfg: &MapperConfig,
    stats: &mut RegistrationStats,
) {
    let pose = map.frames[&frame_id].pose.unwrap();
    for neighbor in graph.neighbors(frame_id) {
        if neighbor == frame_id || !map.frames.get(&neighbor).is_some_and(|f| f.registered()) {
            continue;
        }
        let Some(pairs) = graph.pairs(frame_id, neighbor) else {
            continue;
        };
        let nb_pose = map.frames[&neighbor].pose.unwrap();
        let nb_k = map.frames[&neighbor].intrinsics;
        let k = map.frames[&frame_id].intrinsics;
        for (i_new, i_nb) in pairs {
            if map.frames[&neighbor].feature_landmark[i_nb].is_some() {
                continue;
            }
            match map.frames[&frame_id].feature_landmark[i_new] {
                Some(existing) => {
                    // The new frame already sees a landmark here; adopt the
                    // neighbor observation when it reprojects cleanly.
                    let lm = &map.landmarks[&existing];
                    if lm.observations.iter().any(|&(f, _)| f == neighbor) {
                        continue;
                    }
                    let err = map.reprojection_error(lm, neighbor, i_nb).unwrap_or(f64::MAX);
                    if err <= cfg.filter_tau_px {
                        map.add_observation(neighbor, i_nb, existing);
                        stats.linked_observations += 1;
                    }
                }
                None => {
                    let px_new = map.frames[&frame_id].keypoints[i_new];
                    let px_nb = map.frames[&neighbor].keypoints[i_nb];
                    let obs = [(pose, k, px_new), (nb_pose, nb_k, px_nb)];
                    let Ok(point) = triangulate(&obs, cfg.ransac.min_triangulation_angle) else {
                        continue;
                    };
                    let ok = |p: &Pose, kk: &crate::CameraIntrinsics, px: &Pixel| {
                        crate::geometry::project(&point, p, kk)
                            .map(|proj| (proj - px).norm() <= cfg.filter_tau_px)
                            .unwrap_or(false)
                    };
                    if ok(&pose, &k, &px_new) && ok(&nb_pose, &nb_k, &px_nb) {
                        let lm = map.allocate_landmark(point);
                        map.add_observation(frame_id, i_new, lm);
                        map.add_observation(neighbor, i_nb, lm);
                        stats.new_landmarks += 1;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    /// Observations dropped for exceeding the threshold.
    pub observations_removed: usize,
    /// Landmarks dropped for losing two-view support (their remaining
    /// observations go with them).
    pub landmarks_removed: usize,
}

/// Remove observations whose reprojection error exceeds `tau_px` (or whose
/// landmark sits behind the camera), then drop landmarks left with fewer
/// than two observations.
pub fn filter_outliers(map: &mut SparseMap, tau_px: f64) -> FilterReport {
    let mut report = FilterReport::default();
    let ids: Vec<LandmarkId> = map.landmarks.keys().copied().collect();
    for id in ids {
        let lm = map.landmarks[&id].clone();
        let mut kept = Vec::with_capacity(lm.observations.len());
        for &(frame, feature) in &lm.observations {
            let err = map.reprojection_error(&lm, frame, feature).unwrap_or(f64::MAX);
            if err <= tau_px {
                kept.push((frame, feature));
            } else {
                report.observations_removed += 1;
                map.frames.get_mut(&frame).unwrap().feature_landmark[feature] = None;
            }
        }
        if kept.len() < 2 {
            for &(frame, feature) in &kept {
                map.frames.get_mut(&frame).unwrap().feature_landmark[feature] = None;
            }
            map.landmarks.remove(&id);
            report.landmarks_removed += 1;
        } else {
            map.landmarks.get_mut(&id).unwrap().observations = kept;
        }
    }
    report
}
