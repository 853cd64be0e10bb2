//! Mapper operations against label-based and exhaustive-scoring oracles.

use collabmap::features::{detect, FeatureModel};
use collabmap::geometry::{estimate_relative_pose, RansacParams};
use collabmap::mapper::{
    exhaustive_match, filter_outliers, initialize_map, select_initial_pair, MapperConfig,
    SparseMap,
};
use collabmap::scenario::{generate_world, WorldConfig};
use collabmap::{AgentId, FrameId, Pixel, Pose};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn oblique_pose(x: f64, y: f64, yaw_deg: f64) -> Pose {
    // Hand-built oblique view: yaw about z after a 55-degree tilt about x.
    let yaw = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, yaw_deg.to_radians()));
    let tilt = UnitQuaternion::from_scaled_axis(Vector3::new(
        (180.0f64 - 55.0).to_radians(),
        0.0,
        0.0,
    ));
    let rot = tilt * yaw;
    let center = Vector3::new(x, y, 60.0);
    Pose::new(rot, -(rot * center))
}

#[test]
fn initial_pair_choice_matches_exhaustive_oracle() {
    let world = generate_world(
        &WorldConfig {
            extent_x: 200.0,
            extent_y: 160.0,
            center_x: 0.0,
            center_y: 40.0,
            density: 0.025,
            h_noise: 1.0,
            ..WorldConfig::default()
        },
        81,
    )
    .unwrap();
    let k = collabmap::scenario::default_intrinsics();
    let model = FeatureModel::sift_like();
    let mut rng = ChaCha8Rng::seed_from_u64(82);

    // A and B share a camera center (pure rotation pair, highest match
    // count); C sits 3 m away so its pairs carry parallax.
    let poses = [
        (FrameId(1), oblique_pose(0.0, 0.0, 0.0)),
        (FrameId(2), oblique_pose(0.0, 0.0, 4.0)),
        (FrameId(3), oblique_pose(3.0, 0.5, 1.0)),
    ];
    let frames: Vec<_> = poses
        .iter()
        .map(|(id, pose)| {
            detect(&world, pose, &k, &model, *id, AgentId(1), id.0 as f64, &mut rng)
        })
        .collect();
    let graph = exhaustive_match(&frames, &model, &world, 5);

    let mut map = SparseMap::new();
    for f in &frames {
        map.add_frame(f, &k);
    }
    let eligible: BTreeSet<FrameId> = frames.iter().map(|f| f.frame_id).collect();
    let params = RansacParams::default();
    let chosen = select_initial_pair(&map, &graph, &eligible, &params, &mut rng)
        .expect("a valid pair exists");

    // Exhaustive oracle: score every pair directly.
    let mut oracle_best: Option<(usize, FrameId, FrameId)> = None;
    for i in 0..frames.len() {
        for j in (i + 1)..frames.len() {
            let (a, b) = (frames[i].frame_id, frames[j].frame_id);
            let count = graph.count(a, b);
            if count < 8 {
                continue;
            }
            let pairs = graph.pairs(a, b).unwrap();
            let pixel_pairs: Vec<(Pixel, Pixel)> = pairs
                .iter()
                .map(|&(x, y)| (frames[i].keypoints[x], frames[j].keypoints[y]))
                .collect();
            let mut oracle_rng = ChaCha8Rng::seed_from_u64(4242);
            if estimate_relative_pose(&pixel_pairs, &k, &k, &params, &mut oracle_rng).is_ok()
                && oracle_best.as_ref().is_none_or(|(c, _, _)| count > *c)
            {
                oracle_best = Some((count, a, b));
            }
        }
    }
    let (_, oa, ob) = oracle_best.expect("oracle finds a pair");
    assert_eq!((chosen.frame_a, chosen.frame_b), (oa, ob));

    // The pure-rotation pair must never be the seed, whatever its count.
    assert!(!(chosen.frame_a == FrameId(1) && chosen.frame_b == FrameId(2)));
}

#[test]
fn all_pairs_pure_rotation_yields_no_pair() {
    let world = generate_world(
        &WorldConfig {
            extent_x: 200.0,
            extent_y: 160.0,
            center_x: 0.0,
            center_y: 40.0,
            density: 0.02,
            h_noise: 1.0,
            ..WorldConfig::default()
        },
        83,
    )
    .unwrap();
    let k = collabmap::scenario::default_intrinsics();
    let model = FeatureModel::sift_like();
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let frames: Vec<_> = (0..3)
        .map(|i| {
            detect(
                &world,
                &oblique_pose(0.0, 0.0, 3.0 * i as f64),
                &k,
                &model,
                FrameId(i),
                AgentId(1),
                i as f64,
                &mut rng,
            )
        })
        .collect();
    let graph = exhaustive_match(&frames, &model, &world, 9);
    let mut map = SparseMap::new();
    for f in &frames {
        map.add_frame(f, &k);
    }
    let eligible: BTreeSet<FrameId> = frames.iter().map(|f| f.frame_id).collect();
    assert!(select_initial_pair(&map, &graph, &eligible, &RansacParams::default(), &mut rng)
        .is_none());
}

#[test]
fn filter_removes_injected_outliers_with_high_precision() {
    // Build a clean three-view map (so landmarks typically carry three
    // observations and removals have no collateral), displace 5% of the
    // observations by 10 px, and compare the removed set against the
    // injected labels.
    let world = generate_world(
        &WorldConfig {
            extent_x: 220.0,
            extent_y: 170.0,
            center_x: 0.0,
            center_y: 45.0,
            density: 0.03,
            h_noise: 1.0,
            ..WorldConfig::default()
        },
        85,
    )
    .unwrap();
    let k = collabmap::scenario::default_intrinsics();
    let model = FeatureModel::sift_like();
    let mut rng = ChaCha8Rng::seed_from_u64(86);
    let frames: Vec<_> = [(0.0, 0.0), (4.0, 0.0), (8.0, 0.3)]
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            detect(
                &world,
                &oblique_pose(*x, *y, 0.0),
                &k,
                &model,
                FrameId(i as u64 + 1),
                AgentId(1),
                i as f64,
                &mut rng,
            )
        })
        .collect();
    let graph = exhaustive_match(&frames, &model, &world, 87);

    let mut map = SparseMap::new();
    for f in &frames {
        map.add_frame(f, &k);
    }
    let eligible: BTreeSet<FrameId> = frames.iter().map(|f| f.frame_id).collect();
    let cfg = MapperConfig::default();
    let init = select_initial_pair(&map, &graph, &eligible, &cfg.ransac, &mut rng).unwrap();
    initialize_map(&mut map, &init, &cfg).unwrap();
    let third = frames
        .iter()
        .map(|f| f.frame_id)
        .find(|id| *id != init.frame_a && *id != init.frame_b)
        .unwrap();
    collabmap::mapper::register_frame(&mut map, third, &graph, &cfg, &mut rng).unwrap();
    map.audit().unwrap();

    // Displace 5% of the observations held by three-view landmarks, so a
    // removal never drops the landmark itself.
    let mut displaced: BTreeSet<(FrameId, usize)> = BTreeSet::new();
    let all_obs: Vec<(FrameId, usize)> = map
        .landmarks
        .values()
        .flat_map(|lm| lm.observations.iter().copied())
        .collect();
    let sturdy: BTreeSet<(FrameId, usize)> = map
        .landmarks
        .values()
        .filter(|lm| lm.observations.len() >= 3)
        .flat_map(|lm| lm.observations.iter().copied())
        .collect();
    for (i, (frame, feature)) in all_obs.iter().enumerate() {
        if i % 20 != 0 || !sturdy.contains(&(*frame, *feature)) {
            continue;
        }
        let f = map.frames.get_mut(frame).unwrap();
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        f.keypoints[*feature] += Vector3::new(angle.cos(), angle.sin(), 0.0).xy() * 10.0;
        displaced.insert((*frame, *feature));
    }
    assert!(displaced.len() >= 10);

    let report = filter_outliers(&mut map, 2.0);
    assert!(report.observations_removed > 0);

    // Removed = observations no longer present.
    let remaining: BTreeSet<(FrameId, usize)> = map
        .landmarks
        .values()
        .flat_map(|lm| lm.observations.iter().copied())
        .collect();
    let removed: BTreeSet<(FrameId, usize)> = all_obs
        .iter()
        .copied()
        .filter(|o| !remaining.contains(o))
        .collect();
    let true_positive = removed.intersection(&displaced).count();
    let precision = true_positive as f64 / removed.len() as f64;
    assert!(
        precision >= 0.95,
        "precision {precision} ({true_positive}/{})",
        removed.len()
    );
    // Every displaced observation is gone.
    assert!(displaced.iter().all(|o| !remaining.contains(o)));
    map.audit().unwrap();
}

#[test]
fn single_displaced_observation_is_exactly_removed() {
    // Three views of one landmark; one observation knocked 50 px off.
    let k = collabmap::scenario::default_intrinsics();
    let mut map = SparseMap::new();
    let target = collabmap::Point::new(0.5, -0.2, 12.0);
    let mut obs_refs = Vec::new();
    for i in 0..3 {
        let pose = Pose::new(
            UnitQuaternion::identity(),
            Vector3::new(-0.8 * i as f64, 0.0, 0.0),
        );
        let px = collabmap::geometry::project(&target, &pose, &k).unwrap();
        let frame = collabmap::features::FrameFeatures::from_parts(
            FrameId(i),
            AgentId(1),
            i as f64,
            vec![px],
            vec![collabmap::LandmarkId(0)],
            pose.center(),
        );
        map.add_frame(&frame, &k);
        map.frames.get_mut(&FrameId(i)).unwrap().pose = Some(pose);
        obs_refs.push((FrameId(i), 0usize));
    }
    let lm = map.allocate_landmark(target);
    for (f, feat) in &obs_refs {
        map.add_observation(*f, *feat, lm);
    }
    assert_eq!(filter_outliers(&mut map, 2.0), Default::default());

    map.frames.get_mut(&FrameId(1)).unwrap().keypoints[0] += Vector3::new(50.0, 0.0, 0.0).xy();
    let report = filter_outliers(&mut map, 2.0);
    assert_eq!(report.observations_removed, 1);
    assert_eq!(report.landmarks_removed, 0);
    assert_eq!(map.landmarks[&lm].observations.len(), 2);
}
