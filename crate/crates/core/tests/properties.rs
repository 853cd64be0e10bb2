//! Cross-module properties: the provenance quarantine, the footprint
//! overlap of the default survey geometry, the absorbing tracking-loss
//! state, and the scalar-generic kernel at single precision.

use collabmap::agent::{AgentConfig, Frontend, TrackingState};
use collabmap::features::{FeatureModel, FrameFeatures};
use collabmap::geometry::{project, triangulate, umeyama_align, RansacParams};
use collabmap::geometry::{CameraIntrinsics as GenCamera, Pose as GenPose, Similarity as GenSimilarity};
use collabmap::{CameraIntrinsics, Pose};
use collabmap::mapper::{exhaustive_match, reconstruct_offline, OfflineOptions};
use collabmap::scenario::{
    default_intrinsics, generate_world, sample_mission, FlightPlan, SamplingMode, WorldConfig,
};
use collabmap::{AgentId, FrameId, LandmarkId, Pixel, Point};
use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The mapper must be insensitive to the hidden ground-truth channel: with
/// the match graph fixed, scrambling every provenance id and camera center
/// leaves the reconstruction bit-identical.
#[test]
fn mapper_never_reads_the_hidden_channel() {
    let world = generate_world(
        &WorldConfig {
            extent_x: 320.0,
            extent_y: 300.0,
            center_x: 120.0,
            center_y: 0.0,
            density: 0.018,
            h_noise: 2.0,
            ..WorldConfig::default()
        },
        53,
    )
    .unwrap();
    let k = default_intrinsics();
    let mut plan = FlightPlan::straight(AgentId(1), (0.0, 0.0), (84.0, 0.0), 80.0, 7.0);
    plan.camera_pitch_deg = -35.0;
    let missions = sample_mission(
        &world,
        &[plan],
        SamplingMode::Sfm,
        &k,
        &FeatureModel::sift_like(),
        0.0,
        54,
    )
    .unwrap();
    let frames = &missions[0].frames;
    let graph = exhaustive_match(frames, &FeatureModel::sift_like(), &world, 55);

    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let scrambled: Vec<FrameFeatures> = frames
        .iter()
        .map(|f| {
            let mut fake_prov: Vec<LandmarkId> =
                (0..f.len() as u64).map(|i| LandmarkId(i + 1_000_000)).collect();
            fake_prov.shuffle(&mut rng);
            FrameFeatures::from_parts(
                f.frame_id,
                f.agent_id,
                f.timestamp,
                f.keypoints.clone(),
                fake_prov,
                Point::new(
                    rng.random_range(-1e3..1e3),
                    rng.random_range(-1e3..1e3),
                    rng.random_range(-1e3..1e3),
                ),
            )
        })
        .collect();

    let opts = OfflineOptions::default();
    let maps_true = reconstruct_offline(frames, &k, &graph, &opts).unwrap();
    let maps_scrambled = reconstruct_offline(&scrambled, &k, &graph, &opts).unwrap();
    assert_eq!(maps_true.len(), maps_scrambled.len());
    for (a, b) in maps_true.iter().zip(&maps_scrambled) {
        assert_eq!(a.registered_count(), b.registered_count());
        for ((ida, fa), (idb, fb)) in a.registered_frames().zip(b.registered_frames()) {
            assert_eq!(ida, idb);
            let (pa, pb) = (fa.pose.unwrap(), fb.pose.unwrap());
            assert_eq!(
                pa.translation, pb.translation,
                "poses must be bit-identical"
            );
            assert_eq!(
                pa.rotation.quaternion().coords,
                pb.rotation.quaternion().coords
            );
        }
        assert_eq!(a.landmarks.len(), b.landmarks.len());
    }
}

/// Ground footprint of a camera as the z=0 quadrilateral under its corners.
fn footprint(pose: &Pose, k: &CameraIntrinsics) -> Vec<(f64, f64)> {
    let center = pose.center();
    let rot_cw = pose.rotation.inverse();
    let corners = [
        Pixel::new(0.0, 0.0),
        Pixel::new(k.width as f64, 0.0),
        Pixel::new(k.width as f64, k.height as f64),
        Pixel::new(0.0, k.height as f64),
    ];
    corners
        .iter()
        .map(|c| {
            let dir = rot_cw * k.ray(c);
            assert!(dir.z < 0.0, "corner ray must descend");
            let t = -center.z / dir.z;
            (center.x + t * dir.x, center.y + t * dir.y)
        })
        .collect()
}

fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        acc += x1 * y2 - x2 * y1;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of a convex subject polygon against a convex
/// clip polygon (counterclockwise).
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        let (ax, ay) = clip[i];
        let (bx, by) = clip[(i + 1) % n];
        let inside = |p: &(f64, f64)| (bx - ax) * (p.1 - ay) - (by - ay) * (p.0 - ax) >= 0.0;
        let input = std::mem::take(&mut output);
        if input.is_empty() {
            return Vec::new();
        }
        for j in 0..input.len() {
            let current = input[j];
            let previous = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(&current);
            let prev_in = inside(&previous);
            if cur_in != prev_in {
                // Segment crosses the clip edge.
                let dx = current.0 - previous.0;
                let dy = current.1 - previous.1;
                let denom = (bx - ax) * dy - (by - ay) * dx;
                if denom.abs() > 1e-15 {
                    let t = -((bx - ax) * (previous.1 - ay) - (by - ay) * (previous.0 - ax))
                        / denom;
                    output.push((previous.0 + t * dx, previous.1 + t * dy));
                }
            }
            if cur_in {
                output.push(current);
            }
        }
    }
    output
}

fn ensure_ccw(poly: &mut [(f64, f64)]) {
    let n = poly.len();
    let mut signed = 0.0;
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        signed += x1 * y2 - x2 * y1;
    }
    if signed < 0.0 {
        poly.reverse();
    }
}

fn forward_overlap(plan: &FlightPlan, k: &CameraIntrinsics, t: f64) -> f64 {
    let mut a = footprint(&plan.pose_at(t), k);
    let mut b = footprint(&plan.pose_at(t + 1.0), k);
    ensure_ccw(&mut a);
    ensure_ccw(&mut b);
    let inter = clip_convex(&a, &b);
    if inter.len() < 3 {
        return 0.0;
    }
    polygon_area(&inter) / polygon_area(&a)
}

#[test]
fn default_nadir_footprint_overlap_is_around_eighty_percent() {
    let k = default_intrinsics();
    // Default survey settings: nadir, 80 m, 7 m/s, 1 Hz.
    let plan = FlightPlan::straight(AgentId(1), (0.0, 0.0), (400.0, 0.0), 80.0, 7.0);
    for t in [5.0, 20.0, 40.0] {
        let overlap = forward_overlap(&plan, &k, t);
        assert!(
            (0.75..=0.85).contains(&overlap),
            "overlap {overlap} at t={t}"
        );
    }

    // The slower reference speed clears the coarser 78% floor.
    let slow = FlightPlan::straight(AgentId(1), (0.0, 0.0), (400.0, 0.0), 80.0, 5.0);
    let overlap = forward_overlap(&slow, &k, 10.0);
    assert!(overlap >= 0.78, "overlap {overlap}");
}

#[test]
fn lost_state_is_absorbing_under_arbitrary_inputs() {
    let world = generate_world(
        &WorldConfig {
            extent_x: 260.0,
            extent_y: 220.0,
            center_x: 80.0,
            center_y: 0.0,
            density: 0.025,
            h_noise: 2.0,
            ..WorldConfig::default()
        },
        61,
    )
    .unwrap();
    let k = default_intrinsics();
    let model = FeatureModel::sift_like();
    let mut plan = FlightPlan::straight(AgentId(1), (0.0, 0.0), (30.0, 0.0), 80.0, 6.0);
    plan.frame_rate = 10.0;
    plan.camera_pitch_deg = -50.0;
    let missions = sample_mission(&world, &[plan], SamplingMode::Slam, &k, &model, 0.0, 62).unwrap();
    let real_frames = &missions[0].frames;

    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for sequence in 0..25 {
        let mut agent = Frontend::new(
            AgentId(1),
            k,
            AgentConfig::default(),
            RansacParams::default(),
            100 + sequence,
        );
        // Establish tracking on the real prefix.
        let warmup = rng.random_range(8..20);
        let mut t_last = 0.0;
        for frame in real_frames.iter().take(warmup) {
            t_last = frame.timestamp;
            agent.process_frame(frame.clone(), &world, &model).unwrap();
        }
        // Arbitrary garbage frames afterwards.
        let mut order: Vec<u32> = (0..40).collect();
        order.shuffle(&mut rng);
        let mut seen_lost = false;
        for (step, _) in order.iter().enumerate() {
            let n = rng.random_range(0..50);
            let keypoints: Vec<Pixel> = (0..n)
                .map(|_| {
                    Pixel::new(
                        rng.random_range(0.0..1920.0),
                        rng.random_range(0.0..1080.0),
                    )
                })
                .collect();
            let provenance = (0..n as u64).map(LandmarkId).collect();
            t_last += rng.random_range(0.01..0.5);
            let frame = FrameFeatures::from_parts(
                FrameId(1_000_000 + sequence * 1000 + step as u64),
                AgentId(1),
                t_last,
                keypoints,
                provenance,
                Point::new(0.0, 0.0, 80.0),
            );
            let out = agent.process_frame(frame, &world, &model).unwrap();
            match out.state {
                TrackingState::Lost { .. } => {
                    seen_lost = true;
                    assert!(out.pose.is_none());
                    assert!(out.keyframes.is_empty());
                }
                _ => {
                    assert!(!seen_lost, "state left Lost on sequence {sequence}");
                }
            }
        }
        assert!(seen_lost, "garbage input must eventually lose tracking");
    }
}

/// The geometric kernel works at single precision through the same generic
/// code paths.
#[test]
fn kernel_is_generic_over_the_scalar() {
    let k32: GenCamera<f32> =
        GenCamera::new(1000.0f32, 1000.0, 960.0, 540.0, 1920, 1080).unwrap();
    let pose_a: GenPose<f32> = GenPose::identity();
    let pose_b: GenPose<f32> = GenPose::new(
        UnitQuaternion::identity(),
        Vector3::new(-1.0f32, 0.0, 0.0),
    );
    let target = Point3::new(0.4f32, -0.2, 9.0);
    let pa = project(&target, &pose_a, &k32).unwrap();
    let pb = project(&target, &pose_b, &k32).unwrap();
    let point = triangulate(
        &[(pose_a, k32, pa), (pose_b, k32, pb)],
        0.5f32.to_radians(),
    )
    .unwrap();
    assert!((point - target).norm() < 1e-3);

    let src = [
        Point3::new(0.0f32, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(0.3, 0.4, 1.0),
    ];
    let sim = GenSimilarity {
        scale: 2.0f32,
        rotation: UnitQuaternion::from_scaled_axis(Vector3::new(0.0f32, 0.0, 0.7)),
        translation: Vector3::new(1.0f32, -2.0, 3.0),
    };
    let dst: Vec<Point3<f32>> = src.iter().map(|p| sim.apply(p)).collect();
    let recovered = umeyama_align(&src, &dst, true).unwrap();
    assert!((recovered.scale - 2.0).abs() < 1e-4);
    assert!(recovered.rotation.angle_to(&sim.rotation) < 1e-4);

    // And a single-precision bundle adjustment still descends.
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let k64 = common_camera_f32();
    let mut cameras = Vec::new();
    for i in 0..3 {
        cameras.push(collabmap::optim::BaCamera {
            pose: GenPose::new(
                UnitQuaternion::identity(),
                Vector3::new(-0.5f32 * i as f32, 0.0, 0.0),
            ),
            intrinsics: k64,
            freedom: if i == 0 {
                collabmap::optim::CameraFreedom::Fixed
            } else if i == 1 {
                collabmap::optim::CameraFreedom::FixedBaselineScale
            } else {
                collabmap::optim::CameraFreedom::Variable
            },
        });
    }
    let landmarks: Vec<Point3<f32>> = (0..40)
        .map(|_| {
            Point3::new(
                rng.random_range(-3.0f32..4.0),
                rng.random_range(-2.0f32..2.0),
                rng.random_range(8.0f32..14.0),
            )
        })
        .collect();
    let mut observations = Vec::new();
    for (ci, cam) in cameras.iter().enumerate() {
        for (li, lm) in landmarks.iter().enumerate() {
            if let Some(px) = project(lm, &cam.pose, &k64) {
                observations.push(collabmap::optim::BaObservation {
                    camera: ci,
                    landmark: li,
                    pixel: px,
                    weight: 1.0f32,
                });
            }
        }
    }
    let mut problem = collabmap::optim::BaProblem {
        cameras,
        landmarks: landmarks
            .iter()
            .map(|p| Point3::new(p.x + 0.05, p.y - 0.03, p.z + 0.08))
            .collect(),
        observations,
    };
    let report = collabmap::optim::bundle_adjust(
        &mut problem,
        &collabmap::optim::LmConfig::<f32> {
            max_iterations: 25,
            ..Default::default()
        },
    );
    assert!(report.final_cost < report.initial_cost * 1e-3);
}

fn common_camera_f32() -> GenCamera<f32> {
    GenCamera::new(1000.0f32, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
}
