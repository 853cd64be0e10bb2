//! Bundle-adjustment checks against independent references: analytic
//! Jacobians vs central differences, monotone accepted-step costs, and the
//! Schur solver vs a dense Levenberg-Marquardt oracle.

mod common;

use collabmap::geometry::{CameraIntrinsics, Pose};
use collabmap::optim::{bundle_adjust, linearize_observation, LmConfig};
use common::{dense_lm_oracle, random_problem, robust_cost};
use nalgebra::{Point2, Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let k = CameraIntrinsics::new(900.0, 1100.0, 960.0, 540.0, 1920, 1080).unwrap();
    let mut checked = 0;
    while checked < 100 {
        let pose: Pose<f64> = Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            )),
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        );
        let landmark = Point3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(4.0..20.0),
        );
        let pixel = Point2::new(
            rng.random_range(0.0..1920.0),
            rng.random_range(0.0..1080.0),
        );
        let Some((_, j_cam, j_lm)) = linearize_observation(&pose, &k, &landmark, &pixel) else {
            continue;
        };
        checked += 1;

        let residual = |pose: &Pose<f64>, lm: &Point3<f64>| {
            let q = pose.transform(lm);
            nalgebra::Vector2::new(
                k.fx * q.x / q.z + k.cx - pixel.x,
                k.fy * q.y / q.z + k.cy - pixel.y,
            )
        };
        let h = 1e-6;
        let scale_ref = 1.0 + j_cam.norm().max(j_lm.norm());
        for p in 0..6 {
            let mut dr = Vector3::zeros();
            let mut dt = Vector3::zeros();
            if p < 3 {
                dr[p] = h;
            } else {
                dt[p - 3] = h;
            }
            let num =
                (residual(&pose.retract(&dr, &dt), &landmark)
                    - residual(&pose.retract(&(-dr), &(-dt)), &landmark))
                    / (2.0 * h);
            let ana = j_cam.column(p);
            assert!(
                (num - ana).norm() / scale_ref < 1e-4,
                "camera parameter {p}: numeric {num:?} analytic {ana:?}"
            );
        }
        for p in 0..3 {
            let mut dp = Vector3::zeros();
            dp[p] = h;
            let num = (residual(&pose, &(landmark + dp)) - residual(&pose, &(landmark - dp)))
                / (2.0 * h);
            let ana = j_lm.column(p);
            assert!(
                (num - ana).norm() / scale_ref < 1e-4,
                "landmark parameter {p}: numeric {num:?} analytic {ana:?}"
            );
        }
    }
}

#[test]
fn accepted_costs_never_increase_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for trial in 0..100 {
        let n_cams = rng.random_range(3..7);
        let n_lms = rng.random_range(20..60);
        let sigma = [0.0, 0.5, 1.5][trial % 3];
        let mut fixture = random_problem(n_cams, n_lms, sigma, 0.08, &mut rng);
        let report = bundle_adjust(&mut fixture.problem, &LmConfig::default());
        assert!(
            report.final_cost <= report.initial_cost,
            "trial {trial}: cost grew"
        );
        for pair in report.cost_history.windows(2) {
            assert!(
                pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12,
                "trial {trial}: non-monotone accepted step {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }
}

#[test]
fn converged_adjustment_is_idempotent() {
    // The gauge leaves no free directions: re-running on the solver's own
    // output changes the cost by less than the convergence tolerance.
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    for trial in 0..5 {
        let mut fixture = random_problem(6, 80, 0.8, 0.05, &mut rng);
        let cfg = LmConfig {
            max_iterations: 80,
            ..LmConfig::default()
        };
        let first = bundle_adjust(&mut fixture.problem, &cfg);
        assert!(first.converged, "trial {trial} did not converge");
        let second = bundle_adjust(&mut fixture.problem, &cfg);
        let rel = (second.initial_cost - second.final_cost)
            / second.initial_cost.max(1e-30);
        assert!(
            rel < cfg.convergence_tol * 10.0,
            "trial {trial}: rerun still moved the cost by {rel}"
        );
    }
}

#[test]
fn schur_solution_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for trial in 0..3 {
        let fixture = random_problem(8, 150, 1.0, 0.05, &mut rng);
        let delta = 2.0;

        let mut schur_problem = fixture.problem.clone();
        let report = bundle_adjust(
            &mut schur_problem,
            &LmConfig {
                max_iterations: 60,
                ..LmConfig::default()
            },
        );
        let schur_cost = robust_cost(&schur_problem, delta);
        assert!((schur_cost - report.final_cost).abs() <= 1e-6 * (1.0 + schur_cost));

        let mut dense_problem = fixture.problem.clone();
        let dense_cost = dense_lm_oracle(&mut dense_problem, delta, 40);

        let rel = (schur_cost - dense_cost).abs() / dense_cost.max(1e-12);
        assert!(
            rel < 0.01,
            "trial {trial}: schur {schur_cost} vs dense {dense_cost} (rel {rel})"
        );
    }
}
