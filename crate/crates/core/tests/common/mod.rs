//! Shared test fixtures: random bundle problems and an independent dense
//! Levenberg-Marquardt oracle (full normal equations, numeric Jacobians) to
//! check the Schur-based solver against.

#![allow(dead_code)]

use collabmap::geometry::{project, CameraIntrinsics, Pose, Similarity};
use collabmap::optim::{BaCamera, BaObservation, BaProblem, CameraFreedom};
use nalgebra::{DMatrix, DVector, Point2, Point3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn camera_1080p() -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
}

/// Random multi-camera problem: cameras on a noisy line looking down the z
/// axis at a landmark box, Gaussian pixel noise, poses and landmarks
/// perturbed away from the ground truth.
pub struct RandomProblem {
    pub problem: BaProblem<f64>,
    pub truth_cams: Vec<Pose<f64>>,
}

pub fn random_problem(
    n_cams: usize,
    n_lms: usize,
    pixel_sigma: f64,
    perturb: f64,
    rng: &mut ChaCha8Rng,
) -> RandomProblem {
    let k = camera_1080p();
    let noise = Normal::new(0.0, pixel_sigma.max(1e-12)).unwrap();
    let mut cameras = Vec::new();
    let mut truth_cams = Vec::new();
    for i in 0..n_cams {
        let pose = Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
            )),
            Vector3::new(
                -(i as f64) * 0.5 + rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ),
        );
        truth_cams.push(pose);
        let freedom = match i {
            0 => CameraFreedom::Fixed,
            1 => CameraFreedom::FixedBaselineScale,
            _ => CameraFreedom::Variable,
        };
        cameras.push(BaCamera {
            pose,
            intrinsics: k,
            freedom,
        });
    }
    let landmarks: Vec<Point3<f64>> = (0..n_lms)
        .map(|_| {
            Point3::new(
                rng.random_range(-4.0..(0.5 * n_cams as f64 + 4.0)),
                rng.random_range(-3.0..3.0),
                rng.random_range(9.0..16.0),
            )
        })
        .collect();
    let mut observations = Vec::new();
    for (ci, cam) in cameras.iter().enumerate() {
        for (li, lm) in landmarks.iter().enumerate() {
            if let Some(px) = project(lm, &cam.pose, &k) {
                if k.contains(&px) {
                    observations.push(BaObservation {
                        camera: ci,
                        landmark: li,
                        pixel: Point2::new(
                            px.x + noise.sample(rng),
                            px.y + noise.sample(rng),
                        ),
                        weight: 1.0,
                    });
                }
            }
        }
    }

    let mut problem = BaProblem {
        cameras,
        landmarks,
        observations,
    };
    // Walk the state away from the optimum.
    for cam in problem.cameras.iter_mut().skip(2) {
        cam.pose = cam.pose.retract(
            &Vector3::new(
                rng.random_range(-perturb..perturb) * 0.02,
                rng.random_range(-perturb..perturb) * 0.02,
                rng.random_range(-perturb..perturb) * 0.02,
            ),
            &Vector3::new(
                rng.random_range(-perturb..perturb),
                rng.random_range(-perturb..perturb),
                rng.random_range(-perturb..perturb),
            ),
        );
    }
    for lm in problem.landmarks.iter_mut() {
        *lm += Vector3::new(
            rng.random_range(-perturb..perturb),
            rng.random_range(-perturb..perturb),
            rng.random_range(-perturb..perturb),
        );
    }
    RandomProblem {
        problem,
        truth_cams,
    }
}

fn huber_cost(err_sq: f64, delta: f64) -> f64 {
    let r = err_sq.sqrt();
    if r <= delta {
        err_sq
    } else {
        delta * (2.0 * r - delta)
    }
}

pub fn robust_cost(problem: &BaProblem<f64>, delta: f64) -> f64 {
    problem
        .observations
        .iter()
        .map(|obs| {
            let cam = &problem.cameras[obs.camera];
            let err_sq = project(&problem.landmarks[obs.landmark], &cam.pose, &cam.intrinsics)
                .map(|p| (p - obs.pixel).norm_squared())
                .unwrap_or(1e8);
            obs.weight * huber_cost(err_sq, delta)
        })
        .sum()
}

/// Independent dense Levenberg-Marquardt: every camera gets six parameters
/// and every landmark three (no gauge, no Schur elimination), per-residual
/// Jacobians by central differences, full normal-equations solve. The
/// minimum cost it reaches is the reference for the sparse solver.
pub fn dense_lm_oracle(problem: &mut BaProblem<f64>, delta: f64, max_iters: usize) -> f64 {
    let n_cams = problem.cameras.len();
    let n_lms = problem.landmarks.len();
    let dim = 6 * n_cams + 3 * n_lms;
    let mut cost = robust_cost(problem, delta);
    let mut lambda = 1e-6f64;

    for _ in 0..max_iters {
        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut jtr = DVector::<f64>::zeros(dim);

        for obs in &problem.observations {
            let cam = &problem.cameras[obs.camera];
            let lm = problem.landmarks[obs.landmark];
            let residual = |pose: &Pose<f64>, point: &Point3<f64>| -> Option<nalgebra::Vector2<f64>> {
                let p = project(point, pose, &cam.intrinsics)?;
                Some(nalgebra::Vector2::new(p.x - obs.pixel.x, p.y - obs.pixel.y))
            };
            let Some(r0) = residual(&cam.pose, &lm) else {
                continue;
            };
            // Huber IRLS scaling, same convention as the production solver.
            let scale = (obs.weight * (delta / r0.norm()).min(1.0)).sqrt();

            // Numeric Jacobian over the 9 parameters this residual touches.
            let h = 1e-6;
            let mut cols = Vec::with_capacity(9);
            for p in 0..6 {
                let mut dr = Vector3::zeros();
                let mut dt = Vector3::zeros();
                if p < 3 {
                    dr[p] = h;
                } else {
                    dt[p - 3] = h;
                }
                let plus = residual(&cam.pose.retract(&dr, &dt), &lm);
                let minus = residual(&cam.pose.retract(&(-dr), &(-dt)), &lm);
                let col = match (plus, minus) {
                    (Some(a), Some(b)) => (a - b) / (2.0 * h),
                    _ => nalgebra::Vector2::zeros(),
                };
                cols.push(col);
            }
            for p in 0..3 {
                let mut dp = Vector3::zeros();
                dp[p] = h;
                let plus = residual(&cam.pose, &(lm + dp));
                let minus = residual(&cam.pose, &(lm - dp));
                let col = match (plus, minus) {
                    (Some(a), Some(b)) => (a - b) / (2.0 * h),
                    _ => nalgebra::Vector2::zeros(),
                };
                cols.push(col);
            }

            let indices: Vec<usize> = (0..6)
                .map(|p| 6 * obs.camera + p)
                .chain((0..3).map(|p| 6 * n_cams + 3 * obs.landmark + p))
                .collect();
            let r = r0 * scale;
            for (ci, col_i) in cols.iter().enumerate() {
                let col_i = col_i * scale;
                jtr[indices[ci]] -= col_i.dot(&r);
                for (cj, col_j) in cols.iter().enumerate().skip(ci) {
                    let v = col_i.dot(&(col_j * scale));
                    jtj[(indices[ci], indices[cj])] += v;
                    if ci != cj {
                        jtj[(indices[cj], indices[ci])] += v;
                    }
                }
            }
        }

        // Damped solve with retries.
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = jtj.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda * (jtj[(i, i)] + 1e-12) + 1e-12;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&jtr);
            let mut trial = problem.clone();
            for (i, cam) in trial.cameras.iter_mut().enumerate() {
                let dr = Vector3::new(step[6 * i], step[6 * i + 1], step[6 * i + 2]);
                let dt = Vector3::new(step[6 * i + 3], step[6 * i + 4], step[6 * i + 5]);
                cam.pose = cam.pose.retract(&dr, &dt);
            }
            for (l, lm) in trial.landmarks.iter_mut().enumerate() {
                *lm += Vector3::new(
                    step[6 * n_cams + 3 * l],
                    step[6 * n_cams + 3 * l + 1],
                    step[6 * n_cams + 3 * l + 2],
                );
            }
            let trial_cost = robust_cost(&trial, delta);
            if trial_cost <= cost {
                let improved = (cost - trial_cost) / cost.max(1e-30);
                *problem = trial;
                cost = trial_cost;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if improved < 1e-10 {
                    return cost;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    cost
}

/// SVD-free iterative similarity fit: Gauss-Newton over (log scale,
/// rotation, translation) with numeric Jacobians and multi-start to dodge
/// local minima.
pub fn similarity_fit_oracle(src: &[Point3<f64>], dst: &[Point3<f64>]) -> (Similarity<f64>, f64) {
    let residuals = |s: &Similarity<f64>| -> DVector<f64> {
        let mut r = DVector::zeros(3 * src.len());
        for (i, (a, b)) in src.iter().zip(dst).enumerate() {
            let d = s.apply(a) - b;
            r[3 * i] = d.x;
            r[3 * i + 1] = d.y;
            r[3 * i + 2] = d.z;
        }
        r
    };
    let cost = |s: &Similarity<f64>| residuals(s).norm_squared();

    let starts: Vec<UnitQuaternion<f64>> = vec![
        UnitQuaternion::identity(),
        UnitQuaternion::from_scaled_axis(Vector3::new(std::f64::consts::PI, 0.0, 0.0)),
        UnitQuaternion::from_scaled_axis(Vector3::new(0.0, std::f64::consts::PI, 0.0)),
        UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, std::f64::consts::PI)),
        UnitQuaternion::from_scaled_axis(Vector3::new(1.2, -0.7, 2.0)),
        UnitQuaternion::from_scaled_axis(Vector3::new(-2.0, 1.0, 0.5)),
    ];
    let centroid =
        |pts: &[Point3<f64>]| pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / pts.len() as f64;
    let (mu_s, mu_d) = (centroid(src), centroid(dst));

    let mut best: Option<(Similarity<f64>, f64)> = None;
    for rot0 in starts {
        let mut sim = Similarity {
            scale: 1.0,
            rotation: rot0,
            translation: mu_d - rot0 * mu_s,
        };
        for _ in 0..200 {
            let r0 = residuals(&sim);
            let h = 1e-7;
            let mut jac = DMatrix::zeros(r0.len(), 7);
            let perturbed = |p: usize, sign: f64| -> Similarity<f64> {
                let mut s = sim;
                match p {
                    0 => s.scale *= (sign * h).exp(),
                    1..=3 => {
                        let mut ax = Vector3::zeros();
                        ax[p - 1] = sign * h;
                        s.rotation = UnitQuaternion::from_scaled_axis(ax) * s.rotation;
                    }
                    _ => s.translation[p - 4] += sign * h,
                }
                s
            };
            for p in 0..7 {
                let col =
                    (residuals(&perturbed(p, 1.0)) - residuals(&perturbed(p, -1.0))) / (2.0 * h);
                jac.set_column(p, &col);
            }
            let jtj = jac.transpose() * &jac + DMatrix::identity(7, 7) * 1e-12;
            let jtr = jac.transpose() * &r0;
            let Some(step) = jtj.cholesky().map(|c| c.solve(&jtr)) else {
                break;
            };
            sim = {
                let mut s = sim;
                s.scale *= (-step[0]).exp();
                let ax = Vector3::new(-step[1], -step[2], -step[3]);
                s.rotation = UnitQuaternion::from_scaled_axis(ax) * s.rotation;
                s.translation -= Vector3::new(step[4], step[5], step[6]);
                s
            };
            if step.norm() < 1e-15 {
                break;
            }
        }
        let c = cost(&sim);
        if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
            best = Some((sim, c));
        }
    }
    best.unwrap()
}
