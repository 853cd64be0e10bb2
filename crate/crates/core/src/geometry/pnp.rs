use super::align::umeyama_align;
use super::camera::CameraIntrinsics;
use super::epipolar::adaptive_iterations;
use super::pose::Pose;
use super::RansacParams;
use crate::real::Real;
use nalgebra::{
    Complex, Matrix2x3, Matrix3, Matrix4, Matrix6, Point2, Point3, Vector2, Vector3, Vector6,
};
use rand::Rng;
use thiserror::Error;

/// The frame cannot be resected against the given 3D structure.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("resection failed: {0}")]
pub struct PnpFailed(pub &'static str);

#[derive(Debug, Clone)]
pub struct PnpSolution<T: Real> {
    pub pose: Pose<T>,
    pub inliers: Vec<bool>,
}

impl<T: Real> PnpSolution<T> {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Camera resection from 2D-3D correspondences: P3P minimal solver inside
/// RANSAC (reprojection inlier test), followed by Levenberg-Marquardt
/// refinement on the inliers.
pub fn solve_pnp<T: Real, R: Rng>(
    correspondences: &[(Point3<T>, Point2<T>)],
    k: &CameraIntrinsics<T>,
    params: &RansacParams,
    rng: &mut R,
) -> Result<PnpSolution<T>, PnpFailed> {
    let n = correspondences.len();
    if n < 4 {
        return Err(PnpFailed("needs at least 4 correspondences"));
    }

    let threshold = T::from_config(params.inlier_threshold_px);
    let threshold_sq = threshold * threshold;
    let reproj_sq = |pose: &Pose<T>, world: &Point3<T>, pixel: &Point2<T>| -> Option<T> {
        let px = k.project_camera(&pose.transform(world))?;
        Some((px - pixel).norm_squared())
    };

    let mut best: Option<(usize, Pose<T>)> = None;
    let mut iteration_cap = params.max_iterations;
    let mut iteration = 0usize;
    while iteration < iteration_cap {
        iteration += 1;
        let sample = rand::seq::index::sample(rng, n, 4);
        let idx: Vec<usize> = sample.iter().collect();
        let world = [
            correspondences[idx[0]].0,
            correspondences[idx[1]].0,
            correspondences[idx[2]].0,
        ];
        let rays = [
            k.ray(&correspondences[idx[0]].1),
            k.ray(&correspondences[idx[1]].1),
            k.ray(&correspondences[idx[2]].1),
        ];
        let candidates = p3p(&world, &rays);
        // Disambiguate with the fourth sampled correspondence.
        let check = &correspondences[idx[3]];
        let Some(pose) = candidates.into_iter().min_by(|a, b| {
            let ea = reproj_sq(a, &check.0, &check.1).unwrap_or_else(|| T::max_value().unwrap());
            let eb = reproj_sq(b, &check.0, &check.1).unwrap_or_else(|| T::max_value().unwrap());
            ea.partial_cmp(&eb).unwrap()
        }) else {
            continue;
        };
        let count = correspondences
            .iter()
            .filter(|(w, px)| reproj_sq(&pose, w, px).is_some_and(|e| e <= threshold_sq))
            .count();
        if best.as_ref().is_none_or(|(b, _)| count > *b) {
            best = Some((count, pose));
            iteration_cap = iteration_cap.min(adaptive_iterations(
                count as f64 / n as f64,
                4,
                params.confidence,
                params.max_iterations,
            ));
        }
    }

    let (count, pose) = best.ok_or(PnpFailed("no consensus pose"))?;
    if count < 4 {
        return Err(PnpFailed("no consensus pose"));
    }

    let consensus: Vec<(Point3<T>, Point2<T>)> = correspondences
        .iter()
        .filter(|(w, px)| reproj_sq(&pose, w, px).is_some_and(|e| e <= threshold_sq))
        .copied()
        .collect();
    let refined = refine_pose(&pose, &consensus, k, 30);
    let inliers: Vec<bool> = correspondences
        .iter()
        .map(|(w, px)| reproj_sq(&refined, w, px).is_some_and(|e| e <= threshold_sq))
        .collect();
    let inlier_count = inliers.iter().filter(|&&b| b).count();
    if inlier_count < params.min_pnp_inliers {
        return Err(PnpFailed("too few resection inliers"));
    }
    Ok(PnpSolution {
        pose: refined,
        inliers,
    })
}

/// Pose-only Levenberg-Marquardt on squared pixel reprojection error.
pub fn refine_pose<T: Real>(
    initial: &Pose<T>,
    correspondences: &[(Point3<T>, Point2<T>)],
    k: &CameraIntrinsics<T>,
    max_iterations: usize,
) -> Pose<T> {
    let cost = |pose: &Pose<T>| -> T {
        correspondences
            .iter()
            .map(|(w, px)| {
                k.project_camera(&pose.transform(w))
                    .map(|p| (p - px).norm_squared())
                    .unwrap_or_else(|| T::from_config(1e12))
            })
            .fold(T::zero(), |acc, e| acc + e)
    };

    let mut pose = *initial;
    let mut current_cost = cost(&pose);
    let mut lambda = T::from_config(1e-6);
    for _ in 0..max_iterations {
        let mut jtj = Matrix6::<T>::zeros();
        let mut jtr = Vector6::<T>::zeros();
        for (w, px) in correspondences {
            let q = pose.transform(w);
            if q.z <= T::zero() {
                continue;
            }
            let proj = Point2::new(k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
            let r = Vector2::new(proj.x - px.x, proj.y - px.y);
            let inv_z = T::one() / q.z;
            let jp = Matrix2x3::new(
                k.fx * inv_z,
                T::zero(),
                -k.fx * q.x * inv_z * inv_z,
                T::zero(),
                k.fy * inv_z,
                -k.fy * q.y * inv_z * inv_z,
            );
            // d q / d delta_rot = -[q - t]x  (left perturbation), d q / d t = I.
            let rp = q.coords - pose.translation;
            let skew = Matrix3::new(
                T::zero(),
                rp.z,
                -rp.y,
                -rp.z,
                T::zero(),
                rp.x,
                rp.y,
                -rp.x,
                T::zero(),
            );
            let j_rot = jp * skew;
            let j_trans = jp;
            let mut j = nalgebra::Matrix2x6::<T>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&j_rot);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_trans);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let mut damped = jtj;
        for i in 0..6 {
            damped[(i, i)] += lambda * (jtj[(i, i)] + T::from_config(1e-12));
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= T::from_config(10.0);
            continue;
        };
        let delta = chol.solve(&-jtr);
        let trial = pose.retract(
            &Vector3::new(delta[0], delta[1], delta[2]),
            &Vector3::new(delta[3], delta[4], delta[5]),
        );
        let trial_cost = cost(&trial);
        if trial_cost < current_cost {
            let improvement = (current_cost - trial_cost) / current_cost.max(T::from_config(1e-30));
            pose = trial;
            current_cost = trial_cost;
            lambda = (lambda / T::from_config(3.0)).max(T::from_config(1e-12));
            if improvement < T::from_config(1e-12) {
                break;
            }
        } else {
            lambda *= T::from_config(10.0);
            if lambda > T::from_config(1e12) {
                break;
            }
        }
    }
    pose
}

/// Grunert's P3P: camera pose candidates from three world points and the
/// unit bearing vectors of their observations. Up to four solutions.
fn p3p<T: Real>(world: &[Point3<T>; 3], rays: &[Vector3<T>; 3]) -> Vec<Pose<T>> {
    let dist_a = (world[1] - world[2]).norm(); // opposite P1
    let dist_b = (world[0] - world[2]).norm(); // opposite P2
    let dist_c = (world[0] - world[1]).norm(); // opposite P3
    if dist_a <= T::zero() || dist_b <= T::zero() || dist_c <= T::zero() {
        return Vec::new();
    }
    let cos_alpha = rays[1].dot(&rays[2]);
    let cos_beta = rays[0].dot(&rays[2]);
    let cos_gamma = rays[0].dot(&rays[1]);

    let b_sq = dist_b * dist_b;
    let p = dist_a * dist_a / b_sq;
    let q = dist_c * dist_c / b_sq;

    // s2 = u s1, s3 = v s1; eliminate u to get a quartic in v.
    let n2 = p - q - T::one();
    let n1 = -(T::from_config(2.0)) * (p - q) * cos_beta;
    let n0 = p - q + T::one();
    let d1 = -(T::from_config(2.0)) * cos_alpha;
    let d0 = T::from_config(2.0) * cos_gamma;
    let k2 = -q;
    let k1 = T::from_config(2.0) * q * cos_beta;
    let k0 = T::one() - q;

    let two = T::from_config(2.0);
    let coeffs = [
        n2 * n2 + k2 * d1 * d1,
        two * n2 * n1 - two * cos_gamma * (n2 * d1) + two * k2 * d1 * d0 + k1 * d1 * d1,
        n1 * n1 + two * n2 * n0 - two * cos_gamma * (n2 * d0 + n1 * d1)
            + k2 * d0 * d0
            + two * k1 * d1 * d0
            + k0 * d1 * d1,
        two * n1 * n0 - two * cos_gamma * (n1 * d0 + n0 * d1) + k1 * d0 * d0 + two * k0 * d1 * d0,
        n0 * n0 - two * cos_gamma * (n0 * d0) + k0 * d0 * d0,
    ];

    let mut poses = Vec::new();
    for v in real_polynomial_roots(&coeffs) {
        if v <= T::zero() {
            continue;
        }
        let denom = d1 * v + d0;
        if denom.abs() < T::from_config(1e-12) {
            continue;
        }
        let u = (n2 * v * v + n1 * v + n0) / denom;
        if u <= T::zero() {
            continue;
        }
        let s1_sq_denom = T::one() + v * v - two * v * cos_beta;
        if s1_sq_denom <= T::zero() {
            continue;
        }
        let s1 = dist_b / s1_sq_denom.sqrt();
        let (s2, s3) = (u * s1, v * s1);
        let cam_points = [
            Point3::from(rays[0] * s1),
            Point3::from(rays[1] * s2),
            Point3::from(rays[2] * s3),
        ];
        // Rigid world-to-camera fit over the three point pairs.
        let Ok(sim) = umeyama_align(world, &cam_points, false) else {
            continue;
        };
        poses.push(Pose::new(sim.rotation, sim.translation));
    }
    poses
}

/// Real roots of a polynomial with the given coefficients (highest degree
/// first), via the companion-matrix eigenvalues of the deflated monic
/// polynomial, polished with two Newton steps.
fn real_polynomial_roots<T: Real>(coeffs: &[T; 5]) -> Vec<T> {
    let max_coeff = coeffs
        .iter()
        .map(|c| c.abs())
        .fold(T::zero(), |a, b| a.max(b));
    if max_coeff <= T::zero() {
        return Vec::new();
    }
    let eps = T::from_config(1e-12) * max_coeff;
    // Deflate a vanishing leading coefficient down to a cubic/quadratic.
    let lead = coeffs
        .iter()
        .position(|c| c.abs() > eps)
        .unwrap_or(coeffs.len());
    let poly: Vec<T> = coeffs[lead..].to_vec();
    let degree = poly.len().saturating_sub(1);
    if degree == 0 {
        return Vec::new();
    }

    let eigen: Vec<Complex<T>> = match degree {
        1 => vec![Complex::new(-poly[1] / poly[0], T::zero())],
        2 => {
            let (a, b, c) = (poly[0], poly[1], poly[2]);
            let disc = b * b - T::from_config(4.0) * a * c;
            if disc < T::zero() {
                return Vec::new();
            }
            let sq = disc.sqrt();
            vec![
                Complex::new((-b + sq) / (two_t::<T>() * a), T::zero()),
                Complex::new((-b - sq) / (two_t::<T>() * a), T::zero()),
            ]
        }
        3 => {
            let monic: Vec<T> = poly[1..].iter().map(|c| *c / poly[0]).collect();
            let mut companion = Matrix3::<T>::zeros();
            for i in 1..3 {
                companion[(i, i - 1)] = T::one();
            }
            for i in 0..3 {
                companion[(i, 2)] = -monic[2 - i];
            }
            companion.complex_eigenvalues().iter().copied().collect()
        }
        _ => {
            let monic: Vec<T> = poly[1..].iter().map(|c| *c / poly[0]).collect();
            let mut companion = Matrix4::<T>::zeros();
            for i in 1..4 {
                companion[(i, i - 1)] = T::one();
            }
            for i in 0..4 {
                companion[(i, 3)] = -monic[3 - i];
            }
            companion.complex_eigenvalues().iter().copied().collect()
        }
    };

    let eval = |x: T| -> T {
        poly.iter().fold(T::zero(), |acc, &c| acc * x + c)
    };
    let derivative = |x: T| -> T {
        let mut acc = T::zero();
        let deg = poly.len() - 1;
        for (i, &c) in poly.iter().take(deg).enumerate() {
            acc = acc * x + c * T::from_usize(deg - i).unwrap();
        }
        acc
    };

    let imag_tol = T::from_config(1e-6);
    let mut roots = Vec::new();
    for e in eigen {
        if e.im.abs() > imag_tol * (T::one() + e.re.abs()) {
            continue;
        }
        let mut x = e.re;
        for _ in 0..2 {
            let d = derivative(x);
            if d.abs() > T::from_config(1e-30) {
                x -= eval(x) / d;
            }
        }
        roots.push(x);
    }
    roots
}

fn two_t<T: Real>() -> T {
    T::from_config(2.0)
}
