use super::camera::CameraIntrinsics;
use super::pose::Pose;
use super::{Degenerate, RansacParams};
use crate::real::Real;
use nalgebra::{DMatrix, Matrix3, Point2, Point3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;

/// Two-view relative pose, camera-2-from-camera-1, translation scaled to
/// unit norm (monocular scale ambiguity).
#[derive(Debug, Clone)]
pub struct RelativePose<T: Real> {
    pub pose: Pose<T>,
    /// Essential matrix the inlier mask was computed against, in normalized
    /// image coordinates.
    pub essential: Matrix3<T>,
    /// Per-input-match inlier flags.
    pub inliers: Vec<bool>,
    /// Median triangulation angle of the inliers, radians.
    pub median_angle: T,
}

impl<T: Real> RelativePose<T> {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Squared Sampson distance of a normalized-coordinate match to an
/// essential matrix.
pub fn sampson_distance_sq<T: Real>(e: &Matrix3<T>, x1: &Point2<T>, x2: &Point2<T>) -> T {
    let h1 = Vector3::new(x1.x, x1.y, T::one());
    let h2 = Vector3::new(x2.x, x2.y, T::one());
    let ex1 = e * h1;
    let etx2 = e.transpose() * h2;
    let err = h2.dot(&ex1);
    let denom = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if denom <= T::zero() {
        return T::max_value().unwrap();
    }
    err * err / denom
}

/// Estimate the relative pose of two calibrated views from pixel matches.
///
/// Normalized 8-point essential estimation inside RANSAC with a Sampson
/// inlier test, then cheirality disambiguation of the four pose candidates.
/// Degenerate when fewer than `min_rel_pose_inliers` survive or the median
/// inlier triangulation angle is below `min_triangulation_angle` (pure
/// rotation, planar ambiguity, or too-distant structure).
pub fn estimate_relative_pose<T: Real, R: Rng>(
    matches: &[(Point2<T>, Point2<T>)],
    k1: &CameraIntrinsics<T>,
    k2: &CameraIntrinsics<T>,
    params: &RansacParams,
    rng: &mut R,
) -> Result<RelativePose<T>, Degenerate> {
    if matches.len() < 8 {
        return Err(Degenerate("relative pose needs at least 8 matches"));
    }

    let normalized: Vec<(Point2<T>, Point2<T>)> = matches
        .iter()
        .map(|(p1, p2)| (k1.normalize(p1), k2.normalize(p2)))
        .collect();

    // Sampson threshold expressed in normalized coordinates.
    let f_mean = (k1.fx + k1.fy + k2.fx + k2.fy) / T::from_config(4.0);
    let threshold = T::from_config(params.inlier_threshold_px) / f_mean;
    let threshold_sq = threshold * threshold;

    let n = normalized.len();
    let mut best_mask: Option<Vec<bool>> = None;
    let mut best_count = 0usize;
    let mut iteration_cap = params.max_iterations;
    let mut iteration = 0usize;
    while iteration < iteration_cap {
        iteration += 1;
        let sample = rand::seq::index::sample(rng, n, 8);
        let subset: Vec<(Point2<T>, Point2<T>)> =
            sample.iter().map(|i| normalized[i]).collect();
        let Some(e) = eight_point_essential(&subset) else {
            continue;
        };
        let mask: Vec<bool> = normalized
            .iter()
            .map(|(x1, x2)| sampson_distance_sq(&e, x1, x2) <= threshold_sq)
            .collect();
        let count = mask.iter().filter(|&&b| b).count();
        if count > best_count {
            best_count = count;
            best_mask = Some(mask);
            iteration_cap = iteration_cap.min(adaptive_iterations(
                count as f64 / n as f64,
                8,
                params.confidence,
                params.max_iterations,
            ));
        }
    }

    let mut mask = best_mask.ok_or(Degenerate("no essential-matrix consensus"))?;
    #[cfg(feature = "debug-epipolar")]
    eprintln!("ransac best_count={best_count} after {iteration} iterations");
    if best_count < 8 {
        return Err(Degenerate("too few epipolar inliers"));
    }

    // Refit on the consensus set and recompute the mask against the refit.
    let consensus: Vec<(Point2<T>, Point2<T>)> = normalized
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| *m)
        .collect();
    let essential =
        eight_point_essential(&consensus).ok_or(Degenerate("degenerate inlier configuration"))?;
    mask = normalized
        .iter()
        .map(|(x1, x2)| sampson_distance_sq(&essential, x1, x2) <= threshold_sq)
        .collect();
    let inlier_count = mask.iter().filter(|&&b| b).count();
    if inlier_count < params.min_rel_pose_inliers {
        return Err(Degenerate("too few epipolar inliers"));
    }

    let inlier_points: Vec<(Point2<T>, Point2<T>)> = normalized
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| *m)
        .collect();
    let mut pose = disambiguate_pose(&essential, &inlier_points)
        .ok_or(Degenerate("cheirality test rejected all pose candidates"))?;

    // Nonlinear polish: Gauss-Newton on the Sampson distances over the
    // five pose parameters (rotation and translation direction). The linear
    // eight-point refit alone leaves a noticeable rotation bias under noise.
    pose = refine_relative_pose(&pose, &inlier_points);
    let essential = essential_from_pose(&pose);
    mask = normalized
        .iter()
        .map(|(x1, x2)| sampson_distance_sq(&essential, x1, x2) <= threshold_sq)
        .collect();
    let inlier_count = mask.iter().filter(|&&b| b).count();
    if inlier_count < params.min_rel_pose_inliers {
        return Err(Degenerate("too few epipolar inliers"));
    }
    let inlier_points: Vec<(Point2<T>, Point2<T>)> = normalized
        .iter()
        .zip(&mask)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| *m)
        .collect();

    // Median parallax over the inliers under the chosen pose.
    let mut angles: Vec<T> = inlier_points
        .iter()
        .filter_map(|(x1, x2)| {
            let (z1, _, point) = triangulate_normalized(&pose, x1, x2)?;
            if z1 <= T::zero() {
                return None;
            }
            let c2 = pose.center().coords;
            let r1 = point.coords;
            let r2 = point.coords - c2;
            let denom = r1.norm() * r2.norm();
            if denom <= T::zero() {
                return None;
            }
            Some(nalgebra::clamp(r1.dot(&r2) / denom, -T::one(), T::one()).acos())
        })
        .collect();
    if angles.is_empty() {
        return Err(Degenerate("no triangulable inliers"));
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_angle = angles[angles.len() / 2];
    if median_angle < T::from_config(params.min_triangulation_angle) {
        return Err(Degenerate("median parallax below threshold"));
    }

    Ok(RelativePose {
        pose,
        essential,
        inliers: mask,
        median_angle,
    })
}

pub(crate) fn adaptive_iterations(
    inlier_ratio: f64,
    sample_size: u32,
    confidence: f64,
    cap: usize,
) -> usize {
    if inlier_ratio <= 0.0 {
        return cap;
    }
    let p_good = inlier_ratio.powi(sample_size as i32);
    if p_good >= 1.0 - 1e-12 {
        return 1;
    }
    let needed = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if !needed.is_finite() {
        return cap;
    }
    (needed.ceil().max(1.0) as usize).min(cap)
}

/// Normalized (Hartley) 8-point essential estimation on ≥ 8 matches in
/// normalized image coordinates, projected onto the essential manifold.
fn eight_point_essential<T: Real>(matches: &[(Point2<T>, Point2<T>)]) -> Option<Matrix3<T>> {
    if matches.len() < 8 {
        return None;
    }
    let (t1, pts1) = hartley_normalize(matches.iter().map(|m| m.0));
    let (t2, pts2) = hartley_normalize(matches.iter().map(|m| m.1));

    let mut a = DMatrix::<T>::zeros(matches.len(), 9);
    for (i, (x1, x2)) in pts1.iter().zip(&pts2).enumerate() {
        a[(i, 0)] = x2.x * x1.x;
        a[(i, 1)] = x2.x * x1.y;
        a[(i, 2)] = x2.x;
        a[(i, 3)] = x2.y * x1.x;
        a[(i, 4)] = x2.y * x1.y;
        a[(i, 5)] = x2.y;
        a[(i, 6)] = x1.x;
        a[(i, 7)] = x1.y;
        a[(i, 8)] = T::one();
    }
    // Null vector of A via the smallest eigenpair of AᵀA; a thin SVD of the
    // minimal 8x9 system would not expose the null space.
    let ata = a.transpose() * &a;
    let eigen = ata.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..9 {
        if eigen.eigenvalues[i] < eigen.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let f = eigen.eigenvectors.column(min_idx);
    let e_raw = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);

    // Undo the conditioning transforms, then enforce the (1, 1, 0) spectrum.
    let e_denorm = t2.transpose() * e_raw * t1;
    let svd_e = e_denorm.svd(true, true);
    let u = svd_e.u?;
    let v_t = svd_e.v_t?;
    let d = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), T::zero()));
    Some(u * d * v_t)
}

fn hartley_normalize<T: Real>(
    points: impl Iterator<Item = Point2<T>> + Clone,
) -> (Matrix3<T>, Vec<Point2<T>>) {
    let pts: Vec<Point2<T>> = points.collect();
    let n = T::from_usize(pts.len()).unwrap();
    let mut centroid = Vector2::zeros();
    for p in &pts {
        centroid += p.coords;
    }
    centroid /= n;
    let mut mean_dist = T::zero();
    for p in &pts {
        mean_dist += (p.coords - centroid).norm();
    }
    mean_dist /= n;
    let scale = if mean_dist > T::zero() {
        T::from_config(std::f64::consts::SQRT_2) / mean_dist
    } else {
        T::one()
    };
    let transform = Matrix3::new(
        scale,
        T::zero(),
        -scale * centroid.x,
        T::zero(),
        scale,
        -scale * centroid.y,
        T::zero(),
        T::zero(),
        T::one(),
    );
    let mapped = pts
        .iter()
        .map(|p| Point2::new(scale * (p.x - centroid.x), scale * (p.y - centroid.y)))
        .collect();
    (transform, mapped)
}

fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// `E = [t]x R` for a cam2-from-cam1 pose.
fn essential_from_pose<T: Real>(pose: &Pose<T>) -> Matrix3<T> {
    skew(&pose.translation) * pose.rotation.to_rotation_matrix().matrix()
}

/// Gauss-Newton over (rotation, unit-translation tangent) minimizing the
/// signed Sampson distances of the inlier matches.
fn refine_relative_pose<T: Real>(
    initial: &Pose<T>,
    matches: &[(Point2<T>, Point2<T>)],
) -> Pose<T> {
    let sampson = |pose: &Pose<T>, x1: &Point2<T>, x2: &Point2<T>| -> T {
        let e = essential_from_pose(pose);
        let h1 = Vector3::new(x1.x, x1.y, T::one());
        let h2 = Vector3::new(x2.x, x2.y, T::one());
        let ex1 = e * h1;
        let etx2 = e.transpose() * h2;
        let denom =
            (ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y).sqrt();
        if denom <= T::zero() {
            return T::zero();
        }
        h2.dot(&ex1) / denom
    };
    let cost = |pose: &Pose<T>| -> T {
        matches
            .iter()
            .fold(T::zero(), |acc, (x1, x2)| {
                let d = sampson(pose, x1, x2);
                acc + d * d
            })
    };

    let mut pose = *initial;
    let mut current = cost(&pose);
    let step_from = |pose: &Pose<T>, delta: &nalgebra::SVector<T, 5>| -> Pose<T> {
        let dir = pose.translation.normalize();
        let seed = if dir.x.abs() < T::from_config(0.9) {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let b1 = dir.cross(&seed).normalize();
        let b2 = dir.cross(&b1);
        let rotated = pose.retract(&Vector3::new(delta[0], delta[1], delta[2]), &Vector3::zeros());
        let mut t = pose.translation + b1 * delta[3] + b2 * delta[4];
        let n = t.norm();
        if n > T::zero() {
            t /= n;
        }
        Pose::new(rotated.rotation, t)
    };

    let mut lambda = T::from_config(1e-8);
    for _ in 0..25 {
        let n = matches.len();
        let mut jac = DMatrix::<T>::zeros(n, 5);
        let mut res = nalgebra::DVector::<T>::zeros(n);
        for (i, (x1, x2)) in matches.iter().enumerate() {
            res[i] = sampson(&pose, x1, x2);
        }
        let h = T::from_config(1e-7);
        for p in 0..5 {
            let mut dplus = nalgebra::SVector::<T, 5>::zeros();
            dplus[p] = h;
            let pose_plus = step_from(&pose, &dplus);
            dplus[p] = -h;
            let pose_minus = step_from(&pose, &dplus);
            for (i, (x1, x2)) in matches.iter().enumerate() {
                jac[(i, p)] =
                    (sampson(&pose_plus, x1, x2) - sampson(&pose_minus, x1, x2))
                        / (T::from_config(2.0) * h);
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj.clone();
            for i in 0..5 {
                damped[(i, i)] += lambda * (jtj[(i, i)] + T::from_config(1e-12));
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= T::from_config(10.0);
                continue;
            };
            let step = chol.solve(&jtr);
            let delta = nalgebra::SVector::<T, 5>::from_iterator(step.iter().map(|v| -*v));
            let trial = step_from(&pose, &delta);
            let trial_cost = cost(&trial);
            if trial_cost < current {
                let gain = (current - trial_cost) / current.max(T::from_config(1e-30));
                pose = trial;
                current = trial_cost;
                lambda = (lambda / T::from_config(3.0)).max(T::from_config(1e-12));
                improved = true;
                if gain < T::from_config(1e-12) {
                    return pose;
                }
                break;
            }
            lambda *= T::from_config(10.0);
        }
        if !improved {
            break;
        }
    }
    pose
}

/// Pick the pose with the best cheirality vote among the four `(R, ±t)`
/// decompositions of an essential matrix.
fn disambiguate_pose<T: Real>(
    essential: &Matrix3<T>,
    matches: &[(Point2<T>, Point2<T>)],
) -> Option<Pose<T>> {
    let svd = essential.svd(true, true);
    let mut u = svd.u?;
    let mut v_t = svd.v_t?;
    if u.determinant() < T::zero() {
        u = -u;
    }
    if v_t.determinant() < T::zero() {
        v_t = -v_t;
    }
    let w = Matrix3::new(
        T::zero(),
        -T::one(),
        T::zero(),
        T::one(),
        T::zero(),
        T::zero(),
        T::zero(),
        T::zero(),
        T::one(),
    );
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();

    let vote_sample: Vec<&(Point2<T>, Point2<T>)> = matches.iter().take(64).collect();
    let mut best: Option<(usize, Pose<T>)> = None;
    for rot_mat in [r1, r2] {
        let rotation =
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot_mat));
        for sign in [T::one(), -T::one()] {
            let pose = Pose::new(rotation, t * sign);
            let votes = vote_sample
                .iter()
                .filter(|(x1, x2)| {
                    triangulate_normalized(&pose, x1, x2)
                        .map(|(z1, z2, _)| z1 > T::zero() && z2 > T::zero())
                        .unwrap_or(false)
                })
                .count();
            if best.as_ref().is_none_or(|(b, _)| votes > *b) {
                best = Some((votes, pose));
            }
        }
    }
    // A sound pose puts nearly every inlier in front of both cameras. A bare
    // majority is what the twisted decomposition of a pure-rotation pair
    // produces, so demand strong support.
    let min_votes = (vote_sample.len() * 3) / 4;
    best.and_then(|(votes, pose)| (votes > min_votes.max(1)).then_some(pose))
}

/// Two-ray triangulation in normalized coordinates for a cam2-from-cam1
/// pose. Returns the depths in both cameras and the point in camera-1
/// coordinates.
pub(crate) fn triangulate_normalized<T: Real>(
    pose21: &Pose<T>,
    x1: &Point2<T>,
    x2: &Point2<T>,
) -> Option<(T, T, Point3<T>)> {
    let f1 = Vector3::new(x1.x, x1.y, T::one());
    let f2 = Vector3::new(x2.x, x2.y, T::one());
    let rf1 = pose21.rotation * f1;
    // z1 * (R f1) - z2 * f2 = -t, least squares in (z1, z2).
    let a00 = rf1.dot(&rf1);
    let a01 = -rf1.dot(&f2);
    let a11 = f2.dot(&f2);
    let b0 = -rf1.dot(&pose21.translation);
    let b1 = f2.dot(&pose21.translation);
    let det = a00 * a11 - a01 * a01;
    if det.abs() < T::from_config(1e-18) {
        return None;
    }
    let z1 = (b0 * a11 - b1 * a01) / det;
    let z2 = (a00 * b1 - a01 * b0) / det;
    Some((z1, z2, Point3::from(f1 * z1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    fn scene_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(6.0..14.0),
                )
            })
            .collect()
    }

    #[test]
    fn pure_translation_recovered_exactly() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points = scene_points(&mut rng, 50);
        let pose2 = Pose::new(UnitQuaternion::identity(), Vector3::new(-1.0, 0.0, 0.0));
        let matches: Vec<_> = points
            .iter()
            .filter_map(|p| {
                Some((
                    project(p, &Pose::identity(), &k)?,
                    project(p, &pose2, &k)?,
                ))
            })
            .collect();
        assert_eq!(matches.len(), 50);
        let rel =
            estimate_relative_pose(&matches, &k, &k, &RansacParams::default(), &mut rng).unwrap();
        assert_eq!(rel.inlier_count(), 50);
        assert!(rel.pose.rotation.angle() < 1e-6);
        let dir = rel.pose.translation.normalize();
        assert!((dir.x.abs() - 1.0).abs() < 1e-6);
        assert!(dir.y.abs() < 1e-6 && dir.z.abs() < 1e-6);
    }

    #[test]
    fn pure_rotation_is_degenerate() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points = scene_points(&mut rng, 50);
        let pose2 = Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.12, 0.0)),
            Vector3::zeros(),
        );
        let matches: Vec<_> = points
            .iter()
            .filter_map(|p| {
                Some((
                    project(p, &Pose::identity(), &k)?,
                    project(p, &pose2, &k)?,
                ))
            })
            .collect();
        assert!(matches.len() >= 40);
        assert!(
            estimate_relative_pose(&matches, &k, &k, &RansacParams::default(), &mut rng).is_err()
        );
    }

    #[test]
    fn inlier_mask_satisfies_sampson_threshold() {
        let k = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let points = scene_points(&mut rng, 80);
        let pose2 = Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.02, -0.05, 0.01)),
            Vector3::new(-0.8, 0.1, -0.3).normalize(),
        );
        let mut matches: Vec<_> = points
            .iter()
            .filter_map(|p| {
                Some((
                    project(p, &Pose::identity(), &k)?,
                    project(p, &pose2, &k)?,
                ))
            })
            .collect();
        // Corrupt a quarter of the matches.
        let n = matches.len();
        for i in 0..n / 4 {
            matches[i * 4].1 = Point2::new(
                rng.random_range(0.0..1920.0),
                rng.random_range(0.0..1080.0),
            );
        }
        let params = RansacParams::default();
        let rel = estimate_relative_pose(&matches, &k, &k, &params, &mut rng).unwrap();
        let threshold = params.inlier_threshold_px / 1000.0;
        for (i, &inl) in rel.inliers.iter().enumerate() {
            if inl {
                let x1 = k.normalize(&matches[i].0);
                let x2 = k.normalize(&matches[i].1);
                assert!(
                    sampson_distance_sq(&rel.essential, &x1, &x2) <= threshold * threshold
                );
            }
        }
    }
}
