use super::camera::CameraIntrinsics;
use super::pose::Pose;
use super::Degenerate;
use crate::real::Real;
use nalgebra::{DMatrix, Matrix2x3, Matrix3, Point2, Point3, Vector2, Vector3};

/// Estimate a scene point from two or more posed observations.
///
/// Linear DLT solve followed by one Gauss-Newton step on the pixel
/// reprojection error. Degenerate when the maximum pairwise ray angle is
/// below `min_angle` (radians) or any observing camera sees the point at
/// non-positive depth.
pub fn triangulate<T: Real>(
    observations: &[(Pose<T>, CameraIntrinsics<T>, Point2<T>)],
    min_angle: T,
) -> Result<Point3<T>, Degenerate> {
    if observations.len() < 2 {
        return Err(Degenerate("triangulation needs at least two observations"));
    }

    // DLT rows: x_n * (r3·X + t3) - (r1·X + t1) = 0 in normalized coordinates.
    let mut a = DMatrix::<T>::zeros(2 * observations.len(), 4);
    for (i, (pose, k, pixel)) in observations.iter().enumerate() {
        let n = k.normalize(pixel);
        let rot = pose.rotation.to_rotation_matrix();
        let m = rot.matrix();
        let t = pose.translation;
        for col in 0..3 {
            a[(2 * i, col)] = n.x * m[(2, col)] - m[(0, col)];
            a[(2 * i + 1, col)] = n.y * m[(2, col)] - m[(1, col)];
        }
        a[(2 * i, 3)] = n.x * t.z - t.x;
        a[(2 * i + 1, 3)] = n.y * t.z - t.y;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Degenerate("svd failed"))?;
    let h = v_t.row(v_t.nrows() - 1);
    let w = h[3];
    let scale_ref = h.norm();
    if w.abs() < T::from_config(1e-12) * scale_ref {
        return Err(Degenerate("point at infinity"));
    }
    let mut point = Point3::new(h[0] / w, h[1] / w, h[2] / w);

    // One Gauss-Newton step on the reprojection residuals.
    if let Some(refined) = gauss_newton_step(observations, &point) {
        point = refined;
    }

    // Cheirality in every observing camera.
    for (pose, _, _) in observations {
        if pose.transform(&point).z <= T::zero() {
            return Err(Degenerate("triangulated point behind a camera"));
        }
    }

    // Parallax: maximum pairwise angle between viewing rays.
    let centers: Vec<Vector3<T>> = observations
        .iter()
        .map(|(pose, _, _)| pose.center().coords)
        .collect();
    let mut max_angle = T::zero();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            let ri = point.coords - centers[i];
            let rj = point.coords - centers[j];
            let denom = ri.norm() * rj.norm();
            if denom <= T::zero() {
                continue;
            }
            let cos = nalgebra::clamp(ri.dot(&rj) / denom, -T::one(), T::one());
            max_angle = max_angle.max(cos.acos());
        }
    }
    if max_angle < min_angle {
        return Err(Degenerate("insufficient parallax"));
    }

    Ok(point)
}

fn gauss_newton_step<T: Real>(
    observations: &[(Pose<T>, CameraIntrinsics<T>, Point2<T>)],
    point: &Point3<T>,
) -> Option<Point3<T>> {
    let mut jtj = Matrix3::<T>::zeros();
    let mut jtr = Vector3::<T>::zeros();
    for (pose, k, pixel) in observations {
        let q = pose.transform(point);
        if q.z <= T::zero() {
            return None;
        }
        let proj = k.project_camera(&q)?;
        let r = Vector2::new(proj.x - pixel.x, proj.y - pixel.y);
        let inv_z = T::one() / q.z;
        let jp = Matrix2x3::new(
            k.fx * inv_z,
            T::zero(),
            -k.fx * q.x * inv_z * inv_z,
            T::zero(),
            k.fy * inv_z,
            -k.fy * q.y * inv_z * inv_z,
        );
        let j = jp * pose.rotation.to_rotation_matrix().matrix();
        jtj += j.transpose() * j;
        jtr += j.transpose() * r;
    }
    let delta = jtj.cholesky()?.solve(&-jtr);
    Some(point + delta)
}
