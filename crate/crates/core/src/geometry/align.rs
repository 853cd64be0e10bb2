use super::Degenerate;
use crate::real::Real;
use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};

/// Similarity transform `x ↦ scale · R · x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity<T: Real> {
    pub scale: T,
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Similarity<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords * self.scale + self.translation)
    }

    pub fn inverse(&self) -> Similarity<T> {
        let inv_scale = T::one() / self.scale;
        let rot_inv = self.rotation.inverse();
        Similarity {
            scale: inv_scale,
            rotation: rot_inv,
            translation: -(rot_inv * self.translation) * inv_scale,
        }
    }
}

/// Closed-form least-squares similarity transform minimizing
/// `Σ ‖dst_i − (s·R·src_i + t)‖²`.
///
/// Degenerate when the source points are collinear (the rotation about the
/// line axis is unobservable); planar configurations are fine. With
/// `with_scale = false` the scale is held at 1 (rigid alignment).
pub fn umeyama_align<T: Real>(
    src: &[Point3<T>],
    dst: &[Point3<T>],
    with_scale: bool,
) -> Result<Similarity<T>, Degenerate> {
    let (sim, ambiguous) = umeyama_align_relaxed(src, dst, with_scale)?;
    if ambiguous {
        return Err(Degenerate("collinear points"));
    }
    Ok(sim)
}

/// Like [`umeyama_align`], but collinear sources return a minimizer anyway
/// with the ambiguity flagged: the residual of the fit is well defined even
/// though the rotation about the line axis is not. Trajectory evaluation
/// falls back to this for straight-line tracks.
pub fn umeyama_align_relaxed<T: Real>(
    src: &[Point3<T>],
    dst: &[Point3<T>],
    with_scale: bool,
) -> Result<(Similarity<T>, bool), Degenerate> {
    if src.len() != dst.len() {
        return Err(Degenerate("point sets of unequal length"));
    }
    let n = src.len();
    if n < 3 {
        return Err(Degenerate("alignment needs at least three points"));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();

    let mut mean_src = Vector3::zeros();
    let mut mean_dst = Vector3::zeros();
    for (s, d) in src.iter().zip(dst) {
        mean_src += s.coords;
        mean_dst += d.coords;
    }
    mean_src *= inv_n;
    mean_dst *= inv_n;

    let mut cov = Matrix3::<T>::zeros();
    let mut var_src = T::zero();
    for (s, d) in src.iter().zip(dst) {
        let sc = s.coords - mean_src;
        let dc = d.coords - mean_dst;
        cov += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov *= inv_n;
    var_src *= inv_n;

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(Degenerate("svd failed"))?;
    let v_t = svd.v_t.ok_or(Degenerate("svd failed"))?;
    let sigma = svd.singular_values;

    // Collinear sources leave the rotation about the line unconstrained:
    // the cross-covariance collapses to rank < 2.
    let ambiguous = sigma[1] < T::from_config(1e-12) * sigma[0];

    let mut s_diag = Vector3::from_element(T::one());
    if (u.determinant() * v_t.determinant()) < T::zero() {
        s_diag[2] = -T::one();
    }
    let rot_mat = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot_mat));

    let scale = if with_scale {
        if var_src <= T::zero() {
            return Err(Degenerate("zero-variance source points"));
        }
        sigma.dot(&s_diag) / var_src
    } else {
        T::one()
    };

    let translation = mean_dst - rot_mat * mean_src * scale;
    Ok((
        Similarity {
            scale,
            rotation,
            translation,
        },
        ambiguous,
    ))
}

/// Root-mean-square residual of a similarity alignment over a point set.
pub fn alignment_rmse<T: Real>(sim: &Similarity<T>, src: &[Point3<T>], dst: &[Point3<T>]) -> T {
    let mut sum = T::zero();
    for (s, d) in src.iter().zip(dst) {
        sum += (sim.apply(s) - d).norm_squared();
    }
    (sum / T::from_usize(src.len()).unwrap()).sqrt()
}
