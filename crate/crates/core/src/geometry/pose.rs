use crate::real::Real;
use nalgebra::{Point3, Rotation3, UnitQuaternion, Vector3};

/// Rigid camera pose, camera-from-world convention: `x_cam = R * x_world + t`.
///
/// Right-handed frames, camera z axis forward (positive depth in front of
/// the camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: UnitQuaternion<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// World point to camera coordinates.
    pub fn transform(&self, point: &Point3<T>) -> Point3<T> {
        self.rotation * point + self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let rot_inv = self.rotation.inverse();
        Pose {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Point3<T> {
        Point3::from(-(self.rotation.inverse() * self.translation))
    }

    /// Left-multiplicative update used by the optimizers:
    /// `R ← exp(delta_rot) R`, `t ← t + delta_trans`.
    pub fn retract(&self, delta_rot: &Vector3<T>, delta_trans: &Vector3<T>) -> Pose<T> {
        let dq = UnitQuaternion::from_scaled_axis(*delta_rot);
        Pose {
            rotation: dq * self.rotation,
            translation: self.translation + *delta_trans,
        }
    }

    /// Angle of the relative rotation between two poses, in radians.
    pub fn rotation_angle_to(&self, other: &Pose<T>) -> T {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn rotation_matrix(&self) -> Rotation3<T> {
        self.rotation.to_rotation_matrix()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        Pose::new(UnitQuaternion::from_scaled_axis(axis), t)
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let ident = pose.compose(&pose.inverse());
            assert!(ident.rotation.angle() < 1e-9);
            assert!(ident.translation.norm() < 1e-9);
            assert!((pose.rotation.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn composition_matches_pointwise_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let p = Point3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            let via_compose = a.compose(&b).transform(&p);
            let via_apply = a.transform(&b.transform(&p));
            assert_relative_eq!(via_compose, via_apply, epsilon = 1e-9);
        }
    }

    #[test]
    fn center_maps_to_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = random_pose(&mut rng);
        let center = pose.center();
        assert_relative_eq!(
            pose.transform(&center),
            Point3::origin(),
            epsilon = 1e-12
        );
    }
}
