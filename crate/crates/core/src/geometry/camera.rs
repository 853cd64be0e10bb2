use super::pose::Pose;
use crate::real::Real;
use nalgebra::{Point2, Point3, Vector3};
use thiserror::Error;

/// Pinhole calibration without distortion terms. Cameras are pre-calibrated
/// inputs; none of the pipelines refine intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid camera intrinsics: {0}")]
pub struct InvalidIntrinsics(pub &'static str);

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: u32,
        height: u32,
    ) -> Result<Self, InvalidIntrinsics> {
        if fx <= T::zero() || fy <= T::zero() {
            return Err(InvalidIntrinsics("focal lengths must be positive"));
        }
        let (w, h) = (T::from_u32(width).unwrap(), T::from_u32(height).unwrap());
        if cx < T::zero() || cx >= w || cy < T::zero() || cy >= h {
            return Err(InvalidIntrinsics("principal point outside the image"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Project a point given in camera coordinates. `None` when the point is
    /// at non-positive depth (behind the camera); this is a regular outcome,
    /// not an error. The pixel is not clipped to the image bounds.
    pub fn project_camera(&self, p: &Point3<T>) -> Option<Point2<T>> {
        if p.z <= T::zero() {
            return None;
        }
        Some(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Pixel to normalized image coordinates `((u-cx)/fx, (v-cy)/fy)`.
    pub fn normalize(&self, pixel: &Point2<T>) -> Point2<T> {
        Point2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    /// Camera-frame point on the ray through `pixel` at the given depth.
    pub fn backproject(&self, pixel: &Point2<T>, depth: T) -> Point3<T> {
        let n = self.normalize(pixel);
        Point3::new(n.x * depth, n.y * depth, depth)
    }

    /// Unit ray direction through `pixel`, in camera coordinates.
    pub fn ray(&self, pixel: &Point2<T>) -> Vector3<T> {
        let n = self.normalize(pixel);
        Vector3::new(n.x, n.y, T::one()).normalize()
    }

    pub fn contains(&self, pixel: &Point2<T>) -> bool {
        let (w, h) = (
            T::from_u32(self.width).unwrap(),
            T::from_u32(self.height).unwrap(),
        );
        pixel.x >= T::zero() && pixel.x < w && pixel.y >= T::zero() && pixel.y < h
    }
}

/// Project a world point through a camera-from-world pose. `None` means the
/// point is behind the camera.
pub fn project<T: Real>(
    point: &Point3<T>,
    pose: &Pose<T>,
    k: &CameraIntrinsics<T>,
) -> Option<Point2<T>> {
    k.project_camera(&pose.transform(point))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_camera() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let k = reference_camera();
        let px = project(&Point3::new(0.0, 0.0, 5.0), &Pose::identity(), &k).unwrap();
        assert_relative_eq!(px, Point2::new(960.0, 540.0), epsilon = 1e-12);
    }

    #[test]
    fn offset_point_projects_by_pinhole_formula() {
        let k = reference_camera();
        let px = project(&Point3::new(1.0, 0.0, 5.0), &Pose::identity(), &k).unwrap();
        assert_relative_eq!(px, Point2::new(1160.0, 540.0), epsilon = 1e-12);
    }

    #[test]
    fn negative_depth_is_behind() {
        let k = reference_camera();
        assert!(project(&Point3::new(0.0, 0.0, -1.0), &Pose::identity(), &k).is_none());
    }

    #[test]
    fn project_backproject_roundtrip() {
        let k = reference_camera();
        for &(u, v, d) in &[(12.5, 800.0, 3.0), (1919.0, 0.5, 40.0), (960.0, 540.0, 1.0)] {
            let pixel = Point2::new(u, v);
            let p = k.backproject(&pixel, d);
            let back = k.project_camera(&p).unwrap();
            assert_relative_eq!(back, pixel, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(-1.0, 1.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 0.0, 10, 10).is_err());
    }
}
