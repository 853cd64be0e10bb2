//! Geometric kernel: camera model, SE(3) poses, projection, triangulation,
//! two-view geometry, resection, and similarity alignment.
//!
//! Everything in this module is a pure function of its inputs (plus an
//! explicit random source where sampling is involved) and generic over the
//! scalar type.

mod align;
mod camera;
mod epipolar;
mod pnp;
mod pose;
mod triangulate;

pub use align::{alignment_rmse, umeyama_align, umeyama_align_relaxed, Similarity};
pub use camera::{project, CameraIntrinsics};
pub use epipolar::{estimate_relative_pose, sampson_distance_sq, RelativePose};
pub use pnp::{refine_pose, solve_pnp, PnpFailed, PnpSolution};
pub use pose::Pose;
pub use triangulate::triangulate;

use crate::ids::{FrameId, LandmarkId};
use crate::real::Real;
use nalgebra::{Point2, Point3};
use thiserror::Error;

/// Signal that a geometric estimation problem is ill-posed on the given
/// input: insufficient parallax, collinear points, or too few inliers.
/// Callers treat this as a regular outcome, not a fault.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("degenerate geometry: {0}")]
pub struct Degenerate(pub &'static str);

/// A scene point with the frames observing it.
#[derive(Debug, Clone)]
pub struct Landmark<T: Real> {
    pub id: LandmarkId,
    pub position: Point3<T>,
    /// (frame, keypoint index) pairs; a landmark held by a map is observed
    /// by at least two registered frames.
    pub observations: Vec<(FrameId, usize)>,
}

/// A single 2D measurement of a landmark in a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation<T: Real> {
    pub frame_id: FrameId,
    pub landmark_id: LandmarkId,
    pub pixel: Point2<T>,
}

/// Shared RANSAC and inlier-test tuning used by the two-view and resection
/// estimators.
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    /// Hard cap on sampling iterations.
    pub max_iterations: usize,
    /// Early-exit confidence for the adaptive iteration bound.
    pub confidence: f64,
    /// Inlier threshold in pixels (Sampson distance for two-view,
    /// reprojection error for resection).
    pub inlier_threshold_px: f64,
    /// Minimum accepted triangulation angle in radians.
    pub min_triangulation_angle: f64,
    /// Minimum inlier count for a two-view pose to be usable.
    pub min_rel_pose_inliers: usize,
    /// Minimum inlier count for a resection to be usable.
    pub min_pnp_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 1024,
            confidence: 0.999,
            inlier_threshold_px: 2.0,
            min_triangulation_angle: 0.5f64.to_radians(),
            min_rel_pose_inliers: 15,
            min_pnp_inliers: 12,
        }
    }
}
