//! Nonlinear least-squares machinery: the sparse Levenberg-Marquardt bundle
//! adjuster shared by all pipelines.

mod ba;

pub use ba::{
    bundle_adjust, linearize_observation, BaCamera, BaObservation, BaProblem, BaReport,
    CameraFreedom, LmConfig,
};
