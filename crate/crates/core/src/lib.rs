//! Multi-agent collaborative aerial mapping engine and simulation harness.
//!
//! The crate provides three reconstruction pipelines over a shared geometric
//! kernel — offline incremental mapping, a server-client incremental mapper
//! with sub-map merging, and a tracking-based agent front-end with a
//! centralized back-end — plus synthetic scenario generation and a
//! trajectory-accuracy evaluation harness.
//!
//! The geometric kernel ([`geometry`] and [`optim`]) is generic over the
//! scalar type; the rest of the crate works with the `f64` aliases exported
//! at the crate root.

pub mod agent;
pub mod collab;
pub mod config;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod ids;
pub mod mapper;
pub mod optim;
pub mod real;
pub mod scenario;

pub use ids::{AgentId, FrameId, LandmarkId, SubmapId};
pub use real::Real;

/// Camera intrinsics at the working precision.
pub type CameraIntrinsics = geometry::CameraIntrinsics<f64>;
/// Camera-from-world pose at the working precision.
pub type Pose = geometry::Pose<f64>;
/// Similarity transform at the working precision.
pub type Similarity = geometry::Similarity<f64>;
/// Triangulated scene point at the working precision.
pub type Landmark = geometry::Landmark<f64>;
/// 2D pixel location at the working precision.
pub type Pixel = nalgebra::Point2<f64>;
/// 3D point at the working precision.
pub type Point = nalgebra::Point3<f64>;
