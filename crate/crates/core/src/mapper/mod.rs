//! Incremental mapping core: the sparse map, frame registration by
//! resection, triangulation of new tie points, outlier filtering, bundle
//! adjustment, and the offline reconstruction driver.

mod adjust;
mod map;
mod offline;
mod register;

pub use adjust::{bundle_adjust, bundle_adjust_local, similarity_weights, BaOptions, WeightMode};
pub use map::{write_map, MapAuditError, MapFrame, SparseMap};
pub use offline::{
    exhaustive_match, reconstruct_offline, MatchGraph, OfflineOptions, ReconstructionError,
};
pub use register::{
    filter_outliers, initialize_map, register_at_pose, register_frame, select_initial_pair,
    FilterReport, InitialPair, InitializationTooThin, RegisterError, RegistrationStats,
};

use crate::geometry::RansacParams;

/// Mapper tuning shared by the offline pipeline and the collaboration
/// server.
#[derive(Debug, Clone, Copy)]
pub struct MapperConfig {
    pub ransac: RansacParams,
    pub ba: BaOptions,
    /// Variable cameras in a local adjustment (most covisible frames).
    pub local_window: usize,
    /// Run a global adjustment every this many registrations.
    pub global_every: usize,
    /// Reprojection threshold for outlier filtering, pixels.
    pub filter_tau_px: f64,
    /// Minimum triangulated landmarks for a two-view initialization.
    pub min_init_landmarks: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            ba: BaOptions::default(),
            local_window: 5,
            global_every: 10,
            filter_tau_px: 2.0,
            min_init_landmarks: 16,
        }
    }
}
