//! Run-wide tunables and the line-oriented `key = value` config format with
//! dotted keys, shared by scenario files and command-line overrides.

use crate::agent::AgentConfig;
use crate::collab::CollabConfig;
use crate::eval::EvalConfig;
use crate::ids::AgentId;
use crate::mapper::{MapperConfig, WeightMode};
use crate::scenario::{FlightPlan, HeadingMode, ScenarioSpec, YawManeuver};
use crate::CameraIntrinsics;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {reason}")]
    BadValue { key: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
}

fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| bad(key, "not a number"))
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax { line: i + 1 });
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// All pipeline tunables, resolvable from config files and `--set` overrides.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mapper: MapperConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    pub n_merge: usize,
    pub retrieval_k: usize,
    pub s_pr: f64,
    pub min_bridge_matches: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let collab = CollabConfig::default();
        Self {
            mapper: MapperConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            n_merge: collab.n_merge,
            retrieval_k: collab.retrieval_k,
            s_pr: collab.s_pr,
            min_bridge_matches: collab.min_bridge_matches,
        }
    }
}

impl PipelineConfig {
    /// Collaboration-server view of these tunables.
    pub fn collab(&self, match_seed: u64) -> CollabConfig {
        CollabConfig {
            n_merge: self.n_merge,
            retrieval_k: self.retrieval_k,
            s_pr: self.s_pr,
            min_bridge_matches: self.min_bridge_matches,
            mapper: self.mapper,
            match_seed,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "geometry.theta_tri_min_deg" => {
                self.mapper.ransac.min_triangulation_angle =
                    parse_num::<f64>(key, value)?.to_radians();
            }
            "geometry.ransac_iterations" => {
                self.mapper.ransac.max_iterations = parse_num(key, value)?;
            }
            "geometry.confidence" => self.mapper.ransac.confidence = parse_num(key, value)?,
            "geometry.tau_px" => self.mapper.ransac.inlier_threshold_px = parse_num(key, value)?,
            "geometry.min_rel_pose_inliers" => {
                self.mapper.ransac.min_rel_pose_inliers = parse_num(key, value)?;
            }
            "geometry.min_pnp_inliers" => {
                self.mapper.ransac.min_pnp_inliers = parse_num(key, value)?;
            }
            "mapper.ba_max_iterations" => self.mapper.ba.max_iterations = parse_num(key, value)?,
            "mapper.huber_delta" => self.mapper.ba.huber_delta = parse_num(key, value)?,
            "mapper.convergence_tol" => self.mapper.ba.convergence_tol = parse_num(key, value)?,
            "mapper.weight_mode" => {
                self.mapper.ba.weight_mode = match value.trim() {
                    "uniform" => WeightMode::Uniform,
                    "similarity" => WeightMode::Similarity,
                    other => return Err(bad(key, format!("unknown mode `{other}`"))),
                };
            }
            "mapper.local_window" => self.mapper.local_window = parse_num(key, value)?,
            "mapper.global_every" => self.mapper.global_every = parse_num(key, value)?,
            "mapper.filter_tau_px" => self.mapper.filter_tau_px = parse_num(key, value)?,
            "mapper.min_init_landmarks" => {
                self.mapper.min_init_landmarks = parse_num(key, value)?;
            }
            "collab.n_merge" => self.n_merge = parse_num(key, value)?,
            "collab.retrieval_k" => {
                self.retrieval_k = if value.trim() == "inf" {
                    usize::MAX
                } else {
                    parse_num(key, value)?
                };
            }
            "collab.s_pr" => self.s_pr = parse_num(key, value)?,
            "collab.min_bridge_matches" => self.min_bridge_matches = parse_num(key, value)?,
            "agent.t_lost" => self.agent.t_lost = parse_num(key, value)?,
            "agent.keyframe_ratio" => self.agent.keyframe_ratio = parse_num(key, value)?,
            "agent.keyframe_max_gap" => self.agent.keyframe_max_gap = parse_num(key, value)?,
            "agent.frame_rate" => self.agent.frame_rate = parse_num(key, value)?,
            "agent.local_window" => self.agent.local_window = parse_num(key, value)?,
            "eval.d_max" => self.eval.d_max = parse_num(key, value)?,
            "eval.extent_ratio_min" => self.eval.extent_ratio_min = parse_num(key, value)?,
            "eval.association_window" => self.eval.association_window = parse_num(key, value)?,
            "eval.completeness_threshold" => {
                self.eval.completeness_threshold = parse_num(key, value)?;
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Sorted `key = value` lines reproducing this configuration.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let weight_mode = match self.mapper.ba.weight_mode {
            WeightMode::Uniform => "uniform",
            WeightMode::Similarity => "similarity",
        };
        let retrieval = if self.retrieval_k == usize::MAX {
            "inf".to_string()
        } else {
            self.retrieval_k.to_string()
        };
        vec![
            (
                "geometry.theta_tri_min_deg".into(),
                format!("{:?}", self.mapper.ransac.min_triangulation_angle.to_degrees()),
            ),
            (
                "geometry.ransac_iterations".into(),
                self.mapper.ransac.max_iterations.to_string(),
            ),
            (
                "geometry.confidence".into(),
                format!("{:?}", self.mapper.ransac.confidence),
            ),
            (
                "geometry.tau_px".into(),
                format!("{:?}", self.mapper.ransac.inlier_threshold_px),
            ),
            (
                "geometry.min_rel_pose_inliers".into(),
                self.mapper.ransac.min_rel_pose_inliers.to_string(),
            ),
            (
                "geometry.min_pnp_inliers".into(),
                self.mapper.ransac.min_pnp_inliers.to_string(),
            ),
            (
                "mapper.ba_max_iterations".into(),
                self.mapper.ba.max_iterations.to_string(),
            ),
            (
                "mapper.huber_delta".into(),
                format!("{:?}", self.mapper.ba.huber_delta),
            ),
            (
                "mapper.convergence_tol".into(),
                format!("{:?}", self.mapper.ba.convergence_tol),
            ),
            ("mapper.weight_mode".into(), weight_mode.into()),
            (
                "mapper.local_window".into(),
                self.mapper.local_window.to_string(),
            ),
            (
                "mapper.global_every".into(),
                self.mapper.global_every.to_string(),
            ),
            (
                "mapper.filter_tau_px".into(),
                format!("{:?}", self.mapper.filter_tau_px),
            ),
            (
                "mapper.min_init_landmarks".into(),
                self.mapper.min_init_landmarks.to_string(),
            ),
            ("collab.n_merge".into(), self.n_merge.to_string()),
            ("collab.retrieval_k".into(), retrieval),
            ("collab.s_pr".into(), format!("{:?}", self.s_pr)),
            (
                "collab.min_bridge_matches".into(),
                self.min_bridge_matches.to_string(),
            ),
            ("agent.t_lost".into(), self.agent.t_lost.to_string()),
            (
                "agent.keyframe_ratio".into(),
                format!("{:?}", self.agent.keyframe_ratio),
            ),
            (
                "agent.keyframe_max_gap".into(),
                self.agent.keyframe_max_gap.to_string(),
            ),
            (
                "agent.frame_rate".into(),
                format!("{:?}", self.agent.frame_rate),
            ),
            (
                "agent.local_window".into(),
                self.agent.local_window.to_string(),
            ),
            ("eval.d_max".into(), format!("{:?}", self.eval.d_max)),
            (
                "eval.extent_ratio_min".into(),
                format!("{:?}", self.eval.extent_ratio_min),
            ),
            (
                "eval.association_window".into(),
                format!("{:?}", self.eval.association_window),
            ),
            (
                "eval.completeness_threshold".into(),
                format!("{:?}", self.eval.completeness_threshold),
            ),
        ]
    }
}

/// Apply a scenario-scope key to a spec: `world.*`, `camera.*`,
/// `features.*`, `gnss.sigma`, and `plan.N.*` (plans are created on first
/// touch of index `N`, 1-based).
pub fn apply_scenario_key(
    spec: &mut ScenarioSpec,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    match parts.as_slice() {
        ["world", "extent"] => {
            let v = parse_num(key, value)?;
            spec.world.extent_x = v;
            spec.world.extent_y = v;
        }
        ["world", "extent_x"] => spec.world.extent_x = parse_num(key, value)?,
        ["world", "extent_y"] => spec.world.extent_y = parse_num(key, value)?,
        ["world", "center_x"] => spec.world.center_x = parse_num(key, value)?,
        ["world", "center_y"] => spec.world.center_y = parse_num(key, value)?,
        ["world", "density"] => spec.world.density = parse_num(key, value)?,
        ["world", "h_noise"] => spec.world.h_noise = parse_num(key, value)?,
        ["world", "repetitive_fraction"] => {
            spec.world.repetitive_fraction = parse_num(key, value)?;
        }
        ["world", "group_size"] => spec.world.group_size = parse_num(key, value)?,
        ["camera", field] => {
            let mut k = spec.intrinsics;
            match *field {
                "fx" => k.fx = parse_num(key, value)?,
                "fy" => k.fy = parse_num(key, value)?,
                "cx" => k.cx = parse_num(key, value)?,
                "cy" => k.cy = parse_num(key, value)?,
                "width" => k.width = parse_num(key, value)?,
                "height" => k.height = parse_num(key, value)?,
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
            spec.intrinsics = CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
                .map_err(|e| bad(key, e.to_string()))?;
        }
        ["features", "theta_max"] => spec.feature_model.theta_max_deg = parse_num(key, value)?,
        ["features", "p_detect"] => spec.feature_model.p_detect = parse_num(key, value)?,
        ["features", "pixel_sigma"] => spec.feature_model.pixel_sigma = parse_num(key, value)?,
        ["features", "outlier_rate"] => spec.feature_model.outlier_rate = parse_num(key, value)?,
        ["features", "repetitive_confusion"] => {
            spec.feature_model.repetitive_confusion = parse_num(key, value)?;
        }
        ["gnss", "sigma"] => spec.gnss_sigma = parse_num(key, value)?,
        ["plan", index, field] => {
            let n: usize = index
                .parse()
                .map_err(|_| ConfigError::UnknownKey(key.to_string()))?;
            if n == 0 {
                return Err(bad(key, "plan indices are 1-based"));
            }
            while spec.plans.len() < n {
                let id = spec.plans.len() as u32 + 1;
                spec.plans
                    .push(FlightPlan::straight(AgentId(id), (0.0, 0.0), (100.0, 0.0), 80.0, 7.0));
            }
            let plan = &mut spec.plans[n - 1];
            match *field {
                "agent" => plan.agent_id = AgentId(parse_num(key, value)?),
                "altitude" => plan.altitude = parse_num(key, value)?,
                "speed" => plan.speed = parse_num(key, value)?,
                "pitch" => plan.camera_pitch_deg = parse_num(key, value)?,
                "frame_rate" => plan.frame_rate = parse_num(key, value)?,
                "start_time" => plan.start_time = parse_num(key, value)?,
                "heading" => {
                    plan.heading = if value.trim() == "along-track" {
                        HeadingMode::AlongTrack
                    } else {
                        HeadingMode::Fixed(parse_num(key, value)?)
                    };
                }
                "waypoints" => {
                    let mut pts = Vec::new();
                    for pair in value.split(';') {
                        let Some((x, y)) = pair.split_once(',') else {
                            return Err(bad(key, "expected `x,y;x,y;...`"));
                        };
                        pts.push((parse_num(key, x)?, parse_num(key, y)?));
                    }
                    if pts.len() < 2 {
                        return Err(bad(key, "need at least two waypoints"));
                    }
                    plan.waypoints = pts;
                }
                "yaw" => {
                    let mut maneuvers = Vec::new();
                    for item in value.split(';') {
                        let fields: Vec<&str> = item.split(':').collect();
                        if fields.len() != 3 {
                            return Err(bad(key, "expected `t:rate:duration;...`"));
                        }
                        maneuvers.push(YawManeuver {
                            start_time: parse_num(key, fields[0])?,
                            rate_deg_per_s: parse_num(key, fields[1])?,
                            duration: parse_num(key, fields[2])?,
                        });
                    }
                    plan.yaw_maneuvers = maneuvers;
                }
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
        }
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

/// Sorted `key = value` lines reproducing a scenario spec.
pub fn scenario_key_values(spec: &ScenarioSpec) -> Vec<(String, String)> {
    let mut out = vec![
        ("world.extent_x".to_string(), format!("{:?}", spec.world.extent_x)),
        ("world.extent_y".to_string(), format!("{:?}", spec.world.extent_y)),
        ("world.center_x".to_string(), format!("{:?}", spec.world.center_x)),
        ("world.center_y".to_string(), format!("{:?}", spec.world.center_y)),
        ("world.density".to_string(), format!("{:?}", spec.world.density)),
        ("world.h_noise".to_string(), format!("{:?}", spec.world.h_noise)),
        (
            "world.repetitive_fraction".to_string(),
            format!("{:?}", spec.world.repetitive_fraction),
        ),
        ("world.group_size".to_string(), spec.world.group_size.to_string()),
        ("camera.fx".to_string(), format!("{:?}", spec.intrinsics.fx)),
        ("camera.fy".to_string(), format!("{:?}", spec.intrinsics.fy)),
        ("camera.cx".to_string(), format!("{:?}", spec.intrinsics.cx)),
        ("camera.cy".to_string(), format!("{:?}", spec.intrinsics.cy)),
        ("camera.width".to_string(), spec.intrinsics.width.to_string()),
        ("camera.height".to_string(), spec.intrinsics.height.to_string()),
        (
            "features.theta_max".to_string(),
            format!("{:?}", spec.feature_model.theta_max_deg),
        ),
        (
            "features.p_detect".to_string(),
            format!("{:?}", spec.feature_model.p_detect),
        ),
        (
            "features.pixel_sigma".to_string(),
            format!("{:?}", spec.feature_model.pixel_sigma),
        ),
        (
            "features.outlier_rate".to_string(),
            format!("{:?}", spec.feature_model.outlier_rate),
        ),
        (
            "features.repetitive_confusion".to_string(),
            format!("{:?}", spec.feature_model.repetitive_confusion),
        ),
        ("gnss.sigma".to_string(), format!("{:?}", spec.gnss_sigma)),
    ];
    for (i, plan) in spec.plans.iter().enumerate() {
        let n = i + 1;
        let prefix = format!("plan.{n}");
        out.push((format!("{prefix}.agent"), plan.agent_id.0.to_string()));
        out.push((format!("{prefix}.altitude"), format!("{:?}", plan.altitude)));
        out.push((format!("{prefix}.speed"), format!("{:?}", plan.speed)));
        out.push((format!("{prefix}.pitch"), format!("{:?}", plan.camera_pitch_deg)));
        out.push((format!("{prefix}.frame_rate"), format!("{:?}", plan.frame_rate)));
        out.push((format!("{prefix}.start_time"), format!("{:?}", plan.start_time)));
        out.push((
            format!("{prefix}.heading"),
            match plan.heading {
                HeadingMode::AlongTrack => "along-track".to_string(),
                HeadingMode::Fixed(deg) => format!("{deg:?}"),
            },
        ));
        out.push((
            format!("{prefix}.waypoints"),
            plan.waypoints
                .iter()
                .map(|(x, y)| format!("{x:?},{y:?}"))
                .collect::<Vec<_>>()
                .join(";"),
        ));
        if !plan.yaw_maneuvers.is_empty() {
            out.push((
                format!("{prefix}.yaw"),
                plan.yaw_maneuvers
                    .iter()
                    .map(|m| format!("{:?}:{:?}:{:?}", m.start_time, m.rate_deg_per_s, m.duration))
                    .collect::<Vec<_>>()
                    .join(";"),
            ));
        }
    }
    out.sort();
    out
}
