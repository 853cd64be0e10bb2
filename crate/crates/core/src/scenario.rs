//! Synthetic worlds and missions: terrain landmark clouds, multi-agent
//! flight plans, frame schedules, and noisy GNSS ground truth.

use crate::features::{detect, FeatureModel, FrameFeatures};
use crate::ids::{AgentId, FrameId};
use crate::{CameraIntrinsics, LandmarkId, Point, Pose};
use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid flight plan: {0}")]
    InvalidPlan(&'static str),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

/// Terrain landmark cloud with optional repetitive-appearance groups.
#[derive(Debug, Clone)]
pub struct World {
    pub landmarks: Vec<Point>,
    /// Disjoint clusters of landmarks that look identical to the matcher.
    pub groups: Vec<Vec<LandmarkId>>,
    /// Per-landmark group index, parallel to `landmarks`.
    pub group_of: Vec<Option<u32>>,
    pub seed: u64,
}

impl World {
    pub fn landmark_id(&self, index: usize) -> LandmarkId {
        LandmarkId(index as u64)
    }

    /// Cheap structural fingerprint used by determinism tests.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        mix(self.landmarks.len() as u64);
        for p in &self.landmarks {
            mix(p.x.to_bits());
            mix(p.y.to_bits());
            mix(p.z.to_bits());
        }
        for g in &self.groups {
            for id in g {
                mix(id.0);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub extent_x: f64,
    pub extent_y: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Landmarks per square meter; the realized count is Poisson.
    pub density: f64,
    /// Peak-to-peak terrain height noise in meters.
    pub h_noise: f64,
    /// Fraction of landmarks placed into repetitive-appearance groups.
    pub repetitive_fraction: f64,
    pub group_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            extent_x: 100.0,
            extent_y: 100.0,
            center_x: 0.0,
            center_y: 0.0,
            density: 0.2,
            h_noise: 2.0,
            repetitive_fraction: 0.0,
            group_size: 5,
        }
    }
}

/// Deterministic landmark cloud: uniform positions over the extent, heights
/// uniform in `[-h_noise/2, h_noise/2]`, Poisson-distributed count.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World, ScenarioError> {
    if config.extent_x <= 0.0 || config.extent_y <= 0.0 {
        return Err(ScenarioError::InvalidConfig("extent must be positive"));
    }
    if config.density <= 0.0 {
        return Err(ScenarioError::InvalidConfig("density must be positive"));
    }
    if config.h_noise < 0.0 {
        return Err(ScenarioError::InvalidConfig("h_noise must be non-negative"));
    }
    if !(0.0..=1.0).contains(&config.repetitive_fraction) {
        return Err(ScenarioError::InvalidConfig(
            "repetitive_fraction must be in [0, 1]",
        ));
    }
    if config.group_size < 2 {
        return Err(ScenarioError::InvalidConfig("group_size must be at least 2"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = config.density * config.extent_x * config.extent_y;
    let count = Poisson::new(mean)
        .map_err(|_| ScenarioError::InvalidConfig("landmark count mean out of range"))?
        .sample(&mut rng) as usize;
    if count == 0 {
        return Err(ScenarioError::InvalidConfig("world would be empty"));
    }

    let half_h = config.h_noise / 2.0;
    let landmarks: Vec<Point> = (0..count)
        .map(|_| {
            Point3::new(
                config.center_x + rng.random_range(-config.extent_x / 2.0..config.extent_x / 2.0),
                config.center_y + rng.random_range(-config.extent_y / 2.0..config.extent_y / 2.0),
                if half_h > 0.0 {
                    rng.random_range(-half_h..half_h)
                } else {
                    0.0
                },
            )
        })
        .collect();

    let mut group_of = vec![None; count];
    let mut groups = Vec::new();
    let grouped = ((count as f64) * config.repetitive_fraction) as usize;
    if grouped >= config.group_size {
        let mut pool: Vec<usize> = (0..count).collect();
        // Fisher-Yates prefix shuffle selects the grouped subset.
        for i in 0..grouped {
            let j = rng.random_range(i..count);
            pool.swap(i, j);
        }
        for chunk in pool[..grouped].chunks(config.group_size) {
            if chunk.len() < 2 {
                break;
            }
            let gid = groups.len() as u32;
            let mut members: Vec<LandmarkId> =
                chunk.iter().map(|&i| LandmarkId(i as u64)).collect();
            members.sort();
            for m in &members {
                group_of[m.0 as usize] = Some(gid);
            }
            groups.push(members);
        }
    }

    Ok(World {
        landmarks,
        groups,
        group_of,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadingMode {
    /// Camera yaw follows the track direction.
    AlongTrack,
    /// Constant yaw in degrees (world x axis = 0, counterclockwise).
    Fixed(f64),
}

/// A timed yaw-rate segment; the accumulated offset persists after the
/// maneuver ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YawManeuver {
    pub start_time: f64,
    pub rate_deg_per_s: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlightPlan {
    pub agent_id: AgentId,
    /// Horizontal waypoints in meters.
    pub waypoints: Vec<(f64, f64)>,
    pub altitude: f64,
    pub speed: f64,
    pub heading: HeadingMode,
    /// Camera pitch in degrees; -90 is nadir, 0 is the horizon.
    pub camera_pitch_deg: f64,
    pub yaw_maneuvers: Vec<YawManeuver>,
    /// Video rate used by the slam sampling mode.
    pub frame_rate: f64,
    pub start_time: f64,
}

impl FlightPlan {
    pub fn straight(
        agent_id: AgentId,
        from: (f64, f64),
        to: (f64, f64),
        altitude: f64,
        speed: f64,
    ) -> Self {
        Self {
            agent_id,
            waypoints: vec![from, to],
            altitude,
            speed,
            heading: HeadingMode::AlongTrack,
            camera_pitch_deg: -90.0,
            yaw_maneuvers: Vec::new(),
            frame_rate: 30.0,
            start_time: 0.0,
        }
    }

    pub fn path_length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum()
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.path_length() / self.speed
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.waypoints.len() < 2 || self.path_length() <= 0.0 {
            return Err(ScenarioError::InvalidPlan("zero-length path"));
        }
        if self.altitude <= 0.0 {
            return Err(ScenarioError::InvalidPlan("altitude must be positive"));
        }
        if self.speed <= 0.0 {
            return Err(ScenarioError::InvalidPlan("speed must be positive"));
        }
        if self.frame_rate <= 0.0 {
            return Err(ScenarioError::InvalidPlan("frame rate must be positive"));
        }
        Ok(())
    }

    /// Horizontal position and along-track direction at time `t` (clamped to
    /// the track ends).
    fn position_at(&self, t: f64) -> ((f64, f64), (f64, f64)) {
        let total = self.path_length();
        let dist = ((t - self.start_time) * self.speed).clamp(0.0, total);
        let mut remaining = dist;
        let last_seg = self.waypoints.len() - 2;
        for (si, w) in self.waypoints.windows(2).enumerate() {
            let seg = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
            if seg <= 0.0 {
                continue;
            }
            if remaining <= seg || si == last_seg {
                let f = (remaining / seg).min(1.0);
                let pos = (
                    w[0].0 + (w[1].0 - w[0].0) * f,
                    w[0].1 + (w[1].1 - w[0].1) * f,
                );
                let dir = ((w[1].0 - w[0].0) / seg, (w[1].1 - w[0].1) / seg);
                return (pos, dir);
            }
            remaining -= seg;
        }
        let last = *self.waypoints.last().unwrap();
        (last, (1.0, 0.0))
    }

    /// Accumulated yaw offset from maneuvers up to time `t`, radians.
    fn yaw_offset_at(&self, t: f64) -> f64 {
        self.yaw_maneuvers
            .iter()
            .map(|m| {
                let active = (t - m.start_time).clamp(0.0, m.duration);
                m.rate_deg_per_s.to_radians() * active
            })
            .sum()
    }

    /// True camera center at time `t`.
    pub fn center_at(&self, t: f64) -> Point {
        let ((x, y), _) = self.position_at(t);
        Point3::new(x, y, self.altitude)
    }

    /// Camera-from-world pose at time `t`.
    pub fn pose_at(&self, t: f64) -> Pose {
        let ((x, y), dir) = self.position_at(t);
        let base_yaw = match self.heading {
            HeadingMode::AlongTrack => dir.1.atan2(dir.0),
            HeadingMode::Fixed(deg) => deg.to_radians(),
        };
        let yaw = base_yaw + self.yaw_offset_at(t);
        let pitch = self.camera_pitch_deg.to_radians();

        // Camera axes in world coordinates: z forward along the view
        // direction, x to image right, y = z × x to image down. At nadir the
        // top of the image faces the heading.
        let z_cam = Vector3::new(
            pitch.cos() * yaw.cos(),
            pitch.cos() * yaw.sin(),
            pitch.sin(),
        );
        let x_cam = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let y_cam = z_cam.cross(&x_cam);
        let r_world_from_cam = Matrix3::from_columns(&[x_cam, y_cam, z_cam]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            r_world_from_cam.transpose(),
        ));
        let center = Vector3::new(x, y, self.altitude);
        Pose::new(rotation, -(rotation * center))
    }
}

/// GNSS-sampled ground truth for one agent: `(t, true, observed)` triples.
#[derive(Debug, Clone)]
pub struct GroundTruthTrack {
    pub agent_id: AgentId,
    pub samples: Vec<(f64, Point, Point)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// 1 Hz frame schedule.
    Sfm,
    /// Plan video rate (default 30 Hz).
    Slam,
}

/// One agent's share of a sampled mission.
#[derive(Debug, Clone)]
pub struct AgentMission {
    pub agent_id: AgentId,
    pub frames: Vec<FrameFeatures>,
    pub track: GroundTruthTrack,
    /// True camera-from-world pose per frame, for oracle tests only.
    pub true_poses: Vec<(FrameId, Pose)>,
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 step over seed ^ salt.
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Globally unique frame id: agent in the high bits, frame index below.
pub fn frame_id_for(agent: AgentId, index: u64) -> FrameId {
    FrameId(((agent.0 as u64) << 32) | index)
}

/// Sample every plan into a feature stream and a GNSS track. Deterministic
/// per `(world, plans, mode, model, gnss_sigma, seed)`.
pub fn sample_mission(
    world: &World,
    plans: &[FlightPlan],
    mode: SamplingMode,
    k: &CameraIntrinsics,
    model: &FeatureModel,
    gnss_sigma: f64,
    seed: u64,
) -> Result<Vec<AgentMission>, ScenarioError> {
    if plans.is_empty() {
        return Err(ScenarioError::InvalidConfig("no flight plans"));
    }
    let mut missions = Vec::new();
    for plan in plans {
        plan.validate()?;
        let rate = match mode {
            SamplingMode::Sfm => 1.0,
            SamplingMode::Slam => plan.frame_rate,
        };
        let duration = plan.path_length() / plan.speed;
        let n_frames = (duration * rate + 1e-9).floor() as u64 + 1;

        let mut frames = Vec::with_capacity(n_frames as usize);
        let mut true_poses = Vec::with_capacity(n_frames as usize);
        for i in 0..n_frames {
            let t = plan.start_time + i as f64 / rate;
            let pose = plan.pose_at(t);
            let frame_id = frame_id_for(plan.agent_id, i);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                seed,
                0x11 ^ ((plan.agent_id.0 as u64) << 40) ^ i,
            ));
            frames.push(detect(
                world,
                &pose,
                k,
                model,
                frame_id,
                plan.agent_id,
                t,
                &mut rng,
            ));
            true_poses.push((frame_id, pose));
        }

        let mut gnss_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x22 ^ ((plan.agent_id.0 as u64) << 40)));
        let normal = Normal::new(0.0, gnss_sigma)
            .map_err(|_| ScenarioError::InvalidConfig("negative gnss sigma"))?;
        let n_gnss = (duration + 1e-9).floor() as u64 + 1;
        let samples = (0..n_gnss)
            .map(|i| {
                let t = plan.start_time + i as f64;
                let truth = plan.center_at(t);
                let observed = Point3::new(
                    truth.x + normal.sample(&mut gnss_rng),
                    truth.y + normal.sample(&mut gnss_rng),
                    truth.z + normal.sample(&mut gnss_rng),
                );
                (t, truth, observed)
            })
            .collect();

        missions.push(AgentMission {
            agent_id: plan.agent_id,
            frames,
            track: GroundTruthTrack {
                agent_id: plan.agent_id,
                samples,
            },
            true_poses,
        });
    }
    Ok(missions)
}

/// A named scenario: world recipe, flight plans, camera, detector model, and
/// GNSS noise level.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub world: WorldConfig,
    pub plans: Vec<FlightPlan>,
    pub intrinsics: CameraIntrinsics,
    pub feature_model: FeatureModel,
    pub gnss_sigma: f64,
}

/// Default survey camera: 1920x1080 behind a narrow survey lens. At 80 m
/// altitude and 7 m/s this puts consecutive nadir footprints at roughly 80%
/// forward overlap on the 1 Hz schedule.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(2400.0, 2400.0, 960.0, 540.0, 1920, 1080).unwrap()
}

const PRESET_ALTITUDE: f64 = 80.0;
const PRESET_SPEED: f64 = 7.0;
/// Oblique survey pitch. Opposite-heading agents then see shared terrain at
/// ray angles around 80-135 degrees, so a 60-degree matcher cannot bridge
/// them while a 150-degree one can.
const PRESET_PITCH: f64 = -35.0;

fn preset_world(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> WorldConfig {
    let extent_x = x_hi - x_lo;
    let extent_y = y_hi - y_lo;
    WorldConfig {
        extent_x,
        extent_y,
        center_x: (x_lo + x_hi) / 2.0,
        center_y: (y_lo + y_hi) / 2.0,
        density: 2000.0 / (extent_x * extent_y),
        h_noise: 2.0,
        repetitive_fraction: 0.0,
        group_size: 5,
    }
}

fn preset_plan(agent: u32, from: (f64, f64), to: (f64, f64)) -> FlightPlan {
    FlightPlan {
        agent_id: AgentId(agent),
        waypoints: vec![from, to],
        altitude: PRESET_ALTITUDE,
        speed: PRESET_SPEED,
        heading: HeadingMode::AlongTrack,
        camera_pitch_deg: PRESET_PITCH,
        yaw_maneuvers: Vec::new(),
        frame_rate: 30.0,
        start_time: 0.0,
    }
}

pub const PRESET_NAMES: &[&str] = &["codirected", "dataset1-like", "dataset2-like", "yaw-loss"];

/// Write a world file: `world <n> <groups> <seed>`, then `lm x y z` lines
/// and `group <id...>` lines.
pub fn write_world<W: std::io::Write>(out: &mut W, world: &World) -> std::io::Result<()> {
    writeln!(
        out,
        "world {} {} {}",
        world.landmarks.len(),
        world.groups.len(),
        world.seed
    )?;
    for p in &world.landmarks {
        writeln!(out, "lm {:?} {:?} {:?}", p.x, p.y, p.z)?;
    }
    for group in &world.groups {
        let ids: Vec<String> = group.iter().map(|id| id.0.to_string()).collect();
        writeln!(out, "group {}", ids.join(" "))?;
    }
    Ok(())
}

/// Read a world file written by [`write_world`].
pub fn read_world<R: std::io::BufRead>(input: R) -> Result<World, ScenarioError> {
    let bad = || ScenarioError::InvalidConfig("malformed world file");
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(bad)?.map_err(|_| bad())?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "world" {
        return Err(bad());
    }
    let n: usize = head[1].parse().map_err(|_| bad())?;
    let n_groups: usize = head[2].parse().map_err(|_| bad())?;
    let seed: u64 = head[3].parse().map_err(|_| bad())?;
    let mut landmarks = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n_groups);
    for line in lines {
        let line = line.map_err(|_| bad())?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.first() {
            Some(&"lm") if parts.len() == 4 => {
                landmarks.push(Point3::new(
                    parts[1].parse().map_err(|_| bad())?,
                    parts[2].parse().map_err(|_| bad())?,
                    parts[3].parse().map_err(|_| bad())?,
                ));
            }
            Some(&"group") => {
                let ids: Result<Vec<LandmarkId>, _> = parts[1..]
                    .iter()
                    .map(|s| s.parse::<u64>().map(LandmarkId))
                    .collect();
                groups.push(ids.map_err(|_| bad())?);
            }
            None => continue,
            _ => return Err(bad()),
        }
    }
    if landmarks.len() != n || groups.len() != n_groups {
        return Err(bad());
    }
    let mut group_of = vec![None; landmarks.len()];
    for (gi, group) in groups.iter().enumerate() {
        for id in group {
            let slot = group_of.get_mut(id.0 as usize).ok_or_else(bad)?;
            *slot = Some(gi as u32);
        }
    }
    Ok(World {
        landmarks,
        groups,
        group_of,
        seed,
    })
}

/// Named scenarios used by the acceptance suite. 60 frames per agent at the
/// 1 Hz sfm rate: 59 seconds of track at 7 m/s is 413 m.
pub fn preset(name: &str) -> Result<ScenarioSpec, ScenarioError> {
    let track = PRESET_SPEED * 59.0;
    let spec = match name {
        // Two agents on parallel tracks flying the same direction.
        "codirected" => ScenarioSpec {
            name: name.to_string(),
            world: preset_world(-20.0, track + 220.0, -160.0, 185.0),
            plans: vec![
                preset_plan(1, (0.0, 0.0), (track, 0.0)),
                preset_plan(2, (0.0, 25.0), (track, 25.0)),
            ],
            intrinsics: default_intrinsics(),
            feature_model: FeatureModel::default(),
            gnss_sigma: 1.5,
        },
        // Two agents covering the same strip in opposite directions, on
        // adjacent survey lines.
        "dataset1-like" => ScenarioSpec {
            name: name.to_string(),
            world: preset_world(-220.0, track + 220.0, -160.0, 180.0),
            plans: vec![
                preset_plan(1, (0.0, 0.0), (track, 0.0)),
                preset_plan(2, (track, 18.0), (0.0, 18.0)),
            ],
            intrinsics: default_intrinsics(),
            feature_model: FeatureModel::default(),
            gnss_sigma: 1.5,
        },
        // Three agents, one opposed to the other two.
        "dataset2-like" => ScenarioSpec {
            name: name.to_string(),
            world: preset_world(-220.0, track + 220.0, -185.0, 185.0),
            plans: vec![
                preset_plan(1, (0.0, -25.0), (track, -25.0)),
                preset_plan(2, (track, 0.0), (0.0, 0.0)),
                preset_plan(3, (0.0, 25.0), (track, 25.0)),
            ],
            intrinsics: default_intrinsics(),
            feature_model: FeatureModel::default(),
            gnss_sigma: 1.5,
        },
        // Single agent with a hard 180-degree mid-flight turn. The swing
        // crosses terrain outside the surveyed corridor, so the causal
        // 30 Hz tracker starves mid-turn, while the 1 Hz schedule samples
        // only the forward-looking and backward-looking headings over the
        // corridor itself.
        "yaw-loss" => {
            let mut plan = preset_plan(1, (0.0, 0.0), (track, 0.0));
            plan.yaw_maneuvers = vec![YawManeuver {
                start_time: 30.1,
                rate_deg_per_s: 225.0,
                duration: 0.8,
            }];
            ScenarioSpec {
                name: name.to_string(),
                world: preset_world(-220.0, track + 220.0, -100.0, 100.0),
                plans: vec![plan],
                intrinsics: default_intrinsics(),
                feature_model: FeatureModel::default(),
                gnss_sigma: 1.5,
            }
        }
        other => return Err(ScenarioError::UnknownPreset(other.to_string())),
    };
    Ok(spec)
}
