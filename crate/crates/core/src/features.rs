//! Synthetic feature detection and matching with a parameterized
//! viewpoint-invariance model.
//!
//! Detection projects true landmarks through the true camera; matching pairs
//! keypoints whose viewing rays agree within the model's angle budget. The
//! ground-truth channel (landmark provenance and camera centers) exists only
//! for the matcher and the evaluation oracles; the mapping pipelines receive
//! keypoints and match indices and nothing else.

use crate::geometry::project;
use crate::ids::{AgentId, FrameId, LandmarkId};
use crate::scenario::{mix_seed, World};
use crate::{CameraIntrinsics, Pixel, Point, Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use thiserror::Error;

/// Tuning of the simulated detector-matcher pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureModel {
    /// Maximum viewing-angle difference (degrees) at which two observations
    /// of the same landmark still match. 60 behaves like a classic
    /// gradient-histogram descriptor, 150 like a wide-baseline learned one.
    pub theta_max_deg: f64,
    /// Probability that a visible landmark is detected in a frame.
    pub p_detect: f64,
    /// Detection noise in pixels.
    pub pixel_sigma: f64,
    /// Injected wrong matches as a fraction of the correct count.
    pub outlier_rate: f64,
    /// Probability that a landmark in a repetitive group matches a different
    /// member of its group.
    pub repetitive_confusion: f64,
}

impl Default for FeatureModel {
    fn default() -> Self {
        Self::sift_like()
    }
}

impl FeatureModel {
    /// Narrow-invariance matcher typical of classic local features.
    pub fn sift_like() -> Self {
        Self {
            theta_max_deg: 60.0,
            p_detect: 1.0,
            pixel_sigma: 0.0,
            outlier_rate: 0.0,
            repetitive_confusion: 0.0,
        }
    }

    /// Wide-baseline matcher typical of learned features.
    pub fn learned() -> Self {
        Self {
            theta_max_deg: 150.0,
            ..Self::sift_like()
        }
    }

    pub fn validate(&self) -> Result<(), InvalidFeatureModel> {
        if !(self.theta_max_deg > 0.0 && self.theta_max_deg <= 180.0) {
            return Err(InvalidFeatureModel("theta_max must be in (0, 180]"));
        }
        for (name, v) in [
            ("p_detect", self.p_detect),
            ("outlier_rate", self.outlier_rate),
            ("repetitive_confusion", self.repetitive_confusion),
        ] {
            if !(0.0..=1.0).contains(&v) {
                let _ = name;
                return Err(InvalidFeatureModel("probabilities must be in [0, 1]"));
            }
        }
        if self.pixel_sigma < 0.0 {
            return Err(InvalidFeatureModel("pixel_sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid feature model: {0}")]
pub struct InvalidFeatureModel(pub &'static str);

/// Detected keypoints of one frame.
///
/// The provenance ids and the true camera center are the hidden ground-truth
/// channel: the matcher and the evaluation harness read them, the mapping
/// pipelines never do.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frame_id: FrameId,
    pub agent_id: AgentId,
    pub timestamp: f64,
    pub keypoints: Vec<Pixel>,
    provenance: Vec<LandmarkId>,
    camera_center: Point,
}

impl FrameFeatures {
    pub fn from_parts(
        frame_id: FrameId,
        agent_id: AgentId,
        timestamp: f64,
        keypoints: Vec<Pixel>,
        provenance: Vec<LandmarkId>,
        camera_center: Point,
    ) -> Self {
        assert_eq!(keypoints.len(), provenance.len());
        Self {
            frame_id,
            agent_id,
            timestamp,
            keypoints,
            provenance,
            camera_center,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    /// Hidden channel: true landmark id per keypoint. Matcher and evaluation
    /// only; mapping code must not consult it.
    pub fn truth_provenance(&self) -> &[LandmarkId] {
        &self.provenance
    }

    /// Hidden channel: true camera center. Matcher and evaluation only.
    pub fn truth_center(&self) -> Point {
        self.camera_center
    }
}

/// Index pairs matched between two frames, oriented `(index in a, index in b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub frame_a: FrameId,
    pub frame_b: FrameId,
    pub pairs: Vec<(usize, usize)>,
    labels: Vec<bool>,
}

impl MatchSet {
    pub fn empty(frame_a: FrameId, frame_b: FrameId) -> Self {
        Self {
            frame_a,
            frame_b,
            pairs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_parts(
        frame_a: FrameId,
        frame_b: FrameId,
        pairs: Vec<(usize, usize)>,
        labels: Vec<bool>,
    ) -> Self {
        assert_eq!(pairs.len(), labels.len());
        Self {
            frame_a,
            frame_b,
            pairs,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Hidden channel: per-pair correctness labels for evaluation only.
    pub fn truth_labels(&self) -> &[bool] {
        &self.labels
    }
}

/// Deterministic random source for a frame pair, independent of argument
/// order.
pub fn pair_rng(base_seed: u64, a: FrameId, b: FrameId) -> ChaCha8Rng {
    let (lo, hi) = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
    ChaCha8Rng::seed_from_u64(mix_seed(
        base_seed,
        lo.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ hi,
    ))
}

/// Simulated detection: every landmark at positive depth and in image bounds
/// is kept with probability `p_detect`; kept keypoints get Gaussian pixel
/// noise, clamped to the image.
#[allow(clippy::too_many_arguments)]
pub fn detect<R: Rng>(
    world: &World,
    pose: &Pose,
    k: &CameraIntrinsics,
    model: &FeatureModel,
    frame_id: FrameId,
    agent_id: AgentId,
    timestamp: f64,
    rng: &mut R,
) -> FrameFeatures {
    let normal = Normal::new(0.0, model.pixel_sigma.max(0.0)).unwrap();
    let mut keypoints = Vec::new();
    let mut provenance = Vec::new();
    for (i, landmark) in world.landmarks.iter().enumerate() {
        let Some(px) = project(landmark, pose, k) else {
            continue;
        };
        if !k.contains(&px) {
            continue;
        }
        if model.p_detect < 1.0 && rng.random::<f64>() >= model.p_detect {
            continue;
        }
        let noisy = if model.pixel_sigma > 0.0 {
            Pixel::new(
                (px.x + normal.sample(rng)).clamp(0.0, k.width as f64 - 1e-6),
                (px.y + normal.sample(rng)).clamp(0.0, k.height as f64 - 1e-6),
            )
        } else {
            px
        };
        keypoints.push(noisy);
        provenance.push(LandmarkId(i as u64));
    }
    FrameFeatures {
        frame_id,
        agent_id,
        timestamp,
        keypoints,
        provenance,
        camera_center: pose.center(),
    }
}

/// Simulated matching of two frames from the same world.
///
/// A landmark detected in both frames matches when the angle between its two
/// viewing rays is at most `theta_max`. Repetitive-group confusion then
/// swaps some matches inside their group, and `outlier_rate` injects random
/// wrong pairs. The result is one-to-one; on index collisions the pair with
/// the lower index wins.
pub fn match_frames<R: Rng>(
    a: &FrameFeatures,
    b: &FrameFeatures,
    model: &FeatureModel,
    world: &World,
    rng: &mut R,
) -> MatchSet {
    let swapped = a.frame_id > b.frame_id;
    let (first, second) = if swapped { (b, a) } else { (a, b) };
    let mut out = MatchSet::empty(a.frame_id, b.frame_id);
    if first.is_empty() || second.is_empty() {
        return out;
    }

    let second_index: HashMap<LandmarkId, usize> = second
        .provenance
        .iter()
        .enumerate()
        .map(|(j, id)| (*id, j))
        .collect();
    let cos_limit = model.theta_max_deg.to_radians().cos();

    // Correct candidates in first-frame index order.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, id) in first.provenance.iter().enumerate() {
        let Some(&j) = second_index.get(id) else {
            continue;
        };
        let ray_a = world.landmarks[id.0 as usize] - first.camera_center;
        let ray_b = world.landmarks[id.0 as usize] - second.camera_center;
        let denom = ray_a.norm() * ray_b.norm();
        if denom <= 0.0 {
            continue;
        }
        // cos(angle) >= cos(theta_max) <=> angle <= theta_max.
        if ray_a.dot(&ray_b) / denom >= cos_limit - 1e-12 {
            pairs.push((i, j));
        }
    }

    // Repetitive-texture confusion: swap the right-hand side with another
    // detected member of the landmark's group.
    if model.repetitive_confusion > 0.0 && !world.groups.is_empty() {
        for pair in pairs.iter_mut() {
            let id = first.provenance[pair.0];
            let Some(gid) = world.group_of[id.0 as usize] else {
                continue;
            };
            if rng.random::<f64>() >= model.repetitive_confusion {
                continue;
            }
            let mut others: Vec<usize> = world.groups[gid as usize]
                .iter()
                .filter(|m| **m != id)
                .filter_map(|m| second_index.get(m).copied())
                .collect();
            others.sort_unstable();
            if !others.is_empty() {
                pair.1 = others[rng.random_range(0..others.len())];
            }
        }
    }

    // Injected wrong pairs.
    let correct_count = pairs.len();
    let n_outliers = (model.outlier_rate * correct_count as f64).ceil() as usize;
    for _ in 0..n_outliers {
        for _attempt in 0..20 {
            let i = rng.random_range(0..first.len());
            let j = rng.random_range(0..second.len());
            if first.provenance[i] != second.provenance[j] {
                pairs.push((i, j));
                break;
            }
        }
    }

    // One-to-one: first occurrence in deterministic order wins.
    let mut used_left = vec![false; first.len()];
    let mut used_right = vec![false; second.len()];
    for (i, j) in pairs {
        if used_left[i] || used_right[j] {
            continue;
        }
        used_left[i] = true;
        used_right[j] = true;
        let label = first.provenance[i] == second.provenance[j];
        let oriented = if swapped { (j, i) } else { (i, j) };
        out.pairs.push(oriented);
        out.labels.push(label);
    }
    if swapped {
        // Keep a deterministic order regardless of argument order.
        let mut joint: Vec<((usize, usize), bool)> =
            out.pairs.iter().copied().zip(out.labels.iter().copied()).collect();
        joint.sort_by_key(|((i, _), _)| *i);
        out.pairs = joint.iter().map(|(p, _)| *p).collect();
        out.labels = joint.iter().map(|(_, l)| *l).collect();
    }
    out
}

/// Fraction of the smaller frame's keypoints that found a match.
pub fn similarity_score(a: &FrameFeatures, b: &FrameFeatures, matches: &MatchSet) -> f64 {
    let denom = a.len().min(b.len());
    if denom == 0 {
        return 0.0;
    }
    matches.len() as f64 / denom as f64
}

#[derive(Debug, Error)]
pub enum FeatureIoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("feature stream and truth sidecar disagree at frame {0}")]
    TruthMismatch(FrameId),
}

/// Write frames as the line-oriented stream format:
/// `frame <frame_id> <agent_id> <timestamp> <n>` then `n` lines `u v`.
pub fn write_feature_stream<W: Write>(
    out: &mut W,
    frames: &[FrameFeatures],
) -> std::io::Result<()> {
    for f in frames {
        writeln!(
            out,
            "frame {} {} {:?} {}",
            f.frame_id, f.agent_id, f.timestamp, f.len()
        )?;
        for kp in &f.keypoints {
            writeln!(out, "{:?} {:?}", kp.x, kp.y)?;
        }
    }
    Ok(())
}

/// Write the hidden-channel sidecar: per frame a header
/// `truth <frame_id> <cx> <cy> <cz> <n>` followed by `n` landmark ids.
pub fn write_truth_sidecar<W: Write>(
    out: &mut W,
    frames: &[FrameFeatures],
) -> std::io::Result<()> {
    for f in frames {
        writeln!(
            out,
            "truth {} {:?} {:?} {:?} {}",
            f.frame_id, f.camera_center.x, f.camera_center.y, f.camera_center.z, f.len()
        )?;
        for id in &f.provenance {
            writeln!(out, "{id}")?;
        }
    }
    Ok(())
}

/// Read a feature stream plus its truth sidecar back into frames.
pub fn read_feature_stream<R1: BufRead, R2: BufRead>(
    features: R1,
    truth: R2,
) -> Result<Vec<FrameFeatures>, FeatureIoError> {
    let parse_err = |line: usize, msg: &str| FeatureIoError::Parse {
        line,
        msg: msg.to_string(),
    };

    let mut frames = Vec::new();
    let mut lines = features.lines().enumerate();
    while let Some((ln, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "frame" {
            return Err(parse_err(ln + 1, "expected `frame <id> <agent> <t> <n>`"));
        }
        let frame_id = FrameId(
            parts[1]
                .parse()
                .map_err(|_| parse_err(ln + 1, "bad frame id"))?,
        );
        let agent_id = AgentId(
            parts[2]
                .parse()
                .map_err(|_| parse_err(ln + 1, "bad agent id"))?,
        );
        let timestamp: f64 = parts[3]
            .parse()
            .map_err(|_| parse_err(ln + 1, "bad timestamp"))?;
        let n: usize = parts[4]
            .parse()
            .map_err(|_| parse_err(ln + 1, "bad keypoint count"))?;
        let mut keypoints = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln2, line) = lines
                .next()
                .ok_or_else(|| parse_err(ln + 1, "truncated frame block"))?;
            let line = line?;
            let mut it = line.split_whitespace();
            let u: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(ln2 + 1, "bad keypoint"))?;
            let v: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(ln2 + 1, "bad keypoint"))?;
            keypoints.push(Pixel::new(u, v));
        }
        frames.push(FrameFeatures {
            frame_id,
            agent_id,
            timestamp,
            keypoints,
            provenance: Vec::new(),
            camera_center: Point::origin(),
        });
    }

    // Attach the sidecar.
    let mut by_id: HashMap<FrameId, usize> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| (f.frame_id, i))
        .collect();
    let mut lines = truth.lines().enumerate();
    while let Some((ln, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "truth" {
            return Err(parse_err(ln + 1, "expected `truth <id> <cx> <cy> <cz> <n>`"));
        }
        let frame_id = FrameId(
            parts[1]
                .parse()
                .map_err(|_| parse_err(ln + 1, "bad frame id"))?,
        );
        let idx = by_id
            .remove(&frame_id)
            .ok_or(FeatureIoError::TruthMismatch(frame_id))?;
        let cx: f64 = parts[2].parse().map_err(|_| parse_err(ln + 1, "bad center"))?;
        let cy: f64 = parts[3].parse().map_err(|_| parse_err(ln + 1, "bad center"))?;
        let cz: f64 = parts[4].parse().map_err(|_| parse_err(ln + 1, "bad center"))?;
        let n: usize = parts[5]
            .parse()
            .map_err(|_| parse_err(ln + 1, "bad count"))?;
        if n != frames[idx].keypoints.len() {
            return Err(FeatureIoError::TruthMismatch(frame_id));
        }
        let mut provenance = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln2, line) = lines
                .next()
                .ok_or_else(|| parse_err(ln + 1, "truncated truth block"))?;
            let line = line?;
            let id: u64 = line
                .trim()
                .parse()
                .map_err(|_| parse_err(ln2 + 1, "bad landmark id"))?;
            provenance.push(LandmarkId(id));
        }
        frames[idx].provenance = provenance;
        frames[idx].camera_center = Point::new(cx, cy, cz);
    }
    if let Some(missing) = by_id.keys().next() {
        return Err(FeatureIoError::TruthMismatch(*missing));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_world, WorldConfig};
    use nalgebra::{Point3, UnitQuaternion, Vector3};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    /// Nadir camera over the world origin at the given height.
    fn nadir_pose(x: f64, y: f64, h: f64) -> Pose {
        // z down: rotate so camera z looks along world -z.
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        let center = Vector3::new(x, y, h);
        Pose::new(rot, -(rot * center))
    }

    fn small_world(seed: u64) -> World {
        generate_world(
            &WorldConfig {
                extent_x: 60.0,
                extent_y: 60.0,
                density: 0.3,
                h_noise: 0.0,
                ..WorldConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_detection_is_exact_projection() {
        let world = small_world(3);
        let k = camera();
        let pose = nadir_pose(0.0, 0.0, 50.0);
        let model = FeatureModel::sift_like();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = detect(&world, &pose, &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng);
        assert!(!frame.is_empty());
        for (kp, id) in frame.keypoints.iter().zip(frame.truth_provenance()) {
            let exact = project(&world.landmarks[id.0 as usize], &pose, &k).unwrap();
            assert!((kp - exact).norm() < 1e-12);
        }
        // Every in-bounds projection is present with p_detect = 1.
        let visible = world
            .landmarks
            .iter()
            .filter(|p| project(p, &pose, &k).map(|px| k.contains(&px)).unwrap_or(false))
            .count();
        assert_eq!(frame.len(), visible);
    }

    #[test]
    fn camera_looking_away_sees_nothing() {
        let world = small_world(4);
        let k = camera();
        // Camera at altitude looking straight up.
        let pose = Pose::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, -50.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = detect(
            &world,
            &pose,
            &k,
            &FeatureModel::sift_like(),
            FrameId(1),
            AgentId(1),
            0.0,
            &mut rng,
        );
        assert!(frame.is_empty());
    }

    #[test]
    fn detection_count_matches_binomial_oracle() {
        let world = small_world(5);
        let k = camera();
        let pose = nadir_pose(0.0, 0.0, 50.0);
        let model = FeatureModel {
            p_detect: 0.8,
            ..FeatureModel::sift_like()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let frame = detect(&world, &pose, &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng);

        // Oracle: replay the Bernoulli stream over the same visible set.
        let mut oracle_rng = ChaCha8Rng::seed_from_u64(77);
        let mut expected = 0usize;
        let mut visible = 0usize;
        for p in &world.landmarks {
            let Some(px) = project(p, &pose, &k) else { continue };
            if !k.contains(&px) {
                continue;
            }
            visible += 1;
            if oracle_rng.random::<f64>() < model.p_detect {
                expected += 1;
            }
        }
        assert_eq!(frame.len(), expected);
        let mean = visible as f64 * 0.8;
        let sigma = (visible as f64 * 0.8 * 0.2).sqrt();
        assert!((frame.len() as f64 - mean).abs() <= 3.0 * sigma);

        // Same seed, same result.
        let mut rng2 = ChaCha8Rng::seed_from_u64(77);
        let again = detect(&world, &pose, &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng2);
        assert_eq!(frame, again);
    }

    #[test]
    fn identical_poses_match_everything() {
        let world = small_world(6);
        let k = camera();
        let pose = nadir_pose(0.0, 0.0, 50.0);
        let model = FeatureModel::sift_like();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = detect(&world, &pose, &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng);
        let b = detect(&world, &pose, &k, &model, FrameId(2), AgentId(1), 1.0, &mut rng);
        let m = match_frames(&a, &b, &model, &world, &mut rng);
        assert_eq!(m.len(), a.len().min(b.len()));
        assert!(m.truth_labels().iter().all(|&l| l));
        assert!((similarity_score(&a, &b, &m) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diametrically_opposite_rays_do_not_match_at_60() {
        // One landmark at the origin, two cameras on opposite sides looking
        // at it along the x axis: viewing rays differ by 180 degrees.
        let world = World {
            landmarks: vec![Point3::new(0.0, 0.0, 0.0)],
            groups: Vec::new(),
            group_of: vec![None],
            seed: 0,
        };
        let k = camera();
        // Camera frames looking along +x / -x.
        let look_pos_x = UnitQuaternion::from_scaled_axis(Vector3::new(
            0.0,
            -std::f64::consts::FRAC_PI_2,
            0.0,
        ));
        let pose_a = {
            let c = Vector3::new(-10.0, 0.0, 0.0);
            Pose::new(look_pos_x, -(look_pos_x * c))
        };
        let look_neg_x = look_pos_x.inverse();
        let pose_b = {
            let c = Vector3::new(10.0, 0.0, 0.0);
            Pose::new(look_neg_x, -(look_neg_x * c))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = FeatureModel::sift_like();
        let a = detect(&world, &pose_a, &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng);
        let b = detect(&world, &pose_b, &k, &model, FrameId(2), AgentId(2), 0.0, &mut rng);
        assert_eq!((a.len(), b.len()), (1, 1));
        let m = match_frames(&a, &b, &model, &world, &mut rng);
        assert!(m.is_empty());
        // At the most permissive setting the pair is accepted.
        let wide = FeatureModel {
            theta_max_deg: 180.0,
            ..model
        };
        let m = match_frames(&a, &b, &wide, &world, &mut rng);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn opposite_nadir_flights_match_per_angle_oracle() {
        // Nadir cameras: ray angles depend on positions only, so opposite
        // headings still co-observe; verify against a per-landmark recount.
        let world = small_world(11);
        let k = camera();
        let pose_a = nadir_pose(-15.0, 0.0, 80.0);
        let pose_b = nadir_pose(15.0, 0.0, 80.0);
        let model = FeatureModel {
            theta_max_deg: 150.0,
            ..FeatureModel::sift_like()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = detect(&world, &pose_a, &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng);
        let b = detect(&world, &pose_b, &k, &model, FrameId(2), AgentId(2), 0.0, &mut rng);
        let m = match_frames(&a, &b, &model, &world, &mut rng);
        assert!(!m.is_empty());

        let prov_b: HashMap<LandmarkId, usize> = b
            .truth_provenance()
            .iter()
            .enumerate()
            .map(|(j, id)| (*id, j))
            .collect();
        let mut oracle = 0usize;
        for id in a.truth_provenance() {
            if !prov_b.contains_key(id) {
                continue;
            }
            let lm = world.landmarks[id.0 as usize];
            let ra = lm - a.truth_center();
            let rb = lm - b.truth_center();
            let angle = (ra.dot(&rb) / (ra.norm() * rb.norm())).clamp(-1.0, 1.0).acos();
            if angle <= model.theta_max_deg.to_radians() {
                oracle += 1;
            }
        }
        assert_eq!(m.len(), oracle);
    }

    #[test]
    fn matching_is_symmetric_with_shared_seed() {
        let world = small_world(13);
        let k = camera();
        let model = FeatureModel {
            outlier_rate: 0.2,
            pixel_sigma: 0.5,
            ..FeatureModel::sift_like()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = detect(
            &world,
            &nadir_pose(-5.0, 2.0, 60.0),
            &k,
            &model,
            FrameId(1),
            AgentId(1),
            0.0,
            &mut rng,
        );
        let b = detect(
            &world,
            &nadir_pose(5.0, -3.0, 60.0),
            &k,
            &model,
            FrameId(2),
            AgentId(1),
            1.0,
            &mut rng,
        );
        let m_ab = match_frames(&a, &b, &model, &world, &mut pair_rng(9, a.frame_id, b.frame_id));
        let m_ba = match_frames(&b, &a, &model, &world, &mut pair_rng(9, b.frame_id, a.frame_id));
        let flipped: Vec<(usize, usize)> = m_ba.pairs.iter().map(|&(j, i)| (i, j)).collect();
        assert_eq!(m_ab.pairs, flipped);
    }

    #[test]
    fn one_to_one_under_outliers_and_confusion() {
        let world = {
            let mut w = generate_world(
                &WorldConfig {
                    extent_x: 60.0,
                    extent_y: 60.0,
                    density: 0.3,
                    h_noise: 0.0,
                    repetitive_fraction: 0.4,
                    group_size: 4,
                    ..WorldConfig::default()
                },
                21,
            )
            .unwrap();
            w.seed = 21;
            w
        };
        let k = camera();
        let model = FeatureModel {
            outlier_rate: 0.3,
            repetitive_confusion: 0.3,
            ..FeatureModel::sift_like()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = detect(&world, &nadir_pose(-4.0, 0.0, 60.0), &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng);
        let b = detect(&world, &nadir_pose(4.0, 0.0, 60.0), &k, &model, FrameId(2), AgentId(1), 1.0, &mut rng);
        let m = match_frames(&a, &b, &model, &world, &mut rng);
        let mut left = std::collections::HashSet::new();
        let mut right = std::collections::HashSet::new();
        for &(i, j) in &m.pairs {
            assert!(i < a.len() && j < b.len());
            assert!(left.insert(i), "duplicate left index");
            assert!(right.insert(j), "duplicate right index");
        }
        // Some confusion/outlier pairs must carry a false label.
        assert!(m.truth_labels().iter().any(|&l| !l));
    }

    #[test]
    fn clean_model_matches_covisibility_oracle() {
        let world = small_world(15);
        let k = camera();
        let model = FeatureModel {
            theta_max_deg: 180.0,
            ..FeatureModel::sift_like()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let a = detect(&world, &nadir_pose(-8.0, 1.0, 70.0), &k, &model, FrameId(1), AgentId(1), 0.0, &mut rng);
        let b = detect(&world, &nadir_pose(8.0, -1.0, 70.0), &k, &model, FrameId(2), AgentId(1), 1.0, &mut rng);
        let m = match_frames(&a, &b, &model, &world, &mut rng);
        let set_a: std::collections::HashSet<_> = a.truth_provenance().iter().collect();
        let set_b: std::collections::HashSet<_> = b.truth_provenance().iter().collect();
        let covisible = set_a.intersection(&set_b).count();
        assert_eq!(m.len(), covisible);
        assert!(m.truth_labels().iter().all(|&l| l));
    }

    #[test]
    fn similarity_score_arithmetic() {
        let mk = |n: usize, offset: u64| {
            let kps = vec![Pixel::new(1.0, 1.0); n];
            let prov = (0..n as u64).map(|i| LandmarkId(i + offset)).collect();
            FrameFeatures::from_parts(FrameId(offset), AgentId(1), 0.0, kps, prov, Point::origin())
        };
        let a = mk(100, 0);
        let b = mk(80, 1000);
        let mut m = MatchSet::empty(a.frame_id, b.frame_id);
        m.pairs = (0..40).map(|i| (i, i)).collect();
        m.labels = vec![false; 40];
        assert!((similarity_score(&a, &b, &m) - 0.5).abs() < 1e-12);
        let empty = FrameFeatures::from_parts(
            FrameId(9),
            AgentId(1),
            0.0,
            Vec::new(),
            Vec::new(),
            Point::origin(),
        );
        let m0 = MatchSet::empty(a.frame_id, empty.frame_id);
        assert_eq!(similarity_score(&a, &empty, &m0), 0.0);
    }

    #[test]
    fn stream_roundtrip_with_sidecar() {
        let world = small_world(16);
        let k = camera();
        let model = FeatureModel {
            pixel_sigma: 0.7,
            ..FeatureModel::sift_like()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let frames: Vec<FrameFeatures> = (0..3)
            .map(|i| {
                detect(
                    &world,
                    &nadir_pose(i as f64 * 3.0, 0.0, 60.0),
                    &k,
                    &model,
                    FrameId(100 + i),
                    AgentId(2),
                    i as f64 * 0.5,
                    &mut rng,
                )
            })
            .collect();
        let mut feat_buf = Vec::new();
        let mut truth_buf = Vec::new();
        write_feature_stream(&mut feat_buf, &frames).unwrap();
        write_truth_sidecar(&mut truth_buf, &frames).unwrap();
        let back = read_feature_stream(feat_buf.as_slice(), truth_buf.as_slice()).unwrap();
        assert_eq!(frames, back);

        // Truncated stream reports the offending line.
        let cut = &feat_buf[..feat_buf.len() / 2];
        let err = read_feature_stream(cut, truth_buf.as_slice());
        assert!(matches!(err, Err(FeatureIoError::Parse { .. }) | Err(FeatureIoError::TruthMismatch(_))));
    }
}
