//! Trajectory evaluation: similarity alignment against GNSS ground truth,
//! per-agent and collaborative RMSE, degeneracy classification, and report
//! rendering.
//!
//! Trajectory files carry the camera center, not the pose translation:
//! `t agent_id tx ty tz qw qx qy qz` after a `# traj v1` header. Optional
//! header comments record per-agent frame totals (`# frames <agent> <n>`)
//! and component runs (`# component <agent> <from_t> <c>`).

use crate::geometry::{alignment_rmse, umeyama_align_relaxed};
use crate::ids::{AgentId, FrameId};
use crate::mapper::SparseMap;
use crate::scenario::GroundTruthTrack;
use crate::{Point, Pose};
use nalgebra::UnitQuaternion;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// RMSE above this is a degenerate reconstruction, meters.
    pub d_max: f64,
    /// Aligned-extent to GNSS-extent ratio below this is degenerate.
    pub extent_ratio_min: f64,
    /// Nearest-timestamp association window, seconds.
    pub association_window: f64,
    /// Completeness below this marks a partially lost trajectory.
    pub completeness_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            d_max: 15.0,
            extent_ratio_min: 0.1,
            association_window: 0.5,
            completeness_threshold: 0.95,
        }
    }
}

/// One estimated camera sample.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    pub timestamp: f64,
    pub frame_id: FrameId,
    /// Camera center in reconstruction coordinates.
    pub center: Point,
    pub rotation: UnitQuaternion<f64>,
    /// Map component the frame belongs to.
    pub component: u32,
}

/// Per-agent estimated trajectories of one method run.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryEstimate {
    pub method: String,
    pub agents: BTreeMap<AgentId, Vec<TrajectorySample>>,
    /// Number of input frames per agent (denominator of completeness).
    pub total_frames: BTreeMap<AgentId, usize>,
}

impl TrajectoryEstimate {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            ..Self::default()
        }
    }

    /// Collect registered frames of reconstruction components into agent
    /// trajectories; component ids follow map order.
    pub fn from_maps(
        method: impl Into<String>,
        maps: &[SparseMap],
        total_frames: BTreeMap<AgentId, usize>,
    ) -> Self {
        let mut est = Self::new(method);
        est.total_frames = total_frames;
        for (ci, map) in maps.iter().enumerate() {
            for (frame_id, frame) in map.registered_frames() {
                let pose: &Pose = frame.pose.as_ref().unwrap();
                est.agents
                    .entry(frame.agent_id)
                    .or_default()
                    .push(TrajectorySample {
                        timestamp: frame.timestamp,
                        frame_id,
                        center: pose.center(),
                        rotation: pose.rotation,
                        component: ci as u32,
                    });
            }
        }
        for samples in est.agents.values_mut() {
            samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
        est
    }

    pub fn push(&mut self, agent: AgentId, sample: TrajectorySample) {
        self.agents.entry(agent).or_default().push(sample);
    }

    /// Largest component (by sample count) and the number of agents with
    /// frames in it.
    pub fn largest_component(&self) -> Option<(u32, usize)> {
        let mut frames_per_component: BTreeMap<u32, usize> = BTreeMap::new();
        for samples in self.agents.values() {
            for s in samples {
                *frames_per_component.entry(s.component).or_insert(0) += 1;
            }
        }
        let (&component, _) = frames_per_component.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c)))?;
        let agents = self
            .agents
            .values()
            .filter(|samples| samples.iter().any(|s| s.component == component))
            .count();
        Some((component, agents))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AlignFailure {
    #[error("fewer than three matched pairs")]
    InsufficientOverlap,
    #[error("degenerate alignment")]
    Degenerate,
}

#[derive(Debug, Clone, Copy)]
pub struct RmseResult {
    pub rmse: f64,
    pub pairs: usize,
    /// The source points were collinear; the transform is a minimizer but
    /// not unique about the track axis.
    pub axis_ambiguous: bool,
    /// Extent of the aligned estimate relative to the GNSS extent.
    pub extent_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignScope {
    PerAgent(AgentId),
    Collaborative,
}

fn bounding_diameter(points: &[Point]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for i in 0..3 {
            lo.coords[i] = lo.coords[i].min(p.coords[i]);
            hi.coords[i] = hi.coords[i].max(p.coords[i]);
        }
    }
    (hi - lo).norm()
}

/// Pair estimated samples with observed GNSS positions by nearest timestamp
/// within the association window.
fn associate(
    samples: &[TrajectorySample],
    track: &GroundTruthTrack,
    window: f64,
    component: Option<u32>,
) -> Vec<(Point, Point)> {
    let mut pairs = Vec::new();
    for s in samples {
        if component.is_some_and(|c| s.component != c) {
            continue;
        }
        let best = track
            .samples
            .iter()
            .min_by(|a, b| (a.0 - s.timestamp).abs().total_cmp(&(b.0 - s.timestamp).abs()));
        if let Some(&(t, _, observed)) = best {
            if (t - s.timestamp).abs() <= window {
                pairs.push((s.center, observed));
            }
        }
    }
    pairs
}

/// Similarity-align estimated camera centers to observed GNSS positions and
/// return the residual RMSE. Collaborative scope requires every agent to
/// appear in one shared map component.
pub fn align_and_rmse(
    est: &TrajectoryEstimate,
    tracks: &[GroundTruthTrack],
    scope: AlignScope,
    cfg: &EvalConfig,
) -> Result<RmseResult, AlignFailure> {
    let track_of = |agent: AgentId| tracks.iter().find(|t| t.agent_id == agent);
    let mut pairs: Vec<(Point, Point)> = Vec::new();
    match scope {
        AlignScope::PerAgent(agent) => {
            let samples = est.agents.get(&agent).ok_or(AlignFailure::InsufficientOverlap)?;
            let track = track_of(agent).ok_or(AlignFailure::InsufficientOverlap)?;
            pairs.extend(associate(samples, track, cfg.association_window, None));
        }
        AlignScope::Collaborative => {
            let (component, agents_in) =
                est.largest_component().ok_or(AlignFailure::InsufficientOverlap)?;
            if agents_in < tracks.len() || est.agents.len() < tracks.len() {
                return Err(AlignFailure::InsufficientOverlap);
            }
            for (agent, samples) in &est.agents {
                let track = track_of(*agent).ok_or(AlignFailure::InsufficientOverlap)?;
                pairs.extend(associate(
                    samples,
                    track,
                    cfg.association_window,
                    Some(component),
                ));
            }
        }
    }
    if pairs.len() < 3 {
        return Err(AlignFailure::InsufficientOverlap);
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    let (sim, axis_ambiguous) =
        umeyama_align_relaxed(&src, &dst, true).map_err(|_| AlignFailure::Degenerate)?;
    let rmse = alignment_rmse(&sim, &src, &dst);
    let aligned: Vec<Point> = src.iter().map(|p| sim.apply(p)).collect();
    let extent_ratio = {
        let denom = bounding_diameter(&dst);
        if denom > 0.0 {
            bounding_diameter(&aligned) / denom
        } else {
            1.0
        }
    };
    if rmse > cfg.d_max {
        return Err(AlignFailure::Degenerate);
    }
    Ok(RmseResult {
        rmse,
        pairs: pairs.len(),
        axis_ambiguous,
        extent_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentStatus {
    Ok,
    Degen,
    LostPartial,
}

impl fmt::Display for AgentStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentStatus::Ok => write!(f, "ok"),
            AgentStatus::Degen => write!(f, "degen"),
            AgentStatus::LostPartial => write!(f, "lost-partial"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentEval {
    pub agent: AgentId,
    pub rmse_m: Option<f64>,
    pub completeness: f64,
    pub component: Option<u32>,
    pub status: AgentStatus,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: String,
    pub agents: Vec<AgentEval>,
    pub collaborative_rmse: Option<f64>,
    /// `(k, n)`: agents in the largest component over agents expected.
    pub agents_registered: (usize, usize),
}

/// Classify a method run: per-agent RMSE and status, collaborative RMSE when
/// all agents share a component, and the `k/n` registered-agents count.
pub fn classify(
    est: &TrajectoryEstimate,
    tracks: &[GroundTruthTrack],
    cfg: &EvalConfig,
) -> EvalReport {
    let mut agents = Vec::new();
    for track in tracks {
        let agent = track.agent_id;
        let samples = est.agents.get(&agent);
        let total = est
            .total_frames
            .get(&agent)
            .copied()
            .unwrap_or_else(|| samples.map(|s| s.len()).unwrap_or(0));
        let estimated = samples.map(|s| s.len()).unwrap_or(0);
        let completeness = if total > 0 {
            estimated as f64 / total as f64
        } else {
            0.0
        };
        let component = samples.and_then(|s| {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for smp in s {
                *counts.entry(smp.component).or_insert(0) += 1;
            }
            counts
                .into_iter()
                .max_by_key(|&(c, n)| (n, std::cmp::Reverse(c)))
                .map(|(c, _)| c)
        });
        let (rmse_m, status) = match align_and_rmse(est, tracks, AlignScope::PerAgent(agent), cfg)
        {
            Ok(result) if result.extent_ratio < cfg.extent_ratio_min => (None, AgentStatus::Degen),
            Ok(result) => {
                let status = if completeness < cfg.completeness_threshold {
                    AgentStatus::LostPartial
                } else {
                    AgentStatus::Ok
                };
                (Some(result.rmse), status)
            }
            Err(_) => (None, AgentStatus::Degen),
        };
        agents.push(AgentEval {
            agent,
            rmse_m,
            completeness,
            component,
            status,
        });
    }
    let collaborative_rmse = align_and_rmse(est, tracks, AlignScope::Collaborative, cfg)
        .ok()
        .map(|r| r.rmse);
    let agents_registered = (
        est.largest_component().map(|(_, k)| k).unwrap_or(0),
        tracks.len(),
    );
    EvalReport {
        method: est.method.clone(),
        agents,
        collaborative_rmse,
        agents_registered,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    TextTable,
}

/// Render reports. CSV columns are fixed:
/// `method,agent,rmse_m,completeness,component,agents_registered,status`;
/// the text table mirrors the per-flight / Coll / # layout.
pub fn report(reports: &[EvalReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_csv(reports),
        ReportFormat::TextTable => render_table(reports),
    }
}

fn fmt_rmse(v: Option<f64>) -> String {
    v.map(|r| format!("{r:.3}")).unwrap_or_default()
}

fn render_csv(reports: &[EvalReport]) -> String {
    let mut out =
        String::from("method,agent,rmse_m,completeness,component,agents_registered,status\n");
    for rep in reports {
        let reg = format!("{}/{}", rep.agents_registered.0, rep.agents_registered.1);
        for a in &rep.agents {
            out.push_str(&format!(
                "{},{},{},{:.3},{},{},{}\n",
                rep.method,
                a.agent,
                fmt_rmse(a.rmse_m),
                a.completeness,
                a.component.map(|c| c.to_string()).unwrap_or_default(),
                reg,
                a.status
            ));
        }
        if rep.agents.len() > 1 {
            let status = if rep.collaborative_rmse.is_some() {
                "ok"
            } else {
                "insufficient-overlap"
            };
            out.push_str(&format!(
                "{},coll,{},,,{},{}\n",
                rep.method,
                fmt_rmse(rep.collaborative_rmse),
                reg,
                status
            ));
        }
    }
    out
}

fn render_table(reports: &[EvalReport]) -> String {
    let n_agents = reports.iter().map(|r| r.agents.len()).max().unwrap_or(0);
    let mut header = vec!["method".to_string()];
    for i in 1..=n_agents {
        header.push(format!("Fl {i}"));
    }
    header.push("Coll".to_string());
    header.push("#".to_string());

    let mut rows = vec![header];
    for rep in reports {
        let mut row = vec![rep.method.clone()];
        for i in 0..n_agents {
            let cell = rep
                .agents
                .get(i)
                .map(|a| match a.status {
                    AgentStatus::Degen => "degen".to_string(),
                    _ => fmt_rmse(a.rmse_m),
                })
                .unwrap_or_default();
            row.push(cell);
        }
        row.push(
            rep.collaborative_rmse
                .map(|r| format!("{r:.3}"))
                .unwrap_or_else(|| "-".to_string()),
        );
        row.push(format!(
            "{}/{}",
            rep.agents_registered.0, rep.agents_registered.1
        ));
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if ri == 0 {
            let total: usize = widths.iter().sum::<usize>() + 3 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum TrajectoryIoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Write a `# traj v1` trajectory file: camera centers and rotations with
/// 9 significant digits, plus frame totals and component runs as header
/// comments.
pub fn write_trajectory<W: Write>(out: &mut W, est: &TrajectoryEstimate) -> std::io::Result<()> {
    writeln!(out, "# traj v1")?;
    for (agent, total) in &est.total_frames {
        writeln!(out, "# frames {agent} {total}")?;
    }
    for (agent, samples) in &est.agents {
        let mut current: Option<u32> = None;
        for s in samples {
            if current != Some(s.component) {
                writeln!(
                    out,
                    "# component {agent} {} {}",
                    sig9(s.timestamp),
                    s.component
                )?;
                current = Some(s.component);
            }
        }
    }
    for (agent, samples) in &est.agents {
        for s in samples {
            let q = s.rotation.quaternion();
            writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                sig9(s.timestamp),
                agent,
                sig9(s.center.x),
                sig9(s.center.y),
                sig9(s.center.z),
                sig9(q.w),
                sig9(q.i),
                sig9(q.j),
                sig9(q.k),
            )?;
        }
    }
    Ok(())
}

/// Read a trajectory file written by [`write_trajectory`].
pub fn read_trajectory<R: BufRead>(
    input: R,
    method: impl Into<String>,
) -> Result<TrajectoryEstimate, TrajectoryIoError> {
    let mut est = TrajectoryEstimate::new(method);
    let mut component_runs: BTreeMap<AgentId, Vec<(f64, u32)>> = BTreeMap::new();
    let mut saw_header = false;
    let mut frame_counter: u64 = 0;
    for (ln, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let err = |msg: &str| TrajectoryIoError::Parse {
            line: ln + 1,
            msg: msg.to_string(),
        };
        if trimmed.starts_with('#') {
            let parts: Vec<&str> = trimmed.split_whitespace().collect();
            match parts.get(1) {
                Some(&"traj") => saw_header = true,
                Some(&"frames") if parts.len() == 4 => {
                    let agent = AgentId(parts[2].parse().map_err(|_| err("bad agent id"))?);
                    let n: usize = parts[3].parse().map_err(|_| err("bad frame total"))?;
                    est.total_frames.insert(agent, n);
                }
                Some(&"component") if parts.len() == 5 => {
                    let agent = AgentId(parts[2].parse().map_err(|_| err("bad agent id"))?);
                    let t: f64 = parts[3].parse().map_err(|_| err("bad timestamp"))?;
                    let c: u32 = parts[4].parse().map_err(|_| err("bad component"))?;
                    component_runs.entry(agent).or_default().push((t, c));
                }
                _ => {}
            }
            continue;
        }
        if !saw_header {
            return Err(err("missing `# traj v1` header"));
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        if parts.len() != 9 {
            return Err(err("expected `t agent tx ty tz qw qx qy qz`"));
        }
        let mut nums = [0f64; 8];
        for (i, p) in parts.iter().enumerate().filter(|(i, _)| *i != 1) {
            let slot = if i == 0 { 0 } else { i - 1 };
            nums[slot] = p.parse().map_err(|_| err("bad number"))?;
        }
        let agent = AgentId(parts[1].parse().map_err(|_| err("bad agent id"))?);
        let rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            nums[4], nums[5], nums[6], nums[7],
        ));
        frame_counter += 1;
        est.push(
            agent,
            TrajectorySample {
                timestamp: nums[0],
                frame_id: FrameId(frame_counter),
                center: Point::new(nums[1], nums[2], nums[3]),
                rotation,
                component: 0,
            },
        );
    }
    // Apply component runs.
    for (agent, runs) in component_runs {
        if let Some(samples) = est.agents.get_mut(&agent) {
            for s in samples.iter_mut() {
                let mut comp = 0;
                for &(from_t, c) in &runs {
                    if s.timestamp >= from_t - 1e-9 {
                        comp = c;
                    }
                }
                s.component = comp;
            }
        }
    }
    for samples in est.agents.values_mut() {
        samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(est)
}

/// Write a GNSS file: `t agent_id x y z` of the observed positions.
pub fn write_gnss<W: Write>(out: &mut W, track: &GroundTruthTrack) -> std::io::Result<()> {
    for (t, _, observed) in &track.samples {
        writeln!(
            out,
            "{} {} {} {} {}",
            sig9(*t),
            track.agent_id,
            sig9(observed.x),
            sig9(observed.y),
            sig9(observed.z)
        )?;
    }
    Ok(())
}

/// Read a GNSS file; the observed positions double as the truth column.
pub fn read_gnss<R: BufRead>(input: R) -> Result<Vec<GroundTruthTrack>, TrajectoryIoError> {
    let mut tracks: BTreeMap<AgentId, GroundTruthTrack> = BTreeMap::new();
    for (ln, line) in input.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |msg: &str| TrajectoryIoError::Parse {
            line: ln + 1,
            msg: msg.to_string(),
        };
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(err("expected `t agent x y z`"));
        }
        let t: f64 = parts[0].parse().map_err(|_| err("bad timestamp"))?;
        let agent = AgentId(parts[1].parse().map_err(|_| err("bad agent id"))?);
        let x: f64 = parts[2].parse().map_err(|_| err("bad coordinate"))?;
        let y: f64 = parts[3].parse().map_err(|_| err("bad coordinate"))?;
        let z: f64 = parts[4].parse().map_err(|_| err("bad coordinate"))?;
        let p = Point::new(x, y, z);
        tracks
            .entry(agent)
            .or_insert_with(|| GroundTruthTrack {
                agent_id: agent,
                samples: Vec::new(),
            })
            .samples
            .push((t, p, p));
    }
    Ok(tracks.into_values().collect())
}
