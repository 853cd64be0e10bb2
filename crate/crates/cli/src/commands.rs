//! The four subcommands: simulate, run, evaluate, sweep.

use crate::error::AppError;
use crate::manifest::{hash_file, Manifest};
use crate::settings::{manifest_entries, resolve, Pipeline, Settings};
use collabmap::agent::AgentConfig;
use collabmap::collab::{run_otf, run_slam, DeliveryMode};
use collabmap::config::PipelineConfig;
use collabmap::eval::{
    classify, read_gnss, read_trajectory, report, write_gnss, write_trajectory, EvalReport,
    ReportFormat, TrajectoryEstimate,
};
use collabmap::features::{
    read_feature_stream, write_feature_stream, write_truth_sidecar, FrameFeatures,
};
use collabmap::mapper::{exhaustive_match, reconstruct_offline, write_map, OfflineOptions};
use collabmap::scenario::{
    generate_world, read_world, sample_mission, write_world, SamplingMode, World,
};
use collabmap::{AgentId, CameraIntrinsics};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct CommonArgs<'a> {
    pub preset: Option<&'a str>,
    pub config: Option<&'a Path>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub out: PathBuf,
    pub set: &'a [String],
}

fn io_err(e: std::io::Error) -> AppError {
    AppError::pipeline(format!("io failure: {e}"))
}

fn create_dirs(out: &Path) -> Result<(), AppError> {
    for sub in ["streams", "maps", "traj", "reports"] {
        fs::create_dir_all(out.join(sub)).map_err(io_err)?;
    }
    Ok(())
}

/// Generate the scenario artifacts: world, per-agent feature streams with
/// truth sidecars, GNSS files, and the manifest.
pub fn cmd_simulate(args: &CommonArgs) -> Result<(), AppError> {
    let settings = resolve(
        args.preset,
        args.config,
        args.seed,
        args.deterministic,
        args.out.clone(),
        args.set,
    )?;
    simulate_with(&settings)?;
    println!(
        "simulated scenario `{}` into {}",
        settings.scenario.name,
        settings.out.display()
    );
    Ok(())
}

pub fn simulate_with(settings: &Settings) -> Result<(), AppError> {
    let out = &settings.out;
    create_dirs(out)?;
    let spec = &settings.scenario;
    let world = generate_world(&spec.world, settings.seed)
        .map_err(|e| AppError::config(e.to_string()))?;
    // One full-rate stream per agent; the 1 Hz schedules subsample it.
    let missions = sample_mission(
        &world,
        &spec.plans,
        SamplingMode::Slam,
        &spec.intrinsics,
        &spec.feature_model,
        spec.gnss_sigma,
        settings.seed,
    )
    .map_err(|e| AppError::config(e.to_string()))?;

    let mut rel_files: Vec<String> = Vec::new();
    {
        let path = out.join("streams/world.txt");
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err)?);
        write_world(&mut w, &world).map_err(io_err)?;
        rel_files.push("streams/world.txt".to_string());
    }
    for mission in &missions {
        let agent = mission.agent_id;
        let feat_rel = format!("streams/agent_{agent}.feat");
        let truth_rel = format!("streams/agent_{agent}.truth");
        let gnss_rel = format!("streams/agent_{agent}.gnss");
        {
            let mut w = BufWriter::new(fs::File::create(out.join(&feat_rel)).map_err(io_err)?);
            write_feature_stream(&mut w, &mission.frames).map_err(io_err)?;
        }
        {
            let mut w = BufWriter::new(fs::File::create(out.join(&truth_rel)).map_err(io_err)?);
            write_truth_sidecar(&mut w, &mission.frames).map_err(io_err)?;
        }
        {
            let mut w = BufWriter::new(fs::File::create(out.join(&gnss_rel)).map_err(io_err)?);
            write_gnss(&mut w, &mission.track).map_err(io_err)?;
        }
        rel_files.extend([feat_rel, truth_rel, gnss_rel]);
    }

    let mut files = Vec::new();
    for rel in &rel_files {
        files.push((hash_file(&out.join(rel)).map_err(io_err)?, rel.clone()));
    }
    let manifest = Manifest {
        entries: manifest_entries(settings),
        files,
    };
    manifest.write(&out.join("manifest.txt")).map_err(io_err)?;
    Ok(())
}

pub struct Artifacts {
    settings: Settings,
    world: World,
    intrinsics: CameraIntrinsics,
    /// Full-rate streams per agent.
    streams: BTreeMap<AgentId, Vec<FrameFeatures>>,
}

/// Load and verify the artifacts referenced by a manifest.
fn load_artifacts(out: &Path, overrides: &[String]) -> Result<Artifacts, AppError> {
    let manifest =
        Manifest::read(&out.join("manifest.txt")).map_err(AppError::pipeline)?;
    manifest
        .verify_files(out)
        .map_err(|e| AppError::pipeline(format!("manifest mismatch: {e}")))?;

    // Rebuild the settings from the manifest, then layer run-time overrides
    // (matcher and pipeline knobs).
    let preset_name = manifest.get("run.preset").unwrap_or("codirected").to_string();
    let mut entries: Vec<String> = manifest
        .entries
        .iter()
        .filter(|(k, _)| k != "run.preset")
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    entries.extend(overrides.iter().cloned());
    let settings = resolve(
        Some(&preset_name),
        None,
        None,
        false,
        out.to_path_buf(),
        &entries,
    )?;

    let world = {
        let f = fs::File::open(out.join("streams/world.txt")).map_err(io_err)?;
        read_world(BufReader::new(f)).map_err(|e| AppError::pipeline(e.to_string()))?
    };
    let mut streams = BTreeMap::new();
    for (_, rel) in manifest
        .files
        .iter()
        .filter(|(_, rel)| rel.ends_with(".feat"))
    {
        let feat = fs::File::open(out.join(rel)).map_err(io_err)?;
        let truth = fs::File::open(out.join(rel.replace(".feat", ".truth"))).map_err(io_err)?;
        let frames = read_feature_stream(BufReader::new(feat), BufReader::new(truth))
            .map_err(|e| AppError::pipeline(e.to_string()))?;
        if let Some(first) = frames.first() {
            streams.insert(first.agent_id, frames);
        }
    }
    if streams.is_empty() {
        return Err(AppError::pipeline("no feature streams in the manifest"));
    }
    let intrinsics = settings.scenario.intrinsics;
    Ok(Artifacts {
        settings,
        world,
        intrinsics,
        streams,
    })
}

/// Keep only frames on the 1 Hz schedule (integer timestamps).
fn one_hz(streams: &BTreeMap<AgentId, Vec<FrameFeatures>>) -> BTreeMap<AgentId, Vec<FrameFeatures>> {
    streams
        .iter()
        .map(|(agent, frames)| {
            let picked = frames
                .iter()
                .filter(|f| (f.timestamp - f.timestamp.round()).abs() < 1e-6)
                .cloned()
                .collect();
            (*agent, picked)
        })
        .collect()
}

fn totals(streams: &BTreeMap<AgentId, Vec<FrameFeatures>>) -> BTreeMap<AgentId, usize> {
    streams.iter().map(|(a, v)| (*a, v.len())).collect()
}

/// Execute one pipeline over simulated artifacts; writes trajectory files,
/// map exports, and a stage-timing log.
pub fn cmd_run(args: &CommonArgs, pipeline: Pipeline) -> Result<(), AppError> {
    let artifacts = load_artifacts(&args.out, args.set)?;
    let out = args.out.clone();
    let mut log = Vec::<String>::new();
    let estimate = run_pipeline(&artifacts, pipeline, &mut log)?;

    let traj_rel = format!("traj/{}.traj", pipeline.name());
    let mut w = BufWriter::new(fs::File::create(out.join(&traj_rel)).map_err(io_err)?);
    write_trajectory(&mut w, &estimate).map_err(io_err)?;
    w.flush().map_err(io_err)?;

    let mut logfile = fs::File::create(out.join("run.log")).map_err(io_err)?;
    for line in &log {
        writeln!(logfile, "{line}").map_err(io_err)?;
    }
    println!("ran `{}`; trajectories in {}", pipeline.name(), out.join(traj_rel).display());
    Ok(())
}

pub fn run_pipeline(
    artifacts: &Artifacts,
    pipeline: Pipeline,
    log: &mut Vec<String>,
) -> Result<TrajectoryEstimate, AppError> {
    let settings = &artifacts.settings;
    let spec = &settings.scenario;
    let cfg = &settings.pipeline_cfg;
    let started = Instant::now();
    let out = &settings.out;

    let estimate = match pipeline {
        Pipeline::Offline => {
            let streams = one_hz(&artifacts.streams);
            let frames: Vec<FrameFeatures> =
                streams.values().flat_map(|v| v.iter().cloned()).collect();
            let t0 = Instant::now();
            let graph = exhaustive_match(
                &frames,
                &spec.feature_model,
                &artifacts.world,
                settings.seed,
            );
            log.push(format!("match: {:?}", t0.elapsed()));
            let t0 = Instant::now();
            let maps = reconstruct_offline(
                &frames,
                &artifacts.intrinsics,
                &graph,
                &OfflineOptions {
                    mapper: cfg.mapper,
                    seed: settings.seed,
                },
            )
            .map_err(|e| AppError::pipeline(format!("offline reconstruction: {e}")))?;
            log.push(format!("reconstruct: {:?}", t0.elapsed()));
            for (i, map) in maps.iter().enumerate() {
                let rel = format!("maps/offline_{i}.map");
                let mut w = BufWriter::new(fs::File::create(out.join(rel)).map_err(io_err)?);
                write_map(&mut w, map).map_err(io_err)?;
            }
            TrajectoryEstimate::from_maps("offline", &maps, totals(&streams))
        }
        Pipeline::Otf => {
            let streams = one_hz(&artifacts.streams);
            let mode = if settings.deterministic {
                DeliveryMode::Deterministic
            } else {
                DeliveryMode::Live
            };
            let t0 = Instant::now();
            let outcome = run_otf(
                &streams,
                &artifacts.world,
                &artifacts.intrinsics,
                &spec.feature_model,
                {
                    let mut c = cfg.collab(settings.seed);
                    c.mapper.ba.weight_mode = collabmap::mapper::WeightMode::Similarity;
                    c
                },
                mode,
                settings.seed,
                None,
            )
            .map_err(|e| AppError::pipeline(format!("otf session: {e}")))?;
            log.push(format!("otf session: {:?}", t0.elapsed()));
            log.push(format!("otf merges: {}", outcome.merge_log.len()));
            for (i, map) in outcome.maps.iter().enumerate() {
                let rel = format!("maps/otf_{i}.map");
                let mut w = BufWriter::new(fs::File::create(out.join(rel)).map_err(io_err)?);
                write_map(&mut w, map).map_err(io_err)?;
            }
            let mut estimate = outcome.estimate;
            estimate.total_frames = totals(&streams);
            estimate
        }
        Pipeline::Slam => {
            let t0 = Instant::now();
            let outcome = run_slam(
                &artifacts.streams,
                &artifacts.world,
                &artifacts.intrinsics,
                &spec.feature_model,
                cfg.collab(settings.seed),
                AgentConfig {
                    frame_rate: spec.plans.first().map(|p| p.frame_rate).unwrap_or(30.0),
                    ..settings.pipeline_cfg.agent
                },
                settings.seed,
            )
            .map_err(|e| AppError::pipeline(format!("slam session: {e}")))?;
            log.push(format!("slam session: {:?}", t0.elapsed()));
            for (agent, (tracked, total)) in &outcome.completeness {
                log.push(format!("agent {agent}: tracked {tracked}/{total}"));
            }
            for (i, map) in outcome.maps.iter().enumerate() {
                let rel = format!("maps/slam_{i}.map");
                let mut w = BufWriter::new(fs::File::create(out.join(rel)).map_err(io_err)?);
                write_map(&mut w, map).map_err(io_err)?;
            }
            outcome.estimate
        }
    };
    log.push(format!("total: {:?}", started.elapsed()));
    Ok(estimate)
}

/// Evaluate trajectory files against the GNSS ground truth and render the
/// CSV and text-table reports.
pub fn cmd_evaluate(args: &CommonArgs) -> Result<(), AppError> {
    let out = &args.out;
    // Eval tuning comes from the manifest when present, plus overrides.
    let eval_cfg = match Manifest::read(&out.join("manifest.txt")) {
        Ok(manifest) => {
            let mut cfg = PipelineConfig::default();
            for (k, v) in &manifest.entries {
                if k.starts_with("eval.") {
                    cfg.set(k, v).map_err(|e| AppError::config(e.to_string()))?;
                }
            }
            for item in args.set {
                if let Some((k, v)) = item.split_once('=') {
                    if k.trim().starts_with("eval.") {
                        cfg.set(k.trim(), v.trim())
                            .map_err(|e| AppError::config(e.to_string()))?;
                    }
                }
            }
            cfg.eval
        }
        Err(_) => PipelineConfig::default().eval,
    };

    // GNSS tracks.
    let mut tracks = Vec::new();
    let stream_dir = out.join("streams");
    let mut gnss_paths: Vec<PathBuf> = fs::read_dir(&stream_dir)
        .map_err(|e| AppError::evaluation(format!("cannot list {}: {e}", stream_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "gnss"))
        .collect();
    gnss_paths.sort();
    for path in gnss_paths {
        let f = fs::File::open(&path).map_err(|e| AppError::evaluation(e.to_string()))?;
        tracks.extend(
            read_gnss(BufReader::new(f)).map_err(|e| AppError::evaluation(e.to_string()))?,
        );
    }
    if tracks.is_empty() {
        return Err(AppError::evaluation("no GNSS files under streams/"));
    }

    // Trajectory files.
    let traj_dir = out.join("traj");
    let mut traj_paths: Vec<PathBuf> = fs::read_dir(&traj_dir)
        .map_err(|e| AppError::evaluation(format!("cannot list {}: {e}", traj_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "traj"))
        .collect();
    traj_paths.sort();
    if traj_paths.is_empty() {
        return Err(AppError::evaluation("no trajectory files under traj/"));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in traj_paths {
        let method = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("unknown")
            .to_string();
        let f = fs::File::open(&path).map_err(|e| AppError::evaluation(e.to_string()))?;
        let est = read_trajectory(BufReader::new(f), method)
            .map_err(|e| AppError::evaluation(e.to_string()))?;
        reports.push(classify(&est, &tracks, &eval_cfg));
    }

    let csv = report(&reports, ReportFormat::Csv);
    let table = report(&reports, ReportFormat::TextTable);
    fs::write(out.join("reports/report.csv"), &csv).map_err(io_err)?;
    fs::write(out.join("reports/report.txt"), &table).map_err(io_err)?;
    print!("{table}");
    Ok(())
}

/// Simulate once, run all three pipelines, and emit the combined table.
pub fn cmd_sweep(args: &CommonArgs) -> Result<(), AppError> {
    let settings = resolve(
        args.preset,
        args.config,
        args.seed,
        args.deterministic,
        args.out.clone(),
        args.set,
    )?;
    simulate_with(&settings)?;
    let artifacts = load_artifacts(&args.out, args.set)?;
    for pipeline in [Pipeline::Offline, Pipeline::Otf, Pipeline::Slam] {
        let mut log = Vec::new();
        let estimate = run_pipeline(&artifacts, pipeline, &mut log)?;
        let rel = format!("traj/{}.traj", pipeline.name());
        let mut w = BufWriter::new(fs::File::create(args.out.join(rel)).map_err(io_err)?);
        write_trajectory(&mut w, &estimate).map_err(io_err)?;
    }
    cmd_evaluate(args)
}
