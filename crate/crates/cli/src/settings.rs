//! Resolution of scenario and pipeline settings from presets, config files,
//! and `--set key=value` overrides.

use crate::error::AppError;
use collabmap::config::{
    apply_scenario_key, parse_key_values, scenario_key_values, ConfigError, PipelineConfig,
};
use collabmap::scenario::{preset, ScenarioSpec};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    Offline,
    Otf,
    Slam,
}

impl Pipeline {
    pub fn name(&self) -> &'static str {
        match self {
            Pipeline::Offline => "offline",
            Pipeline::Otf => "otf",
            Pipeline::Slam => "slam",
        }
    }

    pub fn parse(s: &str) -> Result<Self, AppError> {
        match s {
            "offline" => Ok(Pipeline::Offline),
            "otf" => Ok(Pipeline::Otf),
            "slam" => Ok(Pipeline::Slam),
            other => Err(AppError::config(format!(
                "unknown pipeline `{other}` (expected offline, otf, or slam)"
            ))),
        }
    }
}

pub struct Settings {
    pub scenario: ScenarioSpec,
    pub pipeline_cfg: PipelineConfig,
    pub seed: u64,
    pub deterministic: bool,
    pub out: PathBuf,
}

fn config_err(e: ConfigError) -> AppError {
    AppError::config(e.to_string())
}

/// Apply one dotted key, trying the scenario scope first, then the pipeline
/// scope, then the `run.*` scope.
fn apply_key(
    scenario: &mut ScenarioSpec,
    pipeline: &mut PipelineConfig,
    seed: &mut Option<u64>,
    deterministic: &mut bool,
    key: &str,
    value: &str,
) -> Result<(), AppError> {
    match key {
        "run.seed" => {
            *seed = Some(
                value
                    .trim()
                    .parse()
                    .map_err(|_| AppError::config("bad value for `run.seed`"))?,
            );
            return Ok(());
        }
        "run.deterministic" => {
            *deterministic = value.trim() == "true";
            return Ok(());
        }
        "run.preset" | "scenario.name" => return Ok(()), // consumed during base selection
        _ => {}
    }
    match apply_scenario_key(scenario, key, value) {
        Ok(()) => Ok(()),
        Err(ConfigError::UnknownKey(_)) => pipeline.set(key, value).map_err(config_err),
        Err(e) => Err(config_err(e)),
    }
}

/// Resolve settings from a preset and/or config file plus overrides.
pub fn resolve(
    preset_name: Option<&str>,
    config_path: Option<&Path>,
    seed_flag: Option<u64>,
    deterministic_flag: bool,
    out: PathBuf,
    overrides: &[String],
) -> Result<Settings, AppError> {
    let file_entries = match config_path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                AppError::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            // Manifests double as config files: ignore the artifact list.
            let config_part = text.split("\nfiles:").next().unwrap_or("").to_string();
            parse_key_values(&config_part).map_err(config_err)?
        }
        None => Vec::new(),
    };

    // Base scenario: explicit preset, a preset named in the file, or the
    // co-directed default.
    let base = preset_name
        .map(str::to_string)
        .or_else(|| {
            file_entries
                .iter()
                .find(|(k, _)| k == "run.preset" || k == "scenario.name")
                .map(|(_, v)| v.clone())
        })
        .unwrap_or_else(|| "codirected".to_string());
    let mut scenario = preset(&base).map_err(|e| AppError::config(e.to_string()))?;
    let mut pipeline_cfg = PipelineConfig::default();
    let mut seed: Option<u64> = None;
    let mut deterministic = false;

    // When a config file fully specifies the plans, its keys replace the
    // preset plans instead of stacking on top of them.
    if file_entries.iter().any(|(k, _)| k.starts_with("plan.")) {
        scenario.plans.clear();
    }
    for (k, v) in &file_entries {
        apply_key(
            &mut scenario,
            &mut pipeline_cfg,
            &mut seed,
            &mut deterministic,
            k,
            v,
        )?;
    }
    for item in overrides {
        let Some((k, v)) = item.split_once('=') else {
            return Err(AppError::config(format!(
                "--set expects KEY=VALUE, got `{item}`"
            )));
        };
        apply_key(
            &mut scenario,
            &mut pipeline_cfg,
            &mut seed,
            &mut deterministic,
            k.trim(),
            v.trim(),
        )?;
    }

    if seed_flag.is_some() {
        seed = seed_flag;
    }
    if deterministic_flag {
        deterministic = true;
    }
    if deterministic && seed.is_none() {
        return Err(AppError::config(
            "deterministic mode requires a seed: set `run.seed`",
        ));
    }
    let seed = match seed {
        Some(s) => s,
        None => rand::random(),
    };
    scenario.name = base;
    Ok(Settings {
        scenario,
        pipeline_cfg,
        seed,
        deterministic,
        out,
    })
}

/// Configuration entries for the manifest: run scope, scenario, pipeline.
pub fn manifest_entries(settings: &Settings) -> Vec<(String, String)> {
    let mut entries = vec![
        (
            "run.deterministic".to_string(),
            settings.deterministic.to_string(),
        ),
        ("run.preset".to_string(), settings.scenario.name.clone()),
        ("run.seed".to_string(), settings.seed.to_string()),
    ];
    entries.extend(scenario_key_values(&settings.scenario));
    entries.extend(settings.pipeline_cfg.to_key_values());
    entries
}
