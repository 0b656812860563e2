//! Run configuration, read from one TOML file and overridden by flags.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use flowgan_core::model::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory, from here or `--seed`.
    pub seed: Option<u64>,
    /// Root of the `runs/` tree.
    pub out: PathBuf,
    pub run_id: String,
    /// Local time offset used to bucket trips into days and time groups.
    pub tz_offset_hours: i32,
    /// Map spec files; empty means the six bundled demo maps.
    pub maps: Vec<PathBuf>,
    pub synth: SynthSection,
    pub build: BuildSection,
    pub train: TrainConfig,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: PathBuf::from("runs"),
            run_id: "default".into(),
            tz_offset_hours: 8,
            maps: Vec::new(),
            synth: SynthSection::default(),
            build: BuildSection::default(),
            train: TrainConfig::default(),
            generate: GenerateSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub users: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    pub gamma: f64,
    /// Mean trips per user in each of the six time groups.
    pub intensities: [f64; 6],
    /// Side of the uniform zone grid that carries the masses, in meters.
    pub zone_side_m: i64,
    /// `[x, y, weight, radius]` Gaussian activity hotspots.
    pub hotspots: Vec<[f64; 4]>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            users: 400,
            days: 30,
            start_date: NaiveDate::from_ymd_opt(2024, 3, 4).expect("valid date"),
            gamma: 2.0,
            intensities: [0.6, 0.3, 0.4, 0.3, 0.6, 0.4],
            zone_side_m: 6_000,
            // Roughly over the demo maps' refined areas.
            hotspots: vec![
                [6_000.0, 18_000.0, 12.0, 5_000.0],
                [30_000.0, 12_000.0, 25.0, 6_000.0],
                [33_000.0, 28_500.0, 10.0, 4_000.0],
                [42_000.0, 18_000.0, 15.0, 5_000.0],
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Condition label is the map name.
    Map,
    /// Map name and time group, e.g. `JE/G3`.
    MapGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    pub train_fraction: f64,
    pub condition: ConditionKind,
    /// Trajectory CSV to build from; defaults to the run's synthesized one.
    pub trajectories: Option<PathBuf>,
}

impl Default for BuildSection {
    fn default() -> Self {
        BuildSection {
            train_fraction: 0.8,
            condition: ConditionKind::Map,
            trajectories: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
    pub condition: Option<String>,
    pub model: ModelKind,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            count: 10,
            condition: None,
            model: ModelKind::Conditional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Which generated sources to score against the holdout split.
    pub sources: Vec<Source>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            sources: vec![Source::Conditional, Source::Unconditional, Source::Gravity],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Conditional,
    Unconditional,
    Gravity,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Conditional => "conditional",
            Source::Unconditional => "unconditional",
            Source::Gravity => "gravity",
        }
    }
}

/// Flag values that override config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub run_id: Option<String>,
    pub condition: Option<String>,
    pub count: Option<usize>,
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides, resolves relative paths
    /// against the config file's directory and validates.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(""));
                let resolve = |q: &mut PathBuf| {
                    if q.is_relative() {
                        *q = base.join(&*q);
                    }
                };
                cfg.maps.iter_mut().for_each(resolve);
                if let Some(t) = cfg.build.trajectories.as_mut() {
                    resolve(t);
                }
                cfg
            }
            None => RunConfig::default(),
        };
        if let Some(s) = ov.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &ov.out {
            cfg.out = o.clone();
        }
        if let Some(r) = &ov.run_id {
            cfg.run_id = r.clone();
        }
        if let Some(c) = &ov.condition {
            cfg.generate.condition = Some(c.clone());
        }
        if let Some(n) = ov.count {
            cfg.generate.count = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seed.is_none() {
            return bad("a seed is required (config `seed` or --seed)".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("invalid run id {:?}", self.run_id));
        }
        for p in self.maps.iter().chain(&self.build.trajectories) {
            if !p.is_file() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        if !(self.build.train_fraction > 0.0 && self.build.train_fraction < 1.0) {
            return bad(format!("train_fraction {} not in (0, 1)", self.build.train_fraction));
        }
        if !(-14..=14).contains(&self.tz_offset_hours) {
            return bad(format!("tz_offset_hours {}", self.tz_offset_hours));
        }
        if self.synth.zone_side_m <= 0 || self.synth.zone_side_m % 4 != 0 {
            return bad(format!("zone_side_m {}", self.synth.zone_side_m));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(&self.run_id)
    }
}
