//! Run configuration: one TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rebo_core::acceptance::DeskConfig;
use rebo_core::datagen::{Cohort, DatasetSpec};
use rebo_core::training::{ContinualMode, TrainConfig};
use serde::{Deserialize, Serialize};

pub const OUTPUT_DIR_ENV: &str = "REBO_OUTPUT_DIR";
pub const THREADS_ENV: &str = "REBO_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Rebo,
    Transfer,
    Finetune,
    Continual,
}

/// Options of `train` beyond the hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    pub mode: Mode,
    /// Cohorts forming the unlabeled pool, as letters.
    pub unlabeled: String,
    /// Checkpoint every this many main-loop epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Fixed weights for `transfer`: a ledger CSV from an earlier run.
    pub weights: Option<PathBuf>,
    /// `finetune`: fraction of each unlabeled cohort used for pre-training.
    pub subset_fraction: f64,
    pub finetune_epochs: usize,
    /// `continual`: fraction of each unlabeled cohort held back as unseen.
    pub unseen_fraction: f64,
    pub continual_mode: ContinualMode,
    pub continual_epochs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Rebo,
            unlabeled: "UWSO".into(),
            checkpoint_every: 1,
            weights: None,
            subset_fraction: 0.1,
            finetune_epochs: 50,
            unseen_fraction: 0.5,
            continual_mode: ContinualMode::EstimateFix,
            continual_epochs: 50,
        }
    }
}

impl RunOptions {
    pub fn unlabeled_cohorts(&self) -> Result<Vec<Cohort>> {
        let mut out = Vec::new();
        for c in self.unlabeled.chars() {
            let cohort = Cohort::from_char(c)?;
            if cohort.is_labeled() {
                bail!("cohort {c} is labeled and cannot be in the unlabeled pool");
            }
            if !out.contains(&cohort) {
                out.push(cohort);
            }
        }
        if out.is_empty() {
            bail!("run.unlabeled names no cohort");
        }
        Ok(out)
    }
}

/// Everything one invocation can be configured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub run: RunOptions,
    pub acceptance: AcceptanceSection,
}

/// The `[acceptance]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcceptanceSection {
    pub seed: u64,
    pub desk: DeskConfig,
}

impl Default for AcceptanceSection {
    fn default() -> Self {
        let d = rebo_core::acceptance::AcceptanceConfig::default();
        Self { seed: d.seed, desk: d.desk }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            run: RunOptions::default(),
            acceptance: AcceptanceSection::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

/// Sets a dotted key inside a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key `{key}`");
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

/// Overlays `top` on `base`: tables merge key by key, anything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Reads the optional file, applies overrides and the output-dir
    /// environment variable, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // nested tables keep the defaults of their parent, e.g. the desk
        // experiment's training settings differ from a plain run's
        let mut merged = match toml::Value::try_from(RunConfig::default()).context("serializing defaults")? {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        merge(&mut merged, table);
        let mut cfg: RunConfig = toml::Value::Table(merged).try_into().context("invalid configuration")?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.run.unlabeled_cohorts()?;
        for (name, f) in [
            ("run.subset_fraction", self.run.subset_fraction),
            ("run.unseen_fraction", self.run.unseen_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                bail!("{name} must be in (0, 1), got {f}");
            }
        }
        Ok(())
    }
}

/// Thread count from the environment; computation is single-threaded, so
/// the value is only validated and reported.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.is_empty() => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got `{v}`"),
        },
        _ => Ok(1),
    }
}
