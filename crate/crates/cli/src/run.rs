//! `train`: phases, checkpoints, resume and the metrics stream.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rebo_core::datagen::{Cohort, Dataset};
use rebo_core::models::{read_checkpoint, write_checkpoint};
use rebo_core::regularizers::WeightLedger;
use rebo_core::report::MetricsRecord;
use rebo_core::training::{
    cohort_means, estimate_fixed_weights, run_epochs, test_accuracy, warmup, Counters, Observer, Pools, TrainState,
    WarmupReport, Weighting,
};
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};

pub const THETA_FILE: &str = "theta.ckpt";
pub const THETA_AVG_FILE: &str = "theta_avg.ckpt";
pub const PHI_FILE: &str = "phi.ckpt";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FIXED_FILE: &str = "fixed_weights.csv";

/// Where the random streams resume: every stream is keyed by seed and epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

/// Everything besides the parameter and ledger files needed to resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedState {
    pub mode: Mode,
    pub warmup_done: usize,
    pub epoch: usize,
    pub counters: Counters,
    pub rng: RngState,
    pub warmup: Option<WarmupReport>,
    /// Bytes of `metrics.csv` written up to this checkpoint.
    pub metrics_len: u64,
}

/// Final output of `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub epochs: usize,
    pub test_accuracy: Option<f64>,
    pub cohort_means: BTreeMap<String, f64>,
    pub counters: Counters,
    pub warmup: Option<WarmupReport>,
}

struct MetricsWriter {
    out: BufWriter<File>,
    written: u64,
}

impl MetricsWriter {
    fn open(path: &Path, keep: Option<u64>) -> Result<Self> {
        let written = match keep {
            Some(len) => {
                let f = OpenOptions::new().write(true).open(path).with_context(|| format!("opening {}", path.display()))?;
                f.set_len(len)?;
                len
            }
            None => {
                let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
                let header = format!("{}\n", MetricsRecord::CSV_HEADER);
                f.write_all(header.as_bytes())?;
                header.len() as u64
            }
        };
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(f),
            written,
        })
    }
}

impl Observer for MetricsWriter {
    fn on_iteration(&mut self, record: &MetricsRecord) -> rebo_core::Result<()> {
        let line = format!("{}\n", record.csv_row());
        self.out.write_all(line.as_bytes())?;
        self.written += line.len() as u64;
        Ok(())
    }

    fn on_epoch_end(&mut self, _state: &TrainState) -> rebo_core::Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn save(dir: &Path, mode: Mode, state: &TrainState, warm: &Option<WarmupReport>, metrics_len: u64, seed: u64) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(dir.join(THETA_FILE))?), &state.theta)?;
    write_checkpoint(BufWriter::new(File::create(dir.join(THETA_AVG_FILE))?), &state.theta_avg)?;
    write_checkpoint(BufWriter::new(File::create(dir.join(PHI_FILE))?), &state.phi)?;
    state.ledger.write_csv(BufWriter::new(File::create(dir.join(LEDGER_FILE))?))?;
    let saved = SavedState {
        mode,
        warmup_done: state.warmup_done,
        epoch: state.epoch,
        counters: state.counters,
        rng: RngState {
            seed,
            next_epoch: state.epoch,
        },
        warmup: warm.clone(),
        metrics_len,
    };
    // written last: a state file always points at complete parameter files
    let tmp = dir.join(format!("{STATE_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&saved)?)?;
    fs::rename(tmp, dir.join(STATE_FILE))?;
    Ok(())
}

fn load(dir: &Path, cfg: &RunConfig) -> Result<(TrainState, SavedState)> {
    let saved: SavedState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)
        .with_context(|| format!("parsing {}", dir.join(STATE_FILE).display()))?;
    if saved.mode != cfg.run.mode || saved.rng.seed != cfg.train.seed {
        bail!(
            "checkpoint in {} was written by mode {:?} seed {}, not mode {:?} seed {}",
            dir.display(),
            saved.mode,
            saved.rng.seed,
            cfg.run.mode,
            cfg.train.seed
        );
    }
    let theta = read_checkpoint(BufReader::new(File::open(dir.join(THETA_FILE))?))?;
    let theta_avg = read_checkpoint(BufReader::new(File::open(dir.join(THETA_AVG_FILE))?))?;
    let phi = read_checkpoint(BufReader::new(File::open(dir.join(PHI_FILE))?))?;
    let ledger = WeightLedger::read_csv(BufReader::new(File::open(dir.join(LEDGER_FILE))?), cfg.train.beta)?;
    let state = TrainState {
        theta,
        theta_avg,
        phi,
        ledger,
        warmup_done: saved.warmup_done,
        epoch: saved.epoch,
        counters: saved.counters,
    };
    Ok((state, saved))
}

/// Reads fixed weights from a ledger CSV (`id,cohort,w,...`).
pub fn read_weights(path: &Path) -> Result<BTreeMap<u64, f64>> {
    let f = File::open(path).with_context(|| format!("opening weights {}", path.display()))?;
    let ledger = WeightLedger::read_csv(BufReader::new(f), 0.0).with_context(|| format!("reading weights {}", path.display()))?;
    Ok(ledger.iter().map(|(id, e)| (id, e.w)).collect())
}

/// Splits each cohort's ids (ascending) into a head of `ceil(f * n)` and
/// the rest.
fn split_cohorts(data: &Dataset, cohorts: &[Cohort], f: f64) -> (Vec<u64>, Vec<u64>) {
    let (mut head, mut tail) = (Vec::new(), Vec::new());
    for &c in cohorts {
        let ids = data.ids(&[c]);
        let k = ((f * ids.len() as f64).ceil() as usize).min(ids.len());
        head.extend_from_slice(&ids[..k]);
        tail.extend_from_slice(&ids[k..]);
    }
    (head, tail)
}

/// One training phase: a weighting, the pool it runs on, and its length.
struct Phase<'a> {
    pools: Pools,
    weighting: Weighting<'a>,
    epochs: usize,
}

pub struct TrainOutcome {
    pub summary: Summary,
    /// False when stopped early by `halt_after`.
    pub finished: bool,
}

/// Runs (or resumes) `cfg.run.mode` on `data`, writing into `cfg.output_dir`.
pub fn train(cfg: &RunConfig, data: &Dataset, resume: bool, halt_after: Option<usize>) -> Result<TrainOutcome> {
    let dir: PathBuf = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let tc = &cfg.train;
    let cohorts = cfg.run.unlabeled_cohorts()?;
    let all = Pools::from_cohorts(data, &cohorts);

    let (mut state, mut warm, metrics_len) = if resume && dir.join(STATE_FILE).exists() {
        let (s, saved) = load(&dir, cfg)?;
        log::info!("resuming at warm-up {} epoch {}", s.warmup_done, s.epoch);
        (s, saved.warmup, Some(saved.metrics_len))
    } else {
        (TrainState::init(tc, data.classes)?, None, None)
    };

    let fixed: BTreeMap<u64, f64>;
    let mut continual_fixed: Option<BTreeMap<u64, f64>> = None;
    let (first, second): (Phase, Option<Phase>) = match cfg.run.mode {
        Mode::Baseline => (
            Phase {
                pools: all.clone(),
                weighting: Weighting::Constant(1.0),
                epochs: tc.epochs,
            },
            None,
        ),
        Mode::Rebo => (
            Phase {
                pools: all.clone(),
                weighting: Weighting::Meta,
                epochs: tc.epochs,
            },
            None,
        ),
        Mode::Transfer => {
            let path = cfg
                .run
                .weights
                .as_ref()
                .context("mode transfer needs run.weights (a ledger CSV)")?;
            fixed = read_weights(path)?;
            if let Some(id) = all.unlabeled.iter().find(|id| !fixed.contains_key(id)) {
                bail!("weights file {} has no weight for unlabeled sample {id}", path.display());
            }
            (
                Phase {
                    pools: all.clone(),
                    weighting: Weighting::Fixed(&fixed),
                    epochs: tc.epochs,
                },
                None,
            )
        }
        Mode::Finetune => {
            let (subset, _) = split_cohorts(data, &cohorts, cfg.run.subset_fraction);
            let sub = Pools {
                labeled: all.labeled.clone(),
                unlabeled: subset,
            };
            (
                Phase {
                    pools: sub,
                    weighting: Weighting::Meta,
                    epochs: tc.epochs,
                },
                Some(Phase {
                    pools: all.clone(),
                    weighting: Weighting::Meta,
                    epochs: cfg.run.finetune_epochs,
                }),
            )
        }
        Mode::Continual => {
            let (seen, unseen) = split_cohorts(data, &cohorts, 1.0 - cfg.run.unseen_fraction);
            let seen = Pools {
                labeled: all.labeled.clone(),
                unlabeled: seen,
            };
            let second = match cfg.run.continual_mode {
                rebo_core::training::ContinualMode::FineTune => Weighting::Meta,
                rebo_core::training::ContinualMode::EstimateFix => {
                    // computed once when the phase starts, then reloaded on resume
                    let path = dir.join(FIXED_FILE);
                    if state.epoch >= tc.epochs && path.exists() {
                        continual_fixed = Some(read_weights(&path)?);
                    }
                    Weighting::Constant(f64::NAN)
                }
            };
            let mut full = seen.clone();
            full.unlabeled.extend_from_slice(&unseen);
            let phase2 = Phase {
                pools: full,
                weighting: second,
                epochs: cfg.run.continual_epochs,
            };
            (
                Phase {
                    pools: seen,
                    weighting: Weighting::Meta,
                    epochs: tc.epochs,
                },
                Some(phase2),
            )
        }
    };

    if state.warmup_done < tc.warmup_epochs || warm.is_none() {
        warm = Some(warmup(tc, data, &first.pools, &mut state)?);
        log::info!("warm-up done: {:?}", warm);
    }

    let mut metrics = MetricsWriter::open(&dir.join(METRICS_FILE), metrics_len)?;
    let mut ran = 0usize;
    let total = first.epochs + second.as_ref().map_or(0, |p| p.epochs);
    let mut finished = true;
    while state.epoch < total {
        if halt_after.is_some_and(|h| ran >= h) {
            finished = false;
            break;
        }
        let in_first = state.epoch < first.epochs;
        let phase = if in_first { &first } else { second.as_ref().expect("second phase") };
        let weighting = match phase.weighting {
            Weighting::Constant(c) if c.is_nan() => {
                if continual_fixed.is_none() {
                    let (seen, unseen) = split_cohorts(data, &cohorts, 1.0 - cfg.run.unseen_fraction);
                    let seen = Pools {
                        labeled: all.labeled.clone(),
                        unlabeled: seen,
                    };
                    let map = estimate_fixed_weights(tc, data, &seen, &unseen, &state)?;
                    write_fixed(&dir.join(FIXED_FILE), &map, data)?;
                    continual_fixed = Some(map);
                }
                Weighting::Fixed(continual_fixed.as_ref().expect("set above"))
            }
            w => w,
        };
        run_epochs(tc, data, &phase.pools, &mut state, weighting, 1, &mut metrics)?;
        ran += 1;
        let every = cfg.run.checkpoint_every;
        if (every > 0 && state.epoch % every == 0) || state.epoch == total {
            metrics.out.flush()?;
            save(&dir, cfg.run.mode, &state, &warm, metrics.written, tc.seed)?;
        }
    }
    metrics.out.flush()?;
    save(&dir, cfg.run.mode, &state, &warm, metrics.written, tc.seed)?;

    let has_test = data.cohort(Cohort::T).next().is_some();
    let summary = Summary {
        mode: cfg.run.mode,
        epochs: state.epoch,
        test_accuracy: if has_test {
            Some(test_accuracy(tc, data, &state.theta_avg)?)
        } else {
            None
        },
        cohort_means: cohort_means(&state.ledger).into_iter().map(|(c, m)| (c.to_string(), m)).collect(),
        counters: state.counters,
        warmup: warm,
    };
    if finished {
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(TrainOutcome { summary, finished })
}

fn write_fixed(path: &Path, map: &BTreeMap<u64, f64>, data: &Dataset) -> Result<()> {
    let mut ledger = WeightLedger::new(0.0)?;
    for (&id, &w) in map {
        ledger.update(id, data.get(id)?.cohort, w);
    }
    ledger.write_csv(BufWriter::new(File::create(path)?))?;
    Ok(())
}
