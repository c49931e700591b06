use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rebo_core::acceptance::{self, AcceptanceConfig};
use rebo_core::datagen::io::{read_dataset, write_dataset};
use rebo_core::datagen::{Cohort, Dataset};

mod config;
mod report;
mod run;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "rebo", version, about = "Bi-level sample reweighting for open-set semi-supervised point-cloud classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.alpha=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it to a file.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output file (default: <output_dir>/dataset.bin).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Warm up and train; writes checkpoints, metrics and a summary.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file from `generate`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many main-loop epochs (checkpointed).
        #[arg(long, value_name = "N")]
        halt_after: Option<usize>,
    },
    /// Histograms, cohort means and loss curves from a run directory.
    Report {
        /// Run directory holding ledger.csv and metrics.csv.
        dir: PathBuf,
        /// Where to write the CSVs (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Acceptance {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Only these criteria (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
        /// Freeze every weight at 1 in the bi-level runs.
        #[arg(long)]
        sabotage: bool,
        /// Print the verdicts as JSON instead of text lines.
        #[arg(long)]
        json: bool,
    },
}

/// Marks errors that come from bad input rather than a failed run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(UsageError(format!("{e:#}")))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    config::threads().map_err(usage)?;
    RunConfig::load(args.config.as_deref(), &args.set).map_err(usage)
}

fn print_counts(data: &Dataset) {
    let counts = data.counts();
    for c in Cohort::ALL {
        println!("{} {}", c, counts.get(c));
    }
}

fn generate(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(args)?;
    let path = out.unwrap_or_else(|| cfg.output_dir.join("dataset.bin"));
    let data = Dataset::generate(&cfg.dataset)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_dataset(&mut w, &data)?;
    w.flush()?;
    println!("wrote {}", path.display());
    print_counts(&data);
    Ok(())
}

fn load_dataset(cfg: &RunConfig, path: Option<&Path>) -> Result<Dataset> {
    let data = match path {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening dataset {}", p.display())).map_err(usage)?;
            read_dataset(BufReader::new(f))
                .with_context(|| format!("reading dataset {}", p.display()))
                .map_err(usage)?
        }
        None => Dataset::generate(&cfg.dataset)?,
    };
    if data.classes != cfg.dataset.classes || data.points != cfg.dataset.points {
        return Err(usage(anyhow::anyhow!(
            "dataset has C={} N={} but the configuration says C={} N={}",
            data.classes,
            data.points,
            cfg.dataset.classes,
            cfg.dataset.points
        )));
    }
    Ok(data)
}

fn train(args: &ConfigArgs, data: Option<PathBuf>, resume: bool, halt_after: Option<usize>) -> Result<()> {
    let cfg = load_config(args)?;
    let dataset = load_dataset(&cfg, data.as_deref())?;
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("config.toml"), toml::to_string(&cfg)?)?;
    let outcome = run::train(&cfg, &dataset, resume, halt_after)?;
    if outcome.finished {
        println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    } else {
        println!("halted at epoch {}; resume with --resume", outcome.summary.epochs);
    }
    Ok(())
}

fn acceptance_cmd(args: &ConfigArgs, only: Vec<u32>, sabotage: bool, json: bool) -> Result<bool> {
    let cfg = load_config(args)?;
    if let Some(bad) = only.iter().find(|&&i| !(1..=13).contains(&i)) {
        return Err(usage(anyhow::anyhow!("no criterion {bad}; valid ids are 1-13")));
    }
    let mut desk = cfg.acceptance.desk.clone();
    desk.sabotage |= sabotage;
    let verdicts = acceptance::run(&AcceptanceConfig {
        desk,
        only,
        seed: cfg.acceptance.seed,
    });
    if json {
        println!("{}", serde_json::to_string_pretty(&verdicts)?);
    } else {
        for v in &verdicts {
            println!("{}", v.line());
        }
        let passed = verdicts.iter().filter(|v| v.passed).count();
        println!("{passed}/{} criteria passed", verdicts.len());
    }
    Ok(verdicts.iter().all(|v| v.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate { cfg, out } => generate(&cfg, out).map(|_| true),
        Command::Train {
            cfg,
            data,
            resume,
            halt_after,
        } => train(&cfg, data, resume, halt_after).map(|_| true),
        Command::Report { dir, out } => report::report(&dir, out.as_deref().unwrap_or(&dir)).map(|_| true),
        Command::Acceptance {
            cfg,
            only,
            sabotage,
            json,
        } => acceptance_cmd(&cfg, only, sabotage, json),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

