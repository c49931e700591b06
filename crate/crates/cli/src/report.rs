//! `report`: weight histograms, cohort means and per-epoch curves.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rebo_core::regularizers::WeightLedger;
use rebo_core::report::{ledger_histograms, write_histogram_csv, write_means_csv, MetricsRecord};

use crate::run::{LEDGER_FILE, METRICS_FILE};

pub const HISTOGRAM_FILE: &str = "histograms.csv";
pub const MEANS_FILE: &str = "cohort_means.csv";
pub const CURVES_FILE: &str = "curves.csv";

const CURVE_HEADER: &str = "epoch,iterations,val_loss,train_loss,accuracy,mean_u,mean_w,mean_s,mean_o";

/// Per-epoch aggregate of the metrics stream: mean losses, and the last
/// reported value of everything else.
#[derive(Default)]
struct EpochCurve {
    n: usize,
    val: f64,
    train: f64,
    last: [Option<f64>; 5],
}

fn field(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        Ok(Some(s.parse().with_context(|| format!("bad number `{s}`"))?))
    }
}

fn curves(metrics: &Path) -> Result<BTreeMap<usize, EpochCurve>> {
    let f = File::open(metrics).with_context(|| format!("opening {}", metrics.display()))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header != MetricsRecord::CSV_HEADER {
        bail!("{} does not start with the metrics header", metrics.display());
    }
    let width = header.split(',').count();
    let mut out: BTreeMap<usize, EpochCurve> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            bail!("{} line {}: expected {width} fields", metrics.display(), n + 2);
        }
        let epoch: usize = f[0].parse().with_context(|| format!("line {}", n + 2))?;
        let c = out.entry(epoch).or_default();
        c.n += 1;
        c.val += field(f[2])?.unwrap_or(0.0);
        c.train += field(f[3])?.unwrap_or(0.0);
        for k in 0..5 {
            if let Some(v) = field(f[4 + k])? {
                c.last[k] = Some(v);
            }
        }
    }
    Ok(out)
}

/// Reads `ledger.csv` and `metrics.csv` from `dir` and writes the three
/// report files into `out`.
pub fn report(dir: &Path, out: &Path) -> Result<()> {
    let path = dir.join(LEDGER_FILE);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let ledger = WeightLedger::read_csv(BufReader::new(f), 0.0).with_context(|| format!("reading {}", path.display()))?;
    let hists = ledger_histograms(&ledger)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(File::create(out.join(HISTOGRAM_FILE))?);
    write_histogram_csv(&mut w, &hists)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(out.join(MEANS_FILE))?);
    write_means_csv(&mut w, &hists)?;
    w.flush()?;

    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() {
        let mut w = BufWriter::new(File::create(out.join(CURVES_FILE))?);
        writeln!(w, "{CURVE_HEADER}")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (epoch, c) in curves(&metrics)? {
            let n = c.n as f64;
            writeln!(
                w,
                "{epoch},{},{},{},{},{},{},{},{}",
                c.n,
                c.val / n,
                c.train / n,
                opt(c.last[0]),
                opt(c.last[1]),
                opt(c.last[2]),
                opt(c.last[3]),
                opt(c.last[4])
            )?;
        }
        w.flush()?;
    }
    for h in &hists {
        println!("{} n={} mean={:.4}", h.cohort, h.count, h.mean);
    }
    Ok(())
}
