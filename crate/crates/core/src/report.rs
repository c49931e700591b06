//! Metrics records, weight histograms and cohort means as plain CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bilevel::HypergradientReport;
use crate::datagen::Cohort;
use crate::error::{Error, Result};
use crate::regularizers::WeightLedger;

/// One row of the metrics stream, written once per iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub val_loss: f64,
    pub train_loss: f64,
    pub accuracy: Option<f64>,
    pub mean_u: Option<f64>,
    pub mean_w: Option<f64>,
    pub mean_s: Option<f64>,
    pub mean_o: Option<f64>,
    pub hvp_norm: f64,
    pub tikhonov_norm: f64,
    pub entropy_norm: f64,
    pub od_norm: f64,
    pub total_norm: f64,
    pub eps: f64,
    pub xi: f64,
    pub skipped: bool,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "epoch,iteration,val_loss,train_loss,accuracy,mean_u,mean_w,mean_s,mean_o,\
hvp_norm,tikhonov_norm,entropy_norm,od_norm,total_norm,eps,xi,skipped";

    pub fn set_report(&mut self, r: &HypergradientReport) {
        self.val_loss = r.val_loss;
        self.hvp_norm = r.hvp_norm;
        self.tikhonov_norm = r.tikhonov_norm;
        self.entropy_norm = r.entropy_norm;
        self.od_norm = r.od_norm;
        self.total_norm = r.total_norm;
        self.eps = r.eps;
        self.skipped = r.skipped;
    }

    /// CSV row without the trailing newline; missing values are empty.
    pub fn csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iteration,
            self.val_loss,
            self.train_loss,
            opt(self.accuracy),
            opt(self.mean_u),
            opt(self.mean_w),
            opt(self.mean_s),
            opt(self.mean_o),
            self.hvp_norm,
            self.tikhonov_norm,
            self.entropy_norm,
            self.od_norm,
            self.total_norm,
            self.eps,
            self.xi,
            u8::from(self.skipped),
        );
        s
    }
}

pub const BINS: usize = 10;

/// Right-closed bin index over `(0, 0.1], ..., (0.9, 1]`; zero falls into the
/// first bin.
pub fn bin_index(w: f64) -> usize {
    let k = (w * BINS as f64).ceil() as isize - 1;
    k.clamp(0, BINS as isize - 1) as usize
}

/// Histogram of one cohort: percentages per bin and the mean weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortHistogram {
    pub cohort: Cohort,
    pub count: usize,
    pub percent: [f64; BINS],
    pub mean: f64,
}

pub fn histogram(cohort: Cohort, weights: &[f64]) -> Result<CohortHistogram> {
    if weights.is_empty() {
        return Err(Error::Empty("cohort without weights"));
    }
    let mut counts = [0usize; BINS];
    for &w in weights {
        counts[bin_index(w)] += 1;
    }
    let n = weights.len() as f64;
    Ok(CohortHistogram {
        cohort,
        count: weights.len(),
        percent: counts.map(|c| 100.0 * c as f64 / n),
        mean: weights.iter().sum::<f64>() / n,
    })
}

/// Histograms for every cohort present in the ledger.
pub fn ledger_histograms(ledger: &WeightLedger) -> Result<Vec<CohortHistogram>> {
    if ledger.is_empty() {
        return Err(Error::Empty("weight ledger"));
    }
    let mut by: BTreeMap<Cohort, Vec<f64>> = BTreeMap::new();
    for (_, e) in ledger.iter() {
        by.entry(e.cohort).or_default().push(e.w);
    }
    by.into_iter().map(|(c, w)| histogram(c, &w)).collect()
}

/// `cohort,bin_lo,bin_hi,percent` rows.
pub fn write_histogram_csv<W: Write>(mut w: W, hists: &[CohortHistogram]) -> Result<()> {
    writeln!(w, "cohort,bin_lo,bin_hi,percent")?;
    for h in hists {
        for (k, p) in h.percent.iter().enumerate() {
            writeln!(w, "{},{:.1},{:.1},{}", h.cohort, k as f64 / 10.0, (k + 1) as f64 / 10.0, p)?;
        }
    }
    Ok(())
}

/// `cohort,count,mean` rows.
pub fn write_means_csv<W: Write>(mut w: W, hists: &[CohortHistogram]) -> Result<()> {
    writeln!(w, "cohort,count,mean")?;
    for h in hists {
        writeln!(w, "{},{},{}", h.cohort, h.count, h.mean)?;
    }
    Ok(())
}

/// Mean over samples of the population standard deviation of each sample's
/// weight across the given snapshots. Only ids present in every snapshot
/// count.
pub fn mean_temporal_std(snapshots: &[Vec<(u64, f64)>]) -> f64 {
    if snapshots.is_empty() {
        return 0.0;
    }
    let mut series: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for snap in snapshots {
        for &(id, w) in snap {
            series.entry(id).or_default().push(w);
        }
    }
    let full: Vec<&Vec<f64>> = series.values().filter(|v| v.len() == snapshots.len()).collect();
    if full.is_empty() {
        return 0.0;
    }
    let total: f64 = full
        .iter()
        .map(|v| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .sum();
    total / full.len() as f64
}

/// Fraction of weights inside `[lo, hi]`.
pub fn fraction_within(weights: &[f64], lo: f64, hi: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|w| (lo..=hi).contains(*w)).count() as f64 / weights.len() as f64
}
