//! Meta-objective regularizers on predicted weights, the entropy-weight
//! schedule, and the per-sample weight ledger.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::datagen::Cohort;
use crate::error::{Error, Result};

/// `sum_k -ln(lambda_k)` over validation weights.
pub fn loss_od(tape: &mut Tape, weights: Var) -> Var {
    let l = tape.ln(weights);
    let s = tape.sum(l);
    tape.neg(s)
}

/// `||lambda - target||^2` with `target` held constant.
pub fn loss_tikhonov(tape: &mut Tape, weights: Var, target: &[f64]) -> Result<Var> {
    let n = tape.value(weights).len();
    if target.len() != n {
        return Err(Error::ShapeMismatch {
            op: "tikhonov target",
            lhs: vec![n],
            rhs: vec![target.len()],
        });
    }
    let t = tape.constant(Tensor::vector(target.to_vec())?);
    let d = tape.sub(weights, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq))
}

/// Tikhonov penalty toward the previous weights.
pub fn loss_dtr(tape: &mut Tape, weights: Var, previous: &[f64]) -> Result<Var> {
    loss_tikhonov(tape, weights, previous)
}

/// Tikhonov penalty toward the moving-average weights.
pub fn loss_matr(tape: &mut Tape, weights: Var, average: &[f64]) -> Result<Var> {
    loss_tikhonov(tape, weights, average)
}

/// Mean binary entropy `-[l ln l + (1 - l) ln(1 - l)]`.
pub fn loss_entropy(tape: &mut Tape, weights: Var) -> Result<Var> {
    let n = tape.value(weights).len();
    let ones = tape.constant(Tensor::full(tape.value(weights).shape(), 1.0));
    let comp = tape.sub(ones, weights)?;
    let a = tape.ln(weights);
    let a = tape.mul(weights, a)?;
    let b = tape.ln(comp);
    let b = tape.mul(comp, b)?;
    let s = tape.add(a, b)?;
    let m = if n == 0 { tape.sum(s) } else { tape.mean(s)? };
    Ok(tape.neg(m))
}

/// Plain-value versions for reporting and tests.
pub mod value {
    use crate::autodiff::LOG_FLOOR;

    fn ln(x: f64) -> f64 {
        x.max(LOG_FLOOR).ln()
    }

    pub fn od(w: &[f64]) -> f64 {
        -w.iter().map(|&x| ln(x)).sum::<f64>()
    }

    pub fn tikhonov(w: &[f64], target: &[f64]) -> f64 {
        w.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn entropy(w: &[f64]) -> f64 {
        if w.is_empty() {
            return 0.0;
        }
        -w.iter().map(|&x| x * ln(x) + (1.0 - x) * ln(1.0 - x)).sum::<f64>() / w.len() as f64
    }
}

/// Piecewise entropy-weight ramp. Epochs are main-loop epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropySchedule {
    pub start: usize,
    pub end: usize,
    /// The ramp is `delta * (e - start) / denom`. With the defaults the ramp
    /// reaches `delta / 2` at `end` and jumps to `delta` right after.
    pub denom: f64,
    /// Ramp over `end - start` instead of `denom`, removing the jump.
    pub continuous: bool,
}

impl Default for EntropySchedule {
    fn default() -> Self {
        Self {
            start: 50,
            end: 100,
            denom: 100.0,
            continuous: false,
        }
    }
}

impl EntropySchedule {
    pub fn weight(&self, epoch: usize, delta: f64) -> f64 {
        if epoch < self.start {
            0.0
        } else if epoch <= self.end {
            let denom = if self.continuous {
                (self.end - self.start).max(1) as f64
            } else {
                self.denom
            };
            delta * (epoch - self.start) as f64 / denom
        } else {
            delta
        }
    }
}

/// Entropy weight under the default schedule.
pub fn entropy_weight(epoch: usize, delta: f64) -> f64 {
    EntropySchedule::default().weight(epoch, delta)
}

/// Ledger entry for one unlabeled sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LedgerEntry {
    pub cohort: Cohort,
    /// Latest predicted weight.
    pub w: f64,
    /// Moving average.
    pub avg: f64,
    pub updates: u64,
}

/// Current and moving-average weights per unlabeled sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightLedger {
    beta: f64,
    entries: BTreeMap<u64, LedgerEntry>,
}

impl WeightLedger {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("beta must be in [0, 1), got {beta}")));
        }
        Ok(Self {
            beta,
            entries: BTreeMap::new(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Records `w` for `id`: the average becomes `beta * avg + (1 - beta) * w`,
    /// or `w` on first sight.
    pub fn update(&mut self, id: u64, cohort: Cohort, w: f64) {
        let beta = self.beta;
        self.entries
            .entry(id)
            .and_modify(|e| {
                e.avg = beta * e.avg + (1.0 - beta) * w;
                e.w = w;
                e.updates += 1;
            })
            .or_insert(LedgerEntry {
                cohort,
                w,
                avg: w,
                updates: 1,
            });
    }

    pub fn get(&self, id: u64) -> Option<&LedgerEntry> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &LedgerEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Regularization targets for a batch: previous weight (`moving = false`)
    /// or moving average. Samples never seen before get `fallback[i]`, the
    /// live weight value, which makes their penalty and its gradient zero.
    pub fn targets(&self, ids: &[u64], fallback: &[f64], moving: bool) -> Vec<f64> {
        ids.iter()
            .zip(fallback)
            .map(|(id, &f)| match self.entries.get(id) {
                Some(e) if moving => e.avg,
                Some(e) => e.w,
                None => f,
            })
            .collect()
    }

    /// Mean current weight per cohort; cohorts without entries are absent.
    pub fn cohort_means(&self) -> BTreeMap<Cohort, f64> {
        let mut acc: BTreeMap<Cohort, (f64, usize)> = BTreeMap::new();
        for e in self.entries.values() {
            let a = acc.entry(e.cohort).or_default();
            a.0 += e.w;
            a.1 += 1;
        }
        acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
    }

    pub fn weights_of(&self, cohort: Cohort) -> Vec<f64> {
        self.entries.values().filter(|e| e.cohort == cohort).map(|e| e.w).collect()
    }

    pub const CSV_HEADER: &'static str = "id,cohort,w,w_avg,updates";

    /// CSV export, one row per id in ascending order. Reals use the shortest
    /// representation that parses back to the same value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for (id, e) in &self.entries {
            writeln!(w, "{id},{},{},{},{}", e.cohort, e.w, e.avg, e.updates)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, beta: f64) -> Result<Self> {
        let mut ledger = Self::new(beta)?;
        let mut lines = r.lines();
        let header = lines.next().transpose()?;
        if header.as_deref().map(str::trim) != Some(Self::CSV_HEADER) {
            return Err(Error::Format("ledger CSV header missing".into()));
        }
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("ledger CSV line {}: {line:?}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let id: u64 = f[0].parse().map_err(|_| bad())?;
            let mut chars = f[1].chars();
            let cohort = match (chars.next(), chars.next()) {
                (Some(c), None) => Cohort::from_char(c)?,
                _ => return Err(bad()),
            };
            let w: f64 = f[2].parse().map_err(|_| bad())?;
            let avg: f64 = f[3].parse().map_err(|_| bad())?;
            let updates: u64 = f[4].parse().map_err(|_| bad())?;
            ledger.entries.insert(
                id,
                LedgerEntry {
                    cohort,
                    w,
                    avg,
                    updates,
                },
            );
        }
        Ok(ledger)
    }
}
