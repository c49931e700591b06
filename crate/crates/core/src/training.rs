//! Warm-up, the alternating meta/task loop, fixed-weight retraining,
//! fine-tuning, continual learning on unseen data, and evaluation.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch, iteration)`,
//! so a run resumed from a saved state at an epoch boundary reproduces the
//! uninterrupted run exactly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::bilevel::{meta_step, Difference, Regularizers, SslProblem};
use crate::datagen::{epoch_split, Cohort, Dataset, Sample};
use crate::error::{Error, Result};
use crate::models::{argmax, TaskNet, WeightPredictor};
use crate::regularizers::{EntropySchedule, WeightLedger};
use crate::report::MetricsRecord;
use crate::rng::{keyed, pair_key, Domain};
use crate::ssl_losses::{augment, labeled_loss_on_tape, AugmentSpec, SslBatch, TrainGraph};

/// Hyperparameters of every training mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Task learning rate, also the unrolling rate.
    pub alpha: f64,
    /// Predictor learning rate.
    pub meta_lr: f64,
    /// Moving-average rate of the ledger.
    pub beta: f64,
    /// Tikhonov coefficient.
    pub gamma: f64,
    /// Outlier-detection coefficient.
    pub eta: f64,
    /// Final entropy coefficient.
    pub delta: f64,
    /// Pseudo-label confidence threshold.
    pub threshold: f64,
    pub warmup_epochs: usize,
    /// Main-loop epochs.
    pub epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub val_batch: usize,
    /// Iterations per epoch; 0 means one pass over the unlabeled pool.
    pub iters_per_epoch: usize,
    /// A meta step runs before every `meta_every`-th task step.
    pub meta_every: usize,
    /// Tikhonov target: moving average (true) or previous weight (false).
    pub moving_average: bool,
    pub schedule: EntropySchedule,
    pub difference: Difference,
    pub weak: AugmentSpec,
    pub strong: AugmentSpec,
    pub encoder: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    /// Predictor rate and steps per iteration while warming up.
    pub warmup_phi_lr: f64,
    pub warmup_phi_steps: usize,
    /// Full-pool predictor steps on the final warm-up features.
    pub warmup_phi_final_steps: usize,
    /// Task steps use this constant weight instead of the predictor's.
    pub frozen_weight: Option<f64>,
    /// Test accuracy every this many epochs (0: only when asked).
    pub eval_every: usize,
    /// Decay of the parameter average used for evaluation (0: no averaging).
    pub eval_average: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 0.01,
            meta_lr: 1e-3,
            beta: 0.5,
            gamma: 0.1,
            eta: 0.01,
            delta: 0.01,
            threshold: 0.95,
            warmup_epochs: 30,
            epochs: 150,
            labeled_batch: 16,
            unlabeled_batch: 32,
            val_batch: 16,
            iters_per_epoch: 0,
            meta_every: 1,
            moving_average: true,
            schedule: EntropySchedule::default(),
            difference: Difference::Central,
            weak: AugmentSpec::weak(),
            strong: AugmentSpec::strong(),
            encoder: vec![3, 32, 64, 64],
            classifier_hidden: vec![32],
            predictor_hidden: vec![32, 16],
            warmup_phi_lr: 0.1,
            warmup_phi_steps: 1,
            warmup_phi_final_steps: 200,
            frozen_weight: None,
            eval_every: 0,
            eval_average: 0.99,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        for (name, v) in [
            ("meta_lr", self.meta_lr),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("delta", self.delta),
            ("warmup_phi_lr", self.warmup_phi_lr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.eval_average) {
            return bad(format!("eval_average must be in [0, 1), got {}", self.eval_average));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1), got {}", self.beta));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("threshold must be in (0, 1], got {}", self.threshold));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 || self.val_batch == 0 || self.meta_every == 0 {
            return bad("batch sizes and meta_every must be > 0".into());
        }
        if let Some(w) = self.frozen_weight {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("frozen_weight must be in [0, 1], got {w}"));
            }
        }
        self.weak.validate()?;
        self.strong.validate()
    }

    pub fn task_net(&self, classes: usize) -> TaskNet {
        TaskNet::new(self.encoder.clone(), self.classifier_hidden.clone(), classes)
    }

    pub fn predictor(&self, feature_dim: usize) -> WeightPredictor {
        let mut w = vec![feature_dim];
        w.extend_from_slice(&self.predictor_hidden);
        w.push(1);
        WeightPredictor::new(w)
    }

    pub fn iterations(&self, pools: &Pools) -> usize {
        if self.iters_per_epoch > 0 {
            self.iters_per_epoch
        } else {
            pools.unlabeled.len().div_ceil(self.unlabeled_batch).max(1)
        }
    }
}

/// Instrumentation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Hypergradient evaluations.
    pub meta_gradients: u64,
    /// Predictor updates in the main loop.
    pub phi_updates: u64,
    pub task_steps: u64,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub theta: ParamSet,
    /// Exponential moving average of `theta`, the evaluated parameters.
    pub theta_avg: ParamSet,
    pub phi: ParamSet,
    pub ledger: WeightLedger,
    pub warmup_done: usize,
    /// Completed main-loop epochs.
    pub epoch: usize,
    pub counters: Counters,
}

impl TrainState {
    /// Fresh parameters for `classes` classes; initialization depends only
    /// on the seed.
    pub fn init(cfg: &TrainConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.task_net(classes);
        let pred = cfg.predictor(net.feature_dim());
        let theta = net.init(keyed(cfg.seed, Domain::Init, 0).random())?;
        let phi = pred.init(keyed(cfg.seed, Domain::Init, 1).random())?;
        Ok(Self {
            theta_avg: theta.clone(),
            theta,
            phi,
            ledger: WeightLedger::new(cfg.beta)?,
            warmup_done: 0,
            epoch: 0,
            counters: Counters::default(),
        })
    }

    /// Moves the evaluation average toward the current parameters.
    pub fn average(&mut self, decay: f64) -> Result<()> {
        let d = self.theta.add_scaled(&self.theta_avg, -1.0)?;
        self.theta_avg.add_scaled_in_place(&d, 1.0 - decay)
    }
}

/// Which samples play which role.
#[derive(Clone, Debug, PartialEq)]
pub struct Pools {
    pub labeled: Vec<u64>,
    pub unlabeled: Vec<u64>,
}

impl Pools {
    /// Cohort L as labeled pool, the given cohorts as unlabeled pool.
    pub fn from_cohorts(data: &Dataset, unlabeled: &[Cohort]) -> Self {
        Self {
            labeled: data.ids(&[Cohort::L]),
            unlabeled: data.ids(unlabeled),
        }
    }
}

/// How task steps weight the unlabeled samples.
#[derive(Clone, Copy, Debug)]
pub enum Weighting<'a> {
    /// Bi-level: predictor weights, predictor updated by meta steps.
    Meta,
    /// Fixed per-sample weights, no meta steps.
    Fixed(&'a BTreeMap<u64, f64>),
    /// The same weight for every sample, no meta steps.
    Constant(f64),
}

/// Receives metrics and epoch boundaries.
pub trait Observer {
    fn on_iteration(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NoObserver;
impl Observer for NoObserver {}

/// Collects every record in memory.
#[derive(Default)]
pub struct Recorder {
    pub records: Vec<MetricsRecord>,
    /// Ledger weights `(id, w)` at the end of each epoch.
    pub snapshots: Vec<Vec<(u64, f64)>>,
    pub keep_snapshots: bool,
}

impl Observer for Recorder {
    fn on_iteration(&mut self, record: &MetricsRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
    fn on_epoch_end(&mut self, state: &TrainState) -> Result<()> {
        if self.keep_snapshots {
            self.snapshots.push(state.ledger.iter().map(|(id, e)| (id, e.w)).collect());
        }
        Ok(())
    }
}

fn choose<R: Rng + ?Sized>(pool: &[u64], k: usize, rng: &mut R) -> Vec<u64> {
    let mut v = pool.to_vec();
    if k >= v.len() {
        return v;
    }
    let (head, _) = v.partial_shuffle(rng, k);
    head.to_vec()
}

fn clouds<'d>(data: &'d Dataset, ids: &[u64]) -> Result<Vec<&'d Tensor>> {
    ids.iter().map(|&id| data.get(id).map(|s| &s.points)).collect()
}

fn labels(data: &Dataset, ids: &[u64]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| {
            data.get(id)?
                .label
                .ok_or_else(|| Error::InvalidArgument(format!("sample {id} has no label")))
        })
        .collect()
}

fn build_batch<R: Rng + ?Sized>(
    data: &Dataset,
    lab: &[u64],
    unl: &[u64],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SslBatch> {
    let mut labeled = Vec::with_capacity(lab.len());
    for c in clouds(data, lab)? {
        labeled.push(augment(c, &cfg.weak, rng)?);
    }
    let mut unlabeled = Vec::with_capacity(unl.len());
    let mut weak = Vec::with_capacity(unl.len());
    let mut strong = Vec::with_capacity(unl.len());
    for c in clouds(data, unl)? {
        weak.push(augment(c, &cfg.weak, rng)?);
        strong.push(augment(c, &cfg.strong, rng)?);
        unlabeled.push(c.clone());
    }
    Ok(SslBatch {
        labeled,
        labels: labels(data, lab)?,
        unlabeled_ids: unl.to_vec(),
        unlabeled,
        weak,
        strong,
    })
}

/// Mean predicted weight per cohort over whole pools.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub mean_unlabeled: f64,
    pub mean_labeled: f64,
}

/// Predictor weights for samples at the current task parameters.
pub fn predict_weights(
    net: &TaskNet,
    pred: &WeightPredictor,
    theta: &ParamSet,
    phi: &ParamSet,
    data: &Dataset,
    ids: &[u64],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(64) {
        let f = net.features_batch(theta, &clouds(data, chunk)?)?;
        let rows: Vec<Tensor> = (0..chunk.len())
            .map(|i| Tensor::vector(f.row(i).to_vec()))
            .collect::<Result<_>>()?;
        out.extend(pred.weights(phi, &rows)?);
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Labeled-only task training plus predictor initialization: weights pushed
/// to 0 on unlabeled batches and to 1 on validation batches. The task
/// parameters never see the unlabeled pool.
pub fn warmup(cfg: &TrainConfig, data: &Dataset, pools: &Pools, state: &mut TrainState) -> Result<WarmupReport> {
    cfg.validate()?;
    let net = cfg.task_net(data.classes);
    let pred = cfg.predictor(net.feature_dim());
    let iters = cfg.iterations(pools);
    while state.warmup_done < cfg.warmup_epochs {
        let e = state.warmup_done as u64;
        let (train, val) = epoch_split(&pools.labeled, &mut keyed(cfg.seed, Domain::WarmupSplit, e))?;
        for it in 0..iters as u64 {
            let mut rng = keyed(cfg.seed, Domain::WarmupBatch, pair_key(e, it));
            let lab = choose(&train, cfg.labeled_batch, &mut rng);
            let mut lab_clouds = Vec::with_capacity(lab.len());
            for c in clouds(data, &lab)? {
                lab_clouds.push(augment(c, &cfg.weak, &mut rng)?);
            }
            let mut tape = Tape::new();
            let p = tape.bind(&state.theta, true);
            let refs: Vec<&Tensor> = lab_clouds.iter().collect();
            let l = labeled_loss_on_tape(&net, &mut tape, &p, &refs, &labels(data, &lab)?)?;
            let g = tape.backward_params(l)?;
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("warm-up gradient at epoch {e} iteration {it}")));
            }
            state.theta.add_scaled_in_place(&g, -cfg.alpha)?;
            state.average(cfg.eval_average)?;

            if pools.unlabeled.is_empty() || cfg.warmup_phi_steps == 0 {
                continue;
            }
            let mut prng = keyed(cfg.seed, Domain::WarmupBatch, pair_key(e, it) | 1 << 63);
            let unl = choose(&pools.unlabeled, cfg.unlabeled_batch, &mut prng);
            let vb = choose(&val, cfg.val_batch, &mut prng);
            let fu = net.features_batch(&state.theta, &clouds(data, &unl)?)?;
            let fv = net.features_batch(&state.theta, &clouds(data, &vb)?)?;
            fit_predictor(&pred, &mut state.phi, &fu, &fv, cfg.warmup_phi_steps, cfg.warmup_phi_lr)?;
        }
        state.warmup_done += 1;
        if state.warmup_done == cfg.warmup_epochs && !pools.unlabeled.is_empty() && cfg.warmup_phi_final_steps > 0 {
            let fu = features_of(&net, &state.theta, data, &pools.unlabeled)?;
            let fv = features_of(&net, &state.theta, data, &pools.labeled)?;
            fit_predictor(&pred, &mut state.phi, &fu, &fv, cfg.warmup_phi_final_steps, cfg.warmup_phi_lr)?;
        }
    }
    Ok(WarmupReport {
        mean_unlabeled: mean(&predict_weights(&net, &pred, &state.theta, &state.phi, data, &pools.unlabeled)?),
        mean_labeled: mean(&predict_weights(&net, &pred, &state.theta, &state.phi, data, &pools.labeled)?),
    })
}

fn features_of(net: &TaskNet, theta: &ParamSet, data: &Dataset, ids: &[u64]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(ids.len() * net.feature_dim());
    for chunk in ids.chunks(64) {
        rows.extend_from_slice(net.features_batch(theta, &clouds(data, chunk)?)?.data());
    }
    Tensor::matrix(ids.len(), net.feature_dim(), rows)
}

/// Balanced cross-entropy steps pushing weights to 0 on `unlabeled` rows and
/// to 1 on `validation` rows.
fn fit_predictor(
    pred: &WeightPredictor,
    phi: &mut ParamSet,
    unlabeled: &Tensor,
    validation: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<()> {
    let nu = unlabeled.shape()[0];
    let mut adam = Adam::new(phi.num_scalars(), lr);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let p = tape.bind(phi, true);
        let xu = tape.constant(unlabeled.clone());
        let wu = pred.predict_weight(&mut tape, &p, xu)?;
        let ones = tape.constant(Tensor::full(&[nu], 1.0));
        let cu = tape.sub(ones, wu)?;
        let lu = tape.ln(cu);
        let lu = tape.mean(lu)?;
        let xv = tape.constant(validation.clone());
        let wv = pred.predict_weight(&mut tape, &p, xv)?;
        let lv = tape.ln(wv);
        let lv = tape.mean(lv)?;
        let s = tape.add(lu, lv)?;
        let loss = tape.neg(s);
        let g = tape.backward_params(loss)?;
        let step = adam.step(&g.flatten());
        phi.add_scaled_in_place(&phi.unflatten(&step)?, 1.0)?;
    }
    Ok(())
}

/// Adam moments for the predictor warm-up.
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// The parameter increment for gradient `g`.
    fn step(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
                self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
                -self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

fn cohort_of(data: &Dataset, id: u64) -> Result<Cohort> {
    Ok(data.get(id)?.cohort)
}

fn fill_cohort_means(rec: &mut MetricsRecord, ledger: &WeightLedger) {
    let m = ledger.cohort_means();
    rec.mean_u = m.get(&Cohort::U).copied();
    rec.mean_w = m.get(&Cohort::W).copied();
    rec.mean_s = m.get(&Cohort::S).copied();
    rec.mean_o = m.get(&Cohort::O).copied();
}

/// Runs `epochs` main-loop epochs from `state.epoch`.
pub fn run_epochs(
    cfg: &TrainConfig,
    data: &Dataset,
    pools: &Pools,
    state: &mut TrainState,
    weighting: Weighting<'_>,
    epochs: usize,
    observer: &mut dyn Observer,
) -> Result<()> {
    cfg.validate()?;
    let net = cfg.task_net(data.classes);
    let pred = cfg.predictor(net.feature_dim());
    let iters = cfg.iterations(pools);
    if let Weighting::Fixed(map) = weighting {
        if let Some(id) = pools.unlabeled.iter().find(|id| !map.contains_key(id)) {
            return Err(Error::InvalidArgument(format!("no fixed weight for unlabeled sample {id}")));
        }
    }
    let test: Vec<&Sample> = data.cohort(Cohort::T).collect();
    for _ in 0..epochs {
        let e = state.epoch as u64;
        let (train, val) = epoch_split(&pools.labeled, &mut keyed(cfg.seed, Domain::Split, e))?;
        let mut order = pools.unlabeled.clone();
        order.shuffle(&mut keyed(cfg.seed, Domain::Batch, e));
        let xi = cfg.schedule.weight(state.epoch, cfg.delta);
        for it in 0..iters {
            let mut rng = keyed(cfg.seed, Domain::Augment, pair_key(e, it as u64));
            let lab = choose(&train, cfg.labeled_batch, &mut rng);
            let vb = choose(&val, cfg.val_batch, &mut rng);
            let unl: Vec<u64> = if order.is_empty() {
                Vec::new()
            } else {
                (0..cfg.unlabeled_batch.min(order.len()))
                    .map(|k| order[(it * cfg.unlabeled_batch + k) % order.len()])
                    .collect()
            };
            let batch = build_batch(data, &lab, &unl, cfg, &mut rng)?;
            let val_clouds = clouds(data, &vb)?;
            let val_labels = labels(data, &vb)?;
            let mut rec = MetricsRecord {
                epoch: state.epoch,
                iteration: it,
                xi,
                ..MetricsRecord::default()
            };

            let do_meta = matches!(weighting, Weighting::Meta) && it % cfg.meta_every == 0;
            let (grad, weights, train_loss) = if matches!(weighting, Weighting::Meta) {
                let problem = SslProblem::new(&net, &pred, &batch, val_clouds.clone(), val_labels.clone(), &state.theta, cfg.threshold)?;
                if do_meta {
                    let w_old = problem.weights(&state.phi)?;
                    let targets = state.ledger.targets(&unl, &w_old, cfg.moving_average);
                    let val_features = net.features_batch(&state.theta, &val_clouds)?;
                    let reg = Regularizers {
                        predictor: &pred,
                        unlabeled_features: &problem.unlabeled_features,
                        targets: &targets,
                        val_features: &val_features,
                        gamma: cfg.gamma,
                        xi,
                        eta: cfg.eta,
                    };
                    let (phi, report) = meta_step(&problem, &state.theta, &state.phi, cfg.alpha, cfg.meta_lr, cfg.difference, Some(&reg))?;
                    state.counters.meta_gradients += 1;
                    state.counters.phi_updates += 1;
                    state.phi = phi;
                    rec.set_report(&report);
                }
                let w = match cfg.frozen_weight {
                    Some(c) => vec![c; unl.len()],
                    None => problem.weights(&state.phi)?,
                };
                let g = problem.train_grad_with_weights(&state.theta, &w)?;
                let loss = problem.train_loss_value(&w)?;
                if !do_meta {
                    rec.val_loss = problem_val(&net, &state.theta, &val_clouds, &val_labels)?;
                }
                (g, w, loss)
            } else {
                let w: Vec<f64> = match weighting {
                    Weighting::Fixed(map) => unl.iter().map(|id| map[id]).collect(),
                    Weighting::Constant(c) => vec![c; unl.len()],
                    Weighting::Meta => unreachable!(),
                };
                let mut graph = TrainGraph::record(&net, &state.theta, &batch, cfg.threshold, true)?;
                let g = graph.grad(&w)?;
                let loss = graph.loss_value(&w)?;
                rec.val_loss = problem_val(&net, &state.theta, &val_clouds, &val_labels)?;
                (g, w, loss)
            };
            if !grad.all_finite() || !train_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "task step at epoch {} iteration {it}: training loss {train_loss}, validation loss {}, weights {:?}",
                    state.epoch,
                    rec.val_loss,
                    &weights[..weights.len().min(8)]
                )));
            }
            state.theta.add_scaled_in_place(&grad, -cfg.alpha)?;
            state.counters.task_steps += 1;
            state.average(cfg.eval_average)?;
            for (id, w) in unl.iter().zip(&weights) {
                state.ledger.update(*id, cohort_of(data, *id)?, *w);
            }
            rec.train_loss = train_loss;
            fill_cohort_means(&mut rec, &state.ledger);
            if it + 1 == iters && cfg.eval_every > 0 && (state.epoch + 1) % cfg.eval_every == 0 && !test.is_empty() {
                rec.accuracy = Some(evaluate(&net, &state.theta_avg, &test)?);
            }
            observer.on_iteration(&rec)?;
        }
        state.epoch += 1;
        observer.on_epoch_end(state)?;
    }
    Ok(())
}

fn problem_val(net: &TaskNet, theta: &ParamSet, val: &[&Tensor], labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.bind(theta, false);
    let l = labeled_loss_on_tape(net, &mut tape, &p, val, labels)?;
    Ok(tape.scalar(l))
}

/// Bi-level training for `cfg.epochs` epochs after warm-up.
pub fn train_rebo(cfg: &TrainConfig, data: &Dataset, pools: &Pools, state: &mut TrainState, observer: &mut dyn Observer) -> Result<()> {
    if state.warmup_done < cfg.warmup_epochs {
        return Err(Error::InvalidArgument("warm-up not completed".into()));
    }
    let remaining = cfg.epochs.saturating_sub(state.epoch);
    run_epochs(cfg, data, pools, state, Weighting::Meta, remaining, observer)
}

/// Uniform-weight semi-supervised training (every weight 1).
pub fn train_baseline(cfg: &TrainConfig, data: &Dataset, pools: &Pools, state: &mut TrainState, observer: &mut dyn Observer) -> Result<()> {
    let remaining = cfg.epochs.saturating_sub(state.epoch);
    run_epochs(cfg, data, pools, state, Weighting::Constant(1.0), remaining, observer)
}

/// Retrains the task network with fixed per-sample weights; the predictor is
/// never touched. `state` should hold a freshly warmed-up task network.
pub fn transfer_retrain(
    cfg: &TrainConfig,
    data: &Dataset,
    pools: &Pools,
    weights: &BTreeMap<u64, f64>,
    state: &mut TrainState,
    observer: &mut dyn Observer,
) -> Result<()> {
    let remaining = cfg.epochs.saturating_sub(state.epoch);
    run_epochs(cfg, data, pools, state, Weighting::Fixed(weights), remaining, observer)
}

/// Continues bi-level training of both networks on `pools` for `epochs`.
pub fn finetune(
    cfg: &TrainConfig,
    data: &Dataset,
    pools: &Pools,
    state: &mut TrainState,
    epochs: usize,
    observer: &mut dyn Observer,
) -> Result<()> {
    run_epochs(cfg, data, pools, state, Weighting::Meta, epochs, observer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinualMode {
    /// Weights of unseen samples predicted once and frozen; only the task
    /// network keeps training.
    EstimateFix,
    /// Full bi-level training including the unseen samples.
    FineTune,
}

/// Continual training after adding `unseen` unlabeled ids (already present
/// in `data`) to the unlabeled pool.
pub fn continual_unseen(
    cfg: &TrainConfig,
    data: &Dataset,
    pools: &Pools,
    unseen: &[u64],
    mode: ContinualMode,
    state: &mut TrainState,
    epochs: usize,
    observer: &mut dyn Observer,
) -> Result<()> {
    let mut all = pools.clone();
    all.unlabeled.extend_from_slice(unseen);
    match mode {
        ContinualMode::FineTune => run_epochs(cfg, data, &all, state, Weighting::Meta, epochs, observer),
        ContinualMode::EstimateFix => {
            let map = estimate_fixed_weights(cfg, data, pools, unseen, state)?;
            run_epochs(cfg, data, &all, state, Weighting::Fixed(&map), epochs, observer)
        }
    }
}

/// Frozen weights for continual training: the last ledger weight of every
/// seen sample, and a single prediction for unseen samples and for seen
/// samples never visited.
pub fn estimate_fixed_weights(
    cfg: &TrainConfig,
    data: &Dataset,
    pools: &Pools,
    unseen: &[u64],
    state: &TrainState,
) -> Result<BTreeMap<u64, f64>> {
    let net = cfg.task_net(data.classes);
    let pred = cfg.predictor(net.feature_dim());
    let mut map = BTreeMap::new();
    let missing: Vec<u64> = pools
        .unlabeled
        .iter()
        .copied()
        .filter(|id| state.ledger.get(*id).is_none())
        .chain(unseen.iter().copied())
        .collect();
    let est = predict_weights(&net, &pred, &state.theta, &state.phi, data, &missing)?;
    for (id, w) in missing.iter().zip(est) {
        map.insert(*id, w);
    }
    for id in &pools.unlabeled {
        if let Some(e) = state.ledger.get(*id) {
            map.insert(*id, e.w);
        }
    }
    Ok(map)
}

/// Fraction of labeled samples whose argmax logit equals the label.
pub fn evaluate(net: &TaskNet, theta: &ParamSet, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let pts: Vec<&Tensor> = chunk.iter().map(|s| &s.points).collect();
        let logits = net.logits_batch(theta, &pts)?;
        for (i, s) in chunk.iter().enumerate() {
            let y = s
                .label
                .ok_or_else(|| Error::InvalidArgument(format!("test sample {} has no label", s.id)))?;
            if argmax(logits.row(i)) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Test accuracy of `theta` on cohort T.
pub fn test_accuracy(cfg: &TrainConfig, data: &Dataset, theta: &ParamSet) -> Result<f64> {
    let test: Vec<&Sample> = data.cohort(Cohort::T).collect();
    evaluate(&cfg.task_net(data.classes), theta, &test)
}

/// Ledger weights as a fixed-weight map.
pub fn ledger_weights(ledger: &WeightLedger) -> BTreeMap<u64, f64> {
    ledger.iter().map(|(id, e)| (id, e.w)).collect()
}

/// Mean `w` per cohort of the ledger.
pub fn cohort_means(ledger: &WeightLedger) -> BTreeMap<Cohort, f64> {
    ledger.cohort_means()
}
