//! One-step-unrolled meta-gradient for the predictor parameters.
//!
//! With `theta* = theta - alpha * grad_theta L_tr(theta, phi)` and
//! `v = grad L_val(theta*)`, the meta-gradient
//! `-alpha * d2 L_tr / (d phi d theta) . v` is approximated by a difference of
//! `grad_phi L_tr` at `theta +- eps * v`, `eps = 0.01 / |v|`.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{TaskNet, WeightPredictor};
use crate::regularizers::{loss_entropy, loss_od, loss_tikhonov};
use crate::ssl_losses::{labeled_loss_on_tape, unlabeled_loss_values, SslBatch, TrainGraph};

/// Numerator of the finite-difference radius.
pub const EPS_SCALE: f64 = 1e-2;

/// Default probe for [`oracle_meta_gradient`].
pub const ORACLE_STEP: f64 = 1e-5;

/// The pieces of a bi-level problem the meta-gradient needs.
pub trait BilevelProblem {
    /// `grad_theta L_tr(theta, phi)`.
    fn train_grad_theta(&self, theta: &ParamSet, phi: &ParamSet) -> Result<ParamSet>;
    /// `grad_phi L_tr(theta, phi)`.
    fn train_grad_phi(&self, theta: &ParamSet, phi: &ParamSet) -> Result<ParamSet>;
    fn val_loss(&self, theta: &ParamSet) -> Result<f64>;
    fn val_loss_and_grad(&self, theta: &ParamSet) -> Result<(f64, ParamSet)>;
}

/// `theta - alpha * grad`; errors when `grad` does not cover `theta`.
pub fn virtual_step(theta: &ParamSet, grad: &ParamSet, alpha: f64) -> Result<ParamSet> {
    theta.add_scaled(grad, -alpha)
}

/// `EPS_SCALE / |v|`, or [`Error::DegenerateStep`] when `v` is zero.
pub fn epsilon_of(v: &ParamSet) -> Result<f64> {
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::DegenerateStep);
    }
    if !n.is_finite() {
        return Err(Error::NonFinite("validation gradient norm".into()));
    }
    Ok(EPS_SCALE / n)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difference {
    #[default]
    Central,
    Forward,
}

/// Result of one hypergradient evaluation.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    /// `None` when the validation gradient vanished and the step is skipped.
    pub grad: Option<ParamSet>,
    pub eps: Option<f64>,
    /// `L_val(theta*)`.
    pub val_loss: f64,
    pub val_grad_norm: f64,
}

fn check_finite(p: &ParamSet, stage: &str) -> Result<()> {
    if p.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(stage.to_string()))
    }
}

/// Finite-difference hypergradient through one unrolled task step.
pub fn hvp_meta_gradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    alpha: f64,
    diff: Difference,
) -> Result<MetaGradient> {
    let g = problem.train_grad_theta(theta, phi)?;
    check_finite(&g, "training gradient")?;
    let theta_star = virtual_step(theta, &g, alpha)?;
    let (val_loss, v) = problem.val_loss_and_grad(&theta_star)?;
    check_finite(&v, "validation gradient")?;
    let val_grad_norm = v.norm();
    let eps = match epsilon_of(&v) {
        Ok(e) => e,
        Err(Error::DegenerateStep) => {
            return Ok(MetaGradient {
                grad: None,
                eps: None,
                val_loss,
                val_grad_norm,
            })
        }
        Err(e) => return Err(e),
    };
    let plus = theta.add_scaled(&v, eps)?;
    let gp = problem.train_grad_phi(&plus, phi)?;
    check_finite(&gp, "predictor gradient at theta+")?;
    let (other, denom) = match diff {
        Difference::Central => (problem.train_grad_phi(&theta.add_scaled(&v, -eps)?, phi)?, 2.0 * eps),
        Difference::Forward => (problem.train_grad_phi(theta, phi)?, eps),
    };
    check_finite(&other, "predictor gradient at theta-")?;
    let grad = gp.add_scaled(&other, -1.0)?.scaled(-alpha / denom);
    Ok(MetaGradient {
        grad: Some(grad),
        eps: Some(eps),
        val_loss,
        val_grad_norm,
    })
}

/// `L_val(theta - alpha * grad_theta L_tr(theta, phi))`.
pub fn unrolled_val_loss<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    alpha: f64,
) -> Result<f64> {
    let g = problem.train_grad_theta(theta, phi)?;
    problem.val_loss(&virtual_step(theta, &g, alpha)?)
}

/// Central difference of [`unrolled_val_loss`] in every predictor coordinate.
pub fn oracle_meta_gradient<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    alpha: f64,
    h: f64,
) -> Result<ParamSet> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("probe step must be > 0, got {h}")));
    }
    let mut flat = phi.flatten();
    let mut out = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        let up = unrolled_val_loss(problem, theta, &phi.unflatten(&flat)?, alpha)?;
        flat[i] = orig - h;
        let down = unrolled_val_loss(problem, theta, &phi.unflatten(&flat)?, alpha)?;
        flat[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("unrolled loss probing predictor coordinate {i}")));
        }
        out[i] = (up - down) / (2.0 * h);
    }
    phi.unflatten(&out)
}

/// Dense mixed partials `d/d phi_i (grad_theta L_tr)_j` by central differences
/// of [`BilevelProblem::train_grad_theta`], rows indexed by flattened `phi`.
pub fn mixed_partials<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    h: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut flat = phi.flatten();
    let mut rows = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        let up = problem.train_grad_theta(theta, &phi.unflatten(&flat)?)?.flatten();
        flat[i] = orig - h;
        let down = problem.train_grad_theta(theta, &phi.unflatten(&flat)?)?.flatten();
        flat[i] = orig;
        rows.push(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    Ok(rows)
}

/// `-alpha * M v` for a dense mixed-partial matrix `M` (rows over `phi`).
pub fn dense_meta_gradient(mixed: &[Vec<f64>], v: &[f64], alpha: f64) -> Vec<f64> {
    mixed
        .iter()
        .map(|row| -alpha * row.iter().zip(v).map(|(m, x)| m * x).sum::<f64>())
        .collect()
}

/// Coefficients and inputs of the regularized meta-objective.
#[derive(Clone, Debug)]
pub struct Regularizers<'a> {
    pub predictor: &'a WeightPredictor,
    /// Detached features of the unlabeled batch, `[B_u, F]`.
    pub unlabeled_features: &'a Tensor,
    /// Tikhonov targets for the unlabeled batch (previous weights or their
    /// moving average).
    pub targets: &'a [f64],
    /// Detached features of the validation batch, `[B_v, F]`.
    pub val_features: &'a Tensor,
    pub gamma: f64,
    pub xi: f64,
    pub eta: f64,
}

/// Gradient norms and values reported per meta step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HypergradientReport {
    pub hvp_norm: f64,
    pub tikhonov_norm: f64,
    pub entropy_norm: f64,
    pub od_norm: f64,
    pub total_norm: f64,
    /// Zero when the step was skipped.
    pub eps: f64,
    pub val_loss: f64,
    pub skipped: bool,
}

/// Gradients of `gamma * L_reg`, `xi * L_ent`, `eta * L_od` with respect to
/// `phi`. Terms with a zero coefficient are `None`.
pub fn regularizer_grads(phi: &ParamSet, reg: &Regularizers<'_>) -> Result<[Option<ParamSet>; 3]> {
    let mut out: [Option<ParamSet>; 3] = [None, None, None];
    let terms = [reg.gamma, reg.xi, reg.eta];
    for (k, &coef) in terms.iter().enumerate() {
        if coef == 0.0 {
            continue;
        }
        let mut tape = Tape::new();
        let p = tape.bind(phi, true);
        let loss = if k == 2 {
            if reg.val_features.is_empty() {
                continue;
            }
            let x = tape.constant(reg.val_features.clone());
            let w = reg.predictor.predict_weight(&mut tape, &p, x)?;
            loss_od(&mut tape, w)
        } else {
            if reg.unlabeled_features.is_empty() {
                continue;
            }
            let x = tape.constant(reg.unlabeled_features.clone());
            let w = reg.predictor.predict_weight(&mut tape, &p, x)?;
            if k == 0 {
                loss_tikhonov(&mut tape, w, reg.targets)?
            } else {
                loss_entropy(&mut tape, w)?
            }
        };
        let scaled = tape.scale(loss, coef);
        out[k] = Some(tape.backward_params(scaled)?);
    }
    Ok(out)
}

/// One gradient-descent step on `phi` along the hypergradient plus the
/// regularizer gradients. A vanished validation gradient skips the
/// hypergradient and applies only the regularizers.
pub fn meta_step<P: BilevelProblem + ?Sized>(
    problem: &P,
    theta: &ParamSet,
    phi: &ParamSet,
    alpha: f64,
    meta_lr: f64,
    diff: Difference,
    reg: Option<&Regularizers<'_>>,
) -> Result<(ParamSet, HypergradientReport)> {
    let mg = hvp_meta_gradient(problem, theta, phi, alpha, diff)?;
    let mut report = HypergradientReport {
        val_loss: mg.val_loss,
        eps: mg.eps.unwrap_or(0.0),
        skipped: mg.grad.is_none(),
        ..HypergradientReport::default()
    };
    let mut total = match &mg.grad {
        Some(g) => {
            report.hvp_norm = g.norm();
            g.clone()
        }
        None => phi.zeros_like(),
    };
    if let Some(reg) = reg {
        let [t, e, o] = regularizer_grads(phi, reg)?;
        for (g, slot) in [(t, &mut report.tikhonov_norm), (e, &mut report.entropy_norm), (o, &mut report.od_norm)] {
            if let Some(g) = g {
                *slot = g.norm();
                total.add_scaled_in_place(&g, 1.0)?;
            }
        }
    }
    check_finite(&total, "meta-gradient")?;
    report.total_norm = total.norm();
    let updated = phi.add_scaled(&total, -meta_lr)?;
    Ok((updated, report))
}

/// The semi-supervised reweighting problem on one iteration's batches.
///
/// Predictor inputs are the unlabeled features at the base `theta`, held
/// fixed; pseudo-labels are likewise fixed at the base `theta`, so that
/// every evaluation differentiates the same stop-gradient loss.
pub struct SslProblem<'a> {
    pub net: &'a TaskNet,
    pub predictor: &'a WeightPredictor,
    pub batch: &'a SslBatch,
    pub targets: Vec<Option<usize>>,
    pub unlabeled_features: Tensor,
    pub val_clouds: Vec<&'a Tensor>,
    pub val_labels: Vec<usize>,
    base: RefCell<Option<(ParamSet, TrainGraph)>>,
}

impl<'a> SslProblem<'a> {
    /// Pseudo-labels and predictor features are taken at `theta`.
    pub fn new(
        net: &'a TaskNet,
        predictor: &'a WeightPredictor,
        batch: &'a SslBatch,
        val_clouds: Vec<&'a Tensor>,
        val_labels: Vec<usize>,
        theta: &ParamSet,
        threshold: f64,
    ) -> Result<Self> {
        let graph = TrainGraph::record(net, theta, batch, threshold, true)?;
        let unlabeled_features = if batch.unlabeled.is_empty() {
            Tensor::zeros(&[0, net.feature_dim()])
        } else {
            net.features_batch(theta, &batch.unlabeled.iter().collect::<Vec<_>>())?
        };
        Ok(Self {
            net,
            predictor,
            batch,
            targets: graph.targets.clone(),
            unlabeled_features,
            val_clouds,
            val_labels,
            base: RefCell::new(Some((theta.clone(), graph))),
        })
    }

    /// Predicted weights of the unlabeled batch.
    pub fn weights(&self, phi: &ParamSet) -> Result<Vec<f64>> {
        if self.unlabeled_features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = tape.bind(phi, false);
        let x = tape.constant(self.unlabeled_features.clone());
        let w = self.predictor.predict_weight(&mut tape, &p, x)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// `grad_theta L_tr` with explicit weights.
    pub fn train_grad_with_weights(&self, theta: &ParamSet, weights: &[f64]) -> Result<ParamSet> {
        let mut base = self.base.borrow_mut();
        if let Some((t, g)) = base.as_mut() {
            if t == theta {
                return g.grad(weights);
            }
        }
        let mut g = TrainGraph::record_with_targets(self.net, theta, self.batch, self.targets.clone(), true)?;
        g.grad(weights)
    }

    /// Value of the weighted training loss at the base parameters.
    pub fn train_loss_value(&self, weights: &[f64]) -> Result<f64> {
        match self.base.borrow_mut().as_mut() {
            Some((_, g)) => g.loss_value(weights),
            None => Err(Error::InvalidArgument("training graph missing".into())),
        }
    }

    fn unlabeled_losses(&self, theta: &ParamSet) -> Result<Vec<f64>> {
        if let Some((t, g)) = self.base.borrow().as_ref() {
            if t == theta {
                return Ok(g.unlabeled_values());
            }
        }
        unlabeled_loss_values(self.net, theta, &self.batch.strong.iter().collect::<Vec<_>>(), &self.targets)
    }
}

impl BilevelProblem for SslProblem<'_> {
    fn train_grad_theta(&self, theta: &ParamSet, phi: &ParamSet) -> Result<ParamSet> {
        let w = self.weights(phi)?;
        self.train_grad_with_weights(theta, &w)
    }

    fn train_grad_phi(&self, theta: &ParamSet, phi: &ParamSet) -> Result<ParamSet> {
        let n_u = self.batch.num_unlabeled();
        if n_u == 0 {
            return Ok(phi.zeros_like());
        }
        let u = self.unlabeled_losses(theta)?;
        let mut tape = Tape::new();
        let p = tape.bind(phi, true);
        let x = tape.constant(self.unlabeled_features.clone());
        let w = self.predictor.predict_weight(&mut tape, &p, x)?;
        let c = tape.constant(Tensor::vector(u.iter().map(|v| v / n_u as f64).collect())?);
        let wu = tape.mul(c, w)?;
        let s = tape.sum(wu);
        tape.backward_params(s)
    }

    fn val_loss(&self, theta: &ParamSet) -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(theta, false);
        let l = labeled_loss_on_tape(self.net, &mut tape, &p, &self.val_clouds, &self.val_labels)?;
        Ok(tape.scalar(l))
    }

    fn val_loss_and_grad(&self, theta: &ParamSet) -> Result<(f64, ParamSet)> {
        let mut tape = Tape::new();
        let p = tape.bind(theta, true);
        let l = labeled_loss_on_tape(self.net, &mut tape, &p, &self.val_clouds, &self.val_labels)?;
        Ok((tape.scalar(l), tape.backward_params(l)?))
    }
}

/// Cosine similarity of two equally shaped parameter sets.
pub fn cosine(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let d = a.dot(b)?;
    Ok(d / (a.norm() * b.norm()).max(1e-300))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::vector(v.to_vec()).unwrap()).unwrap();
        p
    }

    #[test]
    fn virtual_step_arithmetic() {
        let theta = single("w", &[1.0]);
        let s = virtual_step(&theta, &single("w", &[2.0]), 0.1).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(virtual_step(&theta, &single("w", &[0.0]), 0.1).unwrap(), theta);
        assert_eq!(virtual_step(&theta, &single("w", &[5.0]), 0.0).unwrap(), theta);
        assert!(virtual_step(&theta, &single("u", &[1.0]), 0.1).is_err());
    }

    #[test]
    fn epsilon_rule() {
        assert!((epsilon_of(&single("v", &[2.0, 0.0])).unwrap() - 0.005).abs() < 1e-15);
        assert!((epsilon_of(&single("v", &[0.01])).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(epsilon_of(&single("v", &[0.0])), Err(Error::DegenerateStep)));
    }
}
