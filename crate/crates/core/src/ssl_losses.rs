//! Labeled cross-entropy, point-cloud augmentation, thresholded
//! pseudo-label consistency, and the weighted open-set training loss
//! `mean_l CE + (1/N_u) sum_j lambda_j L_u(X_j)`.

use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{argmax, softmax, TaskNet};

/// Augmentation magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Rotation about the vertical (z) axis is uniform on `[-rotation, rotation]`.
    pub rotation: f64,
    /// Per-coordinate Gaussian noise.
    pub jitter: f64,
    /// Fraction of points replaced by duplicates of surviving points.
    pub dropout: f64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            jitter: 0.0,
            dropout: 0.0,
        }
    }

    pub fn weak() -> Self {
        Self {
            rotation: PI / 18.0,
            jitter: 0.005,
            dropout: 0.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            rotation: PI / 2.0,
            jitter: 0.02,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation >= 0.0) || !(self.jitter >= 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("bad augmentation spec {self:?}")));
        }
        Ok(())
    }
}

/// Rotates about z, jitters, and replaces dropped points by survivors. The
/// point count is preserved; a zero spec returns the input unchanged.
pub fn augment<R: Rng + ?Sized>(cloud: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let n = match cloud.shape() {
        [n, 3] => *n,
        s => {
            return Err(Error::ShapeMismatch {
                op: "augment",
                lhs: s.to_vec(),
                rhs: vec![0, 3],
            })
        }
    };
    let mut d = cloud.data().to_vec();
    if spec.rotation > 0.0 {
        let (s, c) = rng.random_range(-spec.rotation..=spec.rotation).sin_cos();
        for p in d.chunks_exact_mut(3) {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
    }
    if spec.jitter > 0.0 {
        for v in d.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += spec.jitter * e;
        }
    }
    let drop = (spec.dropout * n as f64).floor() as usize;
    if drop > 0 && drop < n {
        let mut dropped = vec![false; n];
        for i in sample_indices(rng, n, drop) {
            dropped[i] = true;
        }
        let survivors: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
        for i in (0..n).filter(|&i| dropped[i]) {
            let src = survivors[rng.random_range(0..survivors.len())];
            let p = [d[src * 3], d[src * 3 + 1], d[src * 3 + 2]];
            d[i * 3..i * 3 + 3].copy_from_slice(&p);
        }
    }
    Tensor::new(vec![n, 3], d)
}

/// Mean cross-entropy of labeled clouds on an existing tape.
pub fn labeled_loss_on_tape(
    net: &TaskNet,
    tape: &mut Tape,
    p: &Bound,
    clouds: &[&Tensor],
    labels: &[usize],
) -> Result<Var> {
    if clouds.is_empty() {
        return Err(Error::Empty("labeled batch"));
    }
    let f = net.encode_batch(tape, p, clouds)?;
    let logits = net.classify(tape, p, f)?;
    tape.softmax_cross_entropy(logits, labels)
}

/// Mean cross-entropy of labeled clouds. `None` labels are rejected.
pub fn labeled_loss(net: &TaskNet, theta: &ParamSet, clouds: &[&Tensor], labels: &[Option<usize>]) -> Result<f64> {
    let labels = labels
        .iter()
        .enumerate()
        .map(|(i, y)| y.ok_or_else(|| Error::InvalidArgument(format!("labeled sample {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let p = tape.bind(theta, false);
    let l = labeled_loss_on_tape(net, &mut tape, &p, clouds, &labels)?;
    Ok(tape.scalar(l))
}

/// Pseudo-labels from the weak views: `argmax p` where `max p >= threshold`,
/// `None` otherwise. Evaluated without a tape, so nothing flows back.
pub fn pseudo_labels(net: &TaskNet, theta: &ParamSet, weak: &[&Tensor], threshold: f64) -> Result<Vec<Option<usize>>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0, 1], got {threshold}")));
    }
    if weak.is_empty() {
        return Ok(Vec::new());
    }
    let logits = net.logits_batch(theta, weak)?;
    Ok((0..weak.len())
        .map(|i| {
            let p = softmax(logits.row(i));
            let k = argmax(&p);
            if p[k] < threshold {
                None
            } else {
                Some(k)
            }
        })
        .collect())
}

/// Per-sample consistency losses `[B]` of the strong views against fixed
/// pseudo-labels; masked samples give exact zeros.
pub fn consistency_on_tape(
    net: &TaskNet,
    tape: &mut Tape,
    p: &Bound,
    strong: &[&Tensor],
    targets: &[Option<usize>],
) -> Result<Var> {
    let f = net.encode_batch(tape, p, strong)?;
    let logits = net.classify(tape, p, f)?;
    tape.cross_entropy_rows(logits, targets)
}

/// Per-sample consistency loss values, no gradient.
pub fn unlabeled_loss_values(net: &TaskNet, theta: &ParamSet, strong: &[&Tensor], targets: &[Option<usize>]) -> Result<Vec<f64>> {
    if strong.is_empty() || targets.iter().all(Option::is_none) {
        return Ok(vec![0.0; strong.len()]);
    }
    let mut tape = Tape::new();
    let p = tape.bind(theta, false);
    let l = consistency_on_tape(net, &mut tape, &p, strong, targets)?;
    Ok(tape.value(l).data().to_vec())
}

/// Consistency loss of one cloud: weak and strong views are drawn from `rng`
/// (weak first).
pub fn consistency_loss<R: Rng + ?Sized>(
    net: &TaskNet,
    theta: &ParamSet,
    cloud: &Tensor,
    threshold: f64,
    weak: &AugmentSpec,
    strong: &AugmentSpec,
    rng: &mut R,
) -> Result<f64> {
    let wv = augment(cloud, weak, rng)?;
    let sv = augment(cloud, strong, rng)?;
    let target = pseudo_labels(net, theta, &[&wv], threshold)?;
    if target[0].is_none() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let p = tape.bind(theta, false);
    let l = consistency_on_tape(net, &mut tape, &p, &[&sv], &target)?;
    Ok(tape.value(l).data()[0])
}

/// Augmented views for one iteration.
#[derive(Clone, Debug)]
pub struct SslBatch {
    pub labeled: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub unlabeled_ids: Vec<u64>,
    /// Unaugmented unlabeled clouds (the predictor's input).
    pub unlabeled: Vec<Tensor>,
    pub weak: Vec<Tensor>,
    pub strong: Vec<Tensor>,
}

impl SslBatch {
    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }
}

fn refs(v: &[Tensor]) -> Vec<&Tensor> {
    v.iter().collect()
}

/// A recorded forward pass of the task loss at fixed `theta`. The labeled
/// term and the per-sample unlabeled losses are on the tape once; weighted
/// totals for any weight vector can be appended afterwards.
pub struct TrainGraph {
    tape: Tape,
    labeled: Var,
    unlabeled: Option<Var>,
    n_u: usize,
    pub targets: Vec<Option<usize>>,
}

impl TrainGraph {
    /// Records the forward pass. With `trainable` false nothing is
    /// differentiable and only loss values are available.
    pub fn record(
        net: &TaskNet,
        theta: &ParamSet,
        batch: &SslBatch,
        threshold: f64,
        trainable: bool,
    ) -> Result<Self> {
        let targets = pseudo_labels(net, theta, &refs(&batch.weak), threshold)?;
        Self::record_with_targets(net, theta, batch, targets, trainable)
    }

    /// As [`record`](Self::record) with the pseudo-labels supplied.
    pub fn record_with_targets(
        net: &TaskNet,
        theta: &ParamSet,
        batch: &SslBatch,
        targets: Vec<Option<usize>>,
        trainable: bool,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let p = tape.bind(theta, trainable);
        let labeled = labeled_loss_on_tape(net, &mut tape, &p, &refs(&batch.labeled), &batch.labels)?;
        let n_u = batch.num_unlabeled();
        let unlabeled = if n_u == 0 || targets.iter().all(Option::is_none) {
            None
        } else {
            Some(consistency_on_tape(net, &mut tape, &p, &refs(&batch.strong), &targets)?)
        };
        Ok(Self {
            tape,
            labeled,
            unlabeled,
            n_u,
            targets,
        })
    }

    pub fn labeled_value(&self) -> f64 {
        self.tape.scalar(self.labeled)
    }

    /// Per-sample unlabeled losses `L_u(X_j)`.
    pub fn unlabeled_values(&self) -> Vec<f64> {
        match self.unlabeled {
            Some(u) => self.tape.value(u).data().to_vec(),
            None => vec![0.0; self.n_u],
        }
    }

    /// Appends `labeled + (1/N_u) sum_j w_j u_j` and returns it.
    pub fn weighted(&mut self, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.n_u {
            return Err(Error::ShapeMismatch {
                op: "training_loss weights",
                lhs: vec![weights.len()],
                rhs: vec![self.n_u],
            });
        }
        let Some(u) = self.unlabeled else {
            return Ok(self.labeled);
        };
        let w = self.tape.constant(Tensor::vector(weights.to_vec())?);
        let wu = self.tape.mul(w, u)?;
        let s = self.tape.sum(wu);
        let s = self.tape.scale(s, 1.0 / self.n_u as f64);
        self.tape.add(self.labeled, s)
    }

    pub fn loss_value(&mut self, weights: &[f64]) -> Result<f64> {
        let l = self.weighted(weights)?;
        Ok(self.tape.scalar(l))
    }

    /// Gradient of the weighted loss with respect to `theta`.
    pub fn grad(&mut self, weights: &[f64]) -> Result<ParamSet> {
        let l = self.weighted(weights)?;
        self.tape.backward_params(l)
    }

    /// Gradient of the labeled term alone.
    pub fn labeled_grad(&self) -> Result<ParamSet> {
        self.tape.backward_params(self.labeled)
    }
}

/// Value of the weighted training loss with weights given explicitly.
pub fn training_loss_with_weights(
    net: &TaskNet,
    theta: &ParamSet,
    batch: &SslBatch,
    weights: &[f64],
    threshold: f64,
) -> Result<f64> {
    TrainGraph::record(net, theta, batch, threshold, false)?.loss_value(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(32, 3, (0..96).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_augment() {
        let c = cloud(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&c, &AugmentSpec::identity(), &mut rng).unwrap(), c);
    }

    #[test]
    fn dropout_keeps_count_and_uses_survivors() {
        let c = cloud(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = AugmentSpec {
            rotation: 0.0,
            jitter: 0.0,
            dropout: 0.5,
        };
        let a = augment(&c, &spec, &mut rng).unwrap();
        assert_eq!(a.shape(), c.shape());
        let rows: Vec<&[f64]> = (0..32).map(|i| &c.data()[i * 3..i * 3 + 3]).collect();
        assert!(a.data().chunks(3).all(|p| rows.contains(&p)));
        let distinct = {
            let mut v: Vec<Vec<u64>> = a.data().chunks(3).map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
            v.sort();
            v.dedup();
            v.len()
        };
        assert_eq!(distinct, 16);
    }

    #[test]
    fn masked_consistency_is_zero() {
        let net = TaskNet::new(vec![3, 8], vec![], 4);
        let theta = net.init(0).unwrap().zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = consistency_loss(&net, &theta, &cloud(3), 0.95, &AugmentSpec::weak(), &AugmentSpec::strong(), &mut rng)
            .unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn rejects_missing_label() {
        let net = TaskNet::new(vec![3, 8], vec![], 4);
        let theta = net.init(0).unwrap();
        let c = cloud(1);
        assert!(labeled_loss(&net, &theta, &[&c], &[None]).is_err());
    }
}
