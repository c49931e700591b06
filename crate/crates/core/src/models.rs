//! Task network (per-point MLP + max-pool encoder, classifier head) and the
//! sample-weight predictor.
//!
//! Parameters live in [`ParamSet`]s with names `<prefix>.w<i>` (`[in, out]`)
//! and `<prefix>.b<i>` (`[out]`). The task parameters use the prefixes
//! `enc` and `cls`, the predictor uses `pred`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const ENCODER_PREFIX: &str = "enc";
pub const CLASSIFIER_PREFIX: &str = "cls";
pub const PREDICTOR_PREFIX: &str = "pred";

/// Smallest and largest weight the predictor can emit.
pub const WEIGHT_EPS: f64 = 1e-12;

/// Glorot-uniform weights, zero biases.
pub fn init_params(prefix: &str, seed: u64, widths: &[usize]) -> Result<ParamSet> {
    if widths.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "`{prefix}` needs at least two widths, got {widths:?}"
        )));
    }
    if let Some(pos) = widths.iter().position(|&w| w == 0) {
        return Err(Error::InvalidArgument(format!(
            "`{prefix}` layer {pos} has zero width"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-s..s))
            .collect();
        params.insert(format!("{prefix}.w{i}"), Tensor::matrix(fan_in, fan_out, w)?)?;
        params.insert(format!("{prefix}.b{i}"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(params)
}

fn linear(tape: &mut Tape, p: &Bound, prefix: &str, i: usize, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w{i}"))?;
    let b = p.get(&format!("{prefix}.b{i}"))?;
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

/// Architecture of the task network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNet {
    /// Per-point MLP widths, starting at 3.
    pub encoder: Vec<usize>,
    /// Hidden widths of the classifier head (between the global feature and
    /// the logits).
    pub classifier_hidden: Vec<usize>,
    pub classes: usize,
}

impl TaskNet {
    pub fn new(encoder: Vec<usize>, classifier_hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            encoder,
            classifier_hidden,
            classes,
        }
    }

    /// Encoder 3-32-64-64, head 64-32-C.
    pub fn default_for(classes: usize) -> Self {
        Self::new(vec![3, 32, 64, 64], vec![32], classes)
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder.last().unwrap_or(&0)
    }

    pub fn classifier_widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_dim()];
        w.extend_from_slice(&self.classifier_hidden);
        w.push(self.classes);
        w
    }

    fn validate(&self) -> Result<()> {
        if self.encoder.first() != Some(&3) {
            return Err(Error::InvalidArgument(format!(
                "encoder widths must start at 3, got {:?}",
                self.encoder
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(())
    }

    /// Encoder and classifier parameters, seeded independently.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let enc = init_params(ENCODER_PREFIX, seed, &self.encoder)?;
        let cls = init_params(
            CLASSIFIER_PREFIX,
            seed ^ 0x9e37_79b9_7f4a_7c15,
            &self.classifier_widths(),
        )?;
        enc.merge(cls)
    }

    /// Global feature of an `N x 3` cloud: shared per-point MLP with relu after
    /// every layer, then max over points.
    pub fn encode_global(&self, tape: &mut Tape, p: &Bound, cloud: Var) -> Result<Var> {
        let t = tape.value(cloud);
        match t.shape() {
            [0, _] => return Err(Error::Empty("point cloud")),
            [_, 3] => {}
            s => {
                return Err(Error::ShapeMismatch {
                    op: "encode_global",
                    lhs: s.to_vec(),
                    rhs: vec![0, 3],
                })
            }
        }
        let mut h = cloud;
        for i in 0..self.encoder.len() - 1 {
            h = linear(tape, p, ENCODER_PREFIX, i, h)?;
            h = tape.relu(h);
        }
        tape.max_axis(h, 0)
    }

    /// Global features `[B, F]` of `B` clouds with equal point counts, encoded
    /// as one stacked `[B * N, 3]` matrix.
    pub fn encode_batch(&self, tape: &mut Tape, p: &Bound, clouds: &[&Tensor]) -> Result<Var> {
        let Some(first) = clouds.first() else {
            return Err(Error::Empty("cloud batch"));
        };
        let n = first.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Empty("point cloud"));
        }
        let mut data = Vec::with_capacity(clouds.len() * n * 3);
        for c in clouds {
            if c.shape() != [n, 3] {
                return Err(Error::ShapeMismatch {
                    op: "encode_batch",
                    lhs: c.shape().to_vec(),
                    rhs: vec![n, 3],
                });
            }
            data.extend_from_slice(c.data());
        }
        let mut h = tape.constant(Tensor::new(vec![clouds.len() * n, 3], data)?);
        for i in 0..self.encoder.len() - 1 {
            h = linear(tape, p, ENCODER_PREFIX, i, h)?;
            h = tape.relu(h);
        }
        tape.segment_max(h, clouds.len())
    }

    /// Class logits from a global feature (`[F]` gives `[C]`, `[B, F]` gives
    /// `[B, C]`).
    pub fn classify(&self, tape: &mut Tape, p: &Bound, feature: Var) -> Result<Var> {
        let f = tape.value(feature);
        let ok = match f.shape() {
            [d] | [_, d] => *d == self.feature_dim(),
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "classify",
                lhs: f.shape().to_vec(),
                rhs: vec![self.feature_dim()],
            });
        }
        let layers = self.classifier_hidden.len() + 1;
        let mut h = feature;
        for i in 0..layers {
            h = linear(tape, p, CLASSIFIER_PREFIX, i, h)?;
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `classify(encode_global(cloud))` on a tape.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, cloud: Var) -> Result<Var> {
        let f = self.encode_global(tape, p, cloud)?;
        self.classify(tape, p, f)
    }

    /// Global feature value, no gradient.
    pub fn feature(&self, theta: &ParamSet, cloud: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.bind(theta, false);
        let c = tape.constant(cloud.clone());
        let f = self.encode_global(&mut tape, &p, c)?;
        Ok(tape.value(f).clone())
    }

    /// Feature rows `[B, F]` for a batch of clouds, no gradient.
    pub fn features_batch(&self, theta: &ParamSet, clouds: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.bind(theta, false);
        let f = self.encode_batch(&mut tape, &p, clouds)?;
        Ok(tape.value(f).clone())
    }

    /// Logit rows `[B, C]` for a batch of clouds, no gradient.
    pub fn logits_batch(&self, theta: &ParamSet, clouds: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.bind(theta, false);
        let f = self.encode_batch(&mut tape, &p, clouds)?;
        let l = self.classify(&mut tape, &p, f)?;
        Ok(tape.value(l).clone())
    }

    /// Logit values, no gradient.
    pub fn predict_logits(&self, theta: &ParamSet, cloud: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.bind(theta, false);
        let c = tape.constant(cloud.clone());
        let l = self.logits(&mut tape, &p, c)?;
        Ok(tape.value(l).clone())
    }
}

/// Softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Architecture of the weight predictor: linear layers with per-sample
/// standardization and relu after every hidden layer, sigmoid on the scalar
/// output.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightPredictor {
    pub widths: Vec<usize>,
}

impl WeightPredictor {
    pub fn new(widths: Vec<usize>) -> Self {
        Self { widths }
    }

    /// 64-32-16-1.
    pub fn default_for(feature_dim: usize) -> Self {
        Self::new(vec![feature_dim, 32, 16, 1])
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        if self.widths.last() != Some(&1) {
            return Err(Error::InvalidArgument(format!(
                "predictor must end in a single output, got {:?}",
                self.widths
            )));
        }
        init_params(PREDICTOR_PREFIX, seed, &self.widths)
    }

    /// Weights in `(0, 1)` for a `[B, F]` feature matrix, as a `[B]` vector.
    pub fn predict_weight(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let f = tape.value(features);
        let rows = match f.shape() {
            [b, d] if *d == self.input_dim() => *b,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "predict_weight",
                    lhs: s.to_vec(),
                    rhs: vec![self.input_dim()],
                })
            }
        };
        let layers = self.widths.len() - 1;
        let mut h = features;
        for i in 0..layers {
            h = linear(tape, p, PREDICTOR_PREFIX, i, h)?;
            if i + 1 < layers {
                h = tape.standardize(h)?;
                h = tape.relu(h);
            }
        }
        let s = tape.sigmoid(h);
        let s = tape.clamp(s, WEIGHT_EPS, 1.0 - WEIGHT_EPS);
        tape.reshape(s, &[rows])
    }

    /// Weight values for a batch of feature vectors, no gradient.
    pub fn weights(&self, phi: &ParamSet, features: &[Tensor]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = tape.bind(phi, false);
        let x = tape.constant(stack_rows(features)?);
        let w = self.predict_weight(&mut tape, &p, x)?;
        Ok(tape.value(w).data().to_vec())
    }
}

/// Stacks equal-length vectors into a `[B, F]` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let f = rows.first().map(Tensor::len).unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * f);
    for r in rows {
        if r.len() != f {
            return Err(Error::ShapeMismatch {
                op: "stack_rows",
                lhs: vec![f],
                rhs: r.shape().to_vec(),
            });
        }
        data.extend_from_slice(r.data());
    }
    Ok(Tensor::from_parts(vec![rows.len(), f], data))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"REBOCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a parameter checkpoint.
///
/// Layout, all integers and reals little-endian:
/// `magic "REBOCKPT"`, `u32 version = 1`, `u32 tensor count`, then per tensor
/// in name order: `u32 name length`, UTF-8 name, `u32 rank`, `u64` per
/// dimension, `f64` per element in row-major order.
pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}
