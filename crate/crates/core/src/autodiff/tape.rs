//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive evaluated on it as a node holding the
//! forward value and references to its inputs. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves are either named parameters (gradient reported by name) or
//! constants. A node only participates in the backward sweep when one of its
//! ancestors is a parameter.

use std::collections::BTreeMap;

use crate::autodiff::tensor::gemm;
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside [`Tape::ln`].
pub const LOG_FLOOR: f64 = 1e-12;
/// Variance epsilon used by [`Tape::standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MaxAxis {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SegmentMax {
        input: Var,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    RowCrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Standardize {
        input: Var,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Parameters of a [`ParamSet`] registered on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn binary_shape_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.as_matrix_dims().ok_or_else(|| Error::ShapeMismatch {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![],
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Registers a named differentiable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers every tensor of `params`. When `trainable` is false the
    /// tensors become constants, which keeps the backward sweep out of
    /// sub-graphs that only depend on them.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.param(name, t.clone())
                } else {
                    self.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        binary_shape_check("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        binary_shape_check("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        binary_shape_check("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (r, c) = matrix_dims("add_bias", tx)?;
        if tb.len() != c || tb.rank() > 1 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in 0..r {
            for (v, b) in data[row * c..(row + 1) * c].iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Matrix product. A rank-1 left operand is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        if tb.rank() != 2 || tb.shape()[0] != k || ta.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tb.shape()[1];
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut data, false);
        let shape = if ta.rank() == 1 { vec![n] } else { vec![m, n] };
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Natural log evaluated as `ln(max(x, LOG_FLOOR))`.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        let rg = self.rg(a);
        self.push(out, Op::Ln(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Maximum of a matrix along `axis` (0 reduces rows, 1 reduces columns).
    /// Ties resolve to the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = match t.shape() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "max_axis",
                    lhs: t.shape().to_vec(),
                    rhs: vec![axis],
                })
            }
        };
        let d = t.data();
        let (values, argmax) = match axis {
            0 => {
                if r == 0 {
                    return Err(Error::Empty("max over zero rows"));
                }
                let mut vals = d[..c].to_vec();
                let mut arg = vec![0usize; c];
                for i in 1..r {
                    for j in 0..c {
                        let v = d[i * c + j];
                        if v > vals[j] {
                            vals[j] = v;
                            arg[j] = i;
                        }
                    }
                }
                (vals, arg)
            }
            1 => {
                if c == 0 {
                    return Err(Error::Empty("max over zero columns"));
                }
                let mut vals = Vec::with_capacity(r);
                let mut arg = Vec::with_capacity(r);
                for i in 0..r {
                    let row = &d[i * c..(i + 1) * c];
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    vals.push(row[best]);
                    arg.push(best);
                }
                (vals, arg)
            }
            _ => return Err(Error::InvalidArgument(format!("max_axis: axis {axis}"))),
        };
        let n = values.len();
        let out = Tensor::from_parts(vec![n], values);
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::MaxAxis {
                input: a,
                axis,
                argmax,
            },
            rg,
        ))
    }

    /// Max-pools a `[G * n, F]` matrix over consecutive blocks of `n` rows,
    /// giving `[G, F]`. Ties resolve to the first row of the block.
    pub fn segment_max(&mut self, a: Var, groups: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = match t.shape() {
            [r, c] if groups > 0 && r % groups == 0 && *r > 0 => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "segment_max",
                    lhs: t.shape().to_vec(),
                    rhs: vec![groups],
                })
            }
        };
        let n = r / groups;
        let d = t.data();
        let mut vals = Vec::with_capacity(groups * c);
        let mut arg = Vec::with_capacity(groups * c);
        for g in 0..groups {
            let base = g * n * c;
            vals.extend_from_slice(&d[base..base + c]);
            arg.extend((0..c).map(|j| base + j));
            let out = &mut vals[g * c..];
            let idx = &mut arg[g * c..];
            for i in 1..n {
                let row = base + i * c;
                for j in 0..c {
                    if d[row + j] > out[j] {
                        out[j] = d[row + j];
                        idx[j] = row + j;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![groups, c], vals),
            Op::SegmentMax {
                input: a,
                argmax: arg,
            },
            rg,
        ))
    }

    /// Per-row softmax cross-entropy of `[B, C]` logits, giving `[B]`. Rows
    /// whose target is `None` contribute an exact zero and no gradient.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = matrix_dims("cross_entropy_rows", t)?;
        if b != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut out = vec![0.0; b];
        for i in 0..b {
            let Some(y) = targets[i] else { continue };
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - m).exp();
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            out[i] = m + z.ln() - row[y];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![b], out),
            Op::RowCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits` (`[B, C]`, or `[C]` for a single
    /// row) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = matrix_dims("softmax_cross_entropy", t)?;
        if b != targets.len() || b == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - m).exp();
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += m + z.ln() - row[targets[i]];
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Standardizes each row of a matrix (or a single vector) by its own mean
    /// and variance. This is the only normalization primitive; swapping in
    /// batch statistics means replacing this op.
    pub fn standardize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = matrix_dims("standardize", t)?;
        if c == 0 {
            return Err(Error::Empty("standardize over zero features"));
        }
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Standardize { input: a, inv_std }, rg))
    }

    /// Reverse sweep from a scalar node. Returns adjoints for every node that
    /// depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*bias) {
                    let tb = self.value(*bias);
                    let c = tb.len();
                    let mut d = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.as_matrix_dims().expect("checked in forward");
                let n = tb.shape()[1];
                if self.rg(*a) {
                    // dA = dC * B^T
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, &mut d, false);
                    self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
                }
                if self.rg(*b) {
                    // dB = A^T * dC
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, &mut d, false);
                    self.accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, Tensor::from_parts(node.value.shape().to_vec(), d));
            }
            Op::Ln(a) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, &x)| if x > LOG_FLOOR { gv / x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(gv, e)| gv * e).collect();
                self.accumulate(grads, *a, Tensor::from_parts(node.value.shape().to_vec(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, &x)| if x >= *lo && x <= *hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(ta.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = gd[0] / ta.len() as f64;
                self.accumulate(grads, *a, Tensor::full(ta.shape(), v));
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    Tensor::from_parts(ta.shape().to_vec(), gd.to_vec()),
                );
            }
            Op::MaxAxis {
                input,
                axis,
                argmax,
            } => {
                let ta = self.value(*input);
                let c = ta.shape()[1];
                let mut d = vec![0.0; ta.len()];
                for (j, (&i, gv)) in argmax.iter().zip(gd).enumerate() {
                    let pos = if *axis == 0 { i * c + j } else { j * c + i };
                    d[pos] += gv;
                }
                self.accumulate(grads, *input, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::SegmentMax { input, argmax } => {
                let ta = self.value(*input);
                let mut d = vec![0.0; ta.len()];
                for (&pos, gv) in argmax.iter().zip(gd) {
                    d[pos] += gv;
                }
                self.accumulate(grads, *input, Tensor::from_parts(ta.shape().to_vec(), d));
            }
            Op::RowCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = probs.len() / targets.len();
                let mut d = vec![0.0; probs.len()];
                for (i, y) in targets.iter().enumerate() {
                    let Some(y) = *y else { continue };
                    for j in 0..c {
                        d[i * c + j] = probs[i * c + j] * gd[i];
                    }
                    d[i * c + y] -= gd[i];
                }
                self.accumulate(grads, *logits, Tensor::from_parts(tl.shape().to_vec(), d));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let b = targets.len();
                let c = probs.len() / b;
                let scale = gd[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in targets.iter().enumerate() {
                    d[i * c + y] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(tl.shape().to_vec(), d));
            }
            Op::Standardize { input, inv_std } => {
                let ta = self.value(*input);
                let y = node.value.data();
                let c = y.len() / inv_std.len();
                let mut d = vec![0.0; y.len()];
                for (i, inv) in inv_std.iter().enumerate() {
                    let gy = &gd[i * c..(i + 1) * c];
                    let yy = &y[i * c..(i + 1) * c];
                    let mean_g = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[i * c + j] = inv * (gy[j] - mean_g - yy[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(ta.shape().to_vec(), d));
            }
        }
    }

    /// Gradients of every named parameter on the tape; parameters that the
    /// loss does not reach get explicit zeros.
    pub fn param_grads(&self, grads: &Gradients) -> ParamSet {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let name = n.name.as_ref()?;
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                Some((name.clone(), g))
            })
            .collect()
    }

    /// [`backward`](Self::backward) followed by [`param_grads`](Self::param_grads).
    pub fn backward_params(&self, loss: Var) -> Result<ParamSet> {
        let g = self.backward(loss)?;
        Ok(self.param_grads(&g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecv(tape: &mut Tape, name: &str, v: &[f64]) -> Var {
        tape.param(name, Tensor::vector(v.to_vec()).unwrap())
    }

    #[test]
    fn relu_sigmoid_values() {
        let mut t = Tape::new();
        let x = vecv(&mut t, "x", &[-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.scalar(s), 0.5);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward_params(y).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[6.0]);

        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        let g = t.backward_params(y).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.25]);
    }

    #[test]
    fn reused_variable_accumulates() {
        // x*x + x*x == 2x^2 -> 4x
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(1.5));
        let a = t.mul(x, x).unwrap();
        let b = t.mul(x, x).unwrap();
        let s = t.add(a, b).unwrap();
        let g = t.backward_params(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut t = Tape::new();
        let x = t.param("x", Tensor::scalar(2.0));
        let _unused = t.param("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = t.mul(x, x).unwrap();
        let g = t.backward_params(y).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = vecv(&mut t, "x", &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = vecv(&mut t, "a", &[1.0, 2.0]);
        let b = vecv(&mut t, "b", &[1.0, 2.0, 3.0]);
        match t.add(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = t.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(
            t.matmul(a, m),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(3));
        let data: Vec<f64> = (0..9).map(|v| v as f64 * 0.37 - 1.1).collect();
        let a = t.constant(Tensor::matrix(3, 3, data.clone()).unwrap());
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p).data(), data.as_slice());
    }

    #[test]
    fn ln_is_clamped() {
        let mut t = Tape::new();
        let x = vecv(&mut t, "x", &[0.0, 1.0]);
        let l = t.ln(x);
        assert_eq!(t.value(l).data()[0], LOG_FLOOR.ln());
        assert_eq!(t.value(l).data()[1], 0.0);
    }

    #[test]
    fn constants_skip_backward() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let y = t.mul(c, c).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
    }

    #[test]
    fn max_axis_picks_first_maximum() {
        let mut t = Tape::new();
        let x = t.param(
            "x",
            Tensor::matrix(3, 2, vec![1.0, 5.0, 3.0, 5.0, 3.0, 0.0]).unwrap(),
        );
        let m = t.max_axis(x, 0).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 5.0]);
        let s = t.sum(m);
        let g = t.backward_params(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[8]));
        let ce = t.softmax_cross_entropy(l, &[3]).unwrap();
        assert!((t.scalar(ce) - 8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn segment_max_matches_per_block_max_axis() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64).collect();
        let mut t = Tape::new();
        let x = t.param("x", Tensor::matrix(6, 2, data.clone()).unwrap());
        let m = t.segment_max(x, 2).unwrap();
        for g in 0..2 {
            let mut t2 = Tape::new();
            let blk = t2.constant(Tensor::matrix(3, 2, data[g * 6..g * 6 + 6].to_vec()).unwrap());
            let mm = t2.max_axis(blk, 0).unwrap();
            assert_eq!(t2.value(mm).data(), &t.value(m).data()[g * 2..g * 2 + 2]);
        }
        assert!(t.segment_max(x, 4).is_err());
    }

    #[test]
    fn masked_rows_are_exact_zero() {
        let mut t = Tape::new();
        let l = t.param("l", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap());
        let r = t.cross_entropy_rows(l, &[None, Some(1)]).unwrap();
        assert_eq!(t.value(r).data()[0], 0.0);
        assert!((t.value(r).data()[1] - 3f64.ln()).abs() < 1e-15);
        let s = t.sum(r);
        let g = t.backward_params(s).unwrap();
        assert_eq!(&g.get("l").unwrap().data()[..3], &[0.0, 0.0, 0.0]);
    }
}
