//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node whose inputs precede it, so the node list
//! is always in topological order and the backward sweep is a single reverse
//! pass. A tape is built per minibatch and dropped after `backward`.

use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use super::linalg::gemm;
use super::params::ParameterSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(String),
    Constant,
    Affine { x: usize, w: usize, b: Option<usize> },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Exp(usize),
    Log(usize),
    Clamp { a: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Softmax(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    BernoulliLogLik { logits: usize, target: usize },
    Reparameterize { mu: usize, logvar: usize, eps: Tensor },
    WeightedSqDist { a: usize, anchor: Tensor, weight: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BernoulliLogLik { .. } => "bernoulli_log_likelihood",
            Op::Reparameterize { .. } => "reparameterize",
            Op::WeightedSqDist { .. } => "weighted_sq_dist",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Param(_) | Op::Constant => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Clamp { a, .. }
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Softmax(a)
            | Op::WeightedSqDist { a, .. } => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
            Op::BernoulliLogLik { logits, target } => vec![logits, target],
            Op::Reparameterize { mu, logvar, .. } => vec![mu, logvar],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Forward by-products reused by backward (softmax probabilities).
    aux: Option<Vec<f64>>,
}

/// One recorded primitive, as exposed for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub name: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Parameters of a [`ParameterSet`] bound as leaves on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Misaligned(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: IndexMap<String, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.index].value
    }

    /// The recorded primitives in execution order.
    pub fn records(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                name: n.op.name(),
                inputs: n.op.inputs(),
                output: i,
            })
            .collect()
    }

    fn check(&self, v: Var) {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
    }

    fn push(&mut self, value: Tensor, op: Op, aux: Option<Vec<f64>>) -> Var {
        let needs_grad = match &op {
            Op::Param(_) => value.requires_grad(),
            Op::Constant => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Binds a named parameter as a differentiable leaf (when the tensor
    /// requires grad).
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` bound twice")));
        }
        let v = self.push(value.clone(), Op::Param(name.to_string()), None);
        self.params.insert(name.to_string(), v.index);
        Ok(v)
    }

    pub fn bind(&mut self, params: &ParameterSet) -> Result<Bound> {
        let mut vars = IndexMap::new();
        for (name, t) in params.iter() {
            vars.insert(name.to_string(), self.param(name, t)?);
        }
        Ok(Bound { vars })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Constant, None)
    }

    /// `x · w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x);
        self.check(w);
        let (xv, wv) = (&self.nodes[x.index].value, &self.nodes[w.index].value);
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(Error::shape("affine", wv.shape(), xv.shape()));
        }
        let (batch, inp, out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
        let mut y = vec![0.0; batch * out];
        if let Some(b) = b {
            self.check(b);
            let bv = &self.nodes[b.index].value;
            if bv.shape() != [out] {
                return Err(Error::shape("affine bias", &[out], bv.shape()));
            }
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(false, false, batch, inp, out, 1.0, xv.data(), wv.data(), beta, &mut y);
        let value = Tensor::new(vec![batch, out], y)?;
        Ok(self.push(
            value,
            Op::Affine {
                x: x.index,
                w: w.index,
                b: b.map(|b| b.index),
            },
            None,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        self.check(a);
        let value = map(&self.nodes[a.index].value, f);
        self.push(value, op, None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a.index))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.index))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.index))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.index))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.index))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |v| v * k, Op::Scale(a.index, k))
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |v| v + k, Op::Shift(a.index))
    }

    /// Hard saturation into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp { a: a.index, lo, hi })
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a);
        self.check(b);
        let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.index, b.index))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.check(a);
        let s = self.nodes[a.index].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.index), None)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.check(a);
        let t = &self.nodes[a.index].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.index), None)
    }

    /// Sums each row of a `[batch, ...]` tensor into a `[batch]` vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.check(a);
        let t = &self.nodes[a.index].value;
        let data: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let value = Tensor::new(vec![t.rows()], data).expect("rows > 0");
        self.push(value, Op::SumRows(a.index), None)
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.check(a);
        let t = &self.nodes[a.index].value;
        let data = softmax_rows(t);
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(a.index), None)
    }

    /// Mean negative log-likelihood of `labels` under the row-wise softmax of
    /// `logits`, fused for numerical stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits);
        let t = &self.nodes[logits.index].value;
        if t.shape().len() != 2 || labels.len() != t.rows() {
            return Err(Error::shape("softmax_cross_entropy labels", &[t.rows()], &[labels.len()]));
        }
        let classes = t.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let probs = softmax_rows(t);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.index,
                labels: labels.to_vec(),
            },
            Some(probs),
        ))
    }

    /// Per-row Bernoulli log-likelihood `Σ t·log σ(l) + (1−t)·log(1−σ(l))`
    /// evaluated stably from the logits as `Σ t·l − softplus(l)`.
    pub fn bernoulli_log_likelihood(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.check(logits);
        self.check(target);
        let (lv, tv) = (&self.nodes[logits.index].value, &self.nodes[target.index].value);
        if lv.shape() != tv.shape() || lv.shape().len() != 2 {
            return Err(Error::shape("bernoulli_log_likelihood", lv.shape(), tv.shape()));
        }
        let data: Vec<f64> = (0..lv.rows())
            .map(|i| {
                lv.row(i)
                    .iter()
                    .zip(tv.row(i))
                    .map(|(&l, &t)| t * l - softplus(l))
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![lv.rows()], data)?;
        Ok(self.push(
            value,
            Op::BernoulliLogLik {
                logits: logits.index,
                target: target.index,
            },
            None,
        ))
    }

    /// Gaussian reparameterization `mu + exp(logvar / 2) ⊙ eps` with `eps`
    /// supplied by the caller (drawn from the reparam-noise stream).
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        self.check(mu);
        self.check(logvar);
        let (mv, lv) = (&self.nodes[mu.index].value, &self.nodes[logvar.index].value);
        if mv.shape() != lv.shape() {
            return Err(Error::shape("reparameterize logvar", mv.shape(), lv.shape()));
        }
        if eps.shape() != mv.shape() {
            return Err(Error::shape("reparameterize noise", mv.shape(), eps.shape()));
        }
        let data = mv
            .data()
            .iter()
            .zip(lv.data())
            .zip(eps.data())
            .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
            .collect();
        let value = Tensor::new(mv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Reparameterize {
                mu: mu.index,
                logvar: logvar.index,
                eps,
            },
            None,
        ))
    }

    /// `Σ weight ⊙ (a − anchor)²` as a scalar; `anchor` and `weight` are
    /// constants.
    pub fn weighted_sq_dist(&mut self, a: Var, anchor: &Tensor, weight: &Tensor) -> Result<Var> {
        self.check(a);
        let av = &self.nodes[a.index].value;
        if anchor.shape() != av.shape() {
            return Err(Error::shape("weighted_sq_dist anchor", av.shape(), anchor.shape()));
        }
        if weight.shape() != av.shape() {
            return Err(Error::shape("weighted_sq_dist weight", av.shape(), weight.shape()));
        }
        let s = av
            .data()
            .iter()
            .zip(anchor.data())
            .zip(weight.data())
            .map(|((&x, &c), &w)| w * (x - c) * (x - c))
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSqDist {
                a: a.index,
                anchor: anchor.clone(),
                weight: weight.clone(),
            },
            None,
        ))
    }

    /// Gradients of a scalar `loss` with respect to every bound parameter,
    /// returned as a fresh set (zero for parameters without a path to loss).
    pub fn backward(&self, loss: Var) -> Result<ParameterSet> {
        let mut grads = ParameterSet::new();
        for (name, &idx) in &self.params {
            grads.insert(name, Tensor::zeros(self.nodes[idx].value.shape()))?;
        }
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradients of `loss` into an existing buffer. Buffers are never
    /// cleared here; callers zero them between steps.
    pub fn backward_into(&self, loss: Var, grads: &mut ParameterSet) -> Result<()> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Disconnected("loss node is not on this tape".into()));
        }
        let loss_node = &self.nodes[loss.index];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !self
            .params
            .values()
            .any(|&i| self.nodes[i].value.requires_grad())
        {
            return Err(Error::Disconnected("no trainable parameters are bound".into()));
        }
        for (name, &idx) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Misaligned(format!("gradient buffer lacks `{name}`")))?;
            if g.shape() != self.nodes[idx].value.shape() {
                return Err(Error::shape(
                    format!("gradient buffer `{name}`"),
                    self.nodes[idx].value.shape(),
                    g.shape(),
                ));
            }
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        if loss_node.needs_grad {
            adj[loss.index] = Some(vec![1.0]);
        }
        for i in (0..=loss.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Param(name) = &node.op {
                let acc = grads.get_mut(name).expect("checked above").data_mut();
                acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| &self.nodes[i].value;
        let y = node.value.data();
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, inp, out) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    gemm(false, true, batch, out, inp, 1.0, g, wv.data(), 0.0, &mut dx);
                    accumulate(&mut adj[*x], dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; inp * out];
                    gemm(true, false, inp, batch, out, 1.0, xv.data(), g, 0.0, &mut dw);
                    accumulate(&mut adj[*w], dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![0.0; out];
                    for row in g.chunks_exact(out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(&mut adj[b], db);
                }
            }
            Op::Relu(a) => {
                let d = g.iter().zip(y).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Sigmoid(a) => {
                let d = g.iter().zip(y).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Tanh(a) => {
                let d = g.iter().zip(y).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(y).map(|(&g, &y)| g * y).collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Log(a) => {
                let d = g.iter().zip(val(*a).data()).map(|(&g, &x)| g / x).collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Scale(a, k) => {
                let d = g.iter().map(|&g| g * k).collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Shift(a) => accumulate(&mut adj[*a], g.to_vec()),
            Op::Clamp { a, lo, hi } => {
                let d = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut adj[*a], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut adj[*b], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut adj[*a], g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(&mut adj[*b], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.needs(*a) {
                    accumulate(&mut adj[*a], g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.needs(*b) {
                    accumulate(&mut adj[*b], g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Sum(a) => accumulate(&mut adj[*a], vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                accumulate(&mut adj[*a], vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let cols = val(*a).cols();
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
                accumulate(&mut adj[*a], d);
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let mut d = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                }
                accumulate(&mut adj[*a], d);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let probs = node.aux.as_ref().expect("probabilities cached");
                let cols = val(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * cols + l] -= scale;
                }
                accumulate(&mut adj[*logits], d);
            }
            Op::BernoulliLogLik { logits, target } => {
                let (lv, tv) = (val(*logits), val(*target));
                let cols = lv.cols();
                if self.needs(*logits) {
                    let d = lv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .enumerate()
                        .map(|(k, (&l, &t))| g[k / cols] * (t - sigmoid(l)))
                        .collect();
                    accumulate(&mut adj[*logits], d);
                }
                if self.needs(*target) {
                    let d = lv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &l)| g[k / cols] * l)
                        .collect();
                    accumulate(&mut adj[*target], d);
                }
            }
            Op::Reparameterize { mu, logvar, eps } => {
                if self.needs(*mu) {
                    accumulate(&mut adj[*mu], g.to_vec());
                }
                if self.needs(*logvar) {
                    let d = g
                        .iter()
                        .zip(val(*logvar).data())
                        .zip(eps.data())
                        .map(|((&g, &l), &e)| g * 0.5 * (0.5 * l).exp() * e)
                        .collect();
                    accumulate(&mut adj[*logvar], d);
                }
            }
            Op::WeightedSqDist { a, anchor, weight } => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(anchor.data())
                    .zip(weight.data())
                    .map(|((&x, &c), &w)| 2.0 * g[0] * w * (x - c))
                    .collect();
                accumulate(&mut adj[*a], d);
            }
        }
    }
}

/// Row-wise max-subtracted softmax of a matrix.
pub fn softmax_rows(t: &Tensor) -> Vec<f64> {
    let cols = t.cols();
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks_exact(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - max).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}
