//! Reverse-mode differentiation over a small, fixed set of matrix primitives.
//!
//! A forward pass is recorded eagerly on a [`Tape`]; [`Tape::backward`] walks
//! it once in reverse and returns gradients keyed by parameter name. Graphs
//! can only be built from the methods on `Tape`, so every recorded operation
//! has a backward rule.
//!
//! The straight-through node is the one place where forward and backward
//! disagree on purpose: in [`StMode::Hard`] it emits the one-hot argmax of
//! each row while passing the incoming gradient through unchanged. In
//! [`StMode::Surrogate`] it forwards the soft rows instead, which makes the
//! recorded function smooth and lets [`gradcheck`] compare against finite
//! differences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, fmt_shape, softmax_into, Matrix};

/// A learnable array plus its frozen/trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

/// Named learnable arrays. Iteration order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid("ParamSet::value", format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid("ParamSet::set_trainable", format!("unknown parameter `{name}`")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }
}

/// Gradients keyed by parameter name; one entry for every parameter in the
/// set the tape was recorded against.
pub type Gradients = BTreeMap<String, Matrix>;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Forward behaviour of the straight-through node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StMode {
    /// One-hot argmax forward, identity backward.
    #[default]
    Hard,
    /// Soft forward (identity); the recorded function is then differentiable
    /// everywhere and its exact gradient equals the straight-through one.
    Surrogate,
}

/// Registered primitives. Used to name a backward rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    MatMul,
    AddRow,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    Tanh,
    SoftmaxRows,
    LogFloor,
    PairwiseSqDist,
    StraightThrough,
    CrossEntropy,
    SumSquares,
    SumAll,
    ScaleByEntry,
    Entry,
}

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    SoftmaxRows(Var, f64),
    LogFloor(Var, f64),
    PairwiseSqDist(Var, Var),
    StraightThrough(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
    SumSquares(Var),
    SumAll(Var),
    ScaleByEntry { x: Var, w: Var, index: usize },
    Entry { x: Var, row: usize, col: usize },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Constant | Op::Param(_) => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddConst(..) => Primitive::AddConst,
            Op::Tanh(..) => Primitive::Tanh,
            Op::SoftmaxRows(..) => Primitive::SoftmaxRows,
            Op::LogFloor(..) => Primitive::LogFloor,
            Op::PairwiseSqDist(..) => Primitive::PairwiseSqDist,
            Op::StraightThrough(..) => Primitive::StraightThrough,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
            Op::SumSquares(..) => Primitive::SumSquares,
            Op::SumAll(..) => Primitive::SumAll,
            Op::ScaleByEntry { .. } => Primitive::ScaleByEntry,
            Op::Entry { .. } => Primitive::Entry,
        })
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

struct ParamMeta {
    name: String,
    shape: (usize, usize),
    trainable: bool,
}

/// Eagerly recorded forward pass.
pub struct Tape<'p> {
    params: &'p ParamSet,
    metas: Vec<ParamMeta>,
    index: BTreeMap<&'p str, usize>,
    nodes: Vec<Node>,
    mode: StMode,
    loss: Option<Var>,
    consumed: bool,
    fault: Option<Primitive>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet, mode: StMode) -> Self {
        let mut metas = Vec::with_capacity(params.len());
        let mut index = BTreeMap::new();
        for (i, (name, p)) in params.entries.iter().enumerate() {
            metas.push(ParamMeta {
                name: name.clone(),
                shape: p.value.shape(),
                trainable: p.trainable,
            });
            index.insert(name.as_str(), i);
        }
        Self {
            params,
            metas,
            index,
            nodes: Vec::new(),
            mode,
            loss: None,
            consumed: false,
            fault: None,
        }
    }

    pub fn mode(&self) -> StMode {
        self.mode
    }

    /// Test hook: scales the input gradients produced by one primitive's
    /// backward rule by 1.5, so gradient checks have something to catch.
    pub fn inject_fault(&mut self, primitive: Option<Primitive>) {
        self.fault = primitive;
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for the named parameter. Using the same name twice yields two
    /// leaves whose gradients are summed.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid("Tape::param", format!("unknown parameter `{name}`")))?;
        let p = &self.params.entries[name];
        let rg = self.metas[idx].trainable;
        Ok(self.push(p.value.clone(), Op::Param(idx), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x + 1·b` where `b` is a single row added to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(b) != (1, d) {
            return Err(Error::dims("add_row", fmt_shape((1, d)), fmt_shape(self.shape(b))));
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).as_slice().to_vec();
        for i in 0..n {
            for (v, bv) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRow(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// `x + c` for a constant matrix `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Matrix) -> Result<Var> {
        let value = self.value(x).add(c)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AddConst(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Row-wise tempered softmax.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("softmax_rows", format!("temperature must be positive, got {tau}")));
        }
        let src = self.value(x);
        if !src.is_finite() {
            return Err(Error::invalid("softmax_rows", "non-finite input"));
        }
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            softmax_into(src.row(i), tau, value.row_mut(i));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x, tau), rg))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(value, Op::LogFloor(x, floor), rg)
    }

    /// `out[i, j] = ‖s_i − μ_j‖²` for `s: T×D`, `mu: k×D`.
    pub fn pairwise_sq_dist(&mut self, s: Var, mu: Var) -> Result<Var> {
        let (sv, mv) = (self.value(s), self.value(mu));
        if sv.cols() != mv.cols() {
            return Err(Error::dims("pairwise_sq_dist", sv.cols(), mv.cols()));
        }
        let value = pairwise_sq_dist(sv, mv);
        let rg = self.rg(s) || self.rg(mu);
        Ok(self.push(value, Op::PairwiseSqDist(s, mu), rg))
    }

    /// Straight-through hardening; see [`StMode`].
    pub fn straight_through(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let value = match self.mode {
            StMode::Surrogate => src.clone(),
            StMode::Hard => one_hot_argmax(src),
        };
        let rg = self.rg(x);
        self.push(value, Op::StraightThrough(x), rg)
    }

    /// Mean over rows of `−log softmax(logits_i)[label_i]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(Error::dims("cross_entropy", lv.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= lv.cols()) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} out of range for {} classes", lv.cols()),
            ));
        }
        let (value, probs) = cross_entropy_mean(lv, labels);
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ x²` as a 1x1 value.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).frobenius_sq());
        let rg = self.rg(x);
        self.push(value, Op::SumSquares(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    /// `w[0, index] · x` for a row vector `w`.
    pub fn scale_by_entry(&mut self, x: Var, w: Var, index: usize) -> Result<Var> {
        let (wr, wc) = self.shape(w);
        if wr != 1 || index >= wc {
            return Err(Error::dims(
                "scale_by_entry",
                format!("1xN row with N > {index}"),
                fmt_shape((wr, wc)),
            ));
        }
        let c = self.value(w)[(0, index)];
        let value = self.value(x).scale(c);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::ScaleByEntry { x, w, index }, rg))
    }

    /// The single entry `x[row, col]` as a 1x1 value.
    pub fn entry(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if row >= r || col >= c {
            return Err(Error::dims("entry", fmt_shape((r, c)), format!("index ({row}, {col})")));
        }
        let value = Matrix::scalar(self.value(x)[(row, col)]);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Entry { x, row, col }, rg))
    }

    /// Marks `v` as the loss. It must be 1x1.
    pub fn set_loss(&mut self, v: Var) -> Result<f64> {
        let value = self.value(v);
        let Some(item) = value.item() else {
            return Err(Error::NonScalarLoss {
                rows: value.rows(),
                cols: value.cols(),
            });
        };
        self.loss = Some(v);
        Ok(item)
    }

    /// Reverse sweep. Gradients of frozen or unused parameters are all-zero.
    pub fn backward(&mut self) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss = self
            .loss
            .ok_or_else(|| Error::invalid("Tape::backward", "no loss recorded"))?;
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        let mut out: Gradients = self
            .metas
            .iter()
            .map(|m| (m.name.clone(), Matrix::zeros(m.shape.0, m.shape.1)))
            .collect();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let factor = match (self.fault, node.op.primitive()) {
                (Some(f), Some(p)) if f == p => 1.5,
                _ => 1.0,
            };
            let nodes = &self.nodes;
            let mut send = |v: Var, delta: Matrix| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let delta = if factor != 1.0 { delta.scale(factor) } else { delta };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, d) in acc.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(idx) => {
                    let meta = &self.metas[*idx];
                    if meta.trainable {
                        let acc = out.get_mut(&meta.name).expect("param registered at construction");
                        for (a, d) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *a += d;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        send(*a, g.matmul_t(&nodes[b.0].value)?);
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, nodes[a.0].value.t_matmul(&g)?);
                    }
                }
                Op::AddRow(x, b) => {
                    if nodes[b.0].requires_grad {
                        let mut col = Matrix::zeros(1, g.cols());
                        for row in g.row_iter() {
                            for (c, v) in col.as_mut_slice().iter_mut().zip(row) {
                                *c += v;
                            }
                        }
                        send(*b, col);
                    }
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].requires_grad {
                        send(*a, g.hadamard(&nodes[b.0].value)?);
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, g.hadamard(&nodes[a.0].value)?);
                    }
                }
                Op::Scale(x, c) => send(*x, g.scale(*c)),
                Op::AddConst(x) | Op::StraightThrough(x) => send(*x, g),
                Op::Tanh(x) => {
                    let y = &node.value;
                    let mut d = g;
                    for (dv, yv) in d.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *dv *= 1.0 - yv * yv;
                    }
                    send(*x, d);
                }
                Op::SoftmaxRows(x, tau) => {
                    let y = &node.value;
                    let mut d = g;
                    let inv = 1.0 / tau;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let dr = d.row_mut(i);
                        let inner: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (dv, yv) in dr.iter_mut().zip(yr) {
                            *dv = inv * yv * (*dv - inner);
                        }
                    }
                    send(*x, d);
                }
                Op::LogFloor(x, floor) => {
                    let src = &nodes[x.0].value;
                    let mut d = g;
                    for (dv, &xv) in d.as_mut_slice().iter_mut().zip(src.as_slice()) {
                        *dv = if xv > *floor { *dv / xv } else { 0.0 };
                    }
                    send(*x, d);
                }
                Op::PairwiseSqDist(s, mu) => {
                    let (sv, mv) = (&nodes[s.0].value, &nodes[mu.0].value);
                    let (t, k, dim) = (sv.rows(), mv.rows(), sv.cols());
                    let need_s = nodes[s.0].requires_grad;
                    let need_m = nodes[mu.0].requires_grad;
                    let mut ds = Matrix::zeros(t, dim);
                    let mut dm = Matrix::zeros(k, dim);
                    for i in 0..t {
                        let si = sv.row(i);
                        for j in 0..k {
                            let gij = g[(i, j)];
                            if gij == 0.0 {
                                continue;
                            }
                            let mj = mv.row(j);
                            let two_g = 2.0 * gij;
                            if need_s {
                                for ((o, a), b) in ds.row_mut(i).iter_mut().zip(si).zip(mj) {
                                    *o += two_g * (a - b);
                                }
                            }
                            if need_m {
                                for ((o, a), b) in dm.row_mut(j).iter_mut().zip(si).zip(mj) {
                                    *o -= two_g * (a - b);
                                }
                            }
                        }
                    }
                    if need_s {
                        send(*s, ds);
                    }
                    if need_m {
                        send(*mu, dm);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let upstream = g[(0, 0)] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[(i, l)] -= 1.0;
                    }
                    send(*logits, d.scale(upstream));
                }
                Op::SumSquares(x) => {
                    let c = 2.0 * g[(0, 0)];
                    send(*x, nodes[x.0].value.scale(c));
                }
                Op::SumAll(x) => {
                    let (r, c) = nodes[x.0].value.shape();
                    send(*x, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::ScaleByEntry { x, w, index } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    if nodes[w.0].requires_grad {
                        let mut dw = Matrix::zeros(1, wv.cols());
                        dw[(0, *index)] = crate::math::dot(g.as_slice(), xv.as_slice());
                        send(*w, dw);
                    }
                    if nodes[x.0].requires_grad {
                        send(*x, g.scale(wv[(0, *index)]));
                    }
                }
                Op::Entry { x, row, col } => {
                    let (r, c) = nodes[x.0].value.shape();
                    let mut d = Matrix::zeros(r, c);
                    d[(*row, *col)] = g[(0, 0)];
                    send(*x, d);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn pairwise_sq_dist(s: &Matrix, mu: &Matrix) -> Matrix {
    let (t, k) = (s.rows(), mu.rows());
    let mut out = Matrix::zeros(t, k);
    for i in 0..t {
        let si = s.row(i);
        let row = out.row_mut(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = crate::math::sq_dist_unchecked(si, mu.row(j));
        }
    }
    out
}

pub(crate) fn one_hot_argmax(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let j = argmax(x.row(i));
        out[(i, j)] = 1.0;
    }
    out
}

/// Mean cross-entropy and the row softmax of `logits`.
pub(crate) fn cross_entropy_mean(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse - row[label];
        for (p, v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    (total / labels.len() as f64, probs)
}

/// Records `graph` against `params` and returns the scalar loss and its tape.
pub fn forward_record<'p, F>(params: &'p ParamSet, mode: StMode, graph: F) -> Result<(f64, Tape<'p>)>
where
    F: FnOnce(&mut Tape<'p>) -> Result<Var>,
{
    let mut tape = Tape::new(params, mode);
    let out = graph(&mut tape)?;
    let value = tape.set_loss(out)?;
    Ok((value, tape))
}

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    /// `[row, col]` of the worst coordinate; absent when nothing was checked.
    pub argmax_coordinate: Option<[usize; 2]>,
    #[serde(skip)]
    pub trainable: bool,
    #[serde(skip)]
    pub coordinates: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub params: BTreeMap<String, ParamCheck>,
}

impl GradcheckReport {
    /// Largest relative error over all parameters, with its name.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.params
            .iter()
            .map(|(n, c)| (n.as_str(), c.max_rel_err))
            .fold(None, |best, (n, e)| match best {
                Some((_, b)) if b >= e => best,
                _ => Some((n, e)),
            })
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.params.values().all(|c| c.max_rel_err < tolerance)
    }

    /// Only the parameters whose coordinates were actually perturbed.
    pub fn trainable_only(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(_, c)| c.trainable)
                .map(|(n, c)| (n.clone(), c.clone()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.params).expect("report is plain data")
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares [`Tape::backward`] with central differences on every coordinate
/// of every trainable parameter. The graph is recorded in
/// [`StMode::Surrogate`], so straight-through nodes are checked against
/// their soft forward.
pub fn gradcheck<F>(params: &ParamSet, eps: f64, graph: F) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    gradcheck_with_fault(params, eps, None, graph)
}

pub fn gradcheck_with_fault<F>(
    params: &ParamSet,
    eps: f64,
    fault: Option<Primitive>,
    graph: F,
) -> Result<GradcheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid("gradcheck", format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let (v, _) = forward_record(p, StMode::Surrogate, |t| graph(t))?;
        Ok(v)
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic = {
        let mut tape = Tape::new(params, StMode::Surrogate);
        tape.inject_fault(fault);
        let out = graph(&mut tape)?;
        tape.set_loss(out)?;
        tape.backward()?
    };

    let mut report = GradcheckReport::default();
    let mut probe = params.clone();
    for (name, param) in params.iter() {
        let mut check = ParamCheck {
            max_rel_err: 0.0,
            argmax_coordinate: None,
            trainable: param.trainable,
            coordinates: 0,
        };
        if param.trainable {
            let cols = param.value.cols();
            let grad = &analytic[name];
            for idx in 0..param.value.len() {
                let orig = param.value.as_slice()[idx];
                let set = |probe: &mut ParamSet, v: f64| {
                    probe.get_mut(name).expect("cloned set").value.as_mut_slice()[idx] = v;
                };
                set(&mut probe, orig + eps);
                let plus = eval(&probe)?;
                set(&mut probe, orig - eps);
                let minus = eval(&probe)?;
                set(&mut probe, orig);
                let numeric = (plus - minus) / (2.0 * eps);
                let err = relative_error(grad.as_slice()[idx], numeric);
                if check.argmax_coordinate.is_none() || err > check.max_rel_err {
                    check.max_rel_err = err;
                    check.argmax_coordinate = Some([idx / cols, idx % cols]);
                }
                check.coordinates += 1;
            }
        }
        report.params.insert(name.to_string(), check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::SeededRng;

    fn single(name: &str, value: Matrix) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, value, true);
        p
    }

    #[test]
    fn square_value_and_grad() {
        let params = single("x", Matrix::scalar(3.0));
        let (v, mut tape) = forward_record(&params, StMode::Hard, |t| {
            let x = t.param("x")?;
            t.mul(x, x)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        let g = tape.backward().unwrap();
        assert_eq!(g["x"].item(), Some(6.0));
    }

    #[test]
    fn two_way_softmax_grad_at_zero() {
        let params = single("x", Matrix::scalar(0.0));
        let pad = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let (v, mut tape) = forward_record(&params, StMode::Hard, |t| {
            let x = t.param("x")?;
            let sel = t.constant(pad.clone());
            let logits = t.matmul(x, sel)?;
            let p = t.softmax_rows(logits, 1.0)?;
            t.entry(p, 0, 0)
        })
        .unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let g = tape.backward().unwrap();
        // σ'(0) = σ(0)(1 − σ(0)) = 0.25
        assert!((g["x"].item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn constant_graph_has_zero_grads() {
        let params = single("x", Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let (_, mut tape) = forward_record(&params, StMode::Hard, |t| {
            Ok(t.constant(Matrix::scalar(4.0)))
        })
        .unwrap();
        let g = tape.backward().unwrap();
        assert!(g["x"].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_params_get_zero_grads() {
        let mut params = ParamSet::new();
        params.insert("a", Matrix::scalar(2.0), false);
        params.insert("b", Matrix::scalar(5.0), false);
        let (_, mut tape) = forward_record(&params, StMode::Hard, |t| {
            let a = t.param("a")?;
            let b = t.param("b")?;
            t.mul(a, b)
        })
        .unwrap();
        let g = tape.backward().unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.values().all(|m| m.as_slice() == [0.0]));
    }

    #[test]
    fn chain_rule() {
        // f(g(x)) with g = 2x, f = y², at x = 1: 2·(2x)·2 = 8
        let params = single("x", Matrix::scalar(1.0));
        let (_, mut tape) = forward_record(&params, StMode::Hard, |t| {
            let x = t.param("x")?;
            let y = t.scale(x, 2.0);
            t.mul(y, y)
        })
        .unwrap();
        assert_eq!(tape.backward().unwrap()["x"].item(), Some(8.0));
    }

    #[test]
    fn double_backward_is_an_error() {
        let params = single("x", Matrix::scalar(1.0));
        let (_, mut tape) = forward_record(&params, StMode::Hard, |t| t.param("x")).unwrap();
        tape.backward().unwrap();
        assert!(matches!(tape.backward(), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let params = single("x", Matrix::zeros(2, 2));
        let res = forward_record(&params, StMode::Hard, |t| t.param("x"));
        assert!(matches!(res, Err(Error::NonScalarLoss { rows: 2, cols: 2 })));
    }

    #[test]
    fn shared_param_accumulates() {
        // f = sum(W·x) + sum(W ⊙ W): W appears through two separate leaves.
        let w = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let params = single("w", w.clone());
        let (_, mut tape) = forward_record(&params, StMode::Hard, |t| {
            let w1 = t.param("w")?;
            let xv = t.constant(x.clone());
            let wx = t.matmul(w1, xv)?;
            let s1 = t.sum_all(wx);
            let w2 = t.param("w")?;
            let s2 = t.sum_squares(w2);
            t.add(s1, s2)
        })
        .unwrap();
        let g = tape.backward().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = x[(j, 0)] + 2.0 * w[(i, j)];
                assert_eq!(g["w"][(i, j)], expected);
            }
        }
    }

    #[test]
    fn quadratic_bowl_gradcheck_is_exact() {
        // Small coordinates keep the rounding of p ± eps below 1e-9 relative.
        let params = single("p", Matrix::from_rows(&[[0.013, -0.021, 0.034]]).unwrap());
        let center = Matrix::from_rows(&[[0.002, 0.005, -0.001]]).unwrap();
        for eps in [1e-7, 1e-5, 1e-3] {
            let report = gradcheck(&params, eps, |t| {
                let p = t.param("p")?;
                let c = t.constant(center.clone());
                let d = t.sub(p, c)?;
                Ok(t.sum_squares(d))
            })
            .unwrap();
            assert!(report.params["p"].max_rel_err < 1e-9, "{report:?}");
        }
    }

    #[test]
    fn gradcheck_frozen_param_reports_zero() {
        let mut params = single("p", Matrix::from_rows(&[[0.3, -1.2]]).unwrap());
        params.insert("q", Matrix::from_rows(&[[2.0, 1.0]]).unwrap(), false);
        let report = gradcheck(&params, 1e-5, |t| {
            let p = t.param("p")?;
            let q = t.param("q")?;
            let m = t.mul(p, q)?;
            Ok(t.sum_squares(m))
        })
        .unwrap();
        assert_eq!(report.params["q"].max_rel_err, 0.0);
        assert_eq!(report.params["q"].argmax_coordinate, None);
        assert!(report.params["p"].max_rel_err < 1e-7);
        assert_eq!(report.trainable_only().params.len(), 1);
    }

    #[test]
    fn gradcheck_rejects_bad_eps_and_nondeterminism() {
        let params = single("p", Matrix::scalar(1.0));
        assert!(gradcheck(&params, 1e-2, |t| t.param("p")).is_err());
        let counter = std::cell::Cell::new(0.0);
        let res = gradcheck(&params, 1e-5, |t| {
            counter.set(counter.get() + 1.0);
            let p = t.param("p")?;
            t.add_const(p, &Matrix::scalar(counter.get()))
        });
        assert!(matches!(res, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn fault_injection_is_caught() {
        let params = single("p", Matrix::from_rows(&[[0.3, -0.7]]).unwrap());
        let graph = |t: &mut Tape<'_>| {
            let p = t.param("p")?;
            let h = t.tanh(p);
            Ok(t.sum_squares(h))
        };
        assert!(gradcheck(&params, 1e-5, graph).unwrap().passes(1e-6));
        let bad = gradcheck_with_fault(&params, 1e-5, Some(Primitive::Tanh), graph).unwrap();
        assert!(!bad.passes(1e-4));
        assert_eq!(bad.worst().unwrap().0, "p");
    }

    #[test]
    fn straight_through_hard_forward_soft_backward() {
        let params = single("x", Matrix::from_rows(&[[0.2, 0.8], [0.6, 0.4]]).unwrap());
        let weights = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let (v, mut tape) = forward_record(&params, StMode::Hard, |t| {
            let x = t.param("x")?;
            let h = t.straight_through(x);
            let w = t.constant(weights.clone());
            let m = t.mul(h, w)?;
            Ok(t.sum_all(m))
        })
        .unwrap();
        // hard rows [0,1] and [1,0] pick 2.0 and 3.0
        assert_eq!(v, 5.0);
        assert_eq!(tape.backward().unwrap()["x"], weights);
    }

    /// Entries with magnitude in [0.3, 1.2] and random sign, so no gradient
    /// coordinate is dominated by finite-difference rounding.
    fn away_from_zero(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| {
                let m = 0.3 + 0.9 * rng.uniform();
                if rng.uniform() < 0.5 { -m } else { m }
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Random-input finite-difference check for one primitive.
    fn check_primitive<F>(label: &str, seed: u64, shapes: &[(usize, usize)], graph: F)
    where
        F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
    {
        let mut rng = SeededRng::new(seed);
        let mut params = ParamSet::new();
        let names: Vec<String> = (0..shapes.len()).map(|i| format!("in{i}")).collect();
        for (name, &(r, c)) in names.iter().zip(shapes) {
            params.insert(name.clone(), away_from_zero(&mut rng, r, c), true);
        }
        // A fixed random projection keeps every output coordinate in play.
        let report = gradcheck(&params, 1e-5, |t| {
            let vars = names.iter().map(|n| t.param(n)).collect::<Result<Vec<_>>>()?;
            let out = graph(t, &vars)?;
            let (r, c) = t.value(out).shape();
            let mut prng = SeededRng::new(seed ^ 0xA5A5);
            let proj = t.constant(away_from_zero(&mut prng, r, c));
            let m = t.mul(out, proj)?;
            Ok(t.sum_all(m))
        })
        .unwrap();
        for (name, c) in &report.params {
            assert!(c.max_rel_err < 1e-6, "{label} {name}: {c:?}");
        }
    }

    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..128u64 {
            check_primitive("matmul", seed, &[(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1]));
            check_primitive("add_row", seed, &[(3, 4), (1, 4)], |t, v| t.add_row(v[0], v[1]));
            check_primitive("add", seed, &[(2, 3), (2, 3)], |t, v| t.add(v[0], v[1]));
            check_primitive("sub", seed, &[(2, 3), (2, 3)], |t, v| t.sub(v[0], v[1]));
            check_primitive("mul", seed, &[(2, 3), (2, 3)], |t, v| t.mul(v[0], v[1]));
            check_primitive("scale", seed, &[(2, 3)], |t, v| Ok(t.scale(v[0], -1.7)));
            check_primitive("add_const", seed, &[(2, 3)], |t, v| t.add_const(v[0], &Matrix::filled(2, 3, 0.3)));
            check_primitive("tanh", seed, &[(3, 3)], |t, v| Ok(t.tanh(v[0])));
            check_primitive("softmax_rows", seed, &[(3, 4)], |t, v| t.softmax_rows(v[0], 0.7));
            check_primitive("log_floor", seed, &[(3, 4)], |t, v| {
                let p = t.softmax_rows(v[0], 1.0)?;
                Ok(t.log_floor(p, 1e-30))
            });
            check_primitive("pairwise_sq_dist", seed, &[(4, 3), (2, 3)], |t, v| t.pairwise_sq_dist(v[0], v[1]));
            check_primitive("straight_through", seed, &[(3, 4)], |t, v| Ok(t.straight_through(v[0])));
            check_primitive("cross_entropy", seed, &[(4, 3)], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]));
            check_primitive("sum_squares", seed, &[(2, 3)], |t, v| Ok(t.sum_squares(v[0])));
            check_primitive("sum_all", seed, &[(2, 3)], |t, v| Ok(t.sum_all(v[0])));
            check_primitive("scale_by_entry", seed, &[(2, 3), (1, 3)], |t, v| t.scale_by_entry(v[0], v[1], 1));
            check_primitive("entry", seed, &[(2, 3)], |t, v| t.entry(v[0], 1, 2));
        }
    }
}
