use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside the RMS normalization square root.
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name of a trainable leaf, e.g. `blocks.3.router`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        ParamId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        ParamId(s.to_string())
    }
}

/// Gradients keyed by parameter; each entry has its parameter's shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap(BTreeMap<ParamId, Tensor>);

impl GradientMap {
    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.0.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<ParamId, Tensor> {
        self.0
    }

    pub(crate) fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.0.insert(id, grad);
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// `b` has shape `[last_dim]` and is added to every row of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    /// `b` has shape `[rows, 1]` and scales each row of `a`.
    MulCol(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    /// Kept column indices per row; everything else was set to -inf.
    TopKMask {
        x: Var,
        kept: Vec<Vec<usize>>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherElems {
        x: Var,
        at: Vec<(usize, usize)>,
    },
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | Add(a, b) | AddRow(a, b) | Mul(a, b) | MulCol(a, b) => [Some(a), Some(b)],
            RmsNorm { x, gain } => [Some(x), Some(gain)],
            Transpose(a) | Scale(a, _) | Sum(a) | Silu(a) | Softmax(a) => [Some(a), None],
            Embedding { table, .. } => [Some(table), None],
            CrossEntropy { logits, .. } => [Some(logits), None],
            TopKMask { x, .. } | GatherRows { x, .. } | ScatterRows { x, .. } => [Some(x), None],
            GatherElems { x, .. } => [Some(x), None],
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every operand of node `i` has an
/// index below `i`.
///
/// Leaves registered with [`Tape::param_ref`] borrow their tensor for `'a`.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<ParamId, Var>,
}

fn nan_check(op: &'static str, t: &Tensor) -> Result<()> {
    if t.has_nan() {
        Err(Error::NanInput { op })
    } else {
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries of `row`, largest first.
///
/// Entries listed in `excluded` and entries equal to -inf are never chosen.
/// Ties go to the lower index.
pub fn select_top_k(row: &[f64], k: usize, excluded: &[usize]) -> Result<Vec<usize>> {
    if k > row.len() {
        return Err(Error::TopKTooLarge { k, len: row.len() });
    }
    let mut candidates: Vec<usize> = (0..row.len())
        .filter(|i| !excluded.contains(i) && row[*i] != f64::NEG_INFINITY)
        .collect();
    if candidates.len() < k {
        return Err(Error::NotEnoughExperts {
            k,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    Ok(candidates)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_cow(op, Cow::Owned(value))
    }

    fn push_cow(&mut self, op: Op, value: Cow<'a, Tensor>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a named leaf whose gradient may be requested later.
    ///
    /// Registering the same id twice returns the existing leaf.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<Var> {
        self.param_cow(id, Cow::Owned(value))
    }

    /// Like [`Tape::param`] without copying the tensor.
    pub fn param_ref(&mut self, id: ParamId, value: &'a Tensor) -> Result<Var> {
        self.param_cow(id, Cow::Borrowed(value))
    }

    fn param_cow(&mut self, id: ParamId, value: Cow<'a, Tensor>) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        nan_check("param", &value)?;
        let v = self.push_cow(Op::Leaf, value);
        self.params.insert(id, v);
        Ok(v)
    }

    /// The leaf registered under `id`, if any.
    pub fn param_var(&self, id: &ParamId) -> Option<Var> {
        self.params.get(id).copied()
    }

    /// Records an anonymous constant. It may hold -inf sentinels (masks).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        nan_check("constant", &value)?;
        Ok(self.push(Op::Leaf, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        nan_check("matmul", ta)?;
        nan_check("matmul", tb)?;
        let out = ta.matmul(tb)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(shape_err("transpose", ta, ta));
        }
        nan_check("transpose", ta)?;
        let out = ta.transpose();
        Ok(self.push(Op::Transpose(a), out))
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        nan_check("add", ta)?;
        nan_check("add", tb)?;
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            Ok(self.push(Op::Add(a, b), out))
        } else if tb.shape() == [ta.last_dim()] {
            let c = ta.last_dim();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % c])
                .collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            Ok(self.push(Op::AddRow(a, b), out))
        } else {
            Err(shape_err("add", ta, tb))
        }
    }

    /// Elementwise product. `b` may also be a `[rows, 1]` column scaling
    /// each row of `a`.
    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        nan_check("multiply", ta)?;
        nan_check("multiply", tb)?;
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            Ok(self.push(Op::Mul(a, b), out))
        } else if ta.shape().len() == 2 && tb.shape() == [ta.outer(), 1] {
            let c = ta.last_dim();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x * tb.data()[i / c])
                .collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            Ok(self.push(Op::MulCol(a, b), out))
        } else {
            Err(shape_err("multiply", ta, tb))
        }
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        nan_check("scale", ta)?;
        let out = ta.map(|x| x * factor);
        Ok(self.push(Op::Scale(a, factor), out))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        nan_check("sum", ta)?;
        let out = Tensor::scalar(ta.sum());
        Ok(self.push(Op::Sum(a), out))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        nan_check("silu", ta)?;
        let out = ta.map(|x| x * sigmoid(x));
        Ok(self.push(Op::Silu(a), out))
    }

    /// Softmax over the last axis; -inf inputs map to exactly 0.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        nan_check("softmax", ta)?;
        let mut out = ta.clone();
        for r in 0..out.outer() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max.is_infinite() {
                return Err(Error::NonFinite("softmax row has no finite maximum".into()));
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = if *v == f64::NEG_INFINITY {
                    0.0
                } else {
                    libm::exp(*v - max)
                };
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(Op::Softmax(a), out))
    }

    /// Row-wise `gain * x / sqrt(mean(x^2) + eps)`.
    pub fn rms_normalize(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        nan_check("rms_normalize", tx)?;
        nan_check("rms_normalize", tg)?;
        if tg.shape() != [tx.last_dim()] {
            return Err(shape_err("rms_normalize", tx, tg));
        }
        let n = tx.last_dim();
        let mut out = tx.clone();
        for r in 0..out.outer() {
            let row = out.row_mut(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
            for (v, g) in row.iter_mut().zip(tg.data()) {
                *v *= inv * g;
            }
        }
        Ok(self.push(Op::RmsNorm { x, gain }, out))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        nan_check("embedding", tt)?;
        if tt.shape().len() != 2 {
            return Err(shape_err("embedding", tt, tt));
        }
        let (vocab, dim) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    /// Mean cross-entropy of `[rows, classes]` logits against one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        nan_check("cross_entropy", tl)?;
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let classes = tl.last_dim();
        let mut probs = tl.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: classes,
                });
            }
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            let target_logit = tl.at(r, t);
            loss += max + libm::log(total) - target_logit;
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::scalar(loss / targets.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            out,
        ))
    }

    /// Keeps the `k` largest entries of each last-axis row and sets the
    /// rest to -inf.
    pub fn top_k_mask(&mut self, x: Var, k: usize) -> Result<Var> {
        self.top_k_mask_excluding(x, k, &[], 0)
    }

    /// Like [`Tape::top_k_mask`], but columns in `excluded` can never be kept
    /// in rows at or after `first_excluded_row`.
    ///
    /// Selection indices are constants for differentiation: gradient passes
    /// through kept entries and is zero at masked ones.
    pub fn top_k_mask_excluding(
        &mut self,
        x: Var,
        k: usize,
        excluded: &[usize],
        first_excluded_row: usize,
    ) -> Result<Var> {
        let tx = self.value(x);
        nan_check("top_k_mask", tx)?;
        let mut out = Tensor::new(tx.shape().to_vec(), vec![f64::NEG_INFINITY; tx.len()])?;
        let mut kept = Vec::with_capacity(tx.outer());
        for r in 0..tx.outer() {
            let skip: &[usize] = if r >= first_excluded_row { excluded } else { &[] };
            let sel = select_top_k(tx.row(r), k, skip)?;
            let src = tx.row(r);
            let dst = out.row_mut(r);
            for &c in &sel {
                dst[c] = src[c];
            }
            kept.push(sel);
        }
        Ok(self.push(Op::TopKMask { x, kept }, out))
    }

    /// The selection recorded by a top-k mask node, per row.
    pub fn kept_indices(&self, v: Var) -> Option<&[Vec<usize>]> {
        match &self.nodes[v.0].op {
            Op::TopKMask { kept, .. } => Some(kept),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        nan_check("gather_rows", tx)?;
        let c = tx.last_dim();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= tx.outer() {
                return Err(shape_err("gather_rows", tx, tx));
            }
            data.extend_from_slice(tx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            out,
        ))
    }

    /// Places row `i` of `x` at row `rows[i]` of a `[total, cols]` zero tensor.
    /// `rows` must not repeat.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let tx = self.value(x);
        nan_check("scatter_rows", tx)?;
        let c = tx.last_dim();
        if tx.outer() != rows.len() || rows.iter().any(|&r| r >= total) {
            return Err(shape_err("scatter_rows", tx, tx));
        }
        let mut out = Tensor::zeros(vec![total, c]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tx.row(i));
        }
        Ok(self.push(
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            out,
        ))
    }

    /// Picks single elements of a 2-D tensor into an `[n, 1]` column.
    pub fn gather_elems(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        nan_check("gather_elems", tx)?;
        if tx.shape().len() != 2 || at.iter().any(|&(r, c)| r >= tx.outer() || c >= tx.last_dim()) {
            return Err(shape_err("gather_elems", tx, tx));
        }
        let data = at.iter().map(|&(r, c)| tx.at(r, c)).collect();
        let out = Tensor::new(vec![at.len(), 1], data)?;
        Ok(self.push(Op::GatherElems { x, at: at.to_vec() }, out))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `wanted`.
    ///
    /// Only nodes that depend on a wanted leaf receive gradient; everything
    /// between the loss and those leaves is propagated through. A wanted leaf
    /// the loss does not depend on gets a zero gradient.
    pub fn backward(&self, loss: Var, wanted: &[ParamId]) -> Result<GradientMap> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::LossNotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut needs = vec![false; loss.0 + 1];
        let mut wanted_vars = Vec::with_capacity(wanted.len());
        for id in wanted {
            let v = *self
                .params
                .get(id)
                .ok_or_else(|| Error::UnknownParam(id.to_string()))?;
            if v.0 <= loss.0 {
                needs[v.0] = true;
            }
            wanted_vars.push((id.clone(), v));
        }
        for i in 0..=loss.0 {
            if !needs[i] {
                needs[i] = self.nodes[i].op.inputs().iter().flatten().any(|v| needs[v.0]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(loss_value.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &needs, &mut grads)?;
        }

        let mut out = GradientMap::default();
        for (id, v) in wanted_vars {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape().to_vec()));
            out.insert(id, g);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node<'_>,
        g: &Tensor,
        needs: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut send = |v: Var, t: Tensor| {
            if needs[v.0] {
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs[a.0] {
                    send(*a, g.matmul(&tb.transpose())?);
                }
                if needs[b.0] {
                    send(*b, ta.transpose().matmul(g)?);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                if needs[b.0] {
                    let c = g.last_dim();
                    let mut db = vec![0.0; c];
                    for r in 0..g.outer() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(*b, Tensor::new(vec![c], db)?);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs[a.0] {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if needs[b.0] {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    send(*b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::MulCol(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = g.last_dim();
                if needs[a.0] {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * tb.data()[i / c])
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if needs[b.0] {
                    let d = (0..g.outer())
                        .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    send(*b, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, factor) => send(*a, g.map(|x| x * factor)),
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                let n = shape.iter().product();
                send(*a, Tensor::new(shape, vec![g.data()[0]; n])?);
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let d = ta
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, gv)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                send(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let mut d = g.clone();
                for r in 0..y.outer() {
                    let yr = y.row(r);
                    let dot: f64 = yr.iter().zip(g.row(r)).map(|(p, gv)| p * gv).sum();
                    for ((dv, p), gv) in d.row_mut(r).iter_mut().zip(yr).zip(g.row(r)) {
                        *dv = p * (gv - dot);
                    }
                }
                send(*a, d);
            }
            Op::RmsNorm { x, gain } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let n = tx.last_dim();
                let mut dx = Tensor::zeros(tx.shape().to_vec());
                let mut dgain = vec![0.0; n];
                for r in 0..tx.outer() {
                    let xr = tx.row(r);
                    let gr = g.row(r);
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += tg.data()[j] * gr[j] * xr[j];
                        dgain[j] += gr[j] * xr[j] * inv;
                    }
                    let coef = dot * inv * inv * inv / n as f64;
                    for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = tg.data()[j] * gr[j] * inv - xr[j] * coef;
                    }
                }
                send(*x, dx);
                send(*gain, Tensor::new(vec![n], dgain)?);
            }
            Op::Embedding { table, ids } => {
                if needs[table.0] {
                    let mut dt = Tensor::zeros(self.value(*table).shape().to_vec());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    send(*table, dt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                send(*logits, d);
            }
            Op::TopKMask { x, kept } => {
                let mut d = Tensor::zeros(g.shape().to_vec());
                for (r, sel) in kept.iter().enumerate() {
                    let gr = g.row(r);
                    let dr = d.row_mut(r);
                    for &c in sel {
                        dr[c] = gr[c];
                    }
                }
                send(*x, d);
            }
            Op::GatherRows { x, rows } => {
                let mut d = Tensor::zeros(self.value(*x).shape().to_vec());
                for (i, &r) in rows.iter().enumerate() {
                    for (dv, v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *dv += v;
                    }
                }
                send(*x, d);
            }
            Op::ScatterRows { x, rows } => {
                let c = g.last_dim();
                let mut data = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    data.extend_from_slice(g.row(r));
                }
                send(*x, Tensor::new(vec![rows.len(), c], data)?);
            }
            Op::GatherElems { x, at } => {
                let tx = self.value(*x);
                let cols = tx.last_dim();
                let mut d = Tensor::zeros(tx.shape().to_vec());
                for (i, &(r, c)) in at.iter().enumerate() {
                    d.data_mut()[r * cols + c] += g.data()[i];
                }
                send(*x, d);
            }
        }
        Ok(())
    }
}
