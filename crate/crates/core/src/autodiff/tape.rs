//! Define-by-run tape. Every operation appends a node whose parents are
//! earlier nodes, so node ids are already a topological order and the
//! backward sweep is a single reverse scan.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    MaskCols { x: Var, keep: Vec<bool> },
    Softmax(Var),
    Mix { gates: Var, experts: Vec<Var> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Bce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        pos_weight: f64,
        denom: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of a forward computation that can be differentiated in reverse.
///
/// A tape is single-threaded and is meant to be rebuilt for every forward
/// pass. Gradients from successive [`Tape::backward`] calls accumulate.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(-|z|)) + max(-z, 0), i.e. -log σ(z) in a form that never overflows.
fn neg_log_sigmoid(z: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + (-z).max(0.0)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Adds an input or parameter node.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// Accumulated gradient of `v`; zeros when no backward pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let shape = nodes[v.0].value.shape().to_vec();
        match self.grads.borrow().get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient length matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(f);
        self.push(value, op)
    }

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            require_same(name, ta, tb)?;
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(value, op))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = require_matrix("matmul", ta)?;
            let (k2, n) = require_matrix("matmul", tb)?;
            if k != k2 {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (ad, bd) = (ta.data(), tb.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)?
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = require_matrix("matmul_nt", ta)?;
            let (n, k2) = require_matrix("matmul_nt", tb)?;
            if k != k2 {
                return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
            }
            let (ad, bd) = (ta.data(), tb.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
            Tensor::matrix(m, n, out)?
        };
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `bias` (one value per column) to every row of `x`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[bias.0].value);
            let (_, c) = require_matrix("add_row", tx)?;
            if tb.len() != c {
                return Err(Error::shape("add_row", tx.shape(), tb.shape()));
            }
            let bd = tb.data();
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + bd[i % c])
                .collect();
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::AddRow { x, bias }))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Replaces every column `j` with `keep[j] == false` by `-inf`.
    pub fn mask_cols(&self, x: Var, keep: &[bool]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let c = tx.cols();
            if keep.len() != c {
                return Err(Error::shape("mask_cols", tx.shape(), &[keep.len()]));
            }
            let data = tx
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if keep[i % c] { v } else { f64::NEG_INFINITY })
                .collect();
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.push(
            value,
            Op::MaskCols {
                x,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Row-wise softmax over the trailing axis, using max subtraction.
    /// `-inf` entries map to exactly zero.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let c = tx.cols();
            let mut data = tx.data().to_vec();
            for (row, chunk) in data.chunks_mut(c).enumerate() {
                let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::NoAdmissibleEntries { row });
                }
                let mut total = 0.0;
                for v in chunk.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in chunk.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Per-row convex combination: `out[b, :] = Σ_e gates[b, e] · experts[e][b, :]`.
    pub fn mix(&self, gates: Var, experts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let tg = &nodes[gates.0].value;
            let (b, e) = require_matrix("mix", tg)?;
            if e != experts.len() {
                return Err(Error::shape("mix", tg.shape(), &[experts.len()]));
            }
            let first = &nodes[experts[0].0].value;
            let (b2, h) = require_matrix("mix", first)?;
            if b2 != b {
                return Err(Error::shape("mix", tg.shape(), first.shape()));
            }
            let mut out = vec![0.0; b * h];
            for (ei, ev) in experts.iter().enumerate() {
                let te = &nodes[ev.0].value;
                if te.shape() != first.shape() {
                    return Err(Error::shape("mix", first.shape(), te.shape()));
                }
                let ed = te.data();
                for row in 0..b {
                    let g = tg.data()[row * e + ei];
                    let src = &ed[row * h..(row + 1) * h];
                    for (o, &v) in out[row * h..(row + 1) * h].iter_mut().zip(src) {
                        *o += g * v;
                    }
                }
            }
            Tensor::matrix(b, h, out)?
        };
        Ok(self.push(
            value,
            Op::Mix {
                gates,
                experts: experts.to_vec(),
            },
        ))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts
                .first()
                .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?
                .0]
                .value;
            let (_, c) = require_matrix("concat_rows", first)?;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, c2) = require_matrix("concat_rows", t)?;
                if c2 != c {
                    return Err(Error::shape("concat_rows", first.shape(), t.shape()));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, c, data)?
        };
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Joins matrices with equal row counts along the column axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts
                .first()
                .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?
                .0]
                .value;
            let (r, _) = require_matrix("concat_cols", first)?;
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                let (r2, c) = require_matrix("concat_cols", t)?;
                if r2 != r {
                    return Err(Error::shape("concat_cols", first.shape(), t.shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(r * total);
            for row in 0..r {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[p.0].value.data()[row * w..(row + 1) * w]);
                }
            }
            Tensor::matrix(r, total, data)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.nodes.borrow()[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            t.data().iter().sum::<f64>() / t.len() as f64
        };
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Weighted-mean binary cross entropy on logits:
    /// `−[pos_weight·y·log σ(z) + (1−y)·log(1−σ(z))]`, averaged over entries with
    /// non-zero weight. Entries with zero weight are not inspected. If every
    /// weight is zero the result is a constant zero with no parents.
    pub fn bce_with_logits(
        &self,
        logits: Var,
        targets: &[f64],
        pos_weight: f64,
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let n = self.nodes.borrow()[logits.0].value.len();
        if targets.len() != n {
            return Err(Error::shape("bce_with_logits", &[n], &[targets.len()]));
        }
        if !(pos_weight > 0.0) {
            return Err(Error::Domain(format!("pos_weight must be > 0, got {pos_weight}")));
        }
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::shape("bce_with_logits", &[n], &[w.len()]))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let denom: f64 = weights.iter().sum();
        if denom == 0.0 {
            return Ok(self.leaf(Tensor::scalar(0.0)));
        }
        let loss = {
            let nodes = self.nodes.borrow();
            let z = nodes[logits.0].value.data();
            let mut total = 0.0;
            for i in 0..n {
                if weights[i] == 0.0 {
                    continue;
                }
                let y = targets[i];
                if y != 0.0 && y != 1.0 {
                    return Err(Error::Domain(format!("non-binary target {y} at index {i}")));
                }
                let l = 1.0 + (pos_weight - 1.0) * y;
                total += weights[i] * ((1.0 - y) * z[i] + l * neg_log_sigmoid(z[i]));
            }
            total / denom
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                weights,
                pos_weight,
                denom,
            },
        ))
    }

    /// Weighted-mean negative log softmax probability of each row's target class.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let (n, c) = {
            let nodes = self.nodes.borrow();
            require_matrix("cross_entropy", &nodes[logits.0].value)?
        };
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, c], &[targets.len()]));
        }
        let weights = match weights {
            Some(w) if w.len() != n => {
                return Err(Error::shape("cross_entropy", &[n], &[w.len()]))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; n],
        };
        let denom: f64 = weights.iter().sum();
        if denom == 0.0 {
            return Ok(self.leaf(Tensor::scalar(0.0)));
        }
        let loss = {
            let nodes = self.nodes.borrow();
            let z = nodes[logits.0].value.data();
            let mut total = 0.0;
            for (i, row) in z.chunks(c).enumerate() {
                if weights[i] == 0.0 {
                    continue;
                }
                let t = targets[i];
                if t >= c {
                    return Err(Error::Domain(format!(
                        "class index {t} out of range for {c} classes at row {i}"
                    )));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += weights[i] * (lse - row[t]);
            }
            total / denom
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                denom,
            },
        ))
    }

    /// Reverse sweep from a scalar node. Gradients are added to whatever earlier
    /// sweeps left behind. Returns the number of nodes that received a gradient.
    pub fn backward(&self, loss: Var) -> Result<usize> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }
        let mut visited = 0;
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            visited += 1;
            propagate(&nodes, id, &g, &mut adj);
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(visited)
    }
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = nodes[b.0].value.cols();
            let (ad, bd) = (val(*a), val(*b));
            {
                let da = slot(adj, nodes, *a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            let db = slot(adj, nodes, *b);
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                        *d += aip * gv;
                    }
                }
            }
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
            let n = nodes[b.0].value.rows();
            let (ad, bd) = (val(*a), val(*b));
            {
                let da = slot(adj, nodes, *a);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for p in 0..k {
                            da[i * k + p] += gij * bd[j * k + p];
                        }
                    }
                }
            }
            let db = slot(adj, nodes, *b);
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    for p in 0..k {
                        db[j * k + p] += gij * ad[i * k + p];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            slot(adj, nodes, *b).iter_mut().zip(g).for_each(|(d, x)| *d += x);
        }
        Op::Sub(a, b) => {
            slot(adj, nodes, *a).iter_mut().zip(g).for_each(|(d, x)| *d += x);
            slot(adj, nodes, *b).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a), val(*b));
            for (i, d) in slot(adj, nodes, *a).iter_mut().enumerate() {
                *d += g[i] * bd[i];
            }
            for (i, d) in slot(adj, nodes, *b).iter_mut().enumerate() {
                *d += g[i] * ad[i];
            }
        }
        Op::AddRow { x, bias } => {
            let c = nodes[bias.0].value.len();
            slot(adj, nodes, *x).iter_mut().zip(g).for_each(|(d, v)| *d += v);
            let db = slot(adj, nodes, *bias);
            for (i, v) in g.iter().enumerate() {
                db[i % c] += v;
            }
        }
        Op::Scale(x, c) => {
            slot(adj, nodes, *x).iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
        }
        Op::AddScalar(x) => {
            slot(adj, nodes, *x).iter_mut().zip(g).for_each(|(d, v)| *d += v);
        }
        Op::Relu(x) => {
            let xd = val(*x);
            for (i, d) in slot(adj, nodes, *x).iter_mut().enumerate() {
                if xd[i] > 0.0 {
                    *d += g[i];
                }
            }
        }
        Op::Sigmoid(x) => {
            for (i, d) in slot(adj, nodes, *x).iter_mut().enumerate() {
                *d += g[i] * out[i] * (1.0 - out[i]);
            }
        }
        Op::Tanh(x) => {
            for (i, d) in slot(adj, nodes, *x).iter_mut().enumerate() {
                *d += g[i] * (1.0 - out[i] * out[i]);
            }
        }
        Op::MaskCols { x, keep } => {
            let c = keep.len();
            for (i, d) in slot(adj, nodes, *x).iter_mut().enumerate() {
                if keep[i % c] {
                    *d += g[i];
                }
            }
        }
        Op::Softmax(x) => {
            let c = node.value.cols();
            let dx = slot(adj, nodes, *x);
            for ((drow, yrow), grow) in dx.chunks_mut(c).zip(out.chunks(c)).zip(g.chunks(c)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    drow[j] += yrow[j] * (grow[j] - dot);
                }
            }
        }
        Op::Mix { gates, experts } => {
            let e = experts.len();
            let h = node.value.cols();
            let b = node.value.rows();
            let gd = val(*gates);
            for (ei, ev) in experts.iter().enumerate() {
                let de = slot(adj, nodes, *ev);
                for row in 0..b {
                    let w = gd[row * e + ei];
                    for (d, &up) in de[row * h..(row + 1) * h].iter_mut().zip(&g[row * h..]) {
                        *d += w * up;
                    }
                }
            }
            let mut dg = vec![0.0; b * e];
            for (ei, ev) in experts.iter().enumerate() {
                let ed = val(*ev);
                for row in 0..b {
                    dg[row * e + ei] = ed[row * h..(row + 1) * h]
                        .iter()
                        .zip(&g[row * h..(row + 1) * h])
                        .map(|(f, up)| f * up)
                        .sum::<f64>();
                }
            }
            slot(adj, nodes, *gates).iter_mut().zip(&dg).for_each(|(d, v)| *d += v);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                slot(adj, nodes, *p)
                    .iter_mut()
                    .zip(&g[offset..offset + len])
                    .for_each(|(d, v)| *d += v);
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut col = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                let dp = slot(adj, nodes, *p);
                for r in 0..rows {
                    for j in 0..w {
                        dp[r * w + j] += g[r * total + col + j];
                    }
                }
                col += w;
            }
        }
        Op::Sum(x) => {
            slot(adj, nodes, *x).iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len() as f64;
            slot(adj, nodes, *x).iter_mut().for_each(|d| *d += g[0] / n);
        }
        Op::Bce {
            logits,
            targets,
            weights,
            pos_weight,
            denom,
        } => {
            let z = val(*logits);
            let dz = slot(adj, nodes, *logits);
            for i in 0..z.len() {
                if weights[i] == 0.0 {
                    continue;
                }
                let y = targets[i];
                let l = 1.0 + (pos_weight - 1.0) * y;
                let s = sigmoid(z[i]);
                dz[i] += g[0] * weights[i] / denom * ((1.0 - y) - l * (1.0 - s));
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            denom,
        } => {
            let c = nodes[logits.0].value.cols();
            let z = val(*logits);
            let dz = slot(adj, nodes, *logits);
            for (i, row) in z.chunks(c).enumerate() {
                if weights[i] == 0.0 {
                    continue;
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let scale = g[0] * weights[i] / denom;
                for j in 0..c {
                    let p = (row[j] - max).exp() / total;
                    let ind = if j == targets[i] { 1.0 } else { 0.0 };
                    dz[i * c + j] += scale * (p - ind);
                }
            }
        }
    }
}
