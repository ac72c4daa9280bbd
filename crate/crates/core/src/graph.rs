//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records one forward evaluation. Every method computes its
//! value eagerly and appends a node; [`Graph::backward`] then walks the tape
//! in reverse, accumulating vector-Jacobian products. A graph is single use:
//! calling `backward` twice is [`Error::BackwardReplayed`].
//!
//! The graph also counts matmul FLOPs (2 per multiply-add) under the current
//! [`Scope`], which is what the scaling probe reads.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::ops::{self, Mask, Stat};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attribution bucket for counted FLOPs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Local,
    Global,
    BroadcastProj,
    BroadcastAttn,
    Host,
}

const SCOPES: usize = 5;

/// Matmul FLOPs per [`Scope`] plus a tally of element-wise work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    matmul: [u64; SCOPES],
    pub elementwise: u64,
}

impl FlopCounter {
    pub fn matmul(&self, scope: Scope) -> u64 {
        self.matmul[scope as usize]
    }

    pub fn matmul_total(&self) -> u64 {
        self.matmul.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.matmul_total() + self.elementwise
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Softplus(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ColumnStat {
        x: Var,
        stat: Stat,
        arg: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        eps: f64,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward evaluation.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    scope: Scope,
    flops: FlopCounter,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            scope: Scope::Host,
            flops: FlopCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops
    }

    /// Sets the FLOP attribution scope, returning the previous one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        core::mem::replace(&mut self.scope, scope)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn count_elementwise(&mut self, n: usize) {
        self.flops.elementwise += n as u64;
    }

    fn count_matmul(&mut self, m: usize, k: usize, n: usize) {
        self.flops.matmul[self.scope as usize] += 2 * (m * k * n) as u64;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf; receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        self.count_matmul(self.value(a).rows(), self.value(a).cols(), v.cols());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        self.count_matmul(self.value(a).rows(), self.value(a).cols(), v.cols());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.count_elementwise(v.len());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        self.count_elementwise(v.len());
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.count_elementwise(v.len());
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self
            .value(s)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(self.shape(s).to_vec()))?;
        let v = self.value(a).map(|x| x * c);
        self.count_elementwise(v.len());
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(v, Op::ScaleBy(a, s), ng))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::softplus);
        self.count_elementwise(v.len());
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::gelu);
        self.count_elementwise(v.len());
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var, mask: Mask) -> Var {
        let v = ops::softmax_rows_masked(self.value(a), mask);
        self.count_elementwise(v.len());
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let v = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let (xhat, inv_std) = ops::normalize_rows(self.value(x), eps);
        self.count_elementwise(v.len());
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Column statistic of a matrix as a `1 × d` row.
    pub fn column_stat(&mut self, x: Var, stat: Stat) -> Result<Var> {
        if self.value(x).rows() == 0 {
            return Err(Error::Empty("column_stat"));
        }
        let (v, arg) = ops::column_stat(self.value(x), stat);
        let v = v.reshape(&[1, self.value(x).cols()])?;
        self.count_elementwise(self.value(x).len());
        let ng = self.ng(x);
        Ok(self.push(v, Op::ColumnStat { x, stat, arg }, ng))
    }

    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let v = ops::l2_normalize(self.value(x), eps);
        self.count_elementwise(v.len());
        let ng = self.ng(x);
        self.push(v, Op::L2Normalize { x, eps }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let v = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = t.cols();
        let v = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let v = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::new(&[t.rows(), len], data)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::SliceCols { x, start }, ng))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: t.rows(),
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(&[ids.len(), c], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean next-token cross-entropy of `logits: n × vocab` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: l.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let lse = ops::log_sum_exp_rows(l);
        let mut total = 0.0;
        let mut probs = l.clone();
        for (r, (&t, &z)) in targets.iter().zip(&lse).enumerate() {
            if t >= l.cols() {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    vocab: l.cols(),
                });
            }
            total += z - l.at(r, t);
            for p in probs.row_mut(r) {
                *p = math::exp(*p - z);
            }
        }
        let n = targets.len() as f64;
        self.count_elementwise(l.len());
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    /// Gradient of the last backward pass with respect to `v`; zeros when `v`
    /// did not influence the loss or no backward has run.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    /// Back-propagates from the one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardReplayed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, ops::matmul_nt(dy, bv)?);
                }
                if self.ng(*b) {
                    acc(*b, ops::matmul_tn(av, dy)?);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, ops::matmul(dy, bv)?);
                }
                if self.ng(*b) {
                    acc(*b, ops::matmul_tn(dy, av)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = zip_map(dy, bv, |g, x| g * x);
                let gb = zip_map(dy, av, |g, x| g * x);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale(a, c) => acc(*a, dy.map(|g| g * c)),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).data()[0];
                let av = self.value(*a);
                let ds: f64 = dy.data().iter().zip(av.data()).map(|(g, x)| g * x).sum();
                acc(*a, dy.map(|g| g * c));
                acc(*s, Tensor::new(self.shape(*s), vec![ds])?);
            }
            Op::Softplus(a) => acc(*a, zip_map(dy, self.value(*a), |g, x| g * math::sigmoid(x))),
            Op::Gelu(a) => acc(
                *a,
                zip_map(dy, self.value(*a), |g, x| g * ops::gelu_grad(x)),
            ),
            Op::Softmax(a) => {
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let p = y.row(r);
                    let dot: f64 = p.iter().zip(dy.row(r)).map(|(p, g)| p * g).sum();
                    for (o, (&p, &g)) in dx.row_mut(r).iter_mut().zip(p.iter().zip(dy.row(r))) {
                        *o = p * (g - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gain).data();
                let n = xhat.cols();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = Tensor::zeros(xhat.shape());
                #[allow(clippy::needless_range_loop)]
                for r in 0..xhat.rows() {
                    let (xr, dyr) = (xhat.row(r), dy.row(r));
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..n {
                        dgain[c] += dyr[c] * xr[c];
                        dbias[c] += dyr[c];
                        let d = dyr[c] * g[c];
                        mean_d += d;
                        mean_dx += d * xr[c];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv_std[r] * (dyr[c] * g[c] - mean_d - xr[c] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gain, Tensor::new(self.shape(*gain), dgain)?);
                acc(*bias, Tensor::new(self.shape(*bias), dbias)?);
            }
            Op::ColumnStat { x, stat, arg } => {
                let xv = self.value(*x);
                let (rows, d) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(xv.shape());
                let dyr = dy.data();
                match stat {
                    Stat::Mean => {
                        for r in 0..rows {
                            for (o, g) in dx.row_mut(r).iter_mut().zip(dyr) {
                                *o = g / rows as f64;
                            }
                        }
                    }
                    Stat::Max | Stat::Min => {
                        for c in 0..d {
                            dx.row_mut(arg[c])[c] = dyr[c];
                        }
                    }
                    Stat::Std => {
                        let (mean, _) = ops::column_stat(xv, Stat::Mean);
                        let sd = y.data();
                        for r in 0..rows {
                            let xr = xv.row(r);
                            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                                if sd[c] > 0.0 {
                                    *o = dyr[c] * (xr[c] - mean.data()[c]) / (rows as f64 * sd[c]);
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let norm = math::sqrt(xr.iter().map(|v| v * v).sum());
                    let (yr, dyr) = (y.row(r), dy.row(r));
                    if norm >= *eps {
                        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = (dyr[c] - yr[c] * dot) / norm;
                        }
                    } else {
                        for (o, g) in dx.row_mut(r).iter_mut().zip(dyr) {
                            *o = g / eps;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let c = dy.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let g = dy.data()[start * c..(start + rows) * c].to_vec();
                    acc(p, Tensor::new(self.shape(p), g)?);
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let c = dy.cols();
                dx.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut g = Vec::with_capacity(dy.rows() * w);
                    for r in 0..dy.rows() {
                        g.extend_from_slice(&dy.row(r)[offset..offset + w]);
                    }
                    acc(p, Tensor::new(self.shape(p), g)?);
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let w = dy.cols();
                for r in 0..dy.rows() {
                    dx.row_mut(r)[*start..start + w].copy_from_slice(dy.row(r));
                }
                acc(*x, dx);
            }
            Op::GatherRows { table, ids } => {
                let mut dt = Tensor::zeros(self.shape(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for (o, g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                acc(*table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = dy.data()[0] / targets.len() as f64;
                let mut dl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, dl);
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                acc(*x, Tensor::full(self.shape(*x), g));
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
