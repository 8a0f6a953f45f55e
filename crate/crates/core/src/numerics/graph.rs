//! Reverse-mode tape. Every op evaluates eagerly through the shared kernels and
//! appends a node; nodes are stored in creation order, which is a topological
//! order, so backward is a single reverse sweep.

use super::kernels::{self, NormStats};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    RmsNorm {
        x: Var,
        gamma: Var,
        stats: NormStats<T>,
    },
    MaskedSoftmax(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        theta: f64,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Tensor<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Recording,
    Differentiated,
}

#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    phase: Phase,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            phase: Phase::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can be reused for a new forward.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.phase = Phase::Recording;
    }

    /// A trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if self.phase != Phase::Recording {
            return Err(Error::State("graph already differentiated; reset before recording".into()));
        }
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        self.push(out, Op::MatMulNt(a, b), &[a, b], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Elementwise product with a fixed tensor (dropout keep-masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let out = kernels::mul(self.value(a), &c)?;
        self.push(out, Op::MulConst(a, c), &[a], "mul_const")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = kernels::scale(self.value(a), s);
        self.push(out, Op::Scale(a, s), &[a], "scale")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = kernels::silu(self.value(a));
        self.push(out, Op::Silu(a), &[a], "silu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, stats) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            out,
            Op::LayerNorm { x, gamma, beta, stats },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let (out, stats) = kernels::rms_norm(self.value(x), self.value(gamma), eps)?;
        self.push(out, Op::RmsNorm { x, gamma, stats }, &[x, gamma], "rms_norm")
    }

    pub fn masked_softmax(&mut self, scores: Var, allowed: &[bool]) -> Result<Var> {
        let out = kernels::masked_softmax(self.value(scores), allowed)?;
        self.push(out, Op::MaskedSoftmax(scores), &[scores], "masked_softmax")
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let out = kernels::rope(self.value(x), positions, theta, false)?;
        let op = Op::Rope {
            x,
            positions: positions.to_vec(),
            theta,
        };
        self.push(out, op, &[x], "rope")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        self.push(out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_cols(&tensors)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Row gather; used for embedding lookup and for selecting loss rows.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(self.value(x), rows)?;
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        self.push(out, op, &[x], "gather_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x], "sum")
    }

    /// Mean negative log-likelihood of `targets` over rows where `active` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.expect_matrix("cross_entropy")?;
        if targets.len() != n || active.len() != n {
            return Err(shape_err!(
                "cross_entropy: {n} rows, {} targets, {} mask entries",
                targets.len(),
                active.len()
            ));
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::Invalid("loss mask has no active position".into()));
        }
        let mut probs = Tensor::zeros(&[n, vocab]);
        let mut total = T::ZERO;
        for r in 0..n {
            if !active[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Invalid(format!("target {t} outside vocabulary of {vocab}")));
            }
            let row = lv.row(r);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for (p, &z) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let loss = Tensor::scalar(total / T::from_usize(count));
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            active: active.to_vec(),
            probs,
        };
        self.push(loss, op, &[logits], "cross_entropy")
    }

    /// Accumulates d`loss`/d`leaf` into every trainable leaf. Allowed once per
    /// recorded forward.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.phase == Phase::Differentiated {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before forward".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err!("loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        self.phase = Phase::Differentiated;
        self.nodes[loss.0].grad = Some(Tensor::full(self.value(loss).shape(), T::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (target, contrib) in self.local_grads(i, &g)? {
                let node = &mut self.nodes[target.0];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += *c;
                        }
                    }
                    None => node.grad = Some(contrib),
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, kernels::matmul_nt(g, self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, kernels::matmul_tn(self.value(*a), g)?));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    out.push((*a, kernels::matmul(g, self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, kernels::matmul_tn(g, self.value(*a))?));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, kernels::mul(g, self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, kernels::mul(g, self.value(*a))?));
                }
            }
            Op::MulConst(a, c) => out.push((*a, kernels::mul(g, c)?)),
            Op::Scale(a, s) => out.push((*a, kernels::scale(g, *s))),
            Op::Silu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let s = kernels::sigmoid(x);
                        gv * (s + x * s * (T::ONE - s))
                    })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let (n, d) = xv.expect_matrix("layer_norm backward")?;
                let dn = T::from_usize(d);
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                let mut xhat = vec![T::ZERO; d];
                let mut dxhat = vec![T::ZERO; d];
                for r in 0..n {
                    let (mu, rs) = (stats.mean[r], stats.rstd[r]);
                    let (xr, gr) = (xv.row(r), g.row(r));
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gam[j];
                        dgamma.data_mut()[j] += gr[j] * xhat[j];
                        dbeta.data_mut()[j] += gr[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rs * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma.reshape(self.value(*gamma).shape().to_vec())?));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta.reshape(self.value(*beta).shape().to_vec())?));
                }
            }
            Op::RmsNorm { x, gamma, stats } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let (n, d) = xv.expect_matrix("rms_norm backward")?;
                let dn = T::from_usize(d);
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut xhat = vec![T::ZERO; d];
                let mut dxhat = vec![T::ZERO; d];
                for r in 0..n {
                    let rs = stats.rstd[r];
                    let (xr, gr) = (xv.row(r), g.row(r));
                    for j in 0..d {
                        xhat[j] = xr[j] * rs;
                        dxhat[j] = gr[j] * gam[j];
                        dgamma.data_mut()[j] += gr[j] * xhat[j];
                    }
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rs * (dxhat[j] - xhat[j] * mean_dx);
                    }
                }
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma.reshape(self.value(*gamma).shape().to_vec())?));
                }
            }
            Op::MaskedSoftmax(s) => {
                // dS = A ⊙ (dA − rowsum(dA ⊙ A)); masked cells have A = 0.
                let a = &node.value;
                let mut ds = Tensor::zeros(a.shape());
                for r in 0..a.rows() {
                    let (ar, gr) = (a.row(r), g.row(r));
                    let dot = ar.iter().zip(gr).map(|(&x, &y)| x * y).sum::<T>();
                    for (j, o) in ds.row_mut(r).iter_mut().enumerate() {
                        *o = ar[j] * (gr[j] - dot);
                    }
                }
                out.push((*s, ds));
            }
            Op::Rope { x, positions, theta } => {
                out.push((*x, kernels::rope(g, positions, *theta, true)?));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        out.push((p, g.slice_cols(offset, w)?));
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (gi, &r) in rows.iter().enumerate() {
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(gi)) {
                        *o += v;
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
            } => {
                let count = T::from_usize(active.iter().filter(|&&a| a).count());
                let scale = g.data()[0] / count;
                let mut dl = Tensor::zeros(probs.shape());
                for r in 0..probs.rows() {
                    if !active[r] {
                        continue;
                    }
                    let row = dl.row_mut(r);
                    for (o, &p) in row.iter_mut().zip(probs.row(r)) {
                        *o = p * scale;
                    }
                    row[targets[r]] -= scale;
                }
                out.push((*logits, dl));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0])));
            }
        }
        Ok(out)
    }
}
