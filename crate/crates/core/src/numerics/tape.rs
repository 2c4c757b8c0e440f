//! Reverse-mode differentiation over a dynamically recorded op tape.
//!
//! Every op appends a node holding its value and enough information to push
//! gradients back to its inputs. Values are 2-D (`[rows, cols]`) except for
//! scalar losses. A tape is built per forward pass and dropped afterwards.

use std::borrow::Cow;

use super::params::{Grads, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    /// `a · b`, or `a · bᵀ` when `tb`.
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    RowScale(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    GatherFlat(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// C (+)= op(A) · op(B) with A logical `[m, k]` and B logical `[k, n]`.
/// `ta` means A is stored as `[k, m]`; `tb` means B is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides above address exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), 0.0);
    Ok(out)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

fn two_d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape { op, lhs: s.to_vec(), rhs: vec![] }),
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Borrowed parameter leaf; its gradient is accumulated into the caller's [`Grads`].
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn mm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = two_d(self.value(a), "matmul")?;
        let (br, bc) = two_d(self.value(b), "matmul")?;
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: if tb { "matmul_t" } else { "matmul" },
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), tb, out.data_mut(), 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape { op: "add", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let mut out = self.value(a).clone();
        axpy(out.data_mut(), self.value(b).data(), 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).numel() != c {
            return Err(Error::Shape { op: "add_row", lhs: self.shape(x).to_vec(), rhs: self.shape(bias).to_vec() });
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            axpy(row, b, 1.0);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape { op: "mul", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Selects rows `idx` of a 2-D value (an embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = two_d(self.value(src), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!("gather_rows index {bad} out of range for {r} rows")));
        }
        let mut out = Tensor::zeros(&[idx.len(), c]);
        let s = self.value(src);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(s.row(i));
        }
        let rg = self.rg(src);
        Ok(self.push(out, Op::GatherRows(src, idx.to_vec()), rg))
    }

    /// Sums row `i` of `x` into output row `target[i]`; output has `n_out` rows.
    pub fn scatter_rows(&mut self, x: Var, target: &[usize], n_out: usize) -> Result<Var> {
        let (r, c) = two_d(self.value(x), "scatter_rows")?;
        if target.len() != r || target.iter().any(|&t| t >= n_out) {
            return Err(Error::Invalid(format!(
                "scatter_rows: {} targets for {r} rows into {n_out} outputs",
                target.len()
            )));
        }
        let mut out = Tensor::zeros(&[n_out, c]);
        let xv = self.value(x);
        for (i, &t) in target.iter().enumerate() {
            axpy(out.row_mut(t), xv.row(i), 1.0);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScatterRows(x, target.to_vec()), rg))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn row_scale(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let r = self.value(x).rows();
        if factors.len() != r {
            return Err(Error::Shape { op: "row_scale", lhs: self.shape(x).to_vec(), rhs: vec![factors.len()] });
        }
        let mut out = self.value(x).clone();
        for (i, &f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowScale(x, factors.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = two_d(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(Error::Shape { op: "concat_rows", lhs: vec![c], rhs: self.shape(p).to_vec() });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = two_d(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::Shape { op: "concat_cols", lhs: vec![r], rhs: self.shape(p).to_vec() });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..r {
                out.row_mut(i)[off..off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = two_d(self.value(x), "slice_cols")?;
        if start + width > c {
            return Err(Error::Shape { op: "slice_cols", lhs: vec![r, c], rhs: vec![start, width] });
        }
        let mut out = Tensor::zeros(&[r, width]);
        let v = self.value(x);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Row-wise layer normalization followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::Shape { op: "layer_norm", lhs: self.shape(x).to_vec(), rhs: self.shape(gain).to_vec() });
        }
        let xv = self.value(x);
        let r = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; r];
        let mut out = Tensor::zeros(xv.shape());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            let o = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Output element `k` is the flat element `idx[k]` of `src`; output has `shape`.
    pub fn gather_flat(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(src).numel();
        if idx.len() != shape.iter().product::<usize>() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape { op: "gather_flat", lhs: self.shape(src).to_vec(), rhs: shape.to_vec() });
        }
        let s = self.value(src).data();
        let data = idx.iter().map(|&i| s[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::GatherFlat(src, idx), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, c) = two_d(self.value(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::Shape { op: "cross_entropy", lhs: vec![n, c], rhs: vec![targets.len()] });
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Invalid(format!("target class {t} out of range for {c} classes")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: every position is ignored".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, t) in probs.chunks_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            if let Some(t) = t {
                loss += lse - row[*t];
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::scalar(loss / count as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg))
    }

    /// Backpropagates from a scalar. Parameter gradients are added into
    /// `param_grads`; gradients of plain leaves are returned.
    pub fn backward(&self, loss: Var, param_grads: Option<&mut Grads>) -> Result<LeafGrads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape { op: "backward", lhs: self.shape(loss).to_vec(), rhs: vec![1] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(LeafGrads { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut param_grads = param_grads;

        for k in (0..=loss.0).rev() {
            let node = &self.nodes[k];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                if let (Some(pg), Some(g)) = (param_grads.as_deref_mut(), grads[k].take()) {
                    axpy(pg.get_mut(pid).data_mut(), &g, 1.0);
                }
                continue;
            }
            let Some(g) = grads[k].take() else { continue };
            self.backprop_node(k, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[k] = Some(g);
            }
        }
        Ok(LeafGrads { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, k: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[k].value;
        match &self.nodes[k].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, kk) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if let Some(da) = self.acc(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, kk, g, false, bv.data(), !*tb, da, 1.0);
                }
                if let Some(db) = self.acc(grads, *b) {
                    if *tb {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(n, m, kk, g, true, av.data(), false, db, 1.0);
                    } else {
                        // B is [k, n]: dB = Aᵀ · dC
                        gemm(kk, m, n, av.data(), true, g, false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(d, g, 1.0);
                }
                let c = out.cols();
                if let Some(d) = self.acc(grads, *bias) {
                    for row in g.chunks(c.max(1)) {
                        axpy(d, row, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(d) = self.acc(grads, *x) {
                    axpy(d, g, *s);
                }
            }
            Op::GatherRows(src, idx) => {
                let c = out.cols();
                if let Some(d) = self.acc(grads, *src) {
                    for (o, &i) in idx.iter().enumerate() {
                        axpy(&mut d[i * c..(i + 1) * c], &g[o * c..(o + 1) * c], 1.0);
                    }
                }
            }
            Op::ScatterRows(x, target) => {
                let c = out.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (i, &t) in target.iter().enumerate() {
                        axpy(&mut d[i * c..(i + 1) * c], &g[t * c..(t + 1) * c], 1.0);
                    }
                }
            }
            Op::RowScale(x, f) => {
                let c = out.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (i, &s) in f.iter().enumerate() {
                        axpy(&mut d[i * c..(i + 1) * c], &g[i * c..(i + 1) * c], s);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(d) = self.acc(grads, p) {
                        axpy(d, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.acc(grads, p) {
                        for i in 0..rows {
                            axpy(&mut d[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start) => {
                let w = out.cols();
                let c = self.value(*x).cols();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..out.rows() {
                        axpy(&mut d[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w], 1.0);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                if let Some(d) = self.acc(grads, *x) {
                    for ((y, gy), dx) in out.data().chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if let Some(d) = self.acc(grads, *gain) {
                    for (h, gy) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            d[j] += gy[j] * h[j];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *bias) {
                    for gy in g.chunks(c) {
                        axpy(d, gy, 1.0);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (i, (h, gy)) in xhat.chunks(c).zip(g.chunks(c)).enumerate() {
                        for j in 0..c {
                            dh[j] = gy[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        let dx = &mut d[i * c..(i + 1) * c];
                        for j in 0..c {
                            dx[j] += rstd[i] * (dh[j] - mean_dh - h[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu(xv[i]).1;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.acc(grads, *x) {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::GatherFlat(src, idx) => {
                if let Some(d) = self.acc(grads, *src) {
                    for (o, &i) in idx.iter().enumerate() {
                        d[i] += g[o];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.value(*logits).cols();
                let s = g[0] / *count as f64;
                if let Some(d) = self.acc(grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut d[i * c..(i + 1) * c];
                        axpy(row, &probs[i * c..(i + 1) * c], s);
                        row[*t] -= s;
                    }
                }
            }
        }
    }
}

/// Gradients of the plain leaves of a tape after [`Tape::backward`].
pub struct LeafGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
