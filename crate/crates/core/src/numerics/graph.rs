use std::borrow::Cow;

use super::kernels::{gelu, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_rows_in_place};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Additive mask value standing in for −∞.
///
/// Large enough that `exp(logit + MASK_BLOCKED − rowmax)` underflows to exactly
/// zero, small enough that `MASK_BLOCKED · 0` is still `0` rather than NaN.
pub const MASK_BLOCKED: f64 = -1e30;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` returns one gradient buffer per input, each matching that
/// input's length.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Gelu(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    NegLogFloor(Var, f64),
    SumAll(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of tensor operations for reverse-mode differentiation.
///
/// Every operation appends one node; node order is a topological order, so
/// [`Graph::backward`] walks the tape once from the loss back to index 0.
/// Leaves created with [`Graph::param`] borrow their tensor, which keeps
/// repeated forward passes over large weight sets copy-free.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// ∂loss/∂var, or `None` when `var` does not influence the loss or was
    /// recorded without gradient tracking.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn two_d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected 2-D tensor, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Trainable leaf owning `t`.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul", self.value(a))?;
        let (k2, p) = two_d("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}×{k}] · [{k2}×{p}]")));
        }
        let mut out = vec![0.0; m * p];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let t = Tensor::matrix(m, p, out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul_nt", self.value(a))?;
        let (p, k2) = two_d("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}×{k}] · [{p}×{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * p];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let t = Tensor::matrix(m, p, out)?;
        self.push("matmul_nt", t, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// `a[m×p] + row[1×p]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, p) = two_d("add_row", self.value(a))?;
        if self.value(row).len() != p {
            return Err(shape_err(
                "add_row",
                format!("[{m}×{p}] + {:?}", self.value(row).shape()),
            ));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(p)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::matrix(m, p, data)?;
        self.push("add_row", t, Op::AddRow(a, row), &[a, row])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} ⊙ {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("affine", t, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (vals, derivs): (Vec<f64>, Vec<f64>) = tx.data().iter().map(|&v| gelu(v)).unzip();
        let t = Tensor::new(tx.shape().to_vec(), vals)?;
        self.push("gelu", t, Op::Gelu(x, derivs), &[x])
    }

    /// Row-wise layer normalization with learned gain and bias (each `1×p`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, p) = two_d("layer_norm", self.value(x))?;
        if self.value(gain).len() != p || self.value(bias).len() != p {
            return Err(shape_err("layer_norm", "gain/bias width differs from input"));
        }
        let (xs, g, b) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * p];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let row = &xs[i * p..(i + 1) * p];
            let mean = row.iter().sum::<f64>() / p as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..p {
                let h = (row[j] - mean) * r;
                xhat[i * p + j] = h;
                out[i * p + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(m, p, out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, p) = two_d("softmax_rows", tx)?;
        check_finite("softmax_rows input", tx)?;
        let mut data = tx.data().to_vec();
        softmax_rows_in_place(&mut data, p);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("softmax_rows", t, Op::SoftmaxRows(x), &[x])
    }

    /// Scaled dot-product attention with an additive mask.
    ///
    /// `mask` is `L_q×L_k` with entries `0` (visible) or [`MASK_BLOCKED`].
    /// A row with no visible column is rejected.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: Var) -> Result<Var> {
        let (lq, d) = two_d("masked_attention", self.value(q))?;
        let (lk, dk) = two_d("masked_attention", self.value(k))?;
        let (lv, _) = two_d("masked_attention", self.value(v))?;
        if d != dk || lk != lv {
            return Err(shape_err("masked_attention", "q/k/v shapes disagree"));
        }
        let (mr, mc) = two_d("masked_attention", self.value(mask))?;
        if mr != lq || mc != lk {
            return Err(shape_err(
                "masked_attention",
                format!("mask [{mr}×{mc}] for [{lq}×{lk}] logits"),
            ));
        }
        let m = self.value(mask);
        for r in 0..mr {
            if m.row(r).iter().all(|&e| e <= MASK_BLOCKED * 0.5) {
                return Err(Error::Contract(format!("attention row {r} is fully masked")));
            }
        }
        let logits = self.matmul_nt(q, k)?;
        let logits = self.scale(logits, 1.0 / (d as f64).sqrt())?;
        let logits = self.add(logits, mask)?;
        let weights = self.softmax_rows(logits)?;
        self.matmul(weights, v)
    }

    /// Stack 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows"));
        }
        let p = two_d("concat_rows", self.value(parts[0]))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in parts {
            let (r, c) = two_d("concat_rows", self.value(v))?;
            if c != p {
                return Err(shape_err("concat_rows", format!("column count {c} vs {p}")));
            }
            rows += r;
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::matrix(rows, p, data)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, p) = two_d("slice_rows", self.value(x))?;
        if start > end || end > m {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * p..end * p].to_vec();
        let t = Tensor::matrix(end - start, p, data)?;
        self.push("slice_rows", t, Op::SliceRows(x, start), &[x])
    }

    /// Picks `(row, col)` entries into a `1×len` row vector.
    pub fn gather(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (m, p) = two_d("gather", self.value(x))?;
        let mut flat = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= p {
                return Err(shape_err("gather", format!("({r},{c}) outside [{m}×{p}]")));
            }
            flat.push(r * p + c);
        }
        let data = flat.iter().map(|&i| self.value(x).data()[i]).collect();
        let t = Tensor::row_vector(data);
        self.push("gather", t, Op::Gather(x, flat), &[x])
    }

    /// `−ln(max(x, floor))`, elementwise; zero gradient where the floor binds.
    pub fn neg_log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| -v.max(floor).ln()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("neg_log_floor", t, Op::NegLogFloor(x, floor), &[x])
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn custom(&mut self, mut op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        let out = {
            let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&ins)?
        };
        self.push(name, out, Op::Custom(op, inputs.to_vec()), inputs)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Visits each recorded node at most once, from `loss` down to the first
    /// leaf, accumulating into every input that tracks gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let out = &*node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let p = self.value(*b).shape()[1];
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        matmul_nt_acc(&gout, self.value(*b).data(), ga, m, p, k);
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, k * p);
                        matmul_tn_acc(self.value(*a).data(), &gout, gb, m, k, p);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                    let p = self.value(*b).shape()[0];
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        matmul_acc(&gout, self.value(*b).data(), ga, m, p, k);
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, p * k);
                        matmul_tn_acc(&gout, self.value(*a).data(), gb, m, p, k);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.requires_grad(v) {
                            axpy(slot(&mut grads, v, gout.len()), &gout, 1.0);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.requires_grad(*a) {
                        axpy(slot(&mut grads, *a, gout.len()), &gout, 1.0);
                    }
                    if self.requires_grad(*row) {
                        let p = self.value(*row).len();
                        let gr = slot(&mut grads, *row, p);
                        for chunk in gout.chunks(p) {
                            axpy(gr, chunk, 1.0);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    if self.requires_grad(*a) {
                        let ga = slot(&mut grads, *a, gout.len());
                        for ((g, go), y) in ga.iter_mut().zip(&gout).zip(tb) {
                            *g += go * y;
                        }
                    }
                    if self.requires_grad(*b) {
                        let gb = slot(&mut grads, *b, gout.len());
                        for ((g, go), x) in gb.iter_mut().zip(&gout).zip(ta) {
                            *g += go * x;
                        }
                    }
                }
                Op::Affine(x, s) => {
                    if self.requires_grad(*x) {
                        axpy(slot(&mut grads, *x, gout.len()), &gout, *s);
                    }
                }
                Op::Gelu(x, derivs) => {
                    if self.requires_grad(*x) {
                        let gx = slot(&mut grads, *x, gout.len());
                        for ((g, go), d) in gx.iter_mut().zip(&gout).zip(derivs) {
                            *g += go * d;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let p = self.value(*gain).len();
                    let m = rstd.len();
                    if self.requires_grad(*bias) {
                        let gb = slot(&mut grads, *bias, p);
                        for chunk in gout.chunks(p) {
                            axpy(gb, chunk, 1.0);
                        }
                    }
                    if self.requires_grad(*gain) {
                        let gg = slot(&mut grads, *gain, p);
                        for (chunk, h) in gout.chunks(p).zip(xhat.chunks(p)) {
                            for j in 0..p {
                                gg[j] += chunk[j] * h[j];
                            }
                        }
                    }
                    if self.requires_grad(*x) {
                        let g = self.value(*gain).data().to_vec();
                        let gx = slot(&mut grads, *x, m * p);
                        for i in 0..m {
                            let go = &gout[i * p..(i + 1) * p];
                            let h = &xhat[i * p..(i + 1) * p];
                            let dh: Vec<f64> = go.iter().zip(&g).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / p as f64;
                            let mean_dh_h =
                                dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / p as f64;
                            for j in 0..p {
                                gx[i * p + j] += rstd[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.requires_grad(*x) {
                        let p = out.cols();
                        let gx = slot(&mut grads, *x, gout.len());
                        for ((gx_row, go), y) in gx
                            .chunks_mut(p)
                            .zip(gout.chunks(p))
                            .zip(out.data().chunks(p))
                        {
                            let dot: f64 = go.iter().zip(y).map(|(a, b)| a * b).sum();
                            for j in 0..p {
                                gx_row[j] += y[j] * (go[j] - dot);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &v in parts {
                        let len = self.value(v).len();
                        if self.requires_grad(v) {
                            axpy(slot(&mut grads, v, len), &gout[offset..offset + len], 1.0);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    if self.requires_grad(*x) {
                        let tx = self.value(*x);
                        let p = tx.cols();
                        let gx = slot(&mut grads, *x, tx.len());
                        axpy(&mut gx[start * p..start * p + gout.len()], &gout, 1.0);
                    }
                }
                Op::Gather(x, flat) => {
                    if self.requires_grad(*x) {
                        let gx = slot(&mut grads, *x, self.value(*x).len());
                        for (&i, go) in flat.iter().zip(&gout) {
                            gx[i] += go;
                        }
                    }
                }
                Op::NegLogFloor(x, floor) => {
                    if self.requires_grad(*x) {
                        let tx = self.value(*x).data();
                        let gx = slot(&mut grads, *x, gout.len());
                        for ((g, go), &v) in gx.iter_mut().zip(&gout).zip(tx) {
                            if v > *floor {
                                *g -= go / v;
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    if self.requires_grad(*x) {
                        let gx = slot(&mut grads, *x, self.value(*x).len());
                        for g in gx.iter_mut() {
                            *g += gout[0];
                        }
                    }
                }
                Op::Custom(op, inputs) => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gins = op.backward(&ins, out, &gout);
                    for (&v, gin) in inputs.iter().zip(gins) {
                        if self.requires_grad(v) {
                            axpy(slot(&mut grads, v, gin.len()), &gin, 1.0);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
