//! Smooth surrogates of conformal set construction and the CP-aware
//! training objectives built from them.
//!
//! The soft quantile is a softmin average of the scores, each weighted by
//! `exp(−pinball / c_q)`. The soft indicator `σ(r, τ) = 1 / (1 + e^{(r−τ)/κ})`
//! tends to `𝟙(r ≤ τ)` as `κ → 0`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::{logistic_neg, pos};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftCpHyper {
    pub alpha: f64,
    /// Soft-quantile temperature; larger is smoother.
    pub c_q: f64,
    /// Soft-indicator temperature; smaller is sharper.
    pub kappa: f64,
    /// Weight of the true-label inclusion term.
    pub lambda: f64,
}

impl Default for SoftCpHyper {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            c_q: 0.1,
            kappa: 0.1,
            lambda: 1.0,
        }
    }
}

impl SoftCpHyper {
    pub fn validate(&self) -> Result<()> {
        crate::cp::check_alpha(self.alpha)?;
        if !(self.c_q > 0.0 && self.kappa > 0.0 && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need c_q > 0, kappa > 0, lambda >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `α·Σ[z − z_j]₊ + (1−α)·Σ[z_j − z]₊`
pub fn pinball(z: f64, zs: &[f64], alpha: f64) -> f64 {
    zs.iter()
        .map(|&zj| alpha * pos(z - zj) + (1.0 - alpha) * pos(zj - z))
        .sum()
}

/// Softmin weights `∝ exp(−ρ(z_j)/c_q)` over the points themselves.
pub fn soft_quantile_weights(zs: &[f64], alpha: f64, c_q: f64) -> Vec<f64> {
    let u: Vec<f64> = zs.iter().map(|&z| -pinball(z, zs, alpha) / c_q).collect();
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = u.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Smooth `(1−α)`-quantile of `zs`.
pub fn soft_quantile(zs: &[f64], alpha: f64, c_q: f64) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::Empty("soft_quantile"));
    }
    let w = soft_quantile_weights(zs, alpha, c_q);
    Ok(w.iter().zip(zs).map(|(w, z)| w * z).sum())
}

/// `1 / (1 + e^{(r−τ)/κ})`
pub fn soft_indicator(r: f64, tau: f64, kappa: f64) -> f64 {
    logistic_neg((r - tau) / kappa)
}

/// `∂Q/∂z_k` for one row, with the kink derivative of `[·]₊` taken as 0.
fn soft_quantile_grad(zs: &[f64], w: &[f64], q: f64, alpha: f64, c_q: f64) -> Vec<f64> {
    let n = zs.len();
    // ∂Q/∂u_i = w_i (z_i − Q), with u_i = −ρ_i / c_q
    let du: Vec<f64> = (0..n).map(|i| w[i] * (zs[i] - q)).collect();
    let mut grad = w.to_vec();
    for i in 0..n {
        if du[i] == 0.0 {
            continue;
        }
        let scale = -du[i] / c_q;
        for k in 0..n {
            let drho = if k == i {
                let above = zs.iter().filter(|&&zj| zs[i] > zj).count() as f64;
                let below = zs.iter().filter(|&&zj| zj > zs[i]).count() as f64;
                alpha * above - (1.0 - alpha) * below
            } else if zs[i] > zs[k] {
                -alpha
            } else if zs[k] > zs[i] {
                1.0 - alpha
            } else {
                0.0
            };
            grad[k] += scale * drho;
        }
    }
    grad
}

struct SoftQuantileRows {
    alpha: f64,
    c_q: f64,
    weights: Vec<Vec<f64>>,
}

impl CustomOp for SoftQuantileRows {
    fn name(&self) -> &'static str {
        "soft_quantile_rows"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.shape().len() != 2 || x.cols() == 0 {
            return Err(shape_err("soft_quantile_rows", format!("{:?}", x.shape())));
        }
        let mut out = Vec::with_capacity(x.rows());
        self.weights.clear();
        for r in 0..x.rows() {
            let row = x.row(r);
            let w = soft_quantile_weights(row, self.alpha, self.c_q);
            out.push(w.iter().zip(row).map(|(w, z)| w * z).sum());
            self.weights.push(w);
        }
        Tensor::matrix(x.rows(), 1, out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let mut g = Vec::with_capacity(x.len());
        for (r, (w, &go)) in self.weights.iter().zip(grad_out).enumerate() {
            let row_grad = soft_quantile_grad(x.row(r), w, output.data()[r], self.alpha, self.c_q);
            g.extend(row_grad.into_iter().map(|v| v * go));
        }
        vec![g]
    }
}

struct SoftIndicatorOp {
    kappa: f64,
}

impl CustomOp for SoftIndicatorOp {
    fn name(&self) -> &'static str {
        "soft_indicator"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (r, tau) = (inputs[0], inputs[1]);
        if r.shape() != tau.shape() && tau.len() != 1 {
            return Err(shape_err(
                "soft_indicator",
                format!("{:?} vs {:?}", r.shape(), tau.shape()),
            ));
        }
        let data = r
            .data()
            .iter()
            .enumerate()
            .map(|(i, &rv)| soft_indicator(rv, tau.data()[if tau.len() == 1 { 0 } else { i }], self.kappa))
            .collect();
        Tensor::new(r.shape().to_vec(), data)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let tau_len = inputs[1].len();
        let mut gr = Vec::with_capacity(output.len());
        let mut gt = vec![0.0; tau_len];
        for (i, (&s, &go)) in output.data().iter().zip(grad_out).enumerate() {
            let d = s * (1.0 - s) / self.kappa;
            gr.push(-go * d);
            gt[if tau_len == 1 { 0 } else { i }] += go * d;
        }
        vec![gr, gt]
    }
}

/// Soft quantile of every row of `x`, as a column vector.
pub fn soft_quantile_rows(g: &mut Graph<'_>, x: Var, alpha: f64, c_q: f64) -> Result<Var> {
    g.custom(
        Box::new(SoftQuantileRows {
            alpha,
            c_q,
            weights: Vec::new(),
        }),
        &[x],
    )
}

/// Elementwise `σ(r, τ)`; `tau` may be a single value broadcast over `r`.
pub fn soft_indicator_var(g: &mut Graph<'_>, r: Var, tau: Var, kappa: f64) -> Result<Var> {
    g.custom(Box::new(SoftIndicatorOp { kappa }), &[r, tau])
}

/// Soft inclusion indicators `σ(s_{n+1}^y, Q̂(row y))` of one `K×(n+1)`
/// score matrix, as a `1×K` row.
pub fn soft_inclusions(g: &mut Graph<'_>, scores: Var, hyper: &SoftCpHyper) -> Result<Var> {
    let shape = g.value(scores).shape().to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(shape_err("soft_inclusions", format!("{shape:?}")));
    }
    let (k, n1) = (shape[0], shape[1]);
    let tau = soft_quantile_rows(g, scores, hyper.alpha, hyper.c_q)?;
    let tau = g.gather(tau, &(0..k).map(|y| (y, 0)).collect::<Vec<_>>())?;
    let test = g.gather(scores, &(0..k).map(|y| (y, n1 - 1)).collect::<Vec<_>>())?;
    soft_indicator_var(g, test, tau, hyper.kappa)
}

/// The two surrogate terms and their combination.
#[derive(Clone, Copy, Debug)]
pub struct SoftLoss {
    pub ineff: Var,
    pub class: Var,
    pub total: Var,
}

/// `L_ineff`, `L_class` and `L_ineff + λ·L_class` over a batch of score
/// matrices, computing each soft threshold once.
pub fn fcp_soft_loss(
    g: &mut Graph<'_>,
    score_matrices: &[Var],
    true_labels: &[usize],
    hyper: &SoftCpHyper,
) -> Result<SoftLoss> {
    if score_matrices.is_empty() {
        return Err(Error::Empty("score matrices"));
    }
    if score_matrices.len() != true_labels.len() {
        return Err(shape_err("fcp_soft_loss", "one true label per score matrix"));
    }
    let mut incl = Vec::with_capacity(score_matrices.len());
    let mut truth = Vec::with_capacity(score_matrices.len());
    for (&s, &y) in score_matrices.iter().zip(true_labels) {
        let k = g.value(s).rows();
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        let sig = soft_inclusions(g, s, hyper)?;
        incl.push(sig);
        truth.push(g.gather(sig, &[(0, y)])?);
    }
    combine(g, &incl, &truth, hyper.lambda)
}

fn combine(g: &mut Graph<'_>, incl: &[Var], truth: &[Var], lambda: f64) -> Result<SoftLoss> {
    let mut per_task = Vec::with_capacity(incl.len());
    for &v in incl {
        per_task.push(g.sum(v)?);
    }
    let stacked = g.concat_rows(&per_task)?;
    let ineff = g.sum(stacked)?;
    let t = g.concat_rows(truth)?;
    let t = g.sum(t)?;
    // Σ (1 − σ_true) = T − Σ σ_true
    let class = g.affine(t, -1.0, truth.len() as f64)?;
    let weighted = g.scale(class, lambda)?;
    let total = g.add(ineff, weighted)?;
    Ok(SoftLoss { ineff, class, total })
}

/// `Σ_t Σ_y σ(s_{n+1}^{t,y}, Q̂(row y))`
pub fn loss_ineff(g: &mut Graph<'_>, score_matrices: &[Var], hyper: &SoftCpHyper) -> Result<Var> {
    if score_matrices.is_empty() {
        return Err(Error::Empty("score matrices"));
    }
    let mut parts = Vec::with_capacity(score_matrices.len());
    for &s in score_matrices {
        let sig = soft_inclusions(g, s, hyper)?;
        parts.push(g.sum(sig)?);
    }
    let stacked = g.concat_rows(&parts)?;
    g.sum(stacked)
}

/// `Σ_t (1 − σ(s_{n+1}^{t,y*}, Q̂(row y*)))` with `y*` the true label.
pub fn loss_class(g: &mut Graph<'_>, score_matrices: &[Var], true_labels: &[usize], hyper: &SoftCpHyper) -> Result<Var> {
    Ok(fcp_soft_loss(g, score_matrices, true_labels, hyper)?.class)
}

/// `L_ineff + λ·L_class`
pub fn loss_total(g: &mut Graph<'_>, score_matrices: &[Var], true_labels: &[usize], hyper: &SoftCpHyper) -> Result<Var> {
    Ok(fcp_soft_loss(g, score_matrices, true_labels, hyper)?.total)
}

/// Split-conformal variant: the soft threshold is taken over the `1×m`
/// calibration scores and applied to every entry of the `1×K` test row.
pub fn loss_scp_soft(
    g: &mut Graph<'_>,
    cal_scores: Var,
    test_row: Var,
    true_label: usize,
    hyper: &SoftCpHyper,
) -> Result<SoftLoss> {
    let k = g.value(test_row).len();
    if true_label >= k {
        return Err(Error::LabelOutOfRange {
            label: true_label,
            classes: k,
        });
    }
    let tau = soft_quantile_rows(g, cal_scores, hyper.alpha, hyper.c_q)?;
    let sig = soft_indicator_var(g, test_row, tau, hyper.kappa)?;
    let truth = g.gather(sig, &[(0, true_label)])?;
    combine(g, &[sig], &[truth], hyper.lambda)
}

/// Hard set rebuilt from soft decisions `σ > ½`, evaluated with plain
/// arithmetic.
pub fn soft_membership(rows: &[Vec<f64>], hyper: &SoftCpHyper) -> Result<Vec<bool>> {
    rows.iter()
        .map(|row| {
            let tau = soft_quantile(row, hyper.alpha, hyper.c_q)?;
            let test = *row.last().ok_or(Error::Empty("score row"))?;
            Ok(soft_indicator(test, tau, hyper.kappa) > 0.5)
        })
        .collect()
}
