//! Central finite-difference gradient checking.
//!
//! The finite-difference side only ever evaluates forward values, so it stays
//! independent of the backward implementation it is checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all inputs.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

/// Evaluates `f` on fresh graphs to compare `backward` with central
/// differences of step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect::<Vec<_>>()
    };

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant_ref(t)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            col.push((up - down) / (2.0 * h));
        }
        numeric.push(col);
    }

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let relative_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradCheck {
        relative_error,
        max_abs_error: max_abs,
        analytic,
        numeric,
    })
}
