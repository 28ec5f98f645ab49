//! Summary statistics and the paired test used for scheme comparisons.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation percentile, `q ∈ [0, 100]`.
pub fn percentile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("percentile sample"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q} outside [0, 100]")));
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(s[lo] + (s[hi] - s[lo]) * (pos - lo as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl Percentiles {
    pub fn of(xs: &[f64]) -> Result<Self> {
        Ok(Self {
            p5: percentile(xs, 5.0)?,
            p25: percentile(xs, 25.0)?,
            p50: percentile(xs, 50.0)?,
            p75: percentile(xs, 75.0)?,
            p95: percentile(xs, 95.0)?,
        })
    }
}

/// `1 − α − 3·√(α(1−α)/N)`
pub fn coverage_floor(alpha: f64, points: usize) -> f64 {
    1.0 - alpha - 3.0 * (alpha * (1.0 - alpha) / points.max(1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub pairs: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for the alternative `mean(a − b) < 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test of `H1: E[a − b] < 0`.
///
/// Identical samples give `p = 1`; a constant negative difference gives
/// `p = 0`.
pub fn paired_t_less(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::Empty("paired test needs two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let md = mean(&d);
    let var = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let (t, p) = if se == 0.0 {
        let p = if md < 0.0 { 0.0 } else { 1.0 };
        (md.signum() * f64::INFINITY, p)
    } else {
        let t = md / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (t, dist.cdf(t))
    };
    Ok(PairedTest {
        pairs: d.len(),
        mean_diff: md,
        t,
        p_value: p,
    })
}
