//! Brute-force equivalence suites run as one entry point.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cp::{fcp_predict, fcp_retrain_oracle, fcp_scores_from_icl, retrain_scores, CentroidPredictor, EvalCounter, FrequencyPredictor, ScoreMatrix, TrainablePredictor};
use crate::data::Sample;
use crate::error::Result;
use crate::model::{forward_context_query, BoundModel, ModelConfig, ModelWeights, ParamStore};
use crate::numerics::gradcheck::check_gradients;
use crate::numerics::Tensor;
use crate::soft_cp::{fcp_soft_loss, soft_membership, SoftCpHyper};
use crate::stats::coverage_floor;
use crate::tasks::{sample_episode, sample_task};

/// Scores closer than this to their threshold are excluded from set
/// comparisons.
pub const TIE_TOLERANCE: f64 = 1e-9;
pub const PERMUTATION_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub trials: usize,
    /// Individual comparisons made, ties excluded.
    pub compared: usize,
    pub excluded: usize,
    pub failures: usize,
    /// Suite-specific statistic: worst deviation, coverage or relative error.
    pub metric: f64,
    /// Bound `metric` is held to.
    pub bound: f64,
    pub passed: bool,
}

const ALPHAS: [f64; 4] = [0.05, 0.1, 0.2, 0.3];

fn blob_data(rng: &mut ChaCha8Rng, n: usize, k: usize, spread: f64) -> Vec<Sample> {
    let noise = Normal::new(0.0, spread).expect("positive spread");
    (0..n)
        .map(|_| {
            let y = rng.gen_range(0..k);
            let x = vec![y as f64 + noise.sample(rng), (y % 2) as f64 + noise.sample(rng)];
            Sample::new(x, y)
        })
        .collect()
}

fn compare_sets(fast: &crate::cp::PredictionSet, other: impl Fn(usize) -> bool, out: &mut SuiteResult) {
    for y in 0..fast.num_labels() {
        if fast.margin(y) <= TIE_TOLERANCE {
            out.excluded += 1;
            continue;
        }
        out.compared += 1;
        if fast.contains(y) != other(y) {
            out.failures += 1;
        }
    }
}

fn empty(name: &str, trials: usize, bound: f64) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        trials,
        compared: 0,
        excluded: 0,
        failures: 0,
        metric: 0.0,
        bound,
        passed: false,
    }
}

/// `fcp_predict` on refit scores against the counting-rule oracle over
/// random instances with `K ≤ 4`, `n ≤ 8`.
pub fn fcp_oracle_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = empty("fcp_oracle_equivalence", trials, 0.0);
    for _ in 0..trials {
        let k = rng.gen_range(2..=4);
        let n = rng.gen_range(1..=8);
        let alpha = ALPHAS[rng.gen_range(0..ALPHAS.len())];
        let spread = rng.gen_range(0.2..1.5);
        let data = blob_data(&mut rng, n, k, spread);
        let x = [rng.gen_range(-1.0..4.0), rng.gen_range(-1.0..2.0)];
        let (fast, slow) = if rng.gen_bool(0.5) {
            let p = CentroidPredictor {
                num_classes: k,
                temperature: rng.gen_range(0.2..2.0),
            };
            (fcp_predict(&retrain_scores(&p, &data, &x)?, alpha)?, fcp_retrain_oracle(&p, &data, &x, alpha)?)
        } else {
            let p = FrequencyPredictor { num_classes: k };
            (fcp_predict(&retrain_scores(&p, &data, &x)?, alpha)?, fcp_retrain_oracle(&p, &data, &x, alpha)?)
        };
        compare_sets(&fast, |y| slow.contains(y), &mut out);
    }
    out.metric = out.failures as f64;
    out.passed = out.failures == 0 && out.compared > 0;
    Ok(out)
}

/// Sets rebuilt from soft indicators (`σ > ½`) at `c_q = κ = 1e-5` against
/// `fcp_predict` on random score matrices.
pub fn soft_hard_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = empty("soft_hard_consistency", trials, 0.0);
    for _ in 0..trials {
        let alpha = ALPHAS[rng.gen_range(0..ALPHAS.len())];
        let hyper = SoftCpHyper {
            alpha,
            c_q: 1e-5,
            kappa: 1e-5,
            lambda: 1.0,
        };
        let (k, n1) = (rng.gen_range(2..=4), rng.gen_range(2..=20));
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..n1).map(|_| rng.gen_range(0.0..3.0)).collect()).collect();
        let hard = fcp_predict(&ScoreMatrix::new(rows.clone())?, alpha)?;
        let soft = soft_membership(&rows, &hyper)?;
        compare_sets(&hard, |y| soft[y], &mut out);
    }
    out.metric = out.failures as f64;
    out.passed = out.failures == 0 && out.compared > 0;
    Ok(out)
}

/// Context shuffles against in-context predictions and FCP test scores of
/// random small Transformers on QPSK episodes.
pub fn permutation_suite(seed: u64, trials: usize) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = empty("permutation_invariance", trials, PERMUTATION_TOLERANCE);
    let counter = EvalCounter::new();
    for _ in 0..trials {
        let cfg = ModelConfig {
            num_layers: rng.gen_range(1..=2),
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            num_classes: 4,
            input_dim: 2,
        };
        let w = ModelWeights::init(&cfg, rng.gen())?;
        let task = sample_task(&mut rng);
        let ep = sample_episode(&task, rng.gen_range(1..=19), &mut rng);
        let queries = vec![ep.query.x.clone(), vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]];
        let mut shuffled = ep.context.clone();
        shuffled.shuffle(&mut rng);

        let a = forward_context_query(&w, &ep.context, &queries)?;
        let b = forward_context_query(&w, &shuffled, &queries)?;
        let sa = fcp_scores_from_icl(&w, &ep.context, &ep.query.x, &counter)?;
        let sb = fcp_scores_from_icl(&w, &shuffled, &ep.query.x, &counter)?;
        let mut worst: f64 = 0.0;
        for (ra, rb) in a.iter().zip(&b) {
            for (u, v) in ra.iter().zip(rb) {
                worst = worst.max((u - v).abs());
            }
        }
        for y in 0..cfg.num_classes {
            worst = worst.max((sa.test_score(y) - sb.test_score(y)).abs());
            let mut ca = sa.row(y).to_vec();
            let mut cb = sb.row(y).to_vec();
            ca.sort_by(f64::total_cmp);
            cb.sort_by(f64::total_cmp);
            for (u, v) in ca.iter().zip(&cb) {
                worst = worst.max((u - v).abs());
            }
        }
        out.compared += 1;
        if worst > PERMUTATION_TOLERANCE {
            out.failures += 1;
        }
        out.metric = out.metric.max(worst);
    }
    out.passed = out.failures == 0;
    Ok(out)
}

/// Empirical coverage of retraining FCP against the binomial floor.
pub fn coverage_suite(seed: u64, draws: usize, alpha: f64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = coverage_floor(alpha, draws);
    let mut out = empty("retrain_fcp_coverage", draws, floor);
    let p = CentroidPredictor {
        num_classes: 3,
        temperature: 1.0,
    };
    let mut covered = 0usize;
    for _ in 0..draws {
        let mut d = blob_data(&mut rng, 10, p.num_classes(), 0.8);
        let test = d.pop().expect("ten samples drawn");
        let set = fcp_retrain_oracle(&p, &d, &test.x, alpha)?;
        covered += usize::from(set.contains(test.y));
    }
    out.compared = draws;
    out.failures = draws - covered;
    out.metric = covered as f64 / draws as f64;
    out.passed = out.metric >= floor;
    Ok(out)
}

/// Finite differences of the CP-aware loss through a tiny Transformer
/// (`n = 3`, `K = 2`, width 4) against reverse mode.
pub fn gradient_suite(seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        num_layers: 1,
        model_dim: 4,
        num_heads: 2,
        ffn_dim: 8,
        num_classes: 2,
        input_dim: 2,
    };
    let w = ModelWeights::init(&cfg, rng.gen())?;
    let inputs: Vec<Tensor> = w.params().iter().map(|p| p.tensor.clone()).collect();
    let data = blob_data(&mut rng, 3, 2, 0.7);
    let test = blob_data(&mut rng, 1, 2, 0.7).remove(0);
    let hyper = SoftCpHyper {
        alpha: 0.3,
        c_q: 0.5,
        kappa: 0.5,
        lambda: 1.0,
    };
    let ck = check_gradients(&inputs, 1e-6, |g, vars| {
        let model = BoundModel::from_vars(&cfg, vars.to_vec())?;
        let s = crate::cp::fcp_scores_graph(&model, g, &data, &test.x, cfg.num_classes)?;
        Ok(fcp_soft_loss(g, &[s], &[test.y], &hyper)?.total)
    })?;
    let mut out = empty("gradient_fidelity", 1, GRADIENT_TOLERANCE);
    out.compared = ck.analytic.iter().map(Vec::len).sum();
    out.metric = ck.relative_error;
    out.passed = ck.relative_error < GRADIENT_TOLERANCE;
    out.failures = usize::from(!out.passed);
    Ok(out)
}

/// Every suite at its standard size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        fcp_oracle_suite(seed, 1000)?,
        soft_hard_suite(seed.wrapping_add(1), 1000)?,
        permutation_suite(seed.wrapping_add(2), 100)?,
        coverage_suite(seed.wrapping_add(3), 2000, 0.1)?,
        gradient_suite(seed.wrapping_add(4))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_at_reduced_size() {
        assert!(fcp_oracle_suite(1, 200).unwrap().passed);
        assert!(soft_hard_suite(2, 200).unwrap().passed);
        let p = permutation_suite(3, 10).unwrap();
        assert!(p.passed, "{p:?}");
        assert!(coverage_suite(4, 500, 0.1).unwrap().passed);
        let g = gradient_suite(5).unwrap();
        assert!(g.passed, "{g:?}");
        assert!(g.compared > 50);
    }

    #[test]
    fn comparison_counts_disagreements() {
        let set = fcp_predict(&ScoreMatrix::new(vec![vec![0.1, 0.5, 0.2], vec![0.9, 0.1, 0.2]]).unwrap(), 0.3).unwrap();
        let mut out = empty("flipped", 1, 0.0);
        compare_sets(&set, |y| !set.contains(y), &mut out);
        assert_eq!(out.failures, out.compared);
        assert_eq!(out.compared + out.excluded, 2);
    }
}
