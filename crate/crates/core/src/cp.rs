//! Non-conformity scores, conformal quantiles and split/full conformal sets.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{shape_err, Error, Result};
use crate::model::{BoundModel, ModelWeights};
use crate::numerics::{Graph, Var};

/// Probability floor inside the log-loss score.
pub const PROB_FLOOR: f64 = 1e-12;

/// Slack for `⌈(1−α)N⌉` so that e.g. `0.9 · 20` does not round up to 19.
const RANK_SLACK: f64 = 1e-9;

/// `−log(max(p[y], 1e-12))`
pub fn ncs_logloss(p: &[f64], y: usize) -> Result<f64> {
    let py = *p.get(y).ok_or(Error::LabelOutOfRange {
        label: y,
        classes: p.len(),
    })?;
    Ok(-py.max(PROB_FLOOR).ln())
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

/// 1-based rank `⌈(1−α)N⌉`, clamped to `1..=N`.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let k = ((1.0 - alpha) * n as f64 - RANK_SLACK).ceil();
    (k.max(1.0) as usize).min(n)
}

/// The `⌈(1−α)N⌉`-th smallest element of `scores`, duplicates counted
/// separately; `+∞` entries are allowed.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Empty("conformal_quantile scores"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[conformal_rank(sorted.len(), alpha) - 1])
}

/// Split-conformal threshold: quantile of the calibration scores with one
/// extra `+∞` point.
pub fn scp_calibrate(cal_scores: &[f64], alpha: f64) -> Result<f64> {
    if cal_scores.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut s = cal_scores.to_vec();
    s.push(f64::INFINITY);
    conformal_quantile(&s, alpha)
}

/// A conformal prediction set with the threshold each label was held to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    members: Vec<usize>,
    thresholds: Vec<f64>,
    test_scores: Vec<f64>,
}

impl PredictionSet {
    /// Builds the set `{y : test_scores[y] ≤ thresholds[y]}`.
    pub fn from_thresholds(test_scores: Vec<f64>, thresholds: Vec<f64>) -> Result<Self> {
        if test_scores.len() != thresholds.len() {
            return Err(shape_err("PredictionSet", "score/threshold count mismatch"));
        }
        let members = test_scores
            .iter()
            .zip(&thresholds)
            .enumerate()
            .filter(|(_, (s, q))| s <= q)
            .map(|(y, _)| y)
            .collect();
        Ok(Self {
            members,
            thresholds,
            test_scores,
        })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, y: usize) -> bool {
        self.members.binary_search(&y).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.thresholds.len()
    }

    pub fn threshold(&self, y: usize) -> f64 {
        self.thresholds[y]
    }

    pub fn test_score(&self, y: usize) -> f64 {
        self.test_scores[y]
    }

    /// `|test score − threshold|` for label `y`.
    pub fn margin(&self, y: usize) -> f64 {
        (self.test_scores[y] - self.thresholds[y]).abs()
    }
}

/// `{y : test_scores[y] ≤ threshold}`
pub fn scp_predict(threshold: f64, test_scores: &[f64]) -> PredictionSet {
    PredictionSet::from_thresholds(test_scores.to_vec(), vec![threshold; test_scores.len()])
        .expect("equal lengths by construction")
}

/// Full-conformal scores: row `y` holds `s_1^y … s_n^y, s_{n+1}^y` computed
/// by the model fitted to `D ∪ {(x_{n+1}, y)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || width == 0 {
            return Err(Error::Empty("score matrix"));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(shape_err("ScoreMatrix", "rows of unequal length"));
        }
        if rows.iter().flatten().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::InvalidArgument("scores must be finite or +inf".into()));
        }
        Ok(Self { rows })
    }

    pub fn num_labels(&self) -> usize {
        self.rows.len()
    }

    /// `n + 1`
    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.rows[y]
    }

    pub fn test_score(&self, y: usize) -> f64 {
        *self.rows[y].last().expect("nonempty row")
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Admits `y` when its test score is at most the conformal quantile of its
/// own row.
pub fn fcp_predict(scores: &ScoreMatrix, alpha: f64) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let thresholds = scores
        .rows()
        .iter()
        .map(|row| conformal_quantile(row, alpha))
        .collect::<Result<Vec<_>>>()?;
    let tests = (0..scores.num_labels()).map(|y| scores.test_score(y)).collect();
    PredictionSet::from_thresholds(tests, thresholds)
}

/// Counts predictive distributions computed during calibration.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Differentiable `K×(n+1)` score matrix: one augmented forward pass per
/// candidate label, each position scored at its own label.
pub fn fcp_scores_graph(
    model: &BoundModel<'_>,
    g: &mut Graph<'_>,
    dataset: &[Sample],
    x_test: &[f64],
    num_classes: usize,
) -> Result<Var> {
    if dataset.is_empty() {
        return Err(Error::Empty("FCP dataset"));
    }
    let mut augmented: Vec<Sample> = dataset.to_vec();
    augmented.push(Sample::new(x_test.to_vec(), 0));
    let last = dataset.len();
    let mut rows = Vec::with_capacity(num_classes);
    for y in 0..num_classes {
        augmented[last].y = y;
        let probs = model.forward_augmented(g, &augmented)?;
        let coords: Vec<(usize, usize)> = augmented.iter().enumerate().map(|(i, s)| (i, s.y)).collect();
        let picked = g.gather(probs, &coords)?;
        rows.push(g.neg_log_floor(picked, PROB_FLOOR)?);
    }
    g.concat_rows(&rows)
}

/// In-context FCP scores for one test input; adds `K·(n+1)` to `counter`.
pub fn fcp_scores_from_icl(
    weights: &ModelWeights,
    dataset: &[Sample],
    x_test: &[f64],
    counter: &EvalCounter,
) -> Result<ScoreMatrix> {
    let k = weights.config().num_classes;
    let mut g = Graph::new();
    let model = BoundModel::bind(weights, &mut g, false);
    let s = fcp_scores_graph(&model, &mut g, dataset, x_test, k)?;
    counter.add((k * (dataset.len() + 1)) as u64);
    ScoreMatrix::new(g.value(s).to_rows())
}

/// A learner whose fit does not depend on the order of its data.
pub trait TrainablePredictor {
    fn num_classes(&self) -> usize;
    /// Fits to `data` and returns class probabilities for `x`.
    fn fit_predict(&self, data: &[Sample], xs: &[&[f64]]) -> Vec<Vec<f64>>;
}

/// Class frequencies with add-one smoothing; ignores inputs.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyPredictor {
    pub num_classes: usize,
}

impl TrainablePredictor for FrequencyPredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn fit_predict(&self, data: &[Sample], xs: &[&[f64]]) -> Vec<Vec<f64>> {
        let k = self.num_classes;
        let mut counts = vec![0usize; k];
        for s in data {
            counts[s.y] += 1;
        }
        let denom = (data.len() + k) as f64;
        let p: Vec<f64> = counts.iter().map(|&c| (c as f64 + 1.0) / denom).collect();
        vec![p; xs.len()]
    }
}

/// Nearest-class-mean classifier: `p(y|x) ∝ (c_y + 1)·exp(−‖x − μ_y‖² / T)`,
/// with empty classes falling back to the pooled mean.
#[derive(Clone, Copy, Debug)]
pub struct CentroidPredictor {
    pub num_classes: usize,
    pub temperature: f64,
}

impl TrainablePredictor for CentroidPredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn fit_predict(&self, data: &[Sample], xs: &[&[f64]]) -> Vec<Vec<f64>> {
        let k = self.num_classes;
        let dim = data.first().map_or(0, |s| s.x.len());
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        let mut pooled = vec![0.0; dim];
        for s in data {
            counts[s.y] += 1;
            for d in 0..dim {
                sums[s.y][d] += s.x[d];
                pooled[d] += s.x[d];
            }
        }
        let n = data.len().max(1) as f64;
        let centroids: Vec<Vec<f64>> = (0..k)
            .map(|y| {
                if counts[y] == 0 {
                    pooled.iter().map(|v| v / n).collect()
                } else {
                    sums[y].iter().map(|v| v / counts[y] as f64).collect()
                }
            })
            .collect();
        xs.iter()
            .map(|x| {
                let logits: Vec<f64> = (0..k)
                    .map(|y| {
                        let d2: f64 = x.iter().zip(&centroids[y]).map(|(a, b)| (a - b) * (a - b)).sum();
                        (counts[y] as f64 + 1.0).ln() - d2 / self.temperature
                    })
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }
}

/// Scores obtained by actually refitting `predictor` on each augmented
/// dataset `D ∪ {(x_test, y)}`.
pub fn retrain_scores<P: TrainablePredictor>(predictor: &P, dataset: &[Sample], x_test: &[f64]) -> Result<ScoreMatrix> {
    let k = predictor.num_classes();
    let mut rows = Vec::with_capacity(k);
    for y in 0..k {
        let mut aug = dataset.to_vec();
        aug.push(Sample::new(x_test.to_vec(), y));
        let xs: Vec<&[f64]> = aug.iter().map(|s| s.x.as_slice()).collect();
        let probs = predictor.fit_predict(&aug, &xs);
        let row = aug
            .iter()
            .zip(&probs)
            .map(|(s, p)| ncs_logloss(p, s.y))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    ScoreMatrix::new(rows)
}

/// Classical full conformal prediction by refitting per candidate label.
///
/// Membership is decided by counting: `y` is admitted iff fewer than
/// `⌈(1−α)(n+1)⌉` augmented scores lie strictly below its test score. The
/// recorded threshold is found by pairwise counting as well, so no step
/// shares code with [`fcp_predict`].
pub fn fcp_retrain_oracle<P: TrainablePredictor>(
    predictor: &P,
    dataset: &[Sample],
    x_test: &[f64],
    alpha: f64,
) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let scores = retrain_scores(predictor, dataset, x_test)?;
    let n1 = scores.width();
    let rank = ((1.0 - alpha) * n1 as f64 - RANK_SLACK).ceil().clamp(1.0, n1 as f64) as usize;
    let mut members = Vec::new();
    let mut thresholds = Vec::new();
    let mut tests = Vec::new();
    for y in 0..scores.num_labels() {
        let row = scores.row(y);
        let s = scores.test_score(y);
        let below = row.iter().filter(|&&v| v < s).count();
        if below < rank {
            members.push(y);
        }
        let q = row
            .iter()
            .copied()
            .filter(|&c| row.iter().filter(|&&v| v <= c).count() >= rank)
            .fold(f64::INFINITY, f64::min);
        thresholds.push(q);
        tests.push(s);
    }
    Ok(PredictionSet {
        members,
        thresholds,
        test_scores: tests,
    })
}

#[cfg(test)]
mod tests;
