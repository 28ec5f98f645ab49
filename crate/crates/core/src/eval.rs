//! Scheme evaluation over held-out task streams.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::{fcp_predict, fcp_scores_from_icl, ncs_logloss, scp_calibrate, scp_predict, EvalCounter, PredictionSet};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{forward_context_query, Checkpoint, TrainedModel};
use crate::stats::{coverage_floor, paired_t_less, PairedTest, Percentiles};
use crate::tasks::{stream_rng, Stream, TaskFamily};
use crate::train::Objective;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeId {
    #[serde(rename = "JL_SCP")]
    JlScp,
    #[serde(rename = "ICL_SCP")]
    IclScp,
    #[serde(rename = "E_ICL_SCP")]
    EIclScp,
    #[serde(rename = "ICL_FCP")]
    IclFcp,
    #[serde(rename = "E_ICL_FCP")]
    EIclFcp,
}

impl SchemeId {
    pub const ALL: [SchemeId; 5] = [Self::JlScp, Self::IclScp, Self::EIclScp, Self::IclFcp, Self::EIclFcp];

    pub fn name(self) -> &'static str {
        match self {
            Self::JlScp => "JL_SCP",
            Self::IclScp => "ICL_SCP",
            Self::EIclScp => "E_ICL_SCP",
            Self::IclFcp => "ICL_FCP",
            Self::EIclFcp => "E_ICL_FCP",
        }
    }

    pub fn required_objective(self) -> Objective {
        match self {
            Self::JlScp | Self::IclScp | Self::IclFcp => Objective::LogLoss,
            Self::EIclScp => Objective::CpAwareScp,
            Self::EIclFcp => Objective::CpAwareFcp,
        }
    }

    pub fn is_fcp(self) -> bool {
        matches!(self, Self::IclFcp | Self::EIclFcp)
    }

    /// Model family the scheme runs on: `"mlp"` or `"icl"`.
    pub fn model_kind(self) -> &'static str {
        if self == Self::JlScp {
            "mlp"
        } else {
            "icl"
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace(['-', '+'], "_");
        Self::ALL
            .into_iter()
            .find(|id| id.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scheme {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tasks: usize,
    pub realizations: usize,
    /// Test inputs per realization.
    pub test_inputs: usize,
    pub alpha: f64,
    pub n: usize,
    pub l: usize,
    pub m: usize,
    /// Process tasks sequentially; reports are identical either way.
    pub deterministic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: 128,
            realizations: 10,
            test_inputs: 5,
            alpha: 0.1,
            n: 19,
            l: 10,
            m: 9,
            deterministic: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        crate::cp::check_alpha(self.alpha)?;
        if self.tasks == 0 || self.realizations == 0 || self.test_inputs == 0 {
            return Err(Error::Empty("evaluation stream"));
        }
        if self.n == 0 || self.l == 0 || self.m == 0 || self.l + self.m != self.n {
            return Err(Error::InvalidArgument(format!(
                "need l + m = n with all positive, got {} + {} vs {}",
                self.l, self.m, self.n
            )));
        }
        Ok(())
    }

    /// The config with execution-mode switches cleared; two configs with
    /// equal keys draw the same stream.
    fn stream_key(&self) -> Self {
        Self {
            deterministic: false,
            ..self.clone()
        }
    }

    pub fn points(&self) -> usize {
        self.tasks * self.realizations * self.test_inputs
    }
}

/// Prediction evaluations the scheme is declared to spend on the stream:
/// `n + r` per realization for split schemes, `K·r·(n+1)` for full ones.
pub fn expected_prediction_evals(scheme: SchemeId, cfg: &EvalConfig, num_classes: usize) -> u64 {
    let per = if scheme.is_fcp() {
        num_classes * cfg.test_inputs * (cfg.n + 1)
    } else {
        cfg.n + cfg.test_inputs
    };
    (cfg.tasks * cfg.realizations * per) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub coverage: f64,
    pub mean_size: f64,
    pub points: usize,
    pub prediction_evals: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scheme: SchemeId,
    pub objective: Objective,
    pub seed: u64,
    pub config_hash: String,
    pub config: EvalConfig,
    pub num_classes: usize,
    pub points: usize,
    pub coverage: f64,
    pub mean_size: f64,
    pub coverage_percentiles: Percentiles,
    pub size_percentiles: Percentiles,
    pub prediction_evals: u64,
    pub expected_prediction_evals: u64,
    pub coverage_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub per_task: Vec<TaskRecord>,
}

impl EvalReport {
    pub fn write_summary<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.summary)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_per_task<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.per_task {
            let mut line = serde_json::to_value(rec)?;
            line["scheme"] = serde_json::Value::from(self.summary.scheme.name());
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.per_task.iter().map(|t| t.mean_size).collect()
    }
}

/// 64-bit FNV-1a, printed as 16 hex digits.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn check_scheme(scheme: SchemeId, ckpt: &Checkpoint, family: &TaskFamily) -> Result<usize> {
    let mismatch = |detail: String| Error::SchemeMismatch {
        scheme: scheme.name().into(),
        detail,
    };
    if ckpt.model.kind() != scheme.model_kind() {
        return Err(mismatch(format!(
            "needs a {} model, checkpoint holds {}",
            scheme.model_kind(),
            ckpt.model.kind()
        )));
    }
    if ckpt.objective != scheme.required_objective() {
        return Err(mismatch(format!(
            "needs a {:?}-trained checkpoint, got {:?}",
            scheme.required_objective(),
            ckpt.objective
        )));
    }
    let (k, din) = match &ckpt.model {
        TrainedModel::Icl(w) => (w.config().num_classes, w.config().input_dim),
        TrainedModel::Mlp(w) => (w.config().num_classes, w.config().input_dim),
    };
    if k != family.num_classes() || din != family.input_dim() {
        return Err(mismatch(format!(
            "model has {k} classes of {din}-D inputs, stream has {} of {}-D",
            family.num_classes(),
            family.input_dim()
        )));
    }
    Ok(k)
}

/// Held-out data of one realization: `n` labelled pairs and the test points.
pub fn test_realization(family: &TaskFamily, cfg: &EvalConfig, seed: u64, task: usize, realization: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let params = family.sample_task(&mut stream_rng(seed, Stream::Test, task as u64, 0))?;
    let mut rng = stream_rng(seed, Stream::Test, task as u64, realization as u64 + 1);
    let data = params.sample_many(cfg.n, &mut rng);
    let tests = params.sample_many(cfg.test_inputs, &mut rng);
    Ok((data, tests))
}

fn scp_sets(model: &TrainedModel, data: &[Sample], tests: &[Sample], cfg: &EvalConfig) -> Result<Vec<PredictionSet>> {
    let (ctx, cal) = data.split_at(cfg.l);
    let xs: Vec<Vec<f64>> = cal.iter().chain(tests).map(|s| s.x.clone()).collect();
    let probs = match model {
        TrainedModel::Icl(w) => forward_context_query(w, ctx, &xs)?,
        TrainedModel::Mlp(w) => w.predict(&xs)?,
    };
    let cal_scores = cal
        .iter()
        .zip(&probs)
        .map(|(s, p)| ncs_logloss(p, s.y))
        .collect::<Result<Vec<_>>>()?;
    let threshold = scp_calibrate(&cal_scores, cfg.alpha)?;
    probs[cal.len()..]
        .iter()
        .map(|p| {
            let scores = (0..p.len()).map(|y| ncs_logloss(p, y)).collect::<Result<Vec<_>>>()?;
            Ok(scp_predict(threshold, &scores))
        })
        .collect()
}

fn eval_task(scheme: SchemeId, model: &TrainedModel, family: &TaskFamily, cfg: &EvalConfig, seed: u64, task: usize) -> Result<TaskRecord> {
    let counter = EvalCounter::new();
    let (mut hits, mut size, mut points) = (0usize, 0usize, 0usize);
    for r in 0..cfg.realizations {
        let (data, tests) = test_realization(family, cfg, seed, task, r)?;
        let sets = if scheme.is_fcp() {
            let TrainedModel::Icl(w) = model else {
                return Err(Error::Contract("FCP schemes need an in-context model".into()));
            };
            tests
                .iter()
                .map(|t| fcp_predict(&fcp_scores_from_icl(w, &data, &t.x, &counter)?, cfg.alpha))
                .collect::<Result<Vec<_>>>()?
        } else {
            counter.add((cfg.n + cfg.test_inputs) as u64);
            scp_sets(model, &data, &tests, cfg)?
        };
        for (set, t) in sets.iter().zip(&tests) {
            hits += usize::from(set.contains(t.y));
            size += set.len();
            points += 1;
        }
    }
    Ok(TaskRecord {
        task,
        coverage: hits as f64 / points as f64,
        mean_size: size as f64 / points as f64,
        points,
        prediction_evals: counter.get(),
    })
}

/// Runs `scheme` over `cfg.tasks` test tasks drawn from `family`.
pub fn run_eval(scheme: SchemeId, checkpoint: &Checkpoint, family: &TaskFamily, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    let k = check_scheme(scheme, checkpoint, family)?;
    let model = &checkpoint.model;
    let run = |t: usize| eval_task(scheme, model, family, cfg, seed, t);
    let per_task: Vec<TaskRecord> = if cfg.deterministic {
        (0..cfg.tasks).map(run).collect::<Result<_>>()?
    } else {
        (0..cfg.tasks).into_par_iter().map(run).collect::<Result<_>>()?
    };

    let mut ckpt_bytes = Vec::new();
    checkpoint.write_to(&mut ckpt_bytes)?;
    let mut keyed = serde_json::to_vec(&(scheme, cfg.stream_key(), family, seed))?;
    keyed.extend_from_slice(&ckpt_bytes);

    let points: usize = per_task.iter().map(|t| t.points).sum();
    let covered: f64 = per_task.iter().map(|t| t.coverage * t.points as f64).sum();
    let sized: f64 = per_task.iter().map(|t| t.mean_size * t.points as f64).sum();
    let cov: Vec<f64> = per_task.iter().map(|t| t.coverage).collect();
    let sizes: Vec<f64> = per_task.iter().map(|t| t.mean_size).collect();
    let summary = EvalSummary {
        scheme,
        objective: checkpoint.objective,
        seed,
        config_hash: fnv1a_hex(&keyed),
        config: cfg.stream_key(),
        num_classes: k,
        points,
        coverage: covered / points as f64,
        mean_size: sized / points as f64,
        coverage_percentiles: Percentiles::of(&cov)?,
        size_percentiles: Percentiles::of(&sizes)?,
        prediction_evals: per_task.iter().map(|t| t.prediction_evals).sum(),
        expected_prediction_evals: expected_prediction_evals(scheme, cfg, k),
        coverage_floor: coverage_floor(cfg.alpha, points),
    };
    Ok(EvalReport { summary, per_task })
}

/// Joint-learning baseline: the pooled feed-forward model with per-realization
/// split calibration.
pub fn run_jl_scp(checkpoint: &Checkpoint, family: &TaskFamily, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    run_eval(SchemeId::JlScp, checkpoint, family, cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: SchemeId,
    pub coverage: f64,
    pub mean_size: f64,
    /// `100·(size(ICL_FCP) − size)/size(ICL_FCP)`; empty without an
    /// ICL_FCP report.
    pub reduction_vs_icl_fcp_pct: Option<f64>,
    pub prediction_evals: u64,
    pub coverage_floor: f64,
    pub below_floor: bool,
}

/// One row per report, in input order.
pub fn compare(reports: &[EvalSummary]) -> Vec<ComparisonRow> {
    let reference = reports.iter().find(|r| r.scheme == SchemeId::IclFcp).map(|r| r.mean_size);
    reports
        .iter()
        .map(|r| ComparisonRow {
            scheme: r.scheme,
            coverage: r.coverage,
            mean_size: r.mean_size,
            reduction_vs_icl_fcp_pct: reference.map(|s| if s == 0.0 { 0.0 } else { 100.0 * (s - r.mean_size) / s }),
            prediction_evals: r.prediction_evals,
            coverage_floor: r.coverage_floor,
            below_floor: r.coverage < r.coverage_floor,
        })
        .collect()
}

pub fn write_table_csv<W: Write>(w: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Paired one-sided test that `a` yields smaller per-task mean sets than `b`
/// on the same stream.
pub fn paired_size_test(a: &EvalReport, b: &EvalReport) -> Result<PairedTest> {
    let (sa, sb) = (&a.summary, &b.summary);
    if sa.seed != sb.seed || sa.config.stream_key() != sb.config.stream_key() {
        return Err(Error::InvalidArgument("reports come from different streams".into()));
    }
    paired_t_less(&a.sizes(), &b.sizes())
}

#[cfg(test)]
mod tests;
