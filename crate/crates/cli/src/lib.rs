//! Config handling and subcommand bodies for the `cpicl` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cpicl_core::eval::{compare, run_eval, write_table_csv, ComparisonRow, EvalConfig, EvalReport, EvalSummary, SchemeId};
use cpicl_core::model::{Checkpoint, MlpConfig, ModelConfig};
use cpicl_core::oracle::{self, SuiteResult};
use cpicl_core::tasks::TaskFamily;
use cpicl_core::train::{self, init_icl, init_mlp, write_log, TrainConfig, TrainOutcome};

pub const SUMMARY_FILE: &str = "summary.json";
pub const PER_TASK_FILE: &str = "per_task.ndjson";
pub const TABLE_FILE: &str = "table.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.ndjson";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub icl: ModelConfig,
    /// Feed-forward net of the joint-learning baseline.
    pub mlp: MlpConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Weight initialization.
    pub init: u64,
    /// Training and validation task streams.
    pub train: u64,
    /// Test task stream.
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            train: 1,
            eval: 99,
        }
    }
}

/// Whole experiment description, read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskFamily,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Full-size model and training schedule.
    Full,
    /// Small model and schedule that train in about a minute per objective.
    Desk,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Full => Self::default(),
            Preset::Desk => Self {
                model: ModelSection {
                    icl: ModelConfig {
                        num_layers: 2,
                        model_dim: 16,
                        num_heads: 2,
                        ffn_dim: 64,
                        ..ModelConfig::default()
                    },
                    mlp: MlpConfig::default(),
                },
                train: TrainConfig {
                    epochs: 20,
                    tasks_per_epoch: 1024,
                    realizations_per_task: 1,
                    batch_size: 32,
                    lr_init: 3e-3,
                    lr_min: 3e-4,
                    cosine_period: 20,
                    validation_tasks: 128,
                    ..TrainConfig::default()
                },
                ..Self::default()
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.icl.validate()?;
        self.model.mlp.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seeds = Seeds {
                init: s,
                train: s,
                eval: s,
            };
        }
        if let Some(a) = o.alpha {
            self.eval.alpha = a;
            self.train.hyper.alpha = a;
        }
        if o.deterministic {
            self.train.deterministic = true;
            self.eval.deterministic = true;
        }
        self
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub deterministic: bool,
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> cpicl_core::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    scheme: SchemeId,
    objective: train::Objective,
    model: &'static str,
    best_epoch: usize,
    best_val_metric: Option<f64>,
    seeds: Seeds,
    train: &'a TrainConfig,
}

/// Trains the model `scheme` runs on, with the objective it requires.
pub fn train_scheme(cfg: &ExperimentConfig, scheme: SchemeId) -> Result<TrainOutcome> {
    let mut tc = cfg.train.clone();
    tc.objective = scheme.required_objective();
    tc.seed = cfg.seeds.train;
    let initial = if scheme == SchemeId::JlScp {
        init_mlp(&cfg.model.mlp, cfg.seeds.init)?
    } else {
        init_icl(&cfg.model.icl, cfg.seeds.init)?
    };
    Ok(train::train(initial, &tc, &cfg.task)?)
}

/// `train`: writes the checkpoint, the per-epoch log and a summary.
pub fn cmd_train(cfg: &ExperimentConfig, scheme: SchemeId, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let outcome = train_scheme(cfg, scheme)?;
    outcome.checkpoint.save(out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(TRAIN_LOG_FILE), |w| write_log(w, &outcome.log))?;
    let summary = TrainSummary {
        scheme,
        objective: outcome.checkpoint.objective,
        model: outcome.checkpoint.model.kind(),
        best_epoch: outcome.best_epoch,
        best_val_metric: outcome.best_epoch.checked_sub(1).map(|i| outcome.log[i].val_metric),
        seeds: cfg.seeds,
        train: &cfg.train,
    };
    write_file(&out.join(SUMMARY_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        Ok(w.write_all(b"\n")?)
    })?;
    Ok(outcome)
}

pub fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join(SUMMARY_FILE), |w| report.write_summary(w))?;
    write_file(&out.join(PER_TASK_FILE), |w| report.write_per_task(w))?;
    write_file(&out.join(TABLE_FILE), |w| write_table_csv(w, &compare(std::slice::from_ref(&report.summary))))?;
    Ok(())
}

/// `eval`: scores `scheme` with the given checkpoint and writes the report.
pub fn cmd_eval(cfg: &ExperimentConfig, scheme: SchemeId, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let report = run_eval(scheme, &ckpt, &cfg.task, &cfg.eval, cfg.seeds.eval)?;
    write_report(&report, out)?;
    Ok(report)
}

/// Reads a `summary.json`, or the one inside a run directory.
pub fn read_summary(path: &Path) -> Result<EvalSummary> {
    let file: PathBuf = if path.is_dir() { path.join(SUMMARY_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not an evaluation summary", file.display()))
}

/// `compare`: one table row per input summary.
pub fn cmd_compare(inputs: &[PathBuf], out: &Path) -> Result<Vec<ComparisonRow>> {
    if inputs.is_empty() {
        bail!("compare needs at least one report");
    }
    let summaries = inputs.iter().map(|p| read_summary(p)).collect::<Result<Vec<_>>>()?;
    let rows = compare(&summaries);
    create_dir(out)?;
    write_file(&out.join(TABLE_FILE), |w| write_table_csv(w, &rows))?;
    Ok(rows)
}

/// `oracle-check`: all suites; the caller turns a failure into an exit code.
pub fn cmd_oracle_check(seed: u64, out: Option<&Path>) -> Result<Vec<SuiteResult>> {
    let suites = oracle::run_all(seed)?;
    if let Some(out) = out {
        create_dir(out)?;
        write_file(&out.join(SUMMARY_FILE), |w| {
            serde_json::to_writer_pretty(&mut *w, &suites)?;
            Ok(w.write_all(b"\n")?)
        })?;
    }
    Ok(suites)
}

pub fn format_suite(s: &SuiteResult) -> String {
    format!(
        "{} {:<24} compared={} excluded={} failures={} metric={:.3e} bound={:.3e}",
        if s.passed { "PASS" } else { "FAIL" },
        s.name,
        s.compared,
        s.excluded,
        s.failures,
        s.metric,
        s.bound
    )
}

pub fn format_row(r: &ComparisonRow) -> String {
    let red = r
        .reduction_vs_icl_fcp_pct
        .map_or_else(|| "-".to_string(), |v| format!("{v:+.2}%"));
    format!(
        "{:<10} coverage={:.4} size={:.4} reduction={} evals={}{}",
        r.scheme.name(),
        r.coverage,
        r.mean_size,
        red,
        r.prediction_evals,
        if r.below_floor { " BELOW-FLOOR" } else { "" }
    )
}
