//! Episodic meta-training with Adam and a clamped cosine schedule.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::{fcp_scores_graph, PROB_FLOOR};
use crate::data::{Episode, Sample};
use crate::error::{Error, Result};
use crate::model::{forward_mlp, BoundModel, Checkpoint, MlpWeights, ModelWeights, NamedTensor, ParamStore, TrainedModel};
use crate::numerics::{Graph, Var};
use crate::soft_cp::{fcp_soft_loss, loss_scp_soft, SoftCpHyper};
use crate::tasks::{stream_rng, Stream, TaskFamily, TaskParams};

/// Meta-training objective a checkpoint was produced with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    LogLoss,
    CpAwareFcp,
    CpAwareScp,
}

impl Objective {
    pub fn is_cp_aware(self) -> bool {
        !matches!(self, Self::LogLoss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub realizations_per_task: usize,
    /// Episodes whose gradients are summed before each optimizer step.
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub cosine_period: usize,
    /// Set by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub objective: Objective,
    pub hyper: SoftCpHyper,
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub validation_tasks: usize,
    pub validation_realizations: usize,
    /// Evaluate episodes one after another instead of on the thread pool.
    /// Results are identical either way.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            tasks_per_epoch: 256,
            realizations_per_task: 50,
            batch_size: 32,
            lr_init: 2e-4,
            lr_min: 2e-5,
            cosine_period: 50,
            seed: 0,
            objective: Objective::LogLoss,
            hyper: SoftCpHyper::default(),
            n: 19,
            l: 10,
            m: 9,
            validation_tasks: 256,
            validation_realizations: 1,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.tasks_per_epoch == 0 || self.realizations_per_task == 0 || self.batch_size == 0 {
            return bad("tasks_per_epoch, realizations_per_task and batch_size must be positive".into());
        }
        if self.validation_tasks == 0 || self.validation_realizations == 0 {
            return bad("validation stream must be non-empty".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_init && self.lr_init.is_finite()) {
            return bad(format!("need 0 <= lr_min < lr_init, got {} / {}", self.lr_min, self.lr_init));
        }
        if self.cosine_period == 0 {
            return bad("cosine_period must be positive".into());
        }
        if self.n == 0 || self.l == 0 || self.m == 0 || self.l + self.m != self.n {
            return bad(format!("need l + m = n with all positive, got {} + {} vs {}", self.l, self.m, self.n));
        }
        self.hyper.validate()
    }
}

/// `lr_min + ½(lr_init − lr_min)(1 + cos(π·min(step, period)/period))`
pub fn cosine_lr(step: usize, config: &TrainConfig) -> f64 {
    let t = step.min(config.cosine_period) as f64 / config.cosine_period as f64;
    config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + (PI * t).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[NamedTensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [NamedTensor], grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract("adam_step: parameter/gradient count mismatch".into()));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powf(state.t as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(state.t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let w = p.tensor.data_mut();
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        if g.len() != w.len() {
            return Err(Error::Contract(format!("adam_step: gradient size mismatch for {}", p.name)));
        }
        for j in 0..w.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-episode objective.
    pub loss: f64,
    pub ineff: Option<f64>,
    pub class: Option<f64>,
    pub val_metric: f64,
}

pub fn write_log<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation metric.
    pub checkpoint: Checkpoint,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Terms {
    total: f64,
    ineff: f64,
    class: f64,
}

/// A task with its realized episodes.
fn episodes_for(family: &TaskFamily, seed: u64, stream: Stream, tasks: usize, reals: usize, n: usize) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(tasks * reals);
    for t in 0..tasks as u64 {
        let params: TaskParams = family.sample_task(&mut stream_rng(seed, stream, t, 0))?;
        for r in 0..reals as u64 {
            out.push(params.sample_episode(n, &mut stream_rng(seed, stream, t, r + 1)));
        }
    }
    Ok(out)
}

/// Training episodes: `tasks_per_epoch` fixed tasks, each with
/// `realizations_per_task` realizations, identical across epochs.
pub fn training_episodes(config: &TrainConfig, family: &TaskFamily) -> Result<Vec<Episode>> {
    episodes_for(family, config.seed, Stream::Train, config.tasks_per_epoch, config.realizations_per_task, config.n)
}

pub fn validation_episodes(config: &TrainConfig, family: &TaskFamily) -> Result<Vec<Episode>> {
    episodes_for(
        family,
        config.seed,
        Stream::Validation,
        config.validation_tasks,
        config.validation_realizations,
        config.n,
    )
}

/// Sum of `−log p` over the selected `(row, label)` entries of `probs`.
fn nll(g: &mut Graph<'_>, probs: Var, coords: &[(usize, usize)]) -> Result<Var> {
    let picked = g.gather(probs, coords)?;
    let s = g.neg_log_floor(picked, PROB_FLOOR)?;
    g.sum(s)
}

/// Builds one episode's loss on `g`, returning the scalar to differentiate.
fn episode_loss<'a>(
    model: &'a TrainedModel,
    g: &mut Graph<'a>,
    trainable: bool,
    episode: &Episode,
    config: &TrainConfig,
    objective: Objective,
) -> Result<(Vec<Var>, Var, Terms)> {
    match model {
        TrainedModel::Mlp(w) => {
            let vars = w.bind(g, trainable);
            let mut xs: Vec<Vec<f64>> = episode.context.iter().map(|s| s.x.clone()).collect();
            xs.push(episode.query.x.clone());
            let probs = forward_mlp(w.config(), g, &vars, &xs)?;
            let coords: Vec<(usize, usize)> = episode
                .context
                .iter()
                .chain(std::iter::once(&episode.query))
                .enumerate()
                .map(|(i, s)| (i, s.y))
                .collect();
            let total = nll(g, probs, &coords)?;
            let total = g.scale(total, 1.0 / coords.len() as f64)?;
            let v = g.value(total).item();
            Ok((vars, total, Terms { total: v, ..Terms::default() }))
        }
        TrainedModel::Icl(w) => {
            let bound = BoundModel::bind(w, g, trainable);
            let vars = bound.vars().to_vec();
            let q = &episode.query;
            let (total, terms) = match objective {
                Objective::LogLoss => {
                    let probs = bound.forward(g, &episode.context, &[q.x.as_slice()])?;
                    let total = nll(g, probs, &[(0, q.y)])?;
                    let v = g.value(total).item();
                    (total, Terms { total: v, ..Terms::default() })
                }
                Objective::CpAwareFcp => {
                    let k = w.config().num_classes;
                    let s = fcp_scores_graph(&bound, g, &episode.context, &q.x, k)?;
                    let loss = fcp_soft_loss(g, &[s], &[q.y], &config.hyper)?;
                    (loss.total, terms_of(g, loss.total, loss.ineff, loss.class))
                }
                Objective::CpAwareScp => {
                    let (ctx, cal) = episode.context.split_at(config.l);
                    let mut xs: Vec<&[f64]> = cal.iter().map(|s| s.x.as_slice()).collect();
                    xs.push(&q.x);
                    let probs = bound.forward(g, ctx, &xs)?;
                    let m = cal.len();
                    let coords: Vec<(usize, usize)> = cal.iter().enumerate().map(|(i, s)| (i, s.y)).collect();
                    let picked = g.gather(probs, &coords)?;
                    let cal_scores = g.neg_log_floor(picked, PROB_FLOOR)?;
                    let k = w.config().num_classes;
                    let row: Vec<(usize, usize)> = (0..k).map(|y| (m, y)).collect();
                    let test = g.gather(probs, &row)?;
                    let test = g.neg_log_floor(test, PROB_FLOOR)?;
                    let loss = loss_scp_soft(g, cal_scores, test, q.y, &config.hyper)?;
                    (loss.total, terms_of(g, loss.total, loss.ineff, loss.class))
                }
            };
            Ok((vars, total, terms))
        }
    }
}

fn terms_of(g: &Graph<'_>, total: Var, ineff: Var, class: Var) -> Terms {
    Terms {
        total: g.value(total).item(),
        ineff: g.value(ineff).item(),
        class: g.value(class).item(),
    }
}

fn episode_grads(model: &TrainedModel, episode: &Episode, config: &TrainConfig) -> Result<(Vec<Vec<f64>>, Terms)> {
    let mut g = Graph::new();
    let (vars, loss, terms) = episode_loss(model, &mut g, true, episode, config, config.objective)?;
    let mut grads = g.backward(loss)?;
    let sizes = model.store().params().iter().map(|p| p.tensor.len());
    let out = vars
        .iter()
        .zip(sizes)
        .map(|(&v, len)| grads.take(v).unwrap_or_else(|| vec![0.0; len]))
        .collect();
    Ok((out, terms))
}

fn episode_terms(model: &TrainedModel, episode: &Episode, config: &TrainConfig) -> Result<Terms> {
    let mut g = Graph::new();
    Ok(episode_loss(model, &mut g, false, episode, config, config.objective)?.2)
}

fn map_episodes<T: Send>(
    episodes: &[&Episode],
    deterministic: bool,
    f: impl Fn(&Episode) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if deterministic {
        episodes.iter().map(|e| f(e)).collect()
    } else {
        episodes.par_iter().map(|e| f(e)).collect()
    }
}

/// Validation metric: mean soft set size for CP-aware objectives, mean
/// query log-loss otherwise.
pub fn validation_metric(model: &TrainedModel, episodes: &[Episode], config: &TrainConfig) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Empty("validation episodes"));
    }
    let refs: Vec<&Episode> = episodes.iter().collect();
    let terms = map_episodes(&refs, config.deterministic, |e| episode_terms(model, e, config))?;
    let pick = |t: &Terms| if config.objective.is_cp_aware() { t.ineff } else { t.total };
    Ok(terms.iter().map(pick).sum::<f64>() / terms.len() as f64)
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn check_compatible(model: &TrainedModel, config: &TrainConfig, family: &TaskFamily) -> Result<()> {
    let (k, din) = match model {
        TrainedModel::Icl(w) => (w.config().num_classes, w.config().input_dim),
        TrainedModel::Mlp(w) => {
            if config.objective != Objective::LogLoss {
                return Err(Error::InvalidArgument("the feed-forward model trains with log_loss only".into()));
            }
            (w.config().num_classes, w.config().input_dim)
        }
    };
    if k != family.num_classes() || din != family.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "model expects {k} classes of {din}-D inputs, task family has {} of {}-D",
            family.num_classes(),
            family.input_dim()
        )));
    }
    Ok(())
}

/// Meta-trains `initial` and returns the best-validation weights.
///
/// Each epoch visits every training episode once in a seeded shuffled order,
/// stepping Adam after every `batch_size` episodes on the mean gradient. The
/// learning rate follows [`cosine_lr`] indexed by epoch.
pub fn train(initial: TrainedModel, config: &TrainConfig, family: &TaskFamily) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(&initial, config, family)?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: Checkpoint::new(config.objective, initial),
            best_epoch: 0,
            log: Vec::new(),
        });
    }
    let train_eps = training_episodes(config, family)?;
    let val_eps = validation_episodes(config, family)?;
    let mut model = initial;
    let mut adam = AdamState::new(model.store().params());
    let mut best: Option<(f64, usize, TrainedModel)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_eps.len()).collect();

    for epoch in 1..=config.epochs {
        let lr = cosine_lr(epoch - 1, config);
        order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, epoch as u64, 0));
        let mut sum = Terms::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Episode> = chunk.iter().map(|&i| &train_eps[i]).collect();
            let results = map_episodes(&batch, config.deterministic, |e| episode_grads(&model, e, config))
                .map_err(|e| diverged(epoch, e))?;
            let mut acc: Vec<Vec<f64>> = model.store().params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
            for (grads, terms) in &results {
                if !terms.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("episode loss {}", terms.total),
                    });
                }
                for (a, g) in acc.iter_mut().zip(grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                sum.total += terms.total;
                sum.ineff += terms.ineff;
                sum.class += terms.class;
            }
            let scale = 1.0 / batch.len() as f64;
            for a in &mut acc {
                a.iter_mut().for_each(|x| *x *= scale);
            }
            adam_step(model.store_mut().params_mut(), &acc, &mut adam, lr)?;
        }
        if !model.store().all_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite weights after update".into(),
            });
        }
        let count = train_eps.len() as f64;
        let val = validation_metric(&model, &val_eps, config).map_err(|e| diverged(epoch, e))?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation metric {val}"),
            });
        }
        let cp = config.objective.is_cp_aware();
        log.push(EpochLog {
            epoch,
            lr,
            loss: sum.total / count,
            ineff: cp.then_some(sum.ineff / count),
            class: cp.then_some(sum.class / count),
            val_metric: val,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, epoch, model.clone()));
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(config.objective, weights),
        best_epoch,
        log,
    })
}

/// Argmax accuracy of query predictions over `episodes`.
pub fn query_accuracy(model: &TrainedModel, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Empty("episodes"));
    }
    let mut hits = 0usize;
    for e in episodes {
        let p = predict_query(model, &e.context, &e.query.x)?;
        let arg = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
        hits += usize::from(arg == e.query.y);
    }
    Ok(hits as f64 / episodes.len() as f64)
}

/// Predictive distribution of one query; the feed-forward model ignores the
/// context.
pub fn predict_query(model: &TrainedModel, context: &[Sample], x: &[f64]) -> Result<Vec<f64>> {
    match model {
        TrainedModel::Icl(w) => Ok(crate::model::forward_context_query(w, context, &[x.to_vec()])?.remove(0)),
        TrainedModel::Mlp(w) => Ok(w.predict(&[x.to_vec()])?.remove(0)),
    }
}

/// Freshly initialized model of either family, for callers that only hold
/// configs.
pub fn init_icl(config: &crate::model::ModelConfig, seed: u64) -> Result<TrainedModel> {
    Ok(TrainedModel::Icl(ModelWeights::init(config, seed)?))
}

pub fn init_mlp(config: &crate::model::MlpConfig, seed: u64) -> Result<TrainedModel> {
    Ok(TrainedModel::Mlp(MlpWeights::init(config, seed)?))
}

#[cfg(test)]
mod tests;
