use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{init_tensor, Init, NamedTensor, ParamStore};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, MASK_BLOCKED};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape of the in-context Transformer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Default for ModelConfig {
    /// Six layers, width 16, two heads, 1024-wide feed-forward, 4 classes of
    /// 2-D (I/Q) inputs.
    fn default() -> Self {
        Self {
            num_layers: 6,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 1024,
            num_classes: 4,
            input_dim: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model.{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    fn per_layer(&self) -> usize {
        // ln1 (2) + per head q,k,v,o (4H) + out bias + ln2 (2) + ffn (4)
        2 + 4 * self.num_heads + 1 + 2 + 4
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (d, k, f, h, dh) = (
            self.model_dim,
            self.num_classes,
            self.ffn_dim,
            self.num_heads,
            self.head_dim(),
        );
        let ctx_in = self.input_dim + k;
        let mut out = vec![
            ("embed_context.weight".into(), vec![ctx_in, d], Init::Uniform { fan_in: ctx_in }),
            ("embed_context.bias".into(), vec![1, d], Init::Zeros),
            ("embed_query.weight".into(), vec![self.input_dim, d], Init::Uniform { fan_in: self.input_dim }),
            ("embed_query.bias".into(), vec![1, d], Init::Zeros),
        ];
        for l in 0..self.num_layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.norm1.gain"), vec![1, d], Init::Ones));
            out.push((format!("{p}.norm1.bias"), vec![1, d], Init::Zeros));
            for hd in 0..h {
                for proj in ["query", "key", "value"] {
                    out.push((format!("{p}.attn.head{hd}.{proj}"), vec![d, dh], Init::Uniform { fan_in: d }));
                }
                out.push((format!("{p}.attn.head{hd}.out"), vec![dh, d], Init::Uniform { fan_in: d }));
            }
            out.push((format!("{p}.attn.out_bias"), vec![1, d], Init::Zeros));
            out.push((format!("{p}.norm2.gain"), vec![1, d], Init::Ones));
            out.push((format!("{p}.norm2.bias"), vec![1, d], Init::Zeros));
            out.push((format!("{p}.ffn.in.weight"), vec![d, f], Init::Uniform { fan_in: d }));
            out.push((format!("{p}.ffn.in.bias"), vec![1, f], Init::Zeros));
            out.push((format!("{p}.ffn.out.weight"), vec![f, d], Init::Uniform { fan_in: f }));
            out.push((format!("{p}.ffn.out.bias"), vec![1, d], Init::Zeros));
        }
        out.push(("norm_final.gain".into(), vec![1, d], Init::Ones));
        out.push(("norm_final.bias".into(), vec![1, d], Init::Zeros));
        out.push(("head.weight".into(), vec![d, k], Init::Uniform { fan_in: d }));
        out.push(("head.bias".into(), vec![1, k], Init::Zeros));
        out
    }
}

/// Parameters of the context projector, query projector, Transformer stack
/// and class head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    seed: u64,
    params: Vec<NamedTensor>,
}

impl ParamStore for ModelWeights {
    fn params(&self) -> &[NamedTensor] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }
}

impl ModelWeights {
    /// Seeded initialization: uniform fan-in weights, zero biases, unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, init)| NamedTensor {
                name,
                tensor: init_tensor(&mut rng, &shape, init),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            seed,
            params,
        })
    }

    /// All-zero weights (layer-norm gains included).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, _)| NamedTensor {
                name,
                tensor: Tensor::zeros(&shape),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            seed: 0,
            params,
        })
    }

    /// Rebuilds weights from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, seed: u64, params: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), p) in layout.iter().zip(&params) {
            if name != &p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Self { config, seed, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }
}

/// Additive attention mask for `nc` context tokens followed by `nq` query
/// tokens.
///
/// Contexts attend to every context, never to queries; each query attends to
/// every context and to itself only.
pub fn build_mask(nc: usize, nq: usize) -> Result<Tensor> {
    if nc == 0 {
        return Err(Error::InvalidArgument(
            "attention mask needs at least one context token".into(),
        ));
    }
    let l = nc + nq;
    let mut m = Tensor::zeros(&[l, l]);
    let data = m.data_mut();
    for i in 0..l {
        for j in nc..l {
            if i < nc || i != j {
                data[i * l + j] = MASK_BLOCKED;
            }
        }
    }
    Ok(m)
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::LabelOutOfRange { label: y, classes: k });
    }
    Ok(())
}

fn check_input(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::InvalidArgument(format!(
            "input of width {} where {dim} expected",
            x.len()
        )));
    }
    Ok(())
}

/// Weights registered on a graph, addressed by layout position.
pub struct BoundModel<'w> {
    config: &'w ModelConfig,
    vars: Vec<Var>,
}

impl<'w> BoundModel<'w> {
    pub fn bind<'a>(weights: &'a ModelWeights, g: &mut Graph<'a>, trainable: bool) -> BoundModel<'a> {
        BoundModel {
            config: &weights.config,
            vars: weights.bind(g, trainable),
        }
    }

    /// Wraps variables already on a graph, in layout order.
    pub fn from_vars(config: &'w ModelConfig, vars: Vec<Var>) -> Result<Self> {
        config.validate()?;
        let expected = 4 + config.num_layers * config.per_layer() + 4;
        if vars.len() != expected {
            return Err(Error::Contract(format!("{} variables where {expected} expected", vars.len())));
        }
        Ok(Self { config, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn layer_base(&self, l: usize) -> usize {
        4 + l * self.config.per_layer()
    }

    fn final_base(&self) -> usize {
        self.layer_base(self.config.num_layers)
    }

    /// Context tokens `[x ∥ onehot(y)]·W + b`, one row per sample.
    pub fn embed_context(&self, g: &mut Graph<'_>, samples: &[Sample]) -> Result<Var> {
        let (din, k) = (self.config.input_dim, self.config.num_classes);
        let width = din + k;
        let mut data = vec![0.0; samples.len() * width];
        for (row, s) in data.chunks_mut(width).zip(samples) {
            check_input(&s.x, din)?;
            check_label(s.y, k)?;
            row[..din].copy_from_slice(&s.x);
            row[din + s.y] = 1.0;
        }
        let input = g.constant(Tensor::matrix(samples.len(), width, data)?);
        let h = g.matmul(input, self.vars[0])?;
        g.add_row(h, self.vars[1])
    }

    /// Query tokens `x·W + b`; label-free by construction.
    pub fn embed_query(&self, g: &mut Graph<'_>, xs: &[&[f64]]) -> Result<Var> {
        let din = self.config.input_dim;
        let mut data = Vec::with_capacity(xs.len() * din);
        for x in xs {
            check_input(x, din)?;
            data.extend_from_slice(x);
        }
        let input = g.constant(Tensor::matrix(xs.len(), din, data)?);
        let h = g.matmul(input, self.vars[2])?;
        g.add_row(h, self.vars[3])
    }

    /// Predictive distributions (`nq × K`) for each query given the context.
    pub fn forward(&self, g: &mut Graph<'_>, context: &[Sample], queries: &[&[f64]]) -> Result<Var> {
        if context.is_empty() {
            return Err(Error::Empty("context"));
        }
        if queries.is_empty() {
            return Err(Error::Empty("queries"));
        }
        let (nc, nq) = (context.len(), queries.len());
        let ctx = self.embed_context(g, context)?;
        let qry = self.embed_query(g, queries)?;
        let mut h = g.concat_rows(&[ctx, qry])?;
        let mask = g.constant(build_mask(nc, nq)?);
        let v = &self.vars;
        for l in 0..self.config.num_layers {
            let b = self.layer_base(l);
            let a = g.layer_norm(h, v[b], v[b + 1], LAYER_NORM_EPS)?;
            let mut att: Option<Var> = None;
            for hd in 0..self.config.num_heads {
                let hb = b + 2 + 4 * hd;
                let q = g.matmul(a, v[hb])?;
                let k = g.matmul(a, v[hb + 1])?;
                let val = g.matmul(a, v[hb + 2])?;
                let o = g.masked_attention(q, k, val, mask)?;
                let o = g.matmul(o, v[hb + 3])?;
                att = Some(match att {
                    Some(acc) => g.add(acc, o)?,
                    None => o,
                });
            }
            let rb = b + 2 + 4 * self.config.num_heads;
            let att = g.add_row(att.expect("num_heads > 0"), v[rb])?;
            h = g.add(h, att)?;
            let f = g.layer_norm(h, v[rb + 1], v[rb + 2], LAYER_NORM_EPS)?;
            let f = g.matmul(f, v[rb + 3])?;
            let f = g.add_row(f, v[rb + 4])?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, v[rb + 5])?;
            let f = g.add_row(f, v[rb + 6])?;
            h = g.add(h, f)?;
        }
        let fb = self.final_base();
        let out = g.slice_rows(h, nc, nc + nq)?;
        let out = g.layer_norm(out, v[fb], v[fb + 1], LAYER_NORM_EPS)?;
        let logits = g.matmul(out, v[fb + 2])?;
        let logits = g.add_row(logits, v[fb + 3])?;
        g.softmax_rows(logits)
    }

    /// Forward over an augmented dataset: every pair is a context token and
    /// every input is a query, giving `n+1` distributions.
    pub fn forward_augmented(&self, g: &mut Graph<'_>, dataset: &[Sample]) -> Result<Var> {
        if dataset.is_empty() {
            return Err(Error::Empty("augmented dataset"));
        }
        let xs: Vec<&[f64]> = dataset.iter().map(|s| s.x.as_slice()).collect();
        self.forward(g, dataset, &xs)
    }
}

fn rows_of(g: &Graph<'_>, v: Var) -> Vec<Vec<f64>> {
    g.value(v).to_rows()
}

/// Context token for a single pair.
pub fn embed_context(weights: &ModelWeights, x: &[f64], y: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let m = BoundModel::bind(weights, &mut g, false);
    let t = m.embed_context(&mut g, &[Sample::new(x.to_vec(), y)])?;
    Ok(g.value(t).data().to_vec())
}

/// Query token for a single input.
pub fn embed_query(weights: &ModelWeights, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let m = BoundModel::bind(weights, &mut g, false);
    let t = m.embed_query(&mut g, &[x])?;
    Ok(g.value(t).data().to_vec())
}

/// `p̂^y(·|x_i)` for every `i` in an augmented dataset `D ∪ {(x, y)}`.
pub fn forward_augmented(weights: &ModelWeights, dataset: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let m = BoundModel::bind(weights, &mut g, false);
    let p = m.forward_augmented(&mut g, dataset)?;
    Ok(rows_of(&g, p))
}

/// Plain in-context prediction for each query given the context pairs.
pub fn forward_context_query(
    weights: &ModelWeights,
    context: &[Sample],
    queries: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let m = BoundModel::bind(weights, &mut g, false);
    let xs: Vec<&[f64]> = queries.iter().map(Vec::as_slice).collect();
    let p = m.forward(&mut g, context, &xs)?;
    Ok(rows_of(&g, p))
}
