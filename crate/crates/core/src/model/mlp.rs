//! Feed-forward classifier used by the joint-learning baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{init_tensor, Init, NamedTensor, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of linear layers, output layer included.
    pub num_layers: usize,
    pub num_classes: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_dim: 64,
            num_layers: 4,
            num_classes: 4,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 || self.num_classes == 0 {
            return Err(Error::InvalidArgument("mlp dimensions must be positive".into()));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(std::iter::repeat_n(self.hidden_dim, self.num_layers - 1));
        w.push(self.num_classes);
        w
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let w = self.widths();
        w.windows(2)
            .enumerate()
            .flat_map(|(l, io)| {
                [
                    (format!("linear{l}.weight"), vec![io[0], io[1]], Init::Uniform { fan_in: io[0] }),
                    (format!("linear{l}.bias"), vec![1, io[1]], Init::Zeros),
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    config: MlpConfig,
    seed: u64,
    params: Vec<NamedTensor>,
}

impl ParamStore for MlpWeights {
    fn params(&self) -> &[NamedTensor] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }
}

impl MlpWeights {
    pub fn init(config: &MlpConfig, seed: u64) -> Result<Self> {
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

    pub fn from_params(config: MlpConfig, seed: u64, params: Vec<NamedTensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let ok = layout.len() == params.len()
            && layout
                .iter()
                .zip(&params)
                .all(|((n, s, _), p)| n == &p.name && s.as_slice() == p.tensor.shape());
        if !ok {
            return Err(Error::Checkpoint("mlp tensors do not match config".into()));
        }
        Ok(Self { config, seed, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Class probabilities for each input row.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let p = forward_mlp(&self.config, &mut g, &vars, xs)?;
        Ok(g.value(p).to_rows())
    }
}

/// Linear → GELU stack ending in a softmax over classes.
pub fn forward_mlp(config: &MlpConfig, g: &mut Graph<'_>, vars: &[Var], xs: &[Vec<f64>]) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::Empty("mlp inputs"));
    }
    let mut data = Vec::with_capacity(xs.len() * config.input_dim);
    for x in xs {
        if x.len() != config.input_dim {
            return Err(Error::InvalidArgument(format!(
                "input of width {} where {} expected",
                x.len(),
                config.input_dim
            )));
        }
        data.extend_from_slice(x);
    }
    let mut h = g.constant(Tensor::matrix(xs.len(), config.input_dim, data)?);
    for l in 0..config.num_layers {
        h = g.matmul(h, vars[2 * l])?;
        h = g.add_row(h, vars[2 * l + 1])?;
        if l + 1 < config.num_layers {
            h = g.gelu(h)?;
        }
    }
    g.softmax_rows(h)
}
