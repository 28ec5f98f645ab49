use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Tensor, Var};

/// A parameter tensor with a stable name, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Anything that owns an ordered list of trainable tensors.
pub trait ParamStore {
    fn params(&self) -> &[NamedTensor];
    fn params_mut(&mut self) -> &mut [NamedTensor];

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.tensor.is_finite())
    }

    /// Registers every tensor on `g`, trainable or constant.
    fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Vec<Var> {
        self.params()
            .iter()
            .map(|p| {
                if trainable {
                    g.param(&p.tensor)
                } else {
                    g.constant_ref(&p.tensor)
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// U(−1/√fan_in, 1/√fan_in)
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

pub(crate) fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Uniform { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
            t
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
    }
}
