//! Fixtures shared by the criterion benchmarks in `benches/`.

use cpicl_core::model::{ModelConfig, ModelWeights};
use cpicl_core::tasks::{sample_episode, sample_task, stream_rng, Stream};
use cpicl_core::Episode;

/// Weights for `config` and one QPSK episode with `n` context pairs.
pub fn fixture(config: &ModelConfig, n: usize) -> (ModelWeights, Episode) {
    let w = ModelWeights::init(config, 7).expect("valid config");
    let mut rng = stream_rng(7, Stream::Test, 0, 0);
    let task = sample_task(&mut rng);
    (w, sample_episode(&task, n, &mut rng))
}

pub fn desk_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 64,
        ..ModelConfig::default()
    }
}
