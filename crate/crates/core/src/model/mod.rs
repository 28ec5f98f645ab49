//! Permutation-invariant in-context Transformer, the feed-forward baseline,
//! and their checkpoint format.

mod checkpoint;
mod mlp;
mod params;
mod transformer;

pub use checkpoint::{Checkpoint, TrainedModel, FORMAT_VERSION};
pub use mlp::{forward_mlp, MlpConfig, MlpWeights};
pub use params::{NamedTensor, ParamStore};
pub use transformer::{
    build_mask, embed_context, embed_query, forward_augmented, forward_context_query, BoundModel,
    ModelConfig, ModelWeights, LAYER_NORM_EPS,
};

#[cfg(test)]
mod tests;
