//! Dense multilayer-perceptron substrate: batched forward/backward passes,
//! Bernoulli dropout particles and an adaptive-moment optimizer.

mod adam;
mod dropout;
mod mlp;

pub use adam::{AdamConfig, AdamState};
pub use dropout::{sample_dropout_masks, DropoutMask};
pub use mlp::{silu, silu_grad, softplus, Dense, ForwardCache, MlpWeights, VarianceBounds};
