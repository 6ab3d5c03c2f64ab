//! Differentiable MLP substrate shared by the policy and value networks.

mod mlp;
mod optim;

pub use mlp::{Activation, Gradient, LayerShape, Mlp, MlpSpec, ParamVector, Tape};
pub use optim::{clip_grad_norm, AdamState};
