//! Minimal NCHW autodiff and layers used by the decoder and the tiny CNN.

mod graph;
mod layers;
mod optim;
mod params;

pub use graph::{avg_pool, depth_to_space, space_to_depth, Activation, Gradients, Graph, Var};
pub use layers::{Conv2d, GroupNorm, Init, Linear};
pub use optim::{clip_grad_norm, Adam, AdamState};
pub use params::{hex, ParamEntry, ParamId, ParamSet};
