//! The conditional diffusion decoder: query edge channels, condition
//! assembly and the modulated UNet.

mod condition;
mod edges;
mod model;

pub use condition::{assemble_condition, cond_channels, prepare_episode, ConditionComposite, EpisodeInputs, EDGE_CHANNELS};
pub use edges::{canny, edge_channels, sobel, CANNY_HIGH, CANNY_LOW};
pub use model::{adain, Dqm, DqmOut, ModelConfig, Scm, UNet, UNetOut, NORM_EPS, STD_EPS};
