//! Core library for conditional volumetric diffusion synthesis: a small
//! reverse-mode tensor engine, the noise schedule, the Swin-attention V-net
//! denoiser, diffusion losses and sampling, volume I/O and patch pipelines,
//! and evaluation metrics.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod schedule;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod volume;

pub use model::{SwinConfig, SwinVnet};
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
pub use volume::{IntensitySpace, Volume};
