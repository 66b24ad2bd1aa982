//! A small causal language model whose residual stream is a learned
//! mixture over depth, with exact gradients, Adam training on synthetic
//! tasks, checkpoints and fake-quantized evaluation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod forward;
pub mod params;
pub mod tape;
pub mod tasks;
pub mod train;

pub use config::{ModelConfig, TrainConfig};
pub use eval::{eval_quantized, perplexity, QuantEval};
pub use forward::{batch_loss, forward, loss_and_grads, ForwardOptions};
pub use params::Params;
pub use tasks::Task;
pub use train::{train, train_from, TrainResult};

pub type ParamsF64 = Params<f64>;
pub type ParamsF32 = Params<f32>;
