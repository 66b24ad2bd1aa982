//! Numerics, normalizers, attention, depth routing, diagnostics and fake
//! quantization for null-slot attention experiments.
//!
//! Everything is generic over [`Scalar`] (`f64` or `f32`); the default type
//! parameter is `f64`.

pub mod attention;
pub mod depth;
pub mod error;
pub mod metrics;
pub mod normalize;
pub mod numerics;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trace;

pub use attention::{attend, AttentionConfig, AttentionOutput, AttentionParams};
pub use depth::{
    depth_weights, mix, BranchNullStats, DepthRouterState, DepthWeights, EmbeddingNull, NullTarget, RouterMode,
};
pub use error::{Error, Result};
pub use normalize::{normalize, NormalizedWeights, NormalizerKind, NormalizerSpec};
pub use quant::{fake_quant, Granularity, QuantSpec};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trace::{RunTrace, SequenceTrace};

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type AttentionOutputF64 = AttentionOutput<f64>;
pub type AttentionOutputF32 = AttentionOutput<f32>;
pub type DepthWeightsF64 = DepthWeights<f64>;
pub type DepthWeightsF32 = DepthWeights<f32>;
pub type RunTraceF64 = RunTrace<f64>;
pub type RunTraceF32 = RunTrace<f32>;
