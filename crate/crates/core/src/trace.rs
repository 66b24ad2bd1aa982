//! Captured forward-pass state consumed by the metrics.

use crate::attention::AttentionOutput;
use crate::depth::{DepthWeights, RouterMode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything one forward pass over a single sequence produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceTrace<S: Scalar = f64> {
    pub router_mode: RouterMode,
    /// `h_1 ..= h_{L+1}`, each `T × d`.
    pub hidden: Vec<Tensor<S>>,
    /// Attention of block `ℓ` at index `ℓ - 1`.
    pub attention: Vec<AttentionOutput<S>>,
    /// Branch output `f_ℓ` at index `ℓ - 1`, each `T × d`.
    pub block_outputs: Vec<Tensor<S>>,
    /// Weights that formed `h_{ℓ+1}` at index `ℓ - 1`; entry `ℓ - 1` has
    /// `ℓ + 1` branches.
    pub depth: Vec<DepthWeights<S>>,
}

impl<S: Scalar> SequenceTrace<S> {
    pub fn n_layers(&self) -> usize {
        self.attention.len()
    }

    pub fn tokens(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.shape()[0])
    }

    /// Checks that the captured pieces agree with each other.
    pub fn validate(&self) -> Result<()> {
        let l = self.n_layers();
        if self.hidden.len() != l + 1 || self.block_outputs.len() != l || self.depth.len() != l {
            return Err(Error::Input(format!(
                "trace with {l} layers has {} hidden states, {} block outputs, {} depth entries",
                self.hidden.len(),
                self.block_outputs.len(),
                self.depth.len()
            )));
        }
        let shape = self.hidden[0].shape();
        if self.hidden.iter().chain(&self.block_outputs).any(|x| x.shape() != shape) {
            return Err(Error::Dimension("trace states disagree on shape".into()));
        }
        for (i, w) in self.depth.iter().enumerate() {
            if w.branches() != i + 2 {
                return Err(Error::Dimension(format!(
                    "depth weights for target {} have {} branches",
                    i + 2,
                    w.branches()
                )));
            }
        }
        Ok(())
    }

    /// Head-averaged attention row of block `layer` (1-based) at query `t`.
    pub fn mean_attention_row(&self, layer: usize, t: usize) -> Vec<S> {
        let w = &self.attention[layer - 1].weights;
        let (heads, tokens) = (w.shape()[0], w.shape()[1]);
        let inv = S::one() / S::of_usize(heads);
        (0..tokens)
            .map(|j| (0..heads).map(|h| w.at(&[h, t, j])).sum::<S>() * inv)
            .collect()
    }
}

/// Traces for a batch of sequences plus the loss history of the run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace<S: Scalar = f64> {
    pub sequences: Vec<SequenceTrace<S>>,
    pub loss_curve: Vec<f64>,
}

impl<S: Scalar> RunTrace<S> {
    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}
