//! Perplexity and quantized evaluation.

use oasis_core::quant::fake_quant;
use oasis_core::{QuantSpec, Result, Scalar};

use crate::config::ModelConfig;
use crate::forward::{batch_loss, ForwardOptions};
use crate::params::Params;

/// `exp` of the mean next-token cross-entropy.
pub fn perplexity<S: Scalar>(cfg: &ModelConfig, params: &Params<S>, eval: &[Vec<usize>]) -> Result<f64> {
    Ok(batch_loss(cfg, params, eval, ForwardOptions::default())?.as_f64().exp())
}

/// Copy of `params` with every linear weight fake-quantized.
pub fn quantize_weights<S: Scalar>(params: &Params<S>, spec: &QuantSpec) -> Result<Params<S>> {
    spec.validate()?;
    let mut out = params.clone();
    for i in params.layout.linear_weights() {
        out.tensors[i] = fake_quant(&params.tensors[i], spec.weight_bits, spec.weight_granularity)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantEval {
    pub ppl_fp: f64,
    pub ppl_quant: f64,
    /// `ppl_quant / ppl_fp`.
    pub ratio: f64,
}

pub fn eval_quantized<S: Scalar>(
    cfg: &ModelConfig,
    params: &Params<S>,
    spec: &QuantSpec,
    eval: &[Vec<usize>],
) -> Result<QuantEval> {
    let ppl_fp = perplexity(cfg, params, eval)?;
    let q = quantize_weights(params, spec)?;
    let opts = ForwardOptions {
        act_bits: Some(spec.act_bits),
    };
    let ppl_quant = batch_loss(cfg, &q, eval, opts)?.as_f64().exp();
    Ok(QuantEval {
        ppl_fp,
        ppl_quant,
        ratio: ppl_quant / ppl_fp,
    })
}
