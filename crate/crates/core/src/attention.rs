//! Multi-head causal self-attention with a pluggable normalizer.
//!
//! The null slot of softmax-plus-one carries no value vector: under that
//! normalizer each head's context is `Σ_j p_j v_j` with total real mass below
//! one, and the missing mass is reported per head and query as `null_mass`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::normalize::{normalize, NormalizerSpec};
use crate::numerics::sigmoid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub normalizer: NormalizerSpec,
    /// Per-head sigmoid output gate computed from the query-side input.
    pub gated: bool,
    /// Logit scale; `1/sqrt(d_model / n_heads)` unless overridden.
    pub scale: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, normalizer: NormalizerSpec, gated: bool) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        let cfg = Self {
            d_model,
            n_heads,
            normalizer,
            gated,
            scale: 1.0 / ((d_model / n_heads) as f64).sqrt(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("d_model not divisible by n_heads".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        self.normalizer.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Projection weights, all `d_model × d_model`, applied as `x · W`.
///
/// Head `h` uses columns `h·dh .. (h+1)·dh` of `wq`, `wk`, `wv` and `wg`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S: Scalar = f64> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub wg: Option<Tensor<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<S: Scalar = f64> {
    /// `T × d_model`, after the output projection.
    pub context: Tensor<S>,
    /// `H × T × T`; row `t` is zero beyond column `t`.
    pub weights: Tensor<S>,
    /// `H × T`; zero for normalizers without a null slot.
    pub null_mass: Tensor<S>,
    /// `H × T × dh`: per-head `Σ_j p_j v_j` before gating and projection.
    pub head_context: Tensor<S>,
}

fn check_square(name: &str, w: &Tensor<impl Scalar>, d: usize) -> Result<()> {
    if w.shape() != [d, d] {
        return Err(Error::Dimension(format!(
            "{name} has shape {:?}, expected [{d}, {d}]",
            w.shape()
        )));
    }
    Ok(())
}

/// Causal self-attention over a `T × d_model` input.
pub fn attend<S: Scalar>(
    cfg: &AttentionConfig,
    x: &Tensor<S>,
    params: &AttentionParams<S>,
) -> Result<AttentionOutput<S>> {
    cfg.validate()?;
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    if x.shape().len() != 2 || x.shape()[1] != d {
        return Err(Error::Dimension(format!(
            "input shape {:?}, expected [T, {d}]",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("non-finite attention input".into()));
    }
    for (name, w) in [("wq", &params.wq), ("wk", &params.wk), ("wv", &params.wv), ("wo", &params.wo)] {
        check_square(name, w, d)?;
    }
    let gate = match (cfg.gated, &params.wg) {
        (true, Some(wg)) => {
            check_square("wg", wg, d)?;
            Some(x.matmul(wg)?.map(sigmoid))
        }
        (true, None) => return Err(Error::Config("gated attention needs gate weights".into())),
        (false, _) => None,
    };
    let t_len = x.rows();
    let q = x.matmul(&params.wq)?;
    let k = x.matmul(&params.wk)?;
    let v = x.matmul(&params.wv)?;
    let scale = S::of(cfg.scale);

    let mut weights = Tensor::zeros(&[heads, t_len, t_len]);
    let mut null_mass = Tensor::zeros(&[heads, t_len]);
    let mut head_context = Tensor::zeros(&[heads, t_len, dh]);
    let mut concat = Tensor::zeros(&[t_len, d]);
    let mut logits = vec![S::zero(); t_len];
    let mut visible = vec![false; t_len];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for t in 0..t_len {
            for j in 0..t_len {
                visible[j] = j <= t;
                logits[j] = if j <= t {
                    let qr = &q.row(t)[cols.clone()];
                    let kr = &k.row(j)[cols.clone()];
                    scale * qr.iter().zip(kr).map(|(&a, &b)| a * b).sum::<S>()
                } else {
                    S::zero()
                };
            }
            let w = normalize(&cfg.normalizer, &logits, &visible)?;
            null_mass.set(&[h, t], w.null_mass);
            for (j, &p) in w.probs.iter().enumerate() {
                weights.set(&[h, t, j], p);
            }
            for c in 0..dh {
                let mut acc = S::zero();
                for j in 0..=t {
                    acc += w.probs[j] * v.row(j)[h * dh + c];
                }
                head_context.set(&[h, t, c], acc);
                let g = gate.as_ref().map_or(S::one(), |g| g.row(t)[h * dh + c]);
                concat.set(&[t, h * dh + c], acc * g);
            }
        }
    }
    let context = concat.matmul(&params.wo)?;
    Ok(AttentionOutput {
        context,
        weights,
        null_mass,
        head_context,
    })
}

/// Per-head, per-query null posterior (`H × T`), entries in `[0, 1]`.
pub fn head_null_posterior<S: Scalar>(out: &AttentionOutput<S>) -> Tensor<S> {
    out.null_mass.clone()
}

/// One `T × T` CSV matrix (row = query, column = key) for head `h`.
pub fn attention_csv<S: Scalar>(weights: &Tensor<S>, h: usize) -> String {
    let t_len = weights.shape()[1];
    let mut s = String::new();
    for t in 0..t_len {
        let row: Vec<String> = (0..t_len)
            .map(|j| format!("{:.*e}", S::ROUND_TRIP_DIGITS - 1, weights.at(&[h, t, j])))
            .collect();
        writeln!(s, "{}", row.join(",")).unwrap();
    }
    s
}

/// Binary PGM (P5) heatmap of head `h`: row = query, column = key,
/// byte = `round(255 · p)`.
pub fn attention_pgm<S: Scalar>(weights: &Tensor<S>, h: usize) -> Vec<u8> {
    let t_len = weights.shape()[1];
    let mut out = format!("P5\n{t_len} {t_len}\n255\n").into_bytes();
    for t in 0..t_len {
        for j in 0..t_len {
            let p = weights.at(&[h, t, j]).as_f64().clamp(0.0, 1.0);
            out.push((255.0 * p).round() as u8);
        }
    }
    out
}
