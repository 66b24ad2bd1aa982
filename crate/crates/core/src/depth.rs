//! Depth routing over the residual stream.
//!
//! Target layer `ℓ` mixes `ℓ` source branches: branch 0 is the embedding
//! state `h1`, branch `i ≥ 1` is the output of block `i`. Three regimes:
//!
//! * `Vanilla`: softmax over the base logits.
//! * `AoS`: softmax-plus-one over the base logits, leaving a depth-null mass.
//! * `Oasis`: softmax-plus-one over logits shifted per token by the centered
//!   branch null statistic, `g - softplus(beta_raw) · Δψ`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::normalize::{normalize_all, NormalizerSpec};
use crate::numerics::softplus;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RouterMode {
    Vanilla,
    AoS,
    Oasis,
}

impl RouterMode {
    pub const ALL: [RouterMode; 3] = [RouterMode::Vanilla, RouterMode::AoS, RouterMode::Oasis];

    pub fn name(self) -> &'static str {
        match self {
            RouterMode::Vanilla => "vanilla",
            RouterMode::AoS => "aos",
            RouterMode::Oasis => "oasis",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Normalizer applied to the depth logits.
    pub fn depth_normalizer(self) -> NormalizerSpec {
        match self {
            RouterMode::Vanilla => NormalizerSpec::softmax(),
            RouterMode::AoS | RouterMode::Oasis => NormalizerSpec::softmax1(),
        }
    }
}

/// Where depth-null mass sends the state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum NullTarget {
    /// Null mass contributes nothing: the state shrinks toward zero.
    Zero,
    /// Null mass keeps the previous state (an identity update).
    #[default]
    PreviousState,
}

impl NullTarget {
    pub fn name(self) -> &'static str {
        match self {
            NullTarget::Zero => "zero",
            NullTarget::PreviousState => "previous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zero" => Some(NullTarget::Zero),
            "previous" => Some(NullTarget::PreviousState),
            _ => None,
        }
    }
}

/// How the embedding branch, which has no attention heads, enters the null
/// statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum EmbeddingNull {
    /// `ψ_0 = 0`, centered together with the other branches.
    #[default]
    ZeroEvidence,
    /// Branch 0 is left out of centering and its logit is never adjusted.
    Exclude,
}

impl EmbeddingNull {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingNull::ZeroEvidence => "zero_evidence",
            EmbeddingNull::Exclude => "exclude",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [EmbeddingNull::ZeroEvidence, EmbeddingNull::Exclude]
            .into_iter()
            .find(|e| e.name() == s)
    }
}

pub const DEFAULT_BETA_RAW: f64 = -5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRouterState<S: Scalar = f64> {
    pub mode: RouterMode,
    /// `base_logits[ℓ - 1]` holds `g_{· → ℓ}` with exactly `ℓ` entries.
    pub base_logits: Vec<Vec<S>>,
    /// One shared raw coupling, or one per target layer.
    pub beta_raw: Vec<S>,
    pub null_target: NullTarget,
    pub embedding_null: EmbeddingNull,
}

impl<S: Scalar> DepthRouterState<S> {
    /// Zero base logits for targets `1..=max_target` and a shared
    /// `beta_raw = -5`.
    pub fn new(mode: RouterMode, max_target: usize) -> Self {
        Self {
            mode,
            base_logits: (1..=max_target).map(|l| vec![S::zero(); l]).collect(),
            beta_raw: vec![S::of(DEFAULT_BETA_RAW)],
            null_target: NullTarget::default(),
            embedding_null: EmbeddingNull::default(),
        }
    }

    pub fn logits(&self, ell: usize) -> Result<&[S]> {
        if ell == 0 || ell > self.base_logits.len() {
            return Err(Error::Input(format!("no depth logits for target layer {ell}")));
        }
        let g = &self.base_logits[ell - 1];
        if g.len() != ell {
            return Err(Error::Dimension(format!(
                "target layer {ell} has {} logits",
                g.len()
            )));
        }
        Ok(g)
    }

    /// Raw coupling used by target layer `ell`.
    pub fn beta_raw_for(&self, ell: usize) -> S {
        if self.beta_raw.len() == 1 {
            self.beta_raw[0]
        } else {
            self.beta_raw[ell - 1]
        }
    }

    /// Coupling strength `softplus(beta_raw) ≥ 0`.
    pub fn beta(&self, ell: usize) -> S {
        softplus(self.beta_raw_for(ell))
    }
}

/// Branch null statistic and its centered form, both `ℓ × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchNullStats<S: Scalar = f64> {
    pub psi: Tensor<S>,
    pub delta_psi: Tensor<S>,
}

impl<S: Scalar> BranchNullStats<S> {
    pub fn from_psi(psi: Tensor<S>, policy: EmbeddingNull) -> Result<Self> {
        let delta_psi = center_with(&psi, policy)?;
        Ok(Self { psi, delta_psi })
    }

    /// Statistics for target layer `ℓ = head_null.len() + 1`.
    pub fn from_heads(head_null: &[Tensor<S>], tokens: usize, policy: EmbeddingNull) -> Result<Self> {
        Self::from_psi(branch_null_stat(head_null, tokens)?, policy)
    }
}

/// Depth mixing weights for one target layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthWeights<S: Scalar = f64> {
    /// `ℓ × C`: `C = T` for token-dependent weights, `C = 1` when the same
    /// weights apply to every token.
    pub alpha: Tensor<S>,
    /// `C` entries; zero under `Vanilla`.
    pub depth_null_mass: Tensor<S>,
}

impl<S: Scalar> DepthWeights<S> {
    pub fn branches(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn is_token_dependent(&self) -> bool {
        self.alpha.shape()[1] != 1
    }

    fn col(&self, t: usize) -> usize {
        if self.is_token_dependent() {
            t
        } else {
            0
        }
    }

    pub fn alpha_at(&self, branch: usize, t: usize) -> S {
        self.alpha.at(&[branch, self.col(t)])
    }

    pub fn null_at(&self, t: usize) -> S {
        self.depth_null_mass.at(&[self.col(t)])
    }

    /// Weights over branches for token `t`.
    pub fn column(&self, t: usize) -> Vec<S> {
        (0..self.branches()).map(|i| self.alpha_at(i, t)).collect()
    }
}

/// `ψ_{i,t}`: head-averaged null mass of branch `i`, with `ψ_{0,t} = 0` for
/// the embedding branch. `head_null[i - 1]` is the `H × T` null posterior of
/// branch `i`.
pub fn branch_null_stat<S: Scalar>(head_null: &[Tensor<S>], tokens: usize) -> Result<Tensor<S>> {
    let ell = head_null.len() + 1;
    let heads = head_null.first().map_or(1, |b| b.shape()[0]);
    let mut psi = Tensor::zeros(&[ell, tokens]);
    for (i, branch) in head_null.iter().enumerate() {
        if branch.shape() != [heads, tokens] {
            return Err(Error::Dimension(format!(
                "branch {} null posterior has shape {:?}, expected [{heads}, {tokens}]",
                i + 1,
                branch.shape()
            )));
        }
        let inv = S::one() / S::of_usize(heads);
        for t in 0..tokens {
            let mut acc = S::zero();
            for h in 0..heads {
                acc += branch.at(&[h, t]);
            }
            psi.set(&[i + 1, t], acc * inv);
        }
    }
    Ok(psi)
}

/// `Δψ_{i,t} = ψ_{i,t} - mean_r ψ_{r,t}`; every column sums to zero.
pub fn center<S: Scalar>(psi: &Tensor<S>) -> Result<Tensor<S>> {
    center_rows(psi, 0)
}

/// [`center`] honoring the embedding-branch policy.
pub fn center_with<S: Scalar>(psi: &Tensor<S>, policy: EmbeddingNull) -> Result<Tensor<S>> {
    match policy {
        EmbeddingNull::ZeroEvidence => center_rows(psi, 0),
        EmbeddingNull::Exclude => center_rows(psi, 1),
    }
}

fn center_rows<S: Scalar>(psi: &Tensor<S>, first: usize) -> Result<Tensor<S>> {
    if psi.shape().len() != 2 || psi.shape()[0] == 0 {
        return Err(Error::Input("centering needs at least one branch".into()));
    }
    let (ell, tokens) = (psi.shape()[0], psi.shape()[1]);
    let mut out = Tensor::zeros(&[ell, tokens]);
    if first >= ell {
        return Ok(out);
    }
    let count = S::of_usize(ell - first);
    for t in 0..tokens {
        // Offsets from a reference entry make a constant column center to
        // exactly zero.
        let reference = psi.at(&[first, t]);
        let offset: S = (first..ell).map(|i| psi.at(&[i, t]) - reference).sum::<S>() / count;
        for i in first..ell {
            out.set(&[i, t], psi.at(&[i, t]) - reference - offset);
        }
    }
    Ok(out)
}

/// `g_new = g_old - softplus(beta_raw) · Δψ`.
pub fn inject<S: Scalar>(g_old: &Tensor<S>, delta_psi: &Tensor<S>, beta_raw: S) -> Result<Tensor<S>> {
    let beta = softplus(beta_raw);
    g_old.zip_map(delta_psi, |g, d| g - beta * d)
}

/// Depth weights for target layer `ell`.
pub fn depth_weights<S: Scalar>(
    state: &DepthRouterState<S>,
    ell: usize,
    null_stats: Option<&BranchNullStats<S>>,
) -> Result<DepthWeights<S>> {
    let g = state.logits(ell)?;
    let spec = state.mode.depth_normalizer();
    match state.mode {
        RouterMode::Vanilla | RouterMode::AoS => {
            let w = normalize_all(&spec, g)?;
            Ok(DepthWeights {
                alpha: Tensor::new(vec![ell, 1], w.probs)?,
                depth_null_mass: Tensor::vector(vec![w.null_mass]),
            })
        }
        RouterMode::Oasis => {
            let stats = null_stats.ok_or_else(|| {
                Error::Config("OASIS routing needs branch null statistics".into())
            })?;
            let delta = &stats.delta_psi;
            if delta.shape().len() != 2 || delta.shape()[0] != ell {
                return Err(Error::Dimension(format!(
                    "null statistics shape {:?} for target layer {ell}",
                    delta.shape()
                )));
            }
            let tokens = delta.shape()[1];
            let mut broadcast = Tensor::zeros(&[ell, tokens]);
            for i in 0..ell {
                broadcast.row_mut(i).fill(g[i]);
            }
            let adjusted = inject(&broadcast, delta, state.beta_raw_for(ell))?;
            let mut alpha = Tensor::zeros(&[ell, tokens]);
            let mut null = Tensor::zeros(&[tokens]);
            let mut column = vec![S::zero(); ell];
            for t in 0..tokens {
                for (i, c) in column.iter_mut().enumerate() {
                    *c = adjusted.at(&[i, t]);
                }
                let w = normalize_all(&spec, &column)?;
                for (i, &a) in w.probs.iter().enumerate() {
                    alpha.set(&[i, t], a);
                }
                null.set(&[t], w.null_mass);
            }
            Ok(DepthWeights {
                alpha,
                depth_null_mass: null,
            })
        }
    }
}

/// `h_ℓ,t = Σ_i α_{i,t} u_{i,t} + α_∅,t · n_t` with `u_0 = h1`,
/// `u_i = branch_outputs[i - 1]` and `n` either zero or `h_prev`.
pub fn mix<S: Scalar>(
    weights: &DepthWeights<S>,
    h1: &Tensor<S>,
    branch_outputs: &[Tensor<S>],
    h_prev: &Tensor<S>,
    null_target: NullTarget,
) -> Result<Tensor<S>> {
    let ell = weights.branches();
    if branch_outputs.len() + 1 != ell {
        return Err(Error::Dimension(format!(
            "{} branch outputs for {ell} depth weights",
            branch_outputs.len()
        )));
    }
    let shape = h1.shape();
    if shape.len() != 2
        || branch_outputs.iter().any(|u| u.shape() != shape)
        || h_prev.shape() != shape
    {
        return Err(Error::Dimension("branch states must share one T × d shape".into()));
    }
    let (tokens, d) = (shape[0], shape[1]);
    if weights.is_token_dependent() && weights.alpha.shape()[1] != tokens {
        return Err(Error::Dimension("depth weights and states disagree on T".into()));
    }
    let mut out = Tensor::zeros(&[tokens, d]);
    for t in 0..tokens {
        let row = out.row_mut(t);
        for i in 0..ell {
            let a = weights.alpha_at(i, t);
            let u = if i == 0 { h1 } else { &branch_outputs[i - 1] };
            for (o, &x) in row.iter_mut().zip(u.row(t)) {
                *o += a * x;
            }
        }
        if null_target == NullTarget::PreviousState {
            let a = weights.null_at(t);
            for (o, &x) in row.iter_mut().zip(h_prev.row(t)) {
                *o += a * x;
            }
        }
    }
    Ok(out)
}

/// CSV rows `target_layer,source_branch,token,alpha,null_mass` (no header).
pub fn depth_trace_rows<S: Scalar>(target_layer: usize, weights: &DepthWeights<S>, tokens: usize) -> String {
    let mut s = String::new();
    let digits = S::ROUND_TRIP_DIGITS - 1;
    for i in 0..weights.branches() {
        for t in 0..tokens {
            writeln!(
                s,
                "{target_layer},{i},{t},{:.*e},{:.*e}",
                digits,
                weights.alpha_at(i, t),
                digits,
                weights.null_at(t)
            )
            .unwrap();
        }
    }
    s
}

pub const DEPTH_TRACE_HEADER: &str = "target_layer,source_branch,token,alpha,null_mass";
