//! Attention normalizers: softmax, softmax-plus-one (explicit null slot),
//! clipped softmax, sparsemax and 1.5-entmax.
//!
//! Every normalizer takes a logit row `z` and a visibility mask. Hidden slots
//! behave as logit `-inf`: they are excluded from all sums and receive zero
//! probability. The null slot of [`NormalizerKind::Softmax1`] is never masked.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormalizerKind {
    Softmax,
    Softmax1,
    ClippedSoftmax,
    Sparsemax,
    Entmax15,
}

impl NormalizerKind {
    pub const ALL: [NormalizerKind; 5] = [
        NormalizerKind::Softmax,
        NormalizerKind::Softmax1,
        NormalizerKind::ClippedSoftmax,
        NormalizerKind::Sparsemax,
        NormalizerKind::Entmax15,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormalizerKind::Softmax => "softmax",
            NormalizerKind::Softmax1 => "softmax1",
            NormalizerKind::ClippedSoftmax => "clipped",
            NormalizerKind::Sparsemax => "sparsemax",
            NormalizerKind::Entmax15 => "entmax15",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Normalizer choice plus the clipped-softmax stretch parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizerSpec {
    pub kind: NormalizerKind,
    /// Lower stretch of the clipped softmax.
    pub gamma: f64,
    /// Upper stretch of the clipped softmax.
    pub zeta: f64,
}

pub const DEFAULT_CLIP_GAMMA: f64 = -0.03;
pub const DEFAULT_CLIP_ZETA: f64 = 1.0;

impl NormalizerSpec {
    pub fn new(kind: NormalizerKind) -> Self {
        Self {
            kind,
            gamma: DEFAULT_CLIP_GAMMA,
            zeta: DEFAULT_CLIP_ZETA,
        }
    }

    pub fn softmax() -> Self {
        Self::new(NormalizerKind::Softmax)
    }

    pub fn softmax1() -> Self {
        Self::new(NormalizerKind::Softmax1)
    }

    pub fn sparsemax() -> Self {
        Self::new(NormalizerKind::Sparsemax)
    }

    pub fn entmax15() -> Self {
        Self::new(NormalizerKind::Entmax15)
    }

    pub fn clipped(gamma: f64, zeta: f64) -> Result<Self> {
        let spec = Self {
            kind: NormalizerKind::ClippedSoftmax,
            gamma,
            zeta,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == NormalizerKind::ClippedSoftmax
            && !(self.gamma < self.zeta && self.gamma.is_finite() && self.zeta.is_finite())
        {
            return Err(Error::Parameter(format!(
                "clipped softmax needs finite gamma < zeta, got gamma={} zeta={}",
                self.gamma, self.zeta
            )));
        }
        Ok(())
    }

    /// Whether this normalizer routes mass to an explicit null slot.
    pub fn has_null(&self) -> bool {
        self.kind == NormalizerKind::Softmax1
    }
}

impl Default for NormalizerSpec {
    fn default() -> Self {
        Self::softmax()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedWeights<S: Scalar = f64> {
    /// Probabilities over the real slots, zero on hidden slots.
    pub probs: Vec<S>,
    /// Mass routed to the null slot; zero for normalizers without one.
    pub null_mass: S,
}

impl<S: Scalar> NormalizedWeights<S> {
    pub fn real_mass(&self) -> S {
        self.probs.iter().copied().sum()
    }
}

fn check_lengths(z_len: usize, visible: &[bool]) -> Result<()> {
    if z_len != visible.len() {
        return Err(Error::Dimension(format!(
            "logits have {} slots, mask has {}",
            z_len,
            visible.len()
        )));
    }
    Ok(())
}

fn visible_max<S: Scalar>(z: &[S], visible: &[bool]) -> Option<S> {
    z.iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .fold(None, |m, x| match m {
            Some(m) if m >= x => Some(m),
            _ => Some(x),
        })
}

/// Softmax over the visible slots; `None` when every slot is hidden.
fn softmax_visible<S: Scalar>(z: &[S], visible: &[bool]) -> Option<Vec<S>> {
    let m = visible_max(z, visible)?;
    let mut e: Vec<S> = z
        .iter()
        .zip(visible)
        .map(|(&x, &v)| if v { (x - m).exp() } else { S::zero() })
        .collect();
    let total: S = e.iter().copied().sum();
    for x in &mut e {
        *x /= total;
    }
    Some(e)
}

fn sort_desc<S: Scalar>(xs: &mut [S]) {
    xs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
}

/// Sparsemax threshold `tau` for the visible slots (sort-based, exact).
fn sparsemax_tau<S: Scalar>(z: &[S], visible: &[bool]) -> Option<S> {
    let mut zs: Vec<S> = z
        .iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| x)
        .collect();
    if zs.is_empty() {
        return None;
    }
    sort_desc(&mut zs);
    let mut cumsum = S::zero();
    let mut tau = zs[0] - S::one();
    for (k, &x) in zs.iter().enumerate() {
        cumsum += x;
        let kk = S::of_usize(k + 1);
        if S::one() + kk * x > cumsum {
            tau = (cumsum - S::one()) / kk;
        } else {
            break;
        }
    }
    Some(tau)
}

/// 1.5-entmax threshold for the half-scaled, max-shifted visible logits.
///
/// Returns `(shift, tau)` such that `p_j = max((z_j - shift)/2 - tau, 0)^2`.
fn entmax15_tau<S: Scalar>(z: &[S], visible: &[bool]) -> Option<(S, S)> {
    let m = visible_max(z, visible)?;
    let half = S::of(0.5);
    let mut xs: Vec<S> = z
        .iter()
        .zip(visible)
        .filter(|(_, &v)| v)
        .map(|(&x, _)| (x - m) * half)
        .collect();
    sort_desc(&mut xs);
    let mut sum = S::zero();
    let mut sum_sq = S::zero();
    let mut tau_star = xs[0] - S::one();
    for (k, &x) in xs.iter().enumerate() {
        sum += x;
        sum_sq += x * x;
        let rho = S::of_usize(k + 1);
        let mean = sum / rho;
        let mean_sq = sum_sq / rho;
        let ss = rho * (mean_sq - mean * mean);
        let delta = ((S::one() - ss) / rho).max(S::zero());
        let tau = mean - delta.sqrt();
        if tau <= x {
            tau_star = tau;
        } else {
            break;
        }
    }
    Some((m, tau_star))
}

/// Normalizes a logit row. `visible[j] == false` hides slot `j`.
pub fn normalize<S: Scalar>(
    spec: &NormalizerSpec,
    z: &[S],
    visible: &[bool],
) -> Result<NormalizedWeights<S>> {
    check_lengths(z.len(), visible)?;
    spec.validate()?;
    let n = z.len();
    match spec.kind {
        NormalizerKind::Softmax => {
            let probs = softmax_visible(z, visible).ok_or(Error::FullyMasked)?;
            Ok(NormalizedWeights {
                probs,
                null_mass: S::zero(),
            })
        }
        NormalizerKind::Softmax1 => {
            // The null logit 0 joins the max.
            let m = visible_max(z, visible)
                .map_or(S::zero(), |m| m.max(S::zero()));
            let null = (-m).exp();
            let mut probs: Vec<S> = z
                .iter()
                .zip(visible)
                .map(|(&x, &v)| if v { (x - m).exp() } else { S::zero() })
                .collect();
            let denom = null + probs.iter().copied().sum::<S>();
            for p in &mut probs {
                *p /= denom;
            }
            Ok(NormalizedWeights {
                probs,
                null_mass: null / denom,
            })
        }
        NormalizerKind::ClippedSoftmax => {
            let s = softmax_visible(z, visible).ok_or(Error::FullyMasked)?;
            let (gamma, zeta) = (S::of(spec.gamma), S::of(spec.zeta));
            let probs = s
                .iter()
                .zip(visible)
                .map(|(&p, &v)| {
                    if v {
                        ((zeta - gamma) * p + gamma).max(S::zero()).min(S::one())
                    } else {
                        S::zero()
                    }
                })
                .collect();
            Ok(NormalizedWeights {
                probs,
                null_mass: S::zero(),
            })
        }
        NormalizerKind::Sparsemax => {
            let tau = sparsemax_tau(z, visible).ok_or(Error::FullyMasked)?;
            let probs = (0..n)
                .map(|j| {
                    if visible[j] {
                        (z[j] - tau).max(S::zero())
                    } else {
                        S::zero()
                    }
                })
                .collect();
            Ok(NormalizedWeights {
                probs,
                null_mass: S::zero(),
            })
        }
        NormalizerKind::Entmax15 => {
            let (shift, tau) = entmax15_tau(z, visible).ok_or(Error::FullyMasked)?;
            let half = S::of(0.5);
            let probs = (0..n)
                .map(|j| {
                    if visible[j] {
                        let r = ((z[j] - shift) * half - tau).max(S::zero());
                        r * r
                    } else {
                        S::zero()
                    }
                })
                .collect();
            Ok(NormalizedWeights {
                probs,
                null_mass: S::zero(),
            })
        }
    }
}

/// [`normalize`] with every slot visible.
pub fn normalize_all<S: Scalar>(spec: &NormalizerSpec, z: &[S]) -> Result<NormalizedWeights<S>> {
    normalize(spec, z, &vec![true; z.len()])
}

/// Analytic Jacobian `d probs / d z` as an `n × n` tensor (row = output).
///
/// Hidden slots have zero rows and columns. For sparsemax and 1.5-entmax the
/// closed forms over the support set are used; at support boundaries these
/// are one-sided.
pub fn jacobian<S: Scalar>(spec: &NormalizerSpec, z: &[S], visible: &[bool]) -> Result<Tensor<S>> {
    let n = z.len();
    let w = normalize(spec, z, visible)?;
    let mut jac = Tensor::zeros(&[n, n]);
    match spec.kind {
        NormalizerKind::Softmax | NormalizerKind::Softmax1 => {
            let p = &w.probs;
            for i in 0..n {
                for j in 0..n {
                    let d = if i == j { p[i] } else { S::zero() };
                    jac.set(&[i, j], d - p[i] * p[j]);
                }
            }
        }
        NormalizerKind::ClippedSoftmax => {
            let s = softmax_visible(z, visible).ok_or(Error::FullyMasked)?;
            let (gamma, zeta) = (S::of(spec.gamma), S::of(spec.zeta));
            let stretch = zeta - gamma;
            for i in 0..n {
                let pre = stretch * s[i] + gamma;
                if !visible[i] || pre <= S::zero() || pre >= S::one() {
                    continue;
                }
                for j in 0..n {
                    let d = if i == j { s[i] } else { S::zero() };
                    jac.set(&[i, j], stretch * (d - s[i] * s[j]));
                }
            }
        }
        NormalizerKind::Sparsemax | NormalizerKind::Entmax15 => {
            // J = diag(r) - r r^T / sum(r), r = 1[p > 0] (sparsemax) or sqrt(p).
            let r: Vec<S> = w
                .probs
                .iter()
                .map(|&p| {
                    if p <= S::zero() {
                        S::zero()
                    } else if spec.kind == NormalizerKind::Sparsemax {
                        S::one()
                    } else {
                        p.sqrt()
                    }
                })
                .collect();
            let total: S = r.iter().copied().sum();
            for i in 0..n {
                for j in 0..n {
                    let d = if i == j { r[i] } else { S::zero() };
                    jac.set(&[i, j], d - r[i] * r[j] / total);
                }
            }
        }
    }
    Ok(jac)
}

/// Vector–Jacobian product: gradient with respect to `z` given upstream
/// gradients on the real-slot probabilities and on the null mass.
///
/// `upstream_null` is ignored for normalizers without a null slot.
pub fn vjp<S: Scalar>(
    spec: &NormalizerSpec,
    z: &[S],
    visible: &[bool],
    upstream_probs: &[S],
    upstream_null: S,
) -> Result<Vec<S>> {
    let n = z.len();
    if upstream_probs.len() != n {
        return Err(Error::Dimension("upstream gradient length".into()));
    }
    let w = normalize(spec, z, visible)?;
    let p = &w.probs;
    let g = upstream_probs;
    let mut dz = vec![S::zero(); n];
    match spec.kind {
        NormalizerKind::Softmax | NormalizerKind::Softmax1 => {
            let inner: S = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let null_term = w.null_mass * upstream_null;
            for j in 0..n {
                dz[j] = p[j] * (g[j] - inner - null_term);
            }
        }
        NormalizerKind::ClippedSoftmax => {
            let s = softmax_visible(z, visible).ok_or(Error::FullyMasked)?;
            let (gamma, zeta) = (S::of(spec.gamma), S::of(spec.zeta));
            let stretch = zeta - gamma;
            let gm: Vec<S> = (0..n)
                .map(|i| {
                    let pre = stretch * s[i] + gamma;
                    if visible[i] && pre > S::zero() && pre < S::one() {
                        g[i]
                    } else {
                        S::zero()
                    }
                })
                .collect();
            let inner: S = s.iter().zip(&gm).map(|(&a, &b)| a * b).sum();
            for j in 0..n {
                dz[j] = stretch * s[j] * (gm[j] - inner);
            }
        }
        NormalizerKind::Sparsemax | NormalizerKind::Entmax15 => {
            let r: Vec<S> = p
                .iter()
                .map(|&x| {
                    if x <= S::zero() {
                        S::zero()
                    } else if spec.kind == NormalizerKind::Sparsemax {
                        S::one()
                    } else {
                        x.sqrt()
                    }
                })
                .collect();
            let total: S = r.iter().copied().sum();
            let inner: S = r.iter().zip(g).map(|(&a, &b)| a * b).sum::<S>() / total;
            for j in 0..n {
                dz[j] = r[j] * (g[j] - inner);
            }
        }
    }
    Ok(dz)
}

/// Distance, in logit units, from `z` to the nearest point where the
/// normalizer is not differentiable. Infinite for the smooth normalizers.
pub fn kink_margin<S: Scalar>(spec: &NormalizerSpec, z: &[S], visible: &[bool]) -> Result<S> {
    check_lengths(z.len(), visible)?;
    let mut margin = S::infinity();
    match spec.kind {
        NormalizerKind::Softmax | NormalizerKind::Softmax1 => {}
        NormalizerKind::ClippedSoftmax => {
            let s = softmax_visible(z, visible).ok_or(Error::FullyMasked)?;
            let (gamma, zeta) = (S::of(spec.gamma), S::of(spec.zeta));
            for (i, &p) in s.iter().enumerate() {
                if visible[i] {
                    let pre = (zeta - gamma) * p + gamma;
                    margin = margin.min(pre.abs()).min((pre - S::one()).abs());
                }
            }
        }
        NormalizerKind::Sparsemax => {
            let tau = sparsemax_tau(z, visible).ok_or(Error::FullyMasked)?;
            for (i, &x) in z.iter().enumerate() {
                if visible[i] {
                    margin = margin.min((x - tau).abs());
                }
            }
        }
        NormalizerKind::Entmax15 => {
            let (shift, tau) = entmax15_tau(z, visible).ok_or(Error::FullyMasked)?;
            for (i, &x) in z.iter().enumerate() {
                if visible[i] {
                    margin = margin.min(((x - shift) * S::of(0.5) - tau).abs());
                }
            }
        }
    }
    Ok(margin)
}

/// Null mass of softmax-plus-one after shifting every logit by `c`.
pub fn null_mass_under_shift<S: Scalar>(spec: &NormalizerSpec, z: &[S], c: S) -> Result<S> {
    if spec.kind != NormalizerKind::Softmax1 {
        return Err(Error::Parameter(format!(
            "null mass under shift needs softmax1, got {}",
            spec.kind.name()
        )));
    }
    let shifted: Vec<S> = z.iter().map(|&x| x + c).collect();
    Ok(normalize_all(spec, &shifted)?.null_mass)
}
