//! Symmetric round-to-nearest fake quantization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SUPPORTED_BITS: [u32; 3] = [4, 6, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Granularity {
    #[default]
    PerTensor,
    /// One scale per column of a `d_in × d_out` weight.
    PerOutputChannel,
}

impl Granularity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tensor" => Some(Self::PerTensor),
            "channel" => Some(Self::PerOutputChannel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub weight_granularity: Granularity,
}

impl QuantSpec {
    pub fn new(weight_bits: u32, act_bits: u32, weight_granularity: Granularity) -> Result<Self> {
        let s = Self {
            weight_bits,
            act_bits,
            weight_granularity,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.act_bits] {
            if !SUPPORTED_BITS.contains(&b) {
                return Err(Error::Parameter(format!("unsupported bit width {b}; use 4, 6 or 8")));
            }
        }
        Ok(())
    }

    /// Label such as `W8A8`.
    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.act_bits)
    }
}

/// Largest grid magnitude `2^(b-1) - 1`.
pub fn qmax(bits: u32) -> u32 {
    (1 << (bits - 1)) - 1
}

/// Scale `max|x| / qmax`, or one for an all-zero group.
pub fn scale_for<S: Scalar>(values: impl Iterator<Item = S>, bits: u32) -> S {
    let m = values.fold(S::zero(), |m, v| m.max(v.abs()));
    if m == S::zero() {
        S::one()
    } else {
        m / S::of(qmax(bits) as f64)
    }
}

/// Quantizes one group. The extreme grid points map back to `±max|x|`
/// itself, so a second pass sees the same scale and reproduces its input.
fn quantize_group<S: Scalar>(values: &mut [S], indices: &[usize], bits: u32) {
    let q = S::of(qmax(bits) as f64);
    let m = indices.iter().fold(S::zero(), |m, &i| m.max(values[i].abs()));
    if m == S::zero() {
        return;
    }
    let s = m / q;
    for &i in indices {
        let k = (values[i] / s).round().max(-q).min(q);
        values[i] = if k == q {
            m
        } else if k == -q {
            -m
        } else {
            k * s
        };
    }
}

pub fn fake_quant<S: Scalar>(x: &Tensor<S>, bits: u32, granularity: Granularity) -> Result<Tensor<S>> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(Error::Parameter(format!("unsupported bit width {bits}; use 4, 6 or 8")));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("fake quantization of non-finite values".into()));
    }
    let mut out = x.clone();
    match granularity {
        Granularity::PerOutputChannel if x.shape().len() == 2 => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            for j in 0..c {
                let idx: Vec<usize> = (0..r).map(|i| i * c + j).collect();
                quantize_group(out.data_mut(), &idx, bits);
            }
        }
        _ => {
            let idx: Vec<usize> = (0..x.len()).collect();
            quantize_group(out.data_mut(), &idx, bits);
        }
    }
    Ok(out)
}
