//! Stable exponential-family primitives.

use crate::scalar::Scalar;

/// `log(Σ exp z)`, or `log(1 + Σ exp z)` when `extra_one` is set.
///
/// Masked entries may be passed as `-inf`. With `extra_one` the implicit null
/// logit `0` takes part in the max used for stabilization.
pub fn log_sum_exp<S: Scalar>(z: &[S], extra_one: bool) -> S {
    let mut m = if extra_one { S::zero() } else { S::neg_infinity() };
    for &x in z {
        if x > m {
            m = x;
        }
    }
    if m == S::neg_infinity() {
        return m;
    }
    let mut acc = if extra_one { (-m).exp() } else { S::zero() };
    for &x in z {
        acc += (x - m).exp();
    }
    m + acc.ln()
}

pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `x · sigmoid(x)`.
pub fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

/// Derivative of [`silu`].
pub fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Shannon entropy in nats with `0 · ln 0 = 0`. Accepts sub-probability vectors.
pub fn entropy<S: Scalar>(p: &[S]) -> S {
    p.iter()
        .filter(|&&x| x > S::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

pub fn l2_norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lse_examples() {
        assert_eq!(log_sum_exp(&[0.0_f64], false), 0.0);
        assert_eq!(log_sum_exp::<f64>(&[], true), 0.0);
        assert_eq!(log_sum_exp::<f64>(&[], false), f64::NEG_INFINITY);
        let big = log_sum_exp(&[1000.0_f64, 1000.0], false);
        assert!((big - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn lse_with_masked_entries() {
        let z = [f64::NEG_INFINITY, 0.0];
        assert_eq!(log_sum_exp(&z, false), 0.0);
        assert!((log_sum_exp(&z, true) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY], false), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_extra_one_never_overflows() {
        let v = log_sum_exp(&[800.0_f64], true);
        assert!((v - 800.0).abs() < 1e-12);
        let v = log_sum_exp(&[-800.0_f64], true);
        assert!(v.abs() < 1e-300);
    }

    #[test]
    fn softplus_at_minus_five() {
        let beta = softplus(-5.0_f64);
        assert!((beta - 0.006715348489117967).abs() < 1e-15);
        assert!((softplus(60.0_f64) - 60.0).abs() < 1e-15);
    }

    #[test]
    fn silu_grad_matches_fd() {
        for &x in &[-4.0, -0.3, 0.0, 0.7, 3.0_f64] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn lse_shift_covariance(z in proptest::collection::vec(-30.0..30.0_f64, 1..16), c in -100.0..100.0_f64) {
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted, false);
            let rhs = log_sum_exp(&z, false) + c;
            prop_assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
        }
    }
}
