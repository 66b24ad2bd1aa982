//! Depth-aggregated sink mass as a convex combination of per-branch masses.

use oasis_core::metrics::{attention_branch_weights, sink_masses};
use oasis_core::{Error, Result, Scalar, SeededRng, SequenceTrace};

use crate::report::InstanceResult;
use crate::simplex::random_simplex;

pub const LEMMA2_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Lemma2Instance {
    /// Per-branch sink masses.
    pub sigma: Vec<f64>,
    /// Depth weights on the simplex.
    pub alpha: Vec<f64>,
}

impl Lemma2Instance {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.len() != self.alpha.len() || self.sigma.is_empty() {
            return Err(Error::Dimension(format!(
                "{} sink masses for {} depth weights",
                self.sigma.len(),
                self.alpha.len()
            )));
        }
        let sum: f64 = self.alpha.iter().sum();
        if self.alpha.iter().any(|&a| !(a >= 0.0)) || (sum - 1.0).abs() > LEMMA2_TOL {
            return Err(Error::Input(format!("depth weights are not on the simplex (sum {sum})")));
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.alpha.iter().zip(&self.sigma).map(|(a, s)| a * s).sum()
    }
}

/// Random instance; about a third are collapsed onto one branch.
pub fn gen_lemma2(rng: &mut SeededRng) -> Lemma2Instance {
    let n = 2 + rng.below(7);
    let sigma: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let alpha = if rng.bernoulli(1.0 / 3.0) {
        let star = rng.below(n);
        let eps = if rng.bernoulli(0.25) { 0.0 } else { rng.uniform_in(0.0, 0.1) };
        let rest = random_simplex(rng, n);
        let off: f64 = rest.iter().enumerate().filter(|&(i, _)| i != star).map(|(_, v)| v).sum();
        (0..n)
            .map(|i| {
                if i == star {
                    1.0 - eps
                } else if off > 0.0 {
                    eps * rest[i] / off
                } else {
                    0.0
                }
            })
            .collect()
    } else {
        random_simplex(rng, n)
    };
    Lemma2Instance { sigma, alpha }
}

/// Convexity slack, plus the collapse slack when one weight dominates.
pub fn check_lemma2(id: usize, inst: &Lemma2Instance) -> Result<InstanceResult> {
    inst.validate()?;
    let lo = inst.sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = inst.sigma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total = inst.total();
    let mut margin = (total - lo).min(hi - total);
    let (star, &top) = inst
        .alpha
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let eps = 1.0 - top;
    if eps <= 0.5 {
        let collapse = eps * (hi - lo) - (total - inst.sigma[star]).abs();
        margin = margin.min(collapse);
    }
    Ok(InstanceResult::judged(id, 1, lo, total, margin, LEMMA2_TOL))
}

/// One instance per query token of a captured trace. Needs branch weights
/// that sum to one over attention branches, as in the vanilla regime.
pub fn lemma2_from_trace<S: Scalar>(seq: &SequenceTrace<S>, sink_set: &[usize]) -> Result<Vec<Lemma2Instance>> {
    let report = sink_masses(seq, sink_set)?;
    let l = seq.n_layers();
    (0..seq.tokens())
        .map(|t| {
            let alpha: Vec<f64> = attention_branch_weights(seq, t)?.iter().map(|v| v.as_f64()).collect();
            let sigma: Vec<f64> = (0..l).map(|layer| report.sigma.at(&[layer, t]).as_f64()).collect();
            let inst = Lemma2Instance { sigma, alpha };
            inst.validate()?;
            Ok(inst)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::Status;

    #[test]
    fn two_branch_midpoint() {
        let inst = Lemma2Instance {
            sigma: vec![0.9, 0.1],
            alpha: vec![0.5, 0.5],
        };
        assert!((inst.total() - 0.5).abs() < 1e-15);
        assert_eq!(check_lemma2(0, &inst).unwrap().status, Status::Pass);
    }

    #[test]
    fn one_hot_gives_the_branch_mass() {
        let inst = Lemma2Instance {
            sigma: vec![0.3, 0.7, 0.2],
            alpha: vec![0.0, 1.0, 0.0],
        };
        assert_eq!(inst.total(), 0.7);
        let r = check_lemma2(0, &inst).unwrap();
        assert_eq!(r.status, Status::Pass);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn non_simplex_weights_rejected() {
        let inst = Lemma2Instance {
            sigma: vec![0.3, 0.7],
            alpha: vec![0.5, 0.6],
        };
        assert!(matches!(check_lemma2(0, &inst), Err(Error::Input(_))));
    }

    #[test]
    fn random_instances_pass() {
        let mut rng = SeededRng::new(8);
        for i in 0..2000 {
            let inst = gen_lemma2(&mut rng);
            assert_eq!(check_lemma2(i, &inst).unwrap().status, Status::Pass);
        }
    }
}
