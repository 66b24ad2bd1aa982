//! Pathology dominance: when each term of the depth-mixed score dominates
//! the single-distribution score, so does the weighted total.

use oasis_core::metrics::{pathology_attn_residual, pathology_vanilla, PathologyScore};
use oasis_core::{Error, Result, SeededRng};

use crate::report::InstanceResult;
use crate::simplex::random_simplex;

pub const PROPOSITION_TOL: f64 = 1e-12;
const REJECTION_BUDGET: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct PropositionInstance {
    /// Single attention distribution.
    pub p: Vec<f64>,
    /// Depth weights over the per-layer distributions `rows`.
    pub alpha: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub irrelevant: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl PropositionInstance {
    pub fn scores(&self) -> Result<(PathologyScore, PathologyScore)> {
        let v = pathology_vanilla(&self.p, &self.irrelevant, self.lambda1, self.lambda2)?;
        let ar = pathology_attn_residual(&self.alpha, &self.rows, &self.irrelevant, self.lambda1, self.lambda2)?;
        Ok((ar, v))
    }

    /// Componentwise dominance of the depth-mixed terms.
    pub fn dominates(&self) -> Result<bool> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Ok(false);
        }
        let (ar, v) = self.scores()?;
        Ok(ar.leakage >= v.leakage && ar.concentration >= v.concentration && ar.entropy_collapse >= v.entropy_collapse)
    }
}

fn peaked(rng: &mut SeededRng, m: usize) -> Vec<f64> {
    let temp = rng.uniform_in(0.2, 3.0);
    let z: Vec<f64> = (0..m).map(|_| rng.gaussian() * temp).collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Builds the vanilla distribution first, then a depth mixture whose
/// dominant layer pulls mass onto an irrelevant token. Candidates that do
/// not dominate every term are redrawn.
pub fn gen_proposition(rng: &mut SeededRng) -> Result<PropositionInstance> {
    for _ in 0..REJECTION_BUDGET {
        let m = 3 + rng.below(6);
        let layers = 2 + rng.below(4);
        let mut positions: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut positions);
        let k = 1 + rng.below(m - 1);
        let mut irrelevant = positions[..k].to_vec();
        irrelevant.sort_unstable();
        let p = peaked(rng, m);
        let star = rng.below(layers);
        let identical = rng.bernoulli(0.1);
        let (alpha, rows) = if identical {
            let mut alpha = vec![0.0; layers];
            alpha[star] = 1.0;
            (alpha, vec![p.clone(); layers])
        } else {
            let eps = rng.uniform_in(0.0, 0.05);
            let rest = random_simplex(rng, layers);
            let off: f64 = (0..layers).filter(|&i| i != star).map(|i| rest[i]).sum();
            let alpha: Vec<f64> = (0..layers)
                .map(|i| if i == star { 1.0 - eps } else { eps * rest[i] / off })
                .collect();
            let target = irrelevant[rng.below(k)];
            let s = rng.uniform_in(0.3, 1.0);
            let rows = (0..layers)
                .map(|i| {
                    if i == star {
                        p.iter()
                            .enumerate()
                            .map(|(j, &x)| (1.0 - s) * x + if j == target { s } else { 0.0 })
                            .collect()
                    } else {
                        peaked(rng, m)
                    }
                })
                .collect();
            (alpha, rows)
        };
        let inst = PropositionInstance {
            p,
            alpha,
            rows,
            irrelevant,
            lambda1: rng.uniform_in(0.0, 2.0),
            lambda2: rng.uniform_in(0.0, 2.0),
        };
        if inst.dominates()? {
            return Ok(inst);
        }
    }
    Err(Error::Degenerate(format!(
        "no dominant pathology instance within {REJECTION_BUDGET} draws"
    )))
}

pub fn check_proposition(id: usize, inst: &PropositionInstance) -> Result<InstanceResult> {
    if !inst.dominates()? {
        return Err(Error::Input("instance does not satisfy componentwise dominance".into()));
    }
    let (ar, v) = inst.scores()?;
    Ok(InstanceResult::judged(id, 1, v.score, ar.score, ar.score - v.score, PROPOSITION_TOL))
}
