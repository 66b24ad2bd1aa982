//! Mass-budget bounds for softmax-plus-one under downward logit shifts, with
//! the standard softmax contrast.

use oasis_core::numerics::l2_norm;
use oasis_core::{normalize::normalize_all, NormalizerSpec, Result, SeededRng};

use crate::report::{InstanceResult, Status, VIOLATION_TOL};
use crate::simplex::combine;

pub const DEFAULT_SHIFTS: [f64; 8] = [0.0, -1.0, -2.0, -5.0, -10.0, -20.0, -30.0, -40.0];

/// Tolerance for the exact-sum and limit checks.
pub const LIMIT_TOL: f64 = 1e-12;
/// Allowed deviation from uniform for softmax at the deepest shift.
pub const UNIFORM_TOL: f64 = 1e-9;

/// One level of the budget check: vectors bounded by `bound`, their logits,
/// and a target norm `delta` for the sufficiency condition.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetLevel {
    pub vectors: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub bound: f64,
    pub delta: f64,
    pub equal_logits: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thm3Instance {
    /// Token level: values bounded by `V_max`.
    pub token: BudgetLevel,
    /// Depth level: branch updates bounded by `U_max`.
    pub depth: BudgetLevel,
    pub shifts: Vec<f64>,
}

fn gen_level(rng: &mut SeededRng) -> BudgetLevel {
    let m = 2 + rng.below(7);
    let d = 1 + rng.below(4);
    let bound = if rng.bernoulli(0.1) { 0.0 } else { rng.uniform_in(0.1, 3.0) };
    let vectors = (0..m)
        .map(|_| {
            let g = rng.gaussian_vec(d);
            let n = l2_norm(&g).max(1e-300);
            let r = bound * rng.uniform();
            g.into_iter().map(|x| r * x / n).collect()
        })
        .collect();
    let equal_logits = rng.bernoulli(0.25);
    let logits = if equal_logits {
        vec![0.0; m]
    } else {
        (0..m).map(|_| rng.uniform_in(-5.0, 5.0)).collect()
    };
    BudgetLevel {
        vectors,
        logits,
        bound,
        delta: bound * rng.uniform(),
        equal_logits,
    }
}

pub fn gen_thm3(rng: &mut SeededRng) -> Thm3Instance {
    Thm3Instance {
        token: gen_level(rng),
        depth: gen_level(rng),
        shifts: DEFAULT_SHIFTS.to_vec(),
    }
}

/// Budget slack and the bound/observed pair at the tightest shift.
struct LevelOutcome {
    margin: f64,
    bound_value: f64,
    observed: f64,
    limits_hold: bool,
}

fn check_level(level: &BudgetLevel, shifts: &[f64]) -> Result<LevelOutcome> {
    let soft1 = NormalizerSpec::softmax1();
    let soft = NormalizerSpec::softmax();
    let m = level.logits.len();
    let mut out = LevelOutcome {
        margin: f64::INFINITY,
        bound_value: f64::NAN,
        observed: f64::NAN,
        limits_hold: true,
    };
    let deepest = shifts.iter().cloned().fold(f64::INFINITY, f64::min);
    for &c in shifts {
        let z: Vec<f64> = level.logits.iter().map(|x| x + c).collect();
        let w = normalize_all(&soft1, &z)?;
        let a = l2_norm(&combine(&w.probs, &level.vectors));
        let budget = level.bound * (1.0 - w.null_mass);
        if budget - a < out.margin {
            out.margin = budget - a;
            out.bound_value = budget;
            out.observed = a;
        }
        if level.bound > 0.0 && w.null_mass >= 1.0 - level.delta / level.bound {
            out.margin = out.margin.min(level.delta - a);
        }

        let s = normalize_all(&soft, &z)?;
        if (s.probs.iter().sum::<f64>() - 1.0).abs() > LIMIT_TOL {
            out.limits_hold = false;
        }
        if level.equal_logits {
            let dev = s.probs.iter().map(|p| (p - 1.0 / m as f64).abs()).fold(0.0, f64::max);
            if c == deepest && dev > UNIFORM_TOL {
                out.limits_hold = false;
            }
            if c <= -40.0 && (w.null_mass < 1.0 - LIMIT_TOL || a > 1e-10 * level.bound) {
                out.limits_hold = false;
            }
        }
    }
    Ok(out)
}

/// Both levels over every shift. Fails on a negative budget slack beyond
/// tolerance or on a broken softmax limit.
pub fn check_thm3(id: usize, inst: &Thm3Instance) -> Result<InstanceResult> {
    let tok = check_level(&inst.token, &inst.shifts)?;
    let dep = check_level(&inst.depth, &inst.shifts)?;
    let worst = if tok.margin <= dep.margin { &tok } else { &dep };
    let mut r = InstanceResult::judged(
        id,
        inst.shifts.len(),
        worst.bound_value,
        worst.observed,
        tok.margin.min(dep.margin),
        VIOLATION_TOL,
    );
    if !(tok.limits_hold && dep.limits_hold) {
        r.status = Status::Fail;
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(vectors: Vec<Vec<f64>>, logits: Vec<f64>, bound: f64) -> BudgetLevel {
        BudgetLevel {
            equal_logits: logits.iter().all(|&x| x == logits[0]),
            vectors,
            logits,
            bound,
            delta: 0.5 * bound,
        }
    }

    #[test]
    fn deep_shift_with_equal_logits() {
        let v = vec![vec![1.0, 0.0], vec![0.0, -1.0], vec![0.6, 0.8]];
        let w = normalize_all(&NormalizerSpec::softmax1(), &[-40.0; 3]).unwrap();
        assert!(w.null_mass >= 1.0 - 1e-12);
        assert!(l2_norm(&combine(&w.probs, &v)) <= 1e-10);
        let s = normalize_all(&NormalizerSpec::softmax(), &[-40.0_f64; 3]).unwrap();
        assert!(s.probs.iter().all(|p| (p - 1.0_f64 / 3.0).abs() <= 1e-15));
        let inst = Thm3Instance {
            token: level(v.clone(), vec![0.0; 3], 1.0),
            depth: level(v, vec![2.0, -1.0, 0.5], 1.0),
            shifts: DEFAULT_SHIFTS.to_vec(),
        };
        assert_eq!(check_thm3(0, &inst).unwrap().status, Status::Pass);
    }

    #[test]
    fn zero_vectors_give_zero_budget() {
        let inst = Thm3Instance {
            token: level(vec![vec![0.0]; 4], vec![1.0, 2.0, 3.0, 4.0], 0.0),
            depth: level(vec![vec![0.0]; 2], vec![0.0; 2], 0.0),
            shifts: DEFAULT_SHIFTS.to_vec(),
        };
        let r = check_thm3(0, &inst).unwrap();
        assert_eq!(r.status, Status::Pass);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn random_instances_pass() {
        let mut rng = SeededRng::new(9);
        for i in 0..1000 {
            let inst = gen_thm3(&mut rng);
            assert_eq!(check_thm3(i, &inst).unwrap().status, Status::Pass, "instance {i}");
        }
    }
}
