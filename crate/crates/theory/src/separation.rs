//! Separation regime: one low-norm vector against vectors aligned with a
//! common direction. Token level (`Lemma1Instance`) and depth level
//! (`Thm2Instance`) share the construction and the search.

use oasis_core::numerics::{dot, l2_norm};
use oasis_core::{Error, Result, SeededRng};

use crate::report::{InstanceResult, VIOLATION_TOL};
use crate::simplex::{random_simplex, MixtureSearch};

/// Token-level instance: values `v`, candidate no-op token `o`, direction
/// `u`, and the tight constants the vectors satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct Lemma1Instance {
    pub v: Vec<Vec<f64>>,
    pub o: usize,
    pub u: Vec<f64>,
    pub c0: f64,
    pub c1: f64,
    pub delta: f64,
}

/// Depth-level instance: branch updates `u`, minimal-update branch `i_star`,
/// direction `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Thm2Instance {
    pub u: Vec<Vec<f64>>,
    pub i_star: usize,
    pub w: Vec<f64>,
    pub b0: f64,
    pub b1: f64,
    pub delta_t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparationSpec {
    pub count: usize,
    pub dim: usize,
    /// Upper bound on the special vector's norm.
    pub c0: f64,
    /// Lower bound on the other vectors' alignment.
    pub c1: f64,
    pub delta: f64,
}

impl SeparationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || self.dim == 0 {
            return Err(Error::Parameter("need at least two vectors of positive dimension".into()));
        }
        if !(self.c0 >= 0.0 && self.c0 < self.c1) {
            return Err(Error::Parameter(format!("need 0 <= c0 < c1, got c0={} c1={}", self.c0, self.c1)));
        }
        if !(self.delta >= 0.0 && self.delta < self.c1) {
            return Err(Error::Parameter(format!(
                "need 0 <= delta < c1, got delta={} c1={}",
                self.delta, self.c1
            )));
        }
        Ok(())
    }

    /// Random spec: 2..=6 vectors in 2..=5 dimensions, `c0 = 0` one time in
    /// ten.
    pub fn random(rng: &mut SeededRng) -> Self {
        let c1 = rng.uniform_in(0.5, 2.0);
        let c0 = if rng.bernoulli(0.1) { 0.0 } else { c1 * rng.uniform_in(0.0, 0.9) };
        Self {
            count: 2 + rng.below(5),
            dim: 2 + rng.below(4),
            c0,
            c1,
            delta: c1 * rng.uniform_in(0.05, 0.95),
        }
    }
}

/// Vectors, special index, unit direction and the tight constants.
struct Separated {
    vectors: Vec<Vec<f64>>,
    special: usize,
    direction: Vec<f64>,
    c0: f64,
    c1: f64,
}

const REJECTION_BUDGET: usize = 100;

fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    loop {
        let g = rng.gaussian_vec(d);
        let n = l2_norm(&g);
        if n > 1e-6 {
            return g.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector orthogonal to `u` (zero in one dimension).
fn perpendicular(rng: &mut SeededRng, u: &[f64]) -> Vec<f64> {
    if u.len() == 1 {
        return vec![0.0];
    }
    loop {
        let g = rng.gaussian_vec(u.len());
        let a = dot(&g, u);
        let p: Vec<f64> = g.iter().zip(u).map(|(x, y)| x - a * y).collect();
        let n = l2_norm(&p);
        if n > 1e-6 {
            return p.into_iter().map(|x| x / n).collect();
        }
    }
}

fn generate(rng: &mut SeededRng, spec: &SeparationSpec) -> Result<Separated> {
    spec.validate()?;
    let mut last = String::new();
    for _ in 0..REJECTION_BUDGET {
        let u = unit(rng, spec.dim);
        let special = rng.below(spec.count);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(spec.count);
        for j in 0..spec.count {
            let perp = perpendicular(rng, &u);
            if j == special {
                // Mostly opposed to u so that cancelling mixtures exist.
                let r = spec.c0 * rng.uniform().sqrt();
                let theta = rng.uniform_in(0.0, std::f64::consts::FRAC_PI_4);
                let (c, s) = (theta.cos(), theta.sin());
                vectors.push(u.iter().zip(&perp).map(|(a, b)| r * (-c * a + s * b)).collect());
            } else {
                let along = spec.c1 * (1.0 + 0.5 * rng.uniform());
                let off = spec.c1 * 0.3 * rng.uniform();
                vectors.push(u.iter().zip(&perp).map(|(a, b)| along * a + off * b).collect());
            }
        }
        let c0 = l2_norm(&vectors[special]);
        let c1 = (0..spec.count)
            .filter(|&j| j != special)
            .map(|j| dot(&vectors[j], &u))
            .fold(f64::INFINITY, f64::min);
        let unit_ok = (l2_norm(&u) - 1.0).abs() <= 1e-12;
        if unit_ok && c0 <= spec.c0 && c1 >= spec.c1 && c0 < c1 && spec.delta < c1 {
            return Ok(Separated {
                vectors,
                special,
                direction: u,
                c0,
                c1,
            });
        }
        last = format!("c0={c0:.3e} (max {}), c1={c1:.3e} (min {}), unit={unit_ok}", spec.c0, spec.c1);
    }
    Err(Error::Degenerate(format!(
        "separation generator exhausted {REJECTION_BUDGET} draws; last attempt {last}"
    )))
}

pub fn gen_lemma1(rng: &mut SeededRng, spec: &SeparationSpec) -> Result<Lemma1Instance> {
    let s = generate(rng, spec)?;
    Ok(Lemma1Instance {
        v: s.vectors,
        o: s.special,
        u: s.direction,
        c0: s.c0,
        c1: s.c1,
        delta: spec.delta,
    })
}

pub fn gen_thm2(rng: &mut SeededRng, spec: &SeparationSpec) -> Result<Thm2Instance> {
    let s = generate(rng, spec)?;
    Ok(Thm2Instance {
        u: s.vectors,
        i_star: s.special,
        w: s.direction,
        b0: s.c0,
        b1: s.c1,
        delta_t: spec.delta,
    })
}

fn verify(vectors: &[Vec<f64>], special: usize, dir: &[f64], c0: f64, c1: f64, delta: f64) -> Result<()> {
    let ok = vectors.len() >= 2
        && special < vectors.len()
        && vectors.iter().all(|v| v.len() == dir.len())
        && (l2_norm(dir) - 1.0).abs() <= 1e-12
        && l2_norm(&vectors[special]) <= c0
        && (0..vectors.len()).all(|j| j == special || dot(&vectors[j], dir) >= c1)
        && 0.0 <= c0
        && c0 < c1
        && delta < c1;
    if ok {
        Ok(())
    } else {
        Err(Error::Input("instance violates its separation constants".into()))
    }
}

impl Lemma1Instance {
    pub fn verify(&self) -> Result<()> {
        verify(&self.v, self.o, &self.u, self.c0, self.c1, self.delta)
    }

    /// `(c1 − δ)/(c0 + c1)`.
    pub fn bound(&self) -> f64 {
        (self.c1 - self.delta) / (self.c0 + self.c1)
    }
}

impl Thm2Instance {
    pub fn verify(&self) -> Result<()> {
        verify(&self.u, self.i_star, &self.w, self.b0, self.b1, self.delta_t)
    }

    /// `(b1 − δ_t)/(b0 + b1)`.
    pub fn bound(&self) -> f64 {
        (self.b1 - self.delta_t) / (self.b0 + self.b1)
    }

    /// `(b0 + δ_t)/(b0 + b1)`, the bound on the weight off `i_star`.
    pub fn complement_bound(&self) -> f64 {
        (self.b0 + self.delta_t) / (self.b0 + self.b1)
    }
}

/// Feasible points found and the smallest special weight among them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchOutcome {
    pub feasible: usize,
    pub min_special: f64,
}

pub const SEARCH_ITERATIONS: usize = 200;
const BISECTION_STEPS: usize = 20;

/// Random-restart search for mixtures with `‖Σ p_j v_j‖ ≤ delta`, then a
/// bisection on a cap of the special weight to push it as low as the
/// search can reach while staying feasible.
pub fn search_min_special(
    rng: &mut SeededRng,
    vectors: &[Vec<f64>],
    special: usize,
    delta: f64,
    n_probes: usize,
) -> SearchOutcome {
    let search = MixtureSearch::new(vectors, SEARCH_ITERATIONS);
    let n = vectors.len();
    let mut feasible = 0;
    let mut min_special = f64::INFINITY;
    let record = |p: &[f64], feasible: &mut usize, min_special: &mut f64| {
        debug_assert!(search.norm_at(p) <= delta);
        *feasible += 1;
        *min_special = min_special.min(p[special]);
    };
    for k in 0..n_probes.max(1) {
        let start = if k == 0 {
            let mut e = vec![0.0; n];
            e[special] = 1.0;
            e
        } else {
            random_simplex(rng, n)
        };
        if let Some(p) = search.search(&start, delta, None) {
            record(&p, &mut feasible, &mut min_special);
        }
    }
    if feasible > 0 {
        let mut lo = 0.0;
        let mut hi = min_special;
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let start = random_simplex(rng, n);
            match search.search(&start, delta, Some((special, mid))) {
                Some(p) => {
                    record(&p, &mut feasible, &mut min_special);
                    hi = p[special].min(mid);
                }
                None => lo = mid,
            }
        }
    }
    SearchOutcome { feasible, min_special }
}

pub fn check_lemma1(id: usize, inst: &Lemma1Instance, n_probes: usize, rng: &mut SeededRng) -> Result<InstanceResult> {
    inst.verify()?;
    let out = search_min_special(rng, &inst.v, inst.o, inst.delta, n_probes);
    let bound = inst.bound();
    let worst = if out.feasible > 0 { out.min_special } else { f64::NAN };
    let margin = if out.feasible > 0 { worst - bound } else { f64::NAN };
    Ok(InstanceResult::judged(id, out.feasible, bound, worst, margin, VIOLATION_TOL))
}

pub fn check_thm2(id: usize, inst: &Thm2Instance, n_probes: usize, rng: &mut SeededRng) -> Result<InstanceResult> {
    inst.verify()?;
    let out = search_min_special(rng, &inst.u, inst.i_star, inst.delta_t, n_probes);
    let bound = inst.bound();
    let (worst, margin) = if out.feasible > 0 {
        let direct = out.min_special - bound;
        let complement = inst.complement_bound() - (1.0 - out.min_special);
        (out.min_special, direct.min(complement))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(InstanceResult::judged(id, out.feasible, bound, worst, margin, VIOLATION_TOL))
}
