//! Projections onto the probability simplex and a projected accelerated
//! gradient search for small-norm mixtures.

use oasis_core::numerics::{dot, l2_norm};
use oasis_core::SeededRng;

/// Euclidean projection of `y` onto `{p ≥ 0, Σ p = mass}`.
pub fn project_simplex(y: &[f64], mass: f64) -> Vec<f64> {
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - mass) / (k + 1) as f64;
        if v > t {
            tau = t;
        }
    }
    y.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// Projection onto the simplex with the extra constraint `p[capped] ≤ cap`.
pub fn project_capped(y: &[f64], capped: usize, cap: f64) -> Vec<f64> {
    let p = project_simplex(y, 1.0);
    if p[capped] <= cap {
        return p;
    }
    // The cap binds: fix that coordinate and spread the rest.
    let rest: Vec<f64> = y
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != capped)
        .map(|(_, &v)| v)
        .collect();
    let q = project_simplex(&rest, 1.0 - cap);
    let mut out = Vec::with_capacity(y.len());
    let mut it = q.into_iter();
    for i in 0..y.len() {
        out.push(if i == capped { cap } else { it.next().expect("length") });
    }
    out
}

/// `Σ_j p_j v_j`.
pub fn combine(p: &[f64], vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors[0].len();
    let mut out = vec![0.0; d];
    for (&w, v) in p.iter().zip(vectors) {
        for (o, &x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Gram matrix `G[i][j] = ⟨v_i, v_j⟩`.
pub fn gram(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    vectors
        .iter()
        .map(|a| vectors.iter().map(|b| dot(a, b)).collect())
        .collect()
}

fn largest_eigenvalue(g: &[Vec<f64>]) -> f64 {
    let n = g.len();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let y: Vec<f64> = g.iter().map(|row| dot(row, &x)).collect();
        let norm = l2_norm(&y);
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        x = y.into_iter().map(|v| v / norm).collect();
    }
    // Power iteration approaches from below; pad so the step stays safe.
    lambda * 1.05 + 1e-12
}

/// Minimizes `‖Σ p_j v_j‖` over the (optionally capped) simplex and stops
/// as soon as the norm is at most `delta`. Returns a verified feasible point.
pub struct MixtureSearch<'a> {
    pub vectors: &'a [Vec<f64>],
    gram: Vec<Vec<f64>>,
    step: f64,
    pub iterations: usize,
}

impl<'a> MixtureSearch<'a> {
    pub fn new(vectors: &'a [Vec<f64>], iterations: usize) -> Self {
        let gram = gram(vectors);
        let l = largest_eigenvalue(&gram);
        Self {
            vectors,
            gram,
            step: if l > 0.0 { 1.0 / l } else { 1.0 },
            iterations,
        }
    }

    pub fn norm_at(&self, p: &[f64]) -> f64 {
        l2_norm(&combine(p, self.vectors))
    }

    pub fn search(&self, start: &[f64], delta: f64, cap: Option<(usize, f64)>) -> Option<Vec<f64>> {
        let project = |y: &[f64]| match cap {
            Some((i, c)) => project_capped(y, i, c),
            None => project_simplex(y, 1.0),
        };
        let mut x = project(start);
        if self.norm_at(&x) <= delta {
            return Some(x);
        }
        let mut y = x.clone();
        let mut t = 1.0_f64;
        for _ in 0..self.iterations {
            let grad: Vec<f64> = self.gram.iter().map(|row| dot(row, &y)).collect();
            let moved: Vec<f64> = y.iter().zip(&grad).map(|(a, g)| a - self.step * g).collect();
            let next = project(&moved);
            if self.norm_at(&next) <= delta {
                return Some(next);
            }
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            let mom = (t - 1.0) / t_next;
            y = next.iter().zip(&x).map(|(a, b)| a + mom * (a - b)).collect();
            x = next;
            t = t_next;
        }
        None
    }
}

/// A random point of the simplex, uniform in the Dirichlet(1) sense.
pub fn random_simplex(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_projection(y: &[f64], cap: Option<(usize, f64)>) -> f64 {
        // Dense grid over the 3-simplex as an independent oracle.
        let n = 400;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n - i {
                let p = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
                if let Some((k, c)) = cap {
                    if p[k] > c + 1e-12 {
                        continue;
                    }
                }
                let d: f64 = p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d);
            }
        }
        best
    }

    #[test]
    fn projections_match_grid_oracle() {
        let mut rng = SeededRng::new(3);
        for _ in 0..30 {
            let y: Vec<f64> = (0..3).map(|_| rng.uniform_in(-1.0, 1.5)).collect();
            for cap in [None, Some((1, 0.2))] {
                let p = match cap {
                    Some((i, c)) => project_capped(&y, i, c),
                    None => project_simplex(&y, 1.0),
                };
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p.iter().all(|&v| v >= 0.0));
                let d: f64 = p.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
                assert!(d <= brute_projection(&y, cap) + 1e-12);
            }
        }
    }

    #[test]
    fn search_finds_cancelling_mixture() {
        let v = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 3.0]];
        let s = MixtureSearch::new(&v, 500);
        let p = s.search(&[0.1, 0.1, 0.8], 1e-6, None).unwrap();
        assert!(s.norm_at(&p) <= 1e-6);
        assert!((p[0] - 0.5).abs() < 1e-3);
        assert!(s.search(&[0.1, 0.1, 0.8], 1e-6, Some((0, 0.2))).is_none());
    }

    #[test]
    fn random_simplex_points() {
        let mut rng = SeededRng::new(4);
        let p = random_simplex(&mut rng, 5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
