//! Derivative-free minimizers used by the stationary-point search.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed::rng_from_seed;

/// Solver choice for the stationary-point search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    NelderMead,
    OnePlusOneEs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    /// Best value dropped to `target` or below.
    pub reached_target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub max_evaluations: usize,
    /// Stop as soon as the objective is at or below this.
    pub target: f64,
    /// Initial step length (simplex edge or mutation scale).
    pub initial_step: f64,
}

struct Counted<F> {
    f: F,
    evaluations: usize,
    limit: usize,
    best: (f64, Vec<f64>),
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    /// Past the budget every point scores +∞ without calling `f`.
    fn eval(&mut self, x: &[f64]) -> f64 {
        if self.exhausted() {
            return f64::INFINITY;
        }
        self.evaluations += 1;
        let v = (self.f)(x);
        // NaN counts as +∞ so it is never selected.
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best.0 {
            self.best = (v, x.to_vec());
        }
        v
    }

    fn exhausted(&self) -> bool {
        self.evaluations >= self.limit
    }
}

/// Nelder–Mead with dimension-adaptive coefficients (Gao & Han). Restarts
/// once from the best point when the simplex collapses.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], budget: Budget) -> Minimum {
    let n = x0.len();
    let mut obj = Counted {
        f,
        evaluations: 0,
        limit: budget.max_evaluations.max(1),
        best: (f64::INFINITY, x0.to_vec()),
    };
    let f0 = obj.eval(x0);
    if n == 0 || f0 <= budget.target {
        return finish(obj, budget.target);
    }
    let nf = n as f64;
    let (alpha, beta, gamma, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    // Nelder–Mead needs at least two coordinates for a meaningful shrink.
    let sigma = if n == 1 { 0.5 } else { sigma };

    let mut step = budget.initial_step;
    for _restart in 0..2 {
        let start = obj.best.1.clone();
        let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n + 1);
        simplex.push((obj.best.0, start.clone()));
        for j in 0..n {
            if obj.exhausted() {
                return finish(obj, budget.target);
            }
            let mut p = start.clone();
            p[j] += step;
            let v = obj.eval(&p);
            simplex.push((v, p));
        }
        loop {
            simplex.sort_by(|a, b| a.0.total_cmp(&b.0));
            if obj.best.0 <= budget.target || obj.exhausted() {
                return finish(obj, budget.target);
            }
            let (best, worst) = (simplex[0].0, simplex[n].0);
            let size = simplex[1..]
                .iter()
                .map(|(_, p)| dist(p, &simplex[0].1))
                .fold(0.0, f64::max);
            if size < 1e-10 * (1.0 + norm(&simplex[0].1)) || (worst - best).abs() < 1e-15 * (1.0 + best.abs()) {
                break;
            }
            let mut centroid = vec![0.0; n];
            for (_, p) in &simplex[..n] {
                for (c, v) in centroid.iter_mut().zip(p) {
                    *c += v / nf;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].1)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };
            let xr = along(alpha);
            let fr = obj.eval(&xr);
            if fr < simplex[0].0 {
                let xe = along(alpha * beta);
                let fe = obj.eval(&xe);
                simplex[n] = if fe < fr { (fe, xe) } else { (fr, xr) };
                continue;
            }
            if fr < simplex[n - 1].0 {
                simplex[n] = (fr, xr);
                continue;
            }
            let (xc, fc) = if fr < simplex[n].0 {
                let xc = along(alpha * gamma);
                let fc = obj.eval(&xc);
                (xc, fc)
            } else {
                let xc = along(-gamma);
                let fc = obj.eval(&xc);
                (xc, fc)
            };
            if fc < simplex[n].0.min(fr) {
                simplex[n] = (fc, xc);
                continue;
            }
            let anchor = simplex[0].1.clone();
            for (v, p) in simplex.iter_mut().skip(1) {
                for (x, a) in p.iter_mut().zip(&anchor) {
                    *x = a + sigma * (*x - a);
                }
                if obj.exhausted() {
                    return finish(obj, budget.target);
                }
                *v = obj.eval(p);
            }
        }
        step *= 0.5;
    }
    finish(obj, budget.target)
}

/// (1+1) evolution strategy with the one-fifth success rule. With
/// `integer = true`, mutations are rounded to integer steps and never zero.
pub fn one_plus_one_es<F: FnMut(&[f64]) -> f64>(f: F, x0: &[f64], budget: Budget, integer: bool, seed: u64) -> Minimum {
    let n = x0.len();
    let mut rng = rng_from_seed(seed);
    let mut obj = Counted {
        f,
        evaluations: 0,
        limit: budget.max_evaluations.max(1),
        best: (f64::INFINITY, x0.to_vec()),
    };
    let mut fx = obj.eval(x0);
    let mut x = x0.to_vec();
    if n == 0 {
        return finish(obj, budget.target);
    }
    let damping = 1.0 + (n as f64).sqrt();
    let mut sigma = budget.initial_step;
    while fx > budget.target && !obj.exhausted() {
        let mut y: Vec<f64> = x
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + sigma * z
            })
            .collect();
        if integer {
            for v in y.iter_mut() {
                *v = v.round();
            }
            if y == x {
                let j = rng.random_range(0..n);
                y[j] += if rng.random::<bool>() { 1.0 } else { -1.0 };
            }
        }
        let fy = obj.eval(&y);
        let success = fy <= fx;
        if success {
            x = y;
            fx = fy;
        }
        let s = if success { 1.0 } else { 0.0 };
        sigma *= ((s - 0.2) / damping).exp();
        if integer {
            sigma = sigma.max(0.3);
        } else if sigma < 1e-12 {
            break;
        }
    }
    finish(obj, budget.target)
}

fn finish<F>(obj: Counted<F>, target: f64) -> Minimum {
    Minimum {
        reached_target: obj.best.0 <= target,
        value: obj.best.0,
        x: obj.best.1,
        evaluations: obj.evaluations,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }

    fn budget(evals: usize, target: f64) -> Budget {
        Budget {
            max_evaluations: evals,
            target,
            initial_step: 0.5,
        }
    }

    #[test]
    fn nelder_mead_solves_rosenbrock() {
        let m = nelder_mead(rosenbrock, &[-1.2, 1.0], budget(5000, 1e-10));
        assert!(m.reached_target, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4);
        assert!(m.evaluations <= 5000);
    }

    #[test]
    fn nelder_mead_respects_budget() {
        let m = nelder_mead(rosenbrock, &[-1.2, 1.0, 0.3, 2.0], budget(37, 0.0));
        assert!(m.evaluations <= 37);
        assert!(!m.reached_target);
    }

    #[test]
    fn start_at_target_costs_one_evaluation() {
        let m = nelder_mead(|_| 0.0, &[3.0, 4.0], budget(100, 0.0));
        assert_eq!(m.evaluations, 1);
        assert_eq!(m.x, vec![3.0, 4.0]);
        let m = one_plus_one_es(|_| 0.0, &[3.0], budget(100, 0.0), false, 1);
        assert_eq!(m.evaluations, 1);
    }

    #[test]
    fn es_finds_low_dimensional_minimum_in_high_dimension() {
        // Objective depends on 4 of 60 coordinates, like a codimension-4
        // stationary manifold.
        let f = |x: &[f64]| x[..4].iter().map(|v| (v - 1.0).powi(2)).sum::<f64>().sqrt();
        let x0 = vec![0.0; 60];
        let m = one_plus_one_es(f, &x0, budget(3000, 1e-3), false, 7);
        assert!(m.reached_target, "{m:?}");
    }

    #[test]
    fn integer_es_stays_on_lattice() {
        let f = |x: &[f64]| x.iter().map(|v| (v - 2.0).abs()).sum::<f64>();
        let m = one_plus_one_es(f, &[0.0, 5.0, -1.0], budget(2000, 0.0), true, 3);
        assert!(m.reached_target);
        assert_eq!(m.x, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn nan_objective_is_never_preferred() {
        let f = |x: &[f64]| {
            if x[0] > 0.1 {
                f64::NAN
            } else {
                (x[0] + 1.0).abs() + x[1].abs()
            }
        };
        let m = nelder_mead(f, &[0.0, 0.0], budget(500, 1e-6));
        assert!(m.value.is_finite());
        assert!(m.x[0] <= 0.1);
    }
}
