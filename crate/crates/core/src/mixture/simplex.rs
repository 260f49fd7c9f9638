use serde::{Deserialize, Serialize};

use super::{EnsembleOutput, WeightVector};
use crate::error::{Error, Result};

/// Floor applied to mixture probabilities before taking the log.
const LOG_FLOOR: f64 = 1e-12;

/// Euclidean projection of `v` onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> WeightVector {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let w: Vec<f64> = v.iter().map(|&x| (x - theta).max(0.0)).collect();
    // Clean up rounding so the sum is 1 to machine precision.
    let s: f64 = w.iter().sum();
    WeightVector(w.into_iter().map(|x| x / s).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop once an accepted step improves the objective by less than this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub weights: WeightVector,
    /// Mean cross-entropy of the mixture at `weights`.
    pub objective: f64,
    pub iterations: usize,
}

/// Per-sample probability each expert gives the true class.
fn true_class_columns(samples: &[EnsembleOutput], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to fit weights on".into()));
    }
    if samples.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} labels",
            samples.len(),
            labels.len()
        )));
    }
    let n = samples[0].experts();
    samples
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            if p.experts() != n || y >= p.classes() {
                return Err(Error::Shape(format!(
                    "sample with {} experts and {} classes cannot score label {y}",
                    p.experts(),
                    p.classes()
                )));
            }
            Ok(p.rows().map(|r| r[y]).collect())
        })
        .collect()
}

fn objective(q: &[Vec<f64>], w: &[f64]) -> f64 {
    let total: f64 = q
        .iter()
        .map(|qx| -dot(qx, w).max(LOG_FLOOR).ln())
        .sum();
    total / q.len() as f64
}

fn gradient(q: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; w.len()];
    for qx in q {
        let s = dot(qx, w);
        if s > LOG_FLOOR {
            for (gi, &qi) in g.iter_mut().zip(qx) {
                *gi -= qi / s;
            }
        }
    }
    let m = q.len() as f64;
    g.iter_mut().for_each(|gi| *gi /= m);
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean categorical cross-entropy of the mixture `w^T P(x)` over `samples`.
pub fn mixture_objective(samples: &[EnsembleOutput], labels: &[usize], w: &[f64]) -> Result<f64> {
    let q = true_class_columns(samples, labels)?;
    if w.len() != q[0].len() {
        return Err(Error::Shape(format!("{} weights for {} experts", w.len(), q[0].len())));
    }
    Ok(objective(&q, w))
}

/// Simplex weights minimizing the mixture cross-entropy, by projected
/// gradient descent with backtracking from the uniform vector.
pub fn solve_optimal_weights(
    samples: &[EnsembleOutput],
    labels: &[usize],
    options: &SolverOptions,
) -> Result<Solution> {
    let q = true_class_columns(samples, labels)?;
    let n = q[0].len();
    let mut w = WeightVector::uniform(n).0;
    let mut f = objective(&q, &w);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < options.max_iterations {
        iterations += 1;
        let g = gradient(&q, &w);
        let accepted = loop {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let cand = project_to_simplex(&trial).0;
            let d: Vec<f64> = cand.iter().zip(&w).map(|(c, wi)| c - wi).collect();
            let fc = objective(&q, &cand);
            let bound = f + dot(&g, &d) + dot(&d, &d) / (2.0 * step);
            if fc <= bound && fc <= f {
                break Some((cand, fc));
            }
            step *= 0.5;
            if step < 1e-16 {
                break None;
            }
        };
        let Some((cand, fc)) = accepted else { break };
        let improvement = f - fc;
        w = cand;
        f = fc;
        if improvement < options.tolerance {
            break;
        }
        step *= 2.0;
    }
    Ok(Solution {
        weights: WeightVector(w),
        objective: f,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_fixed_points() {
        let w = [0.2, 0.3, 0.5];
        let p = project_to_simplex(&w);
        for (a, b) in p.as_slice().iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(project_to_simplex(&[2.0, 0.0, 0.0]).as_slice(), &[1.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-5.0f64..5.0, 2..6)) {
            let w = project_to_simplex(&v);
            let s: f64 = w.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(w.as_slice().iter().all(|&x| x >= 0.0));
        }
    }

    fn out(rows: &[&[f64]]) -> EnsembleOutput {
        EnsembleOutput::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn perfect_expert_takes_the_weight() {
        let samples: Vec<_> = (0..6)
            .map(|i| {
                let y = i % 3;
                let mut good = vec![0.0; 3];
                good[y] = 1.0;
                let mut bad = vec![0.0; 3];
                bad[(y + 1) % 3] = 1.0;
                EnsembleOutput::new(vec![bad.clone(), good, bad]).unwrap()
            })
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let s = solve_optimal_weights(&samples, &labels, &SolverOptions::default()).unwrap();
        assert!(s.weights.as_slice()[1] >= 0.99, "{:?}", s.weights);
    }

    #[test]
    fn identical_experts_match_single_objective() {
        let samples = vec![
            out(&[&[0.7, 0.3], &[0.7, 0.3]]),
            out(&[&[0.4, 0.6], &[0.4, 0.6]]),
        ];
        let labels = [0, 1];
        let s = solve_optimal_weights(&samples, &labels, &SolverOptions::default()).unwrap();
        let single = -(0.7f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((s.objective - single).abs() < 1e-12);
    }

    #[test]
    fn never_worse_than_uniform_or_vertices() {
        let samples = vec![
            out(&[&[0.9, 0.1], &[0.2, 0.8], &[0.5, 0.5]]),
            out(&[&[0.3, 0.7], &[0.6, 0.4], &[0.5, 0.5]]),
            out(&[&[0.8, 0.2], &[0.1, 0.9], &[0.4, 0.6]]),
        ];
        let labels = [0, 1, 1];
        let s = solve_optimal_weights(&samples, &labels, &SolverOptions::default()).unwrap();
        let uniform = mixture_objective(&samples, &labels, &[1.0 / 3.0; 3]).unwrap();
        assert!(s.objective <= uniform);
        for i in 0..3 {
            let v = WeightVector::vertex(3, i);
            assert!(s.objective <= mixture_objective(&samples, &labels, v.as_slice()).unwrap());
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(solve_optimal_weights(&[], &[], &SolverOptions::default()).is_err());
    }
}
