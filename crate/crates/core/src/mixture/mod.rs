//! Ensemble combiners, the simplex-constrained optimal-weight solver and the
//! gating network that predicts mixture weights per image.

mod gating;
mod simplex;
mod table;

pub use gating::{
    gate_weights, gating_architecture, gating_layers, gating_param_count, train_gating,
    GatingNetwork, GatingTrainConfig,
};
pub use simplex::{mixture_objective, project_to_simplex, solve_optimal_weights, SolverOptions, Solution};
pub use table::{build_weight_table, OptimalWeightTable};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Classifier;
use crate::experts::ExpertModel;
use crate::nn::{argmax, Tensor};

/// Tolerance for a row of expert probabilities to count as a distribution.
const ROW_TOL: f64 = 1e-6;
/// Tolerance for accepting a weight vector as a point of the simplex.
const SIMPLEX_TOL: f64 = 1e-6;

/// Softmax outputs of `n` experts for one image, one row per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    experts: usize,
    classes: usize,
    data: Vec<f64>,
}

impl EnsembleOutput {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least two experts, got {}",
                rows.len()
            )));
        }
        let classes = rows[0].len();
        if classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("expert rows disagree on the class count".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            let sum: f64 = r.iter().sum();
            if r.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a probability distribution (sum {sum})"
                )));
            }
        }
        Ok(Self {
            experts: rows.len(),
            classes,
            data: rows.concat(),
        })
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.classes)
    }
}

/// A point of the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        check_simplex(&w)?;
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn vertex(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Largest minus smallest weight.
    pub fn spread(&self) -> f64 {
        let max = self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.0.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.is_empty() || w.iter().any(|&x| !(x >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL
    {
        return Err(Error::InvalidArgument(format!(
            "weights {w:?} are not on the probability simplex"
        )));
    }
    Ok(())
}

/// Per-image ensemble outputs of `experts` on a batch of raw images.
pub fn ensemble_outputs(experts: &[&ExpertModel], batch: &Tensor) -> Result<Vec<EnsembleOutput>> {
    let probs = expert_probabilities(experts, batch)?;
    (0..batch.batch())
        .map(|b| {
            EnsembleOutput::new(
                probs
                    .iter()
                    .map(|p| p.sample(b).iter().map(|&x| x as f64).collect())
                    .collect(),
            )
        })
        .collect()
}

fn expert_probabilities(experts: &[&ExpertModel], batch: &Tensor) -> Result<Vec<Tensor>> {
    let Some(first) = experts.first() else {
        return Err(Error::InvalidArgument("no experts given".into()));
    };
    if let Some(e) = experts.iter().find(|e| e.num_classes() != first.num_classes()) {
        return Err(Error::Shape(format!(
            "experts predict {} and {} classes",
            first.num_classes(),
            e.num_classes()
        )));
    }
    experts.iter().map(|e| e.predict(batch)).collect()
}

/// Mean of the expert rows.
pub fn average_ensemble(p: &EnsembleOutput) -> Vec<f64> {
    let n = p.experts() as f64;
    let mut out = vec![0.0; p.classes()];
    for row in p.rows() {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Class of the single largest entry of `p`. Ties go to the lowest class,
/// then the lowest expert.
pub fn max_ensemble(p: &EnsembleOutput) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for j in 0..p.classes() {
        for row in p.rows() {
            if row[j] > best.0 {
                best = (row[j], j);
            }
        }
    }
    best.1
}

/// `w^T P`.
pub fn weighted_mixture(p: &EnsembleOutput, w: &[f64]) -> Result<Vec<f64>> {
    check_weights(p, w)?;
    let mut out = vec![0.0; p.classes()];
    for (row, &wi) in p.rows().zip(w) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// The row of the expert with the largest weight; ties go to the lowest index.
pub fn hard_mixture(p: &EnsembleOutput, w: &[f64]) -> Result<Vec<f64>> {
    check_weights(p, w)?;
    Ok(p.row(argmax(w)).to_vec())
}

fn check_weights(p: &EnsembleOutput, w: &[f64]) -> Result<()> {
    if w.len() != p.experts() {
        return Err(Error::Shape(format!(
            "{} weights for {} experts",
            w.len(),
            p.experts()
        )));
    }
    check_simplex(w)
}

/// How an ensemble turns expert outputs into a class.
#[derive(Clone, Copy, Debug)]
pub enum Combiner<'a> {
    Average,
    Max,
    HardMix(&'a GatingNetwork),
    Mix(&'a GatingNetwork),
}

/// A classifier over an ordered set of experts.
pub struct Ensemble<'a> {
    pub experts: Vec<&'a ExpertModel>,
    pub combiner: Combiner<'a>,
}

impl Ensemble<'_> {
    /// Combined class probabilities per image (for `Max`, a one-hot row).
    pub fn probabilities(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let outputs = ensemble_outputs(&self.experts, batch)?;
        let gates = match self.combiner {
            Combiner::HardMix(g) | Combiner::Mix(g) => Some(gate_weights(g, batch)?),
            _ => None,
        };
        outputs
            .iter()
            .enumerate()
            .map(|(i, p)| match self.combiner {
                Combiner::Average => Ok(average_ensemble(p)),
                Combiner::Max => {
                    let mut row = vec![0.0; p.classes()];
                    row[max_ensemble(p)] = 1.0;
                    Ok(row)
                }
                Combiner::HardMix(_) => hard_mixture(p, gates.as_ref().unwrap()[i].as_slice()),
                Combiner::Mix(_) => weighted_mixture(p, gates.as_ref().unwrap()[i].as_slice()),
            })
            .collect()
    }
}

impl Classifier for Ensemble<'_> {
    fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self.probabilities(images)?.iter().map(|p| argmax(p)).collect())
    }
}
