use std::fs;
use std::path::Path;

use super::{ensemble_outputs, solve_optimal_weights, SolverOptions, WeightVector};
use crate::data::Dataset;
use crate::distortions::{DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::eval::{check_levels, distorted_level, finish, EvalGrid};
use crate::experts::ExpertModel;

/// Optimal simplex weights per (distortion kind, grid level).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalWeightTable {
    expert_names: Vec<String>,
    kinds: Vec<KindColumn>,
}

#[derive(Clone, Debug, PartialEq)]
struct KindColumn {
    kind: DistortionKind,
    levels: Vec<f64>,
    weights: Vec<WeightVector>,
}

impl OptimalWeightTable {
    /// `entries` holds, per kind, `(level, weights)` in ascending level order
    /// starting at 0.
    pub fn new(
        expert_names: Vec<String>,
        entries: Vec<(DistortionKind, Vec<(f64, WeightVector)>)>,
    ) -> Result<Self> {
        if expert_names.len() < 2 {
            return Err(Error::InvalidArgument("a weight table needs two experts".into()));
        }
        if entries.is_empty() {
            return Err(Error::InvalidArgument("a weight table needs a distortion kind".into()));
        }
        let mut kinds = Vec::with_capacity(entries.len());
        for (kind, rows) in entries {
            if kind == DistortionKind::Clean || kinds.iter().any(|c: &KindColumn| c.kind == kind) {
                return Err(Error::InvalidArgument(format!(
                    "kind {kind} cannot head a weight-table column"
                )));
            }
            let (levels, weights): (Vec<f64>, Vec<WeightVector>) = rows.into_iter().unzip();
            check_levels(&levels)?;
            if let Some(w) = weights.iter().find(|w| w.len() != expert_names.len()) {
                return Err(Error::Shape(format!(
                    "weight vector {:?} has the wrong length for {} experts",
                    w.as_slice(),
                    expert_names.len()
                )));
            }
            kinds.push(KindColumn {
                kind,
                levels,
                weights,
            });
        }
        let zero = &kinds[0].weights[0];
        if kinds.iter().any(|c| &c.weights[0] != zero) {
            return Err(Error::InvalidArgument(
                "level-0 weights differ between distortion kinds".into(),
            ));
        }
        Ok(Self {
            expert_names,
            kinds,
        })
    }

    pub fn expert_names(&self) -> &[String] {
        &self.expert_names
    }

    pub fn kinds(&self) -> Vec<DistortionKind> {
        self.kinds.iter().map(|c| c.kind).collect()
    }

    fn column(&self, kind: DistortionKind) -> Result<&KindColumn> {
        self.kinds
            .iter()
            .find(|c| c.kind == kind)
            .ok_or_else(|| Error::InvalidArgument(format!("no {kind} column in the weight table")))
    }

    pub fn levels(&self, kind: DistortionKind) -> Result<&[f64]> {
        Ok(&self.column(kind)?.levels)
    }

    /// Weights stored at grid point `index` of `kind`.
    pub fn weights(&self, kind: DistortionKind, index: usize) -> Result<&WeightVector> {
        let c = self.column(kind)?;
        c.weights.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("{kind} grid has no level index {index}"))
        })
    }

    /// Weights for a continuous distortion level: linear interpolation between
    /// the neighbouring grid points, renormalized onto the simplex.
    pub fn target(&self, spec: DistortionSpec) -> Result<WeightVector> {
        if spec.kind == DistortionKind::Clean {
            return Ok(self.kinds[0].weights[0].clone());
        }
        let c = self.column(spec.kind)?;
        let max = *c.levels.last().expect("grids are nonempty");
        let v = spec.level;
        if !(0.0..=max).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "{} level {v} lies outside the table grid [0, {max}]",
                spec.kind
            )));
        }
        let hi = c.levels.partition_point(|&l| l < v);
        if hi == 0 || c.levels[hi] == v {
            return Ok(c.weights[hi].clone());
        }
        let (l0, l1) = (c.levels[hi - 1], c.levels[hi]);
        let t = (v - l0) / (l1 - l0);
        let w: Vec<f64> = c.weights[hi - 1]
            .as_slice()
            .iter()
            .zip(c.weights[hi].as_slice())
            .map(|(a, b)| ((1.0 - t) * a + t * b).max(0.0))
            .collect();
        let s: f64 = w.iter().sum();
        WeightVector::new(w.into_iter().map(|x| x / s).collect())
    }

    /// `kind,level,w_<expert>...`; numbers are written in shortest round-trip
    /// form so reading the file back is exact.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["kind".to_string(), "level".to_string()];
        header.extend(self.expert_names.iter().map(|n| format!("w_{n}")));
        w.write_record(&header)?;
        for c in &self.kinds {
            for (level, weights) in c.levels.iter().zip(&c.weights) {
                let mut rec = vec![c.kind.to_string(), level.to_string()];
                rec.extend(weights.as_slice().iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
        }
        finish(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "kind" || &header[1] != "level" {
            return Err(Error::config(
                "weights",
                "header must be kind,level,w_<expert>,...",
            ));
        }
        let names: Vec<String> = header
            .iter()
            .skip(2)
            .map(|h| {
                h.strip_prefix("w_")
                    .map(str::to_string)
                    .ok_or_else(|| Error::config("weights", format!("column {h} lacks the w_ prefix")))
            })
            .collect::<Result<_>>()?;
        let mut entries: Vec<(DistortionKind, Vec<(f64, WeightVector)>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let kind: DistortionKind = rec[0].parse()?;
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::config("weights", format!("{s:?} is not a number")))
            };
            let level = num(&rec[1])?;
            let w = rec.iter().skip(2).map(num).collect::<Result<Vec<_>>>()?;
            let w = WeightVector::new(w)?;
            match entries.iter_mut().find(|(k, _)| *k == kind) {
                Some((_, rows)) => rows.push((level, w)),
                None => entries.push((kind, vec![(level, w)])),
            }
        }
        Self::new(names, entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Solves for the optimal weights at every grid point of `grid`, distorting
/// the whole validation set once per point with a seed fixed by
/// `(seed, kind, level index)`.
pub fn build_weight_table(
    experts: &[&ExpertModel],
    val: &Dataset,
    grid: &EvalGrid,
    seed: u64,
    options: &SolverOptions,
) -> Result<OptimalWeightTable> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let names = experts
        .iter()
        .map(|e| e.specialization.as_str().to_string())
        .collect();
    let solve = |images| -> Result<WeightVector> {
        let outputs = ensemble_outputs(experts, &images)?;
        Ok(solve_optimal_weights(&outputs, &val.labels, options)?.weights)
    };
    let clean = solve(val.images.clone())?;
    let mut entries = Vec::new();
    for kind in [DistortionKind::Noise, DistortionKind::Blur] {
        let levels = grid.levels(kind);
        check_levels(levels)?;
        let mut rows = vec![(0.0, clean.clone())];
        for (i, &level) in levels.iter().enumerate().skip(1) {
            rows.push((level, solve(distorted_level(val, kind, level, i, seed)?)?));
        }
        entries.push((kind, rows));
    }
    OptimalWeightTable::new(names, entries)
}
