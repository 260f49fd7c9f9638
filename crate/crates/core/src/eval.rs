//! Distortion-accuracy curves, normalized AUC and the CSV reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distortions::{distort_all, DistortionKind, DistortionRanges, DistortionSpec};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed::{derive_seed, mix};

/// Anything that labels raw-intensity `(N, C, H, W)` images.
pub trait Classifier {
    fn classify(&self, images: &Tensor) -> Result<Vec<usize>>;
}

impl<F> Classifier for F
where
    F: Fn(&Tensor) -> Result<Vec<usize>>,
{
    fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        self(images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub kind: DistortionKind,
    pub levels: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// `count` evenly spaced levels from 0 to `max` inclusive.
pub fn level_grid(max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count)
            .map(|i| max * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Evaluation levels per distortion kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub noise: Vec<f64>,
    pub blur: Vec<f64>,
}

impl EvalGrid {
    pub fn uniform(ranges: &DistortionRanges, count: usize) -> Self {
        Self {
            noise: level_grid(ranges.noise_max, count),
            blur: level_grid(ranges.blur_max, count),
        }
    }

    pub fn levels(&self, kind: DistortionKind) -> &[f64] {
        match kind {
            DistortionKind::Noise => &self.noise,
            DistortionKind::Blur => &self.blur,
            DistortionKind::Clean => &[0.0],
        }
    }
}

pub(crate) fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.first() != Some(&0.0) {
        return Err(Error::InvalidArgument("levels must start at 0".into()));
    }
    if levels.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "levels must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// The test images distorted to level `levels[index]` of `kind`. The seed
/// depends only on `(seed, kind, index)`, so every model sees the same inputs.
pub(crate) fn distorted_level(
    test: &Dataset,
    kind: DistortionKind,
    level: f64,
    index: usize,
    seed: u64,
) -> Result<Tensor> {
    let spec = DistortionSpec::new(kind, level)?;
    let s = mix(derive_seed(seed, kind.as_str()), index as u64);
    distort_all(&test.images, spec, s)
}

fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!(
            "classifier returned {} labels for {} images",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy_curve(
    classifier: &dyn Classifier,
    test: &Dataset,
    kind: DistortionKind,
    levels: &[f64],
    seed: u64,
) -> Result<AccuracyCurve> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    check_levels(levels)?;
    let mut accuracies = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        let images = distorted_level(test, kind, level, i, seed)?;
        accuracies.push(accuracy(&classifier.classify(&images)?, &test.labels)?);
    }
    Ok(AccuracyCurve {
        kind,
        levels: levels.to_vec(),
        accuracies,
    })
}

/// Trapezoidal area under accuracy-vs-level divided by the level span, so a
/// classifier that is always right scores 1.
pub fn normalized_auc(curve: &AccuracyCurve) -> Result<f64> {
    let (levels, acc) = (&curve.levels, &curve.accuracies);
    if levels.len() < 2 || levels.len() != acc.len() {
        return Err(Error::InvalidArgument(format!(
            "AUC needs at least two points with matching accuracies, got {} levels / {} accuracies",
            levels.len(),
            acc.len()
        )));
    }
    let span = levels[levels.len() - 1] - levels[0];
    if !(span > 0.0) {
        return Err(Error::InvalidArgument("levels span no range".into()));
    }
    // Integrate deviations from the first accuracy so a flat curve comes back
    // exactly rather than off by rounding in the width sum.
    let base = acc[0];
    let area: f64 = levels
        .windows(2)
        .zip(acc.windows(2))
        .map(|(l, a)| (l[1] - l[0]) * ((a[0] - base) + (a[1] - base)) / 2.0)
        .sum();
    Ok(base + area / span)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub model: String,
    pub noise_auc: f64,
    pub blur_auc: f64,
    pub avg_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub rows: Vec<AucRow>,
    /// `(model, curve)` for every model and distortion kind.
    pub curves: Vec<(String, AccuracyCurve)>,
}

impl AucReport {
    pub fn row(&self, model: &str) -> Option<&AucRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn curve(&self, model: &str, kind: DistortionKind) -> Option<&AccuracyCurve> {
        self.curves
            .iter()
            .find(|(m, c)| m == model && c.kind == kind)
            .map(|(_, c)| c)
    }

    /// `model,noise_auc,blur_auc,avg_auc`
    pub fn report_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "noise_auc", "blur_auc", "avg_auc"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                format!("{:.6}", r.noise_auc),
                format!("{:.6}", r.blur_auc),
                format!("{:.6}", r.avg_auc),
            ])?;
        }
        finish(w)
    }

    /// `model,kind,level,accuracy`
    pub fn curves_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "kind", "level", "accuracy"])?;
        for (model, c) in &self.curves {
            for (l, a) in c.levels.iter().zip(&c.accuracies) {
                w.write_record([
                    model.clone(),
                    c.kind.to_string(),
                    format!("{l:.6}"),
                    format!("{a:.6}"),
                ])?;
            }
        }
        finish(w)
    }

    /// Writes `report.csv` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.report_csv()?),
            ("curves.csv", self.curves_csv()?),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub(crate) fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Evaluates every model on noise and blur at every grid level. Each level is
/// distorted once and shared by all models.
pub fn full_report(
    models: &[(&str, &dyn Classifier)],
    test: &Dataset,
    grid: &EvalGrid,
    seed: u64,
) -> Result<AucReport> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to evaluate".into()));
    }
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let kinds = [DistortionKind::Noise, DistortionKind::Blur];
    let mut acc: Vec<[Vec<f64>; 2]> = vec![[Vec::new(), Vec::new()]; models.len()];
    for (k, &kind) in kinds.iter().enumerate() {
        let levels = grid.levels(kind);
        check_levels(levels)?;
        for (i, &level) in levels.iter().enumerate() {
            let images = distorted_level(test, kind, level, i, seed)?;
            for (m, (_, model)) in models.iter().enumerate() {
                acc[m][k].push(accuracy(&model.classify(&images)?, &test.labels)?);
            }
        }
    }
    let mut rows = Vec::with_capacity(models.len());
    let mut curves = Vec::with_capacity(2 * models.len());
    for ((name, _), [noise, blur]) in models.iter().zip(acc) {
        let noise = AccuracyCurve {
            kind: DistortionKind::Noise,
            levels: grid.noise.clone(),
            accuracies: noise,
        };
        let blur = AccuracyCurve {
            kind: DistortionKind::Blur,
            levels: grid.blur.clone(),
            accuracies: blur,
        };
        let (noise_auc, blur_auc) = (normalized_auc(&noise)?, normalized_auc(&blur)?);
        rows.push(AucRow {
            model: name.to_string(),
            noise_auc,
            blur_auc,
            avg_auc: (noise_auc + blur_auc) / 2.0,
        });
        curves.push((name.to_string(), noise));
        curves.push((name.to_string(), blur));
    }
    Ok(AucReport { rows, curves })
}
