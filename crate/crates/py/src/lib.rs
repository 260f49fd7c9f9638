//! Python bindings. Images cross the boundary as a flat list of intensities
//! in `[0, 255]` plus an `(n, c, h, w)` shape tuple.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rmoe::checkpoint::{load_expert, load_gate, save_checkpoint, Model};
use rmoe::config::ExperimentConfig;
use rmoe::distortions::{distort_all, DistortionKind, DistortionSpec};
use rmoe::eval::{normalized_auc as auc, AccuracyCurve, Classifier};
use rmoe::experts::ExpertModel;
use rmoe::mixture::{
    gate_weights, project_to_simplex as project, solve_optimal_weights as solve, Combiner,
    Ensemble, EnsembleOutput, GatingNetwork, OptimalWeightTable, SolverOptions,
};
use rmoe::nn::Tensor;
use rmoe::pipeline::Pipeline as RPipeline;

type Shape = (usize, usize, usize, usize);

fn py_err(e: rmoe::Error) -> PyErr {
    match e {
        rmoe::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn batch(images: Vec<f32>, (n, c, h, w): Shape) -> PyResult<Tensor> {
    Tensor::new(vec![n, c, h, w], images).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    t.data().chunks(t.sample_len()).map(<[f32]>::to_vec).collect()
}

fn kind(name: &str) -> PyResult<DistortionKind> {
    name.parse().map_err(py_err)
}

/// A trained expert network.
#[pyclass(frozen)]
struct Expert(ExpertModel);

#[pymethods]
impl Expert {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_expert(&path).map(Expert).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&Model::Expert(self.0.clone()), &path).map_err(py_err)
    }

    #[getter]
    fn specialization(&self) -> &'static str {
        self.0.specialization.as_str()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.network.param_count()
    }

    /// Softmax probabilities, one row per image.
    fn predict(&self, images: Vec<f32>, shape: Shape) -> PyResult<Vec<Vec<f32>>> {
        let p = self.0.predict(&batch(images, shape)?).map_err(py_err)?;
        Ok(rows(&p))
    }

    fn classify(&self, images: Vec<f32>, shape: Shape) -> PyResult<Vec<usize>> {
        self.0.classify(&batch(images, shape)?).map_err(py_err)
    }
}

/// A trained gating network.
#[pyclass(frozen)]
struct Gate(GatingNetwork);

#[pymethods]
impl Gate {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_gate(&path).map(Gate).map_err(py_err)
    }

    #[getter]
    fn num_experts(&self) -> usize {
        self.0.num_experts()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.network.param_count()
    }

    /// Mixture weights, one simplex point per image.
    fn weights(&self, images: Vec<f32>, shape: Shape) -> PyResult<Vec<Vec<f64>>> {
        let w = gate_weights(&self.0, &batch(images, shape)?).map_err(py_err)?;
        Ok(w.into_iter().map(|v| v.as_slice().to_vec()).collect())
    }
}

/// Experts combined by a gate, or by averaging when no gate is given.
#[pyclass(frozen)]
struct Mixture {
    experts: Vec<ExpertModel>,
    gate: Option<GatingNetwork>,
}

#[pymethods]
impl Mixture {
    #[new]
    #[pyo3(signature = (experts, gate=None))]
    fn new(experts: Vec<PyRef<'_, Expert>>, gate: Option<PyRef<'_, Gate>>) -> Self {
        Self {
            experts: experts.iter().map(|e| e.0.clone()).collect(),
            gate: gate.map(|g| g.0.clone()),
        }
    }

    fn predict(&self, images: Vec<f32>, shape: Shape) -> PyResult<Vec<Vec<f64>>> {
        let combiner = match &self.gate {
            Some(g) => Combiner::Mix(g),
            None => Combiner::Average,
        };
        let ensemble = Ensemble {
            experts: self.experts.iter().collect(),
            combiner,
        };
        ensemble.probabilities(&batch(images, shape)?).map_err(py_err)
    }
}

/// Optimal weights per distortion level, as written by `build-weights`.
#[pyclass(frozen)]
struct WeightTable(OptimalWeightTable);

#[pymethods]
impl WeightTable {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        OptimalWeightTable::read(&path).map(WeightTable).map_err(py_err)
    }

    #[getter]
    fn expert_names(&self) -> Vec<String> {
        self.0.expert_names().to_vec()
    }

    /// Interpolated weights for a distortion kind and level.
    fn target(&self, kind_name: &str, level: f64) -> PyResult<Vec<f64>> {
        let spec = DistortionSpec::new(kind(kind_name)?, level).map_err(py_err)?;
        Ok(self.0.target(spec).map_err(py_err)?.as_slice().to_vec())
    }
}

/// Experiment configuration; `overrides` are `key=value` strings.
#[pyclass(frozen)]
struct Config(ExperimentConfig);

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (path=None, overrides=Vec::new()))]
    fn new(path: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        ExperimentConfig::load(path.as_deref(), &overrides)
            .map(Config)
            .map_err(py_err)
    }

    #[getter]
    fn hash(&self) -> String {
        self.0.hash()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.0.output_dir.clone()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml().map_err(py_err)
    }
}

/// The experiment stages of the command-line tool.
#[pyclass(frozen)]
struct Pipeline(RPipeline);

#[pymethods]
impl Pipeline {
    #[new]
    fn new(config: PyRef<'_, Config>) -> PyResult<Self> {
        RPipeline::new(config.0.clone()).map(Pipeline).map_err(py_err)
    }

    fn synth_data(&self) -> PyResult<(PathBuf, PathBuf)> {
        let (_, images, labels) = self.0.synth_data().map_err(py_err)?;
        Ok((images, labels))
    }

    /// Runs every training and evaluation stage. Returns the report rows as
    /// `(model, noise_auc, blur_auc, avg_auc)`.
    fn run_all(&self, py: Python<'_>) -> PyResult<Vec<(String, f64, f64, f64)>> {
        let (report, _) = py
            .detach(|| self.0.run_all(|_| {}))
            .map_err(py_err)?;
        Ok(report
            .rows
            .into_iter()
            .map(|r| (r.model, r.noise_auc, r.blur_auc, r.avg_auc))
            .collect())
    }
}

/// `(images, (n, c, h, w), labels)` of the synthetic oriented-grating dataset.
#[pyfunction]
fn synth_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> PyResult<(Vec<f32>, Shape, Vec<usize>)> {
    let ds = rmoe::data::synth_dataset(classes, per_class, size, seed).map_err(py_err)?;
    let s = ds.images.shape();
    let shape = (s[0], s[1], s[2], s[3]);
    Ok((ds.images.into_data(), shape, ds.labels))
}

/// Applies `kind` ("clean", "noise" or "blur") at `level` to every image.
#[pyfunction]
fn distort(images: Vec<f32>, shape: Shape, kind_name: &str, level: f64, seed: u64) -> PyResult<Vec<f32>> {
    let spec = DistortionSpec::new(kind(kind_name)?, level).map_err(py_err)?;
    Ok(distort_all(&batch(images, shape)?, spec, seed).map_err(py_err)?.into_data())
}

#[pyfunction]
fn normalized_auc(levels: Vec<f64>, accuracies: Vec<f64>) -> PyResult<f64> {
    auc(&AccuracyCurve {
        kind: DistortionKind::Noise,
        levels,
        accuracies,
    })
    .map_err(py_err)
}

#[pyfunction]
fn project_to_simplex(v: Vec<f64>) -> Vec<f64> {
    project(&v).as_slice().to_vec()
}

/// Minimizes the mean cross-entropy of the weighted mixture. `samples[s][i]`
/// is expert `i`'s probability row for sample `s`. Returns
/// `(weights, objective)`.
#[pyfunction]
fn solve_optimal_weights(samples: Vec<Vec<Vec<f64>>>, labels: Vec<usize>) -> PyResult<(Vec<f64>, f64)> {
    let samples = samples
        .into_iter()
        .map(EnsembleOutput::new)
        .collect::<rmoe::Result<Vec<_>>>()
        .map_err(py_err)?;
    let sol = solve(&samples, &labels, &SolverOptions::default()).map_err(py_err)?;
    Ok((sol.weights.as_slice().to_vec(), sol.objective))
}

#[pyfunction]
fn derive_seed(master: u64, role: &str) -> u64 {
    rmoe::seed::derive_seed(master, role)
}

#[pymodule]
fn rmoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Expert>()?;
    m.add_class::<Gate>()?;
    m.add_class::<Mixture>()?;
    m.add_class::<WeightTable>()?;
    m.add_class::<Config>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(distort, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_auc, m)?)?;
    m.add_function(wrap_pyfunction!(project_to_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(solve_optimal_weights, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    Ok(())
}
