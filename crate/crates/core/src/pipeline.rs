//! The experiment stages behind the command-line subcommands.
//!
//! Artifacts live under the configured output directory:
//!
//! ```text
//! data/images.idx, data/labels.idx     synth-data
//! experts/{clean,noise,blur,all}.rmoe  train-expert
//! weights.csv                          build-weights
//! gate.rmoe                            train-gate
//! trees/<direction>-<layer>.rmoe       build-tree
//! tree_report.csv                      build-tree
//! report.csv, curves.csv               evaluate
//! visualize/<expert>-<layer>-<unit>.pgm and .csv
//! ```
//!
//! Every stage seed is derived from the master seed and a fixed role name.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_expert, load_gate, save_checkpoint, Model};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_idx, split, synth_dataset, write_idx, Dataset, SplitSpec, Splits};
use crate::error::{Error, Result};
use crate::eval::{accuracy_curve, full_report, AucReport, Classifier, EvalGrid};
use crate::experts::{
    train_expert, visualize_neuron, ExpertModel, Specialization, Visualization, VisualizeConfig,
};
use crate::mixture::{
    build_weight_table, train_gating, Combiner, Ensemble, GatingNetwork, GatingTrainConfig,
    OptimalWeightTable, SolverOptions,
};
use crate::distortions::{BatchPolicy, DistortionKind};
use crate::nn::Tensor;
use crate::seed::derive_seed;
use crate::tree::{make_tree, train_branches, tree_report_csv, BranchPoint, GatedTree, TreeEnsemble, TreeRow};

/// Names used in `report.csv`, in row order.
pub const MODEL_NAMES: [&str; 8] = [
    "M_clean",
    "M_noise",
    "M_blur",
    "M_all",
    "M_avg",
    "M_max",
    "M_hardmix",
    "M_mix",
];

pub struct Pipeline {
    pub config: ExperimentConfig,
    hash: String,
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self { config, hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn seed(&self, role: &str) -> u64 {
        derive_seed(self.config.seed, role)
    }

    fn out(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.config.output_dir.join(rel)
    }

    pub fn expert_path(&self, s: Specialization) -> PathBuf {
        self.out(format!("experts/{s}.rmoe"))
    }

    pub fn weights_path(&self) -> PathBuf {
        self.out("weights.csv")
    }

    pub fn gate_path(&self) -> PathBuf {
        self.out("gate.rmoe")
    }

    pub fn tree_path(&self, bp: &BranchPoint) -> PathBuf {
        self.out(format!("trees/{}-{}.rmoe", bp.direction, bp.layer))
    }

    pub fn tree_report_path(&self) -> PathBuf {
        self.out("tree_report.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out("report.csv")
    }

    pub fn synth_paths(&self) -> (PathBuf, PathBuf) {
        (self.out("data/images.idx"), self.out("data/labels.idx"))
    }

    fn grid(&self) -> EvalGrid {
        self.config.distortions.grid()
    }

    /// The synthetic dataset described by `[data.synth]`, whatever the source.
    pub fn synth(&self) -> Result<Dataset> {
        let s = &self.config.data.synth;
        synth_dataset(s.classes, s.per_class, s.size, self.seed("data/synth"))
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match self.config.data.source {
            DataSource::Synth => self.synth(),
            DataSource::Idx => {
                let idx = self.config.data.idx.as_ref().expect("validated config has idx paths");
                load_idx(&idx.images, &idx.labels)
            }
        }
    }

    pub fn splits(&self) -> Result<Splits> {
        let f = &self.config.data.split;
        split(
            &self.dataset()?,
            &SplitSpec {
                train: f.train,
                val: f.val,
                test: f.test,
                seed: self.seed("data/split"),
            },
        )
    }

    /// Writes the synthetic dataset as IDX files.
    pub fn synth_data(&self) -> Result<(Dataset, PathBuf, PathBuf)> {
        let ds = self.synth()?;
        let (images, labels) = self.synth_paths();
        if let Some(dir) = images.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_idx(&ds, &images, &labels)?;
        Ok((ds, images, labels))
    }

    /// Trains one expert and saves it. The clean expert starts from scratch;
    /// the others fine-tune the saved clean expert.
    pub fn train_expert(&self, s: Specialization, splits: &Splits) -> Result<ExpertModel> {
        let init = match s {
            Specialization::Clean => ExpertModel::initial(&splits.train, self.seed("init/expert"))?,
            _ => load_expert(&self.expert_path(Specialization::Clean))?,
        };
        let policy = s.policy(self.config.distortions.ranges());
        let config = self
            .config
            .experts
            .with_seed(self.seed(&format!("train/expert/{s}")));
        let mut model = train_expert(&splits.train, &splits.val, &policy, &config, &init)?;
        if let Some(p) = model.provenance.as_mut() {
            p.config_hash = self.hash.clone();
        }
        save_checkpoint(&Model::Expert(model.clone()), &self.expert_path(s))?;
        Ok(model)
    }

    fn ensemble_experts(&self) -> Result<Vec<ExpertModel>> {
        Specialization::ENSEMBLE
            .iter()
            .map(|&s| load_expert(&self.expert_path(s)))
            .collect()
    }

    pub fn build_weights(&self, splits: &Splits) -> Result<OptimalWeightTable> {
        let experts = self.ensemble_experts()?;
        let refs: Vec<&ExpertModel> = experts.iter().collect();
        let table = build_weight_table(
            &refs,
            &splits.val,
            &self.grid(),
            self.seed("weights"),
            &SolverOptions::default(),
        )?;
        table.write(&self.weights_path())?;
        Ok(table)
    }

    pub fn gate_config(&self) -> GatingTrainConfig {
        GatingTrainConfig {
            lambda: self.config.gate.lambda,
            policy: BatchPolicy::mixed(self.config.distortions.ranges()),
            train: self.config.gate.train.with_seed(self.seed("train/gate")),
        }
    }

    pub fn train_gate(&self, splits: &Splits) -> Result<GatingNetwork> {
        let table = OptimalWeightTable::read(&self.weights_path())?;
        let init = GatingNetwork::initial(
            table.expert_names().len(),
            &splits.train,
            self.seed("init/gate"),
        )?;
        let gate = train_gating(&splits.train, &splits.val, &table, &self.gate_config(), &init)?;
        save_checkpoint(&Model::Gate(gate.clone()), &self.gate_path())?;
        Ok(gate)
    }

    /// Builds, trains and evaluates one tree per branch point, saving each
    /// tree and the parameter-count report. The trees reuse the mixture gate.
    pub fn build_trees(&self, points: &[BranchPoint], splits: &Splits) -> Result<Vec<TreeRow>> {
        let clean = load_expert(&self.expert_path(Specialization::Clean))?;
        let gate = load_gate(&self.gate_path())?;
        let ranges = self.config.distortions.ranges();
        let policies: Vec<BatchPolicy> =
            Specialization::ENSEMBLE.iter().map(|s| s.policy(ranges)).collect();
        let mut rows = Vec::with_capacity(points.len());
        for bp in points {
            let config = self.config.experts.with_seed(self.seed(&format!("train/tree/{bp}")));
            let tree = make_tree(&clean, bp, &Specialization::ENSEMBLE)?;
            let tree = train_branches(&tree, &splits.train, &splits.val, &policies, &config)?;
            save_checkpoint(&Model::Tree(tree.clone()), &self.tree_path(bp))?;
            rows.push(self.tree_row(&tree, &gate, &splits.test)?);
        }
        write_file(&self.tree_report_path(), tree_report_csv(&rows)?.as_bytes())?;
        Ok(rows)
    }

    fn tree_row(&self, tree: &TreeEnsemble, gate: &GatingNetwork, test: &Dataset) -> Result<TreeRow> {
        let name = tree.branch_point.to_string();
        let model = GatedTree { tree, gate };
        let report = full_report(&[(&name, &model)], test, &self.grid(), self.seed("eval"))?;
        let r = &report.rows[0];
        Ok(TreeRow {
            branch_point: tree.branch_point.layer.clone(),
            direction: tree.branch_point.direction,
            unique_params: tree.unique_params(Some(gate)),
            auc_noise: r.noise_auc,
            auc_blur: r.blur_auc,
            auc_avg: r.avg_auc,
        })
    }

    /// Evaluates the four experts, the three baselines and the mixture on the
    /// test split and writes `report.csv` and `curves.csv`.
    pub fn evaluate(&self, splits: &Splits) -> Result<AucReport> {
        let experts = self.ensemble_experts()?;
        let all = load_expert(&self.expert_path(Specialization::All))?;
        let gate = load_gate(&self.gate_path())?;
        let members: Vec<&ExpertModel> = experts.iter().collect();
        let ensemble = |combiner| Ensemble {
            experts: members.clone(),
            combiner,
        };
        let (avg, max) = (ensemble(Combiner::Average), ensemble(Combiner::Max));
        let (hard, mix) = (ensemble(Combiner::HardMix(&gate)), ensemble(Combiner::Mix(&gate)));
        let models: [&dyn Classifier; 8] =
            [&experts[0], &experts[1], &experts[2], &all, &avg, &max, &hard, &mix];
        let named: Vec<(&str, &dyn Classifier)> = MODEL_NAMES.iter().copied().zip(models).collect();
        let report = full_report(&named, &splits.test, &self.grid(), self.seed("eval"))?;
        report.write(&self.config.output_dir)?;
        Ok(report)
    }

    /// Activation maximization for one unit of a saved expert. Writes the
    /// image as binary PGM (PPM for three channels) and the activation
    /// trajectory as CSV; returns both paths with the result.
    pub fn visualize(
        &self,
        s: Specialization,
        layer: &str,
        unit: usize,
        steps: usize,
        step_size: f64,
    ) -> Result<(Visualization, PathBuf, PathBuf)> {
        let model = load_expert(&self.expert_path(s))?;
        let config = VisualizeConfig {
            steps,
            step_size,
            seed: self.seed(&format!("visualize/{s}/{layer}/{unit}")),
            ..VisualizeConfig::default()
        };
        let vis = visualize_neuron(&model, layer, unit, &config)?;
        let stem = format!("visualize/{s}-{layer}-{unit}");
        let ext = if vis.image.shape()[0] == 3 { "ppm" } else { "pgm" };
        let image_path = self.out(format!("{stem}.{ext}"));
        write_file(&image_path, &netpbm(&vis.image)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "activation"])?;
        for (i, a) in vis.trajectory.iter().enumerate() {
            w.write_record([i.to_string(), format!("{a:.6}")])?;
        }
        let body = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv flush failed: {e}")))?;
        let traj_path = self.out(format!("{stem}.csv"));
        write_file(&traj_path, &body)?;
        Ok((vis, image_path, traj_path))
    }

    /// Every stage after data preparation, in order. Returns the evaluation
    /// report and the tree rows.
    pub fn run_all(&self, mut log: impl FnMut(&str)) -> Result<(AucReport, Vec<TreeRow>)> {
        let splits = self.splits()?;
        for s in [
            Specialization::Clean,
            Specialization::Noise,
            Specialization::Blur,
            Specialization::All,
        ] {
            let m = self.train_expert(s, &splits)?;
            log(&format!("expert {s}: clean test accuracy {:.4}", clean_accuracy(&m, &splits.test)?));
        }
        self.build_weights(&splits)?;
        log("weights built");
        self.train_gate(&splits)?;
        log("gate trained");
        let rows = self.build_trees(&self.config.tree.parsed()?, &splits)?;
        log(&format!("{} trees built", rows.len()));
        let report = self.evaluate(&splits)?;
        log("evaluation written");
        Ok((report, rows))
    }
}

/// Accuracy on undistorted images.
pub fn clean_accuracy(model: &dyn Classifier, test: &Dataset) -> Result<f64> {
    let curve = accuracy_curve(model, test, DistortionKind::Noise, &[0.0, 1.0], 0)?;
    Ok(curve.accuracies[0])
}

/// Binary PGM (one channel) or PPM (three channels) from a `(C, H, W)` image
/// in `[0, 255]`.
pub fn netpbm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    let (c, h, w) = match s {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "netpbm needs a (1|3, H, W) image, got {s:?}"
            )))
        }
    };
    let mut out = Vec::with_capacity(20 + c * h * w);
    let magic = if c == 1 { "P5" } else { "P6" };
    write!(out, "{magic}\n{w} {h}\n255\n").expect("writing to a Vec");
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..c {
            out.push(image.data()[ch * plane + p].round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn netpbm_header_and_layout() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 255.0]).unwrap();
        let b = netpbm(&img).unwrap();
        assert_eq!(&b[..11], b"P5\n3 2\n255\n");
        assert_eq!(&b[11..], &[0, 1, 2, 3, 4, 255]);
        let rgb = Tensor::new(vec![3, 1, 1], vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(netpbm(&rgb).unwrap(), b"P6\n1 1\n255\n\x0a\x14\x1e");
        assert!(netpbm(&Tensor::zeros(vec![2, 1, 1])).is_err());
    }
}
