//! Experiment configuration: a TOML file plus command-line overrides.
//!
//! Every field has a default, so an empty file (or no file at all) describes
//! the desk-scale synthetic experiment. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/default"
//!
//! [data]
//! source = "synth"            # or "idx"
//! [data.synth]
//! classes = 4
//! per_class = 500
//! size = 32
//! [data.idx]                  # required when source = "idx"
//! images = "data/images.idx"
//! labels = "data/labels.idx"
//! [data.split]
//! train = 0.6
//! val = 0.2
//! test = 0.2
//!
//! [distortions]
//! noise_max = 100.0
//! blur_max = 4.0
//! levels = 11
//!
//! [experts]
//! max_epochs = 30
//! patience = 3
//! batch_size = 32
//! base_lr = 0.001
//! last_layer_lr = 0.01
//! momentum = 0.9
//!
//! [gate]
//! lambda = 0.01
//! [gate.train]
//! base_lr = 0.0001
//! last_layer_lr = 0.001
//!
//! [tree]
//! branch_points = ["inverted@FC6"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distortions::DistortionRanges;
use crate::error::{Error, Result};
use crate::eval::EvalGrid;
use crate::tree::BranchPoint;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub distortions: DistortionConfig,
    pub experts: TrainSettings,
    pub gate: GateConfig,
    pub tree: TreeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            distortions: DistortionConfig::default(),
            experts: TrainSettings::default(),
            gate: GateConfig::default(),
            tree: TreeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxPaths>,
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            synth: SynthConfig::default(),
            idx: None,
            split: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Side length in pixels; must be divisible by 8.
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 500,
            size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistortionConfig {
    pub noise_max: f64,
    pub blur_max: f64,
    /// Grid points per kind for the weight table and the evaluation curves,
    /// level 0 included.
    pub levels: usize,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        let r = DistortionRanges::default();
        Self {
            noise_max: r.noise_max,
            blur_max: r.blur_max,
            levels: 11,
        }
    }
}

impl DistortionConfig {
    pub fn ranges(&self) -> DistortionRanges {
        DistortionRanges {
            noise_max: self.noise_max,
            blur_max: self.blur_max,
        }
    }

    pub fn grid(&self) -> EvalGrid {
        EvalGrid::uniform(&self.ranges(), self.levels)
    }
}

/// [`TrainConfig`] without the seed, which the pipeline derives per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_layer_lr: Option<f64>,
    pub momentum: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainConfig::default().into()
    }
}

impl From<TrainConfig> for TrainSettings {
    fn from(c: TrainConfig) -> Self {
        Self {
            max_epochs: c.max_epochs,
            patience: c.patience,
            batch_size: c.batch_size,
            base_lr: c.base_lr,
            last_layer_lr: c.last_layer_lr,
            momentum: c.momentum,
        }
    }
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            last_layer_lr: self.last_layer_lr,
            momentum: self.momentum,
            seed,
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        self.with_seed(0).validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("{section}.{field}"), message),
            other => other,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub lambda: f64,
    pub train: TrainSettings,
}

impl Default for GateConfig {
    fn default() -> Self {
        let g = crate::mixture::GatingTrainConfig::default();
        Self {
            lambda: g.lambda,
            train: g.train.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    /// `direction@layer` entries, e.g. `inverted@FC6` or `tree@Conv3`.
    pub branch_points: Vec<String>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            branch_points: vec!["inverted@FC6".into()],
        }
    }
}

impl TreeConfig {
    pub fn parsed(&self) -> Result<Vec<BranchPoint>> {
        self.branch_points
            .iter()
            .map(|s| s.parse().map_err(|e: Error| Error::config("tree.branch_points", e.to_string())))
            .collect()
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses a TOML document without validating it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(parse_error)?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        value.try_into().map_err(parse_error)
    }

    /// Reads `path` (or the defaults when `None`), applies `key=value`
    /// overrides in order, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config("config", format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Value>(&text).map_err(parse_error)?
            }
            None => toml::Value::Table(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config = Self::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// SHA-256 (hex) of the canonical TOML form with the output directory
    /// blanked, so the same experiment hashes equally wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = c.to_toml().expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synth => {
                let s = &d.synth;
                if s.classes < 2 {
                    return Err(Error::config("data.synth.classes", "must be at least 2"));
                }
                if s.per_class < 5 {
                    return Err(Error::config("data.synth.per_class", "must be at least 5"));
                }
                if s.size < 8 || !s.size.is_multiple_of(8) {
                    return Err(Error::config(
                        "data.synth.size",
                        format!("must be a positive multiple of 8, got {}", s.size),
                    ));
                }
            }
            DataSource::Idx => {
                let idx = d.idx.as_ref().ok_or_else(|| {
                    Error::config("data.idx", "source = \"idx\" needs images and labels paths")
                })?;
                for (field, p) in [("data.idx.images", &idx.images), ("data.idx.labels", &idx.labels)] {
                    if !p.is_file() {
                        return Err(Error::config(field, format!("{} does not exist", p.display())));
                    }
                }
            }
        }
        let sp = &d.split;
        for (field, v) in [
            ("data.split.train", sp.train),
            ("data.split.val", sp.val),
            ("data.split.test", sp.test),
        ] {
            positive(field, v)?;
        }
        if sp.train + sp.val + sp.test > 1.0 + 1e-9 {
            return Err(Error::config("data.split", "fractions must sum to at most 1"));
        }
        positive("distortions.noise_max", self.distortions.noise_max)?;
        positive("distortions.blur_max", self.distortions.blur_max)?;
        if self.distortions.levels < 2 {
            return Err(Error::config("distortions.levels", "must be at least 2"));
        }
        self.experts.validate("experts")?;
        if !(self.gate.lambda >= 0.0 && self.gate.lambda.is_finite()) {
            return Err(Error::config(
                "gate.lambda",
                format!("must be finite and nonnegative, got {}", self.gate.lambda),
            ));
        }
        self.gate.train.validate("gate.train")?;
        self.tree.parsed()?;
        Ok(())
    }
}

fn parse_error(e: toml::de::Error) -> Error {
    // toml reports the offending key in its message; keep it verbatim.
    Error::config("config", e.message().trim().to_string())
}

/// Sets a dotted key such as `gate.lambda=0.05` inside a TOML table. The
/// value is parsed as TOML; anything that does not parse is taken as a bare
/// string, so `output_dir=runs/a` works without quotes.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(assignment, "override key is empty"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(key, "parent is not a table"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn empty_document_is_the_default() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = ExperimentConfig::load(
            None,
            &[
                "gate.lambda=0.5".into(),
                "output_dir=runs/x".into(),
                "tree.branch_points=[\"tree@FC7\", \"inverted@Conv3\"]".into(),
                "gate.lambda=0.25".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.gate.lambda, 0.25);
        assert_eq!(c.output_dir, PathBuf::from("runs/x"));
        assert_eq!(c.tree.parsed().unwrap().len(), 2);
    }

    #[test]
    fn malformed_fields_are_named() {
        let cases = [
            ("gate.lambda=-1", "gate.lambda"),
            ("distortions.noise_max=0", "distortions.noise_max"),
            ("distortions.blur_max=-2.0", "distortions.blur_max"),
            ("distortions.levels=1", "distortions.levels"),
            ("experts.batch_size=2", "experts.batch_size"),
            ("gate.train.momentum=1.5", "gate.train.momentum"),
            ("data.synth.size=30", "data.synth.size"),
            ("data.split.val=0", "data.split.val"),
            ("data.source=\"idx\"", "data.idx"),
            ("tree.branch_points=[\"tree@Pool1\"]", "tree.branch_points"),
            ("output_dir=\"\"", "output_dir"),
        ];
        for (o, field) in cases {
            let e = ExperimentConfig::load(None, &[o.to_string()]).unwrap_err();
            assert_eq!(field_of(e), field, "{o}");
        }
    }

    #[test]
    fn unknown_keys_and_missing_paths_are_rejected() {
        let e = ExperimentConfig::load(None, &["gate.lamda=1".into()]).unwrap_err();
        assert!(e.to_string().contains("lamda"), "{e}");
        let e = ExperimentConfig::load(
            None,
            &[
                "data.source=idx".into(),
                "data.idx.images=/nonexistent/a".into(),
                "data.idx.labels=/nonexistent/b".into(),
            ],
        )
        .unwrap_err();
        assert_eq!(field_of(e), "data.idx.images");
        assert!(ExperimentConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
