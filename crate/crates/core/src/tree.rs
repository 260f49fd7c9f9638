//! Tree ensembles that share part of the expert network between members.
//!
//! A TreeNet shares the layers before the branch point and runs one tail per
//! member; an inverted tree runs one head per member, blends the head outputs
//! with the gate weights and runs the shared tail once.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{preprocess, Dataset};
use crate::distortions::BatchPolicy;
use crate::error::{Error, Result};
use crate::eval::{finish, Classifier};
use crate::experts::{train_expert_frozen, ExpertModel, Specialization, EXPERT_LAYERS};
use crate::mixture::{gate_weights, weighted_mixture, EnsembleOutput, GatingNetwork};
use crate::nn::{argmax, Network, Tensor};
use crate::training::TrainConfig;

const CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Layers strictly before the branch point are shared.
    Tree,
    /// The branch-point layer and everything after it are shared.
    Inverted,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Tree => "tree",
            Direction::Inverted => "inverted",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tree" => Ok(Self::Tree),
            "inverted" => Ok(Self::Inverted),
            _ => Err(Error::InvalidArgument(format!(
                "unknown tree direction {s:?} (expected tree or inverted)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BranchPoint {
    pub layer: String,
    pub direction: Direction,
}

impl BranchPoint {
    pub fn new(layer: impl Into<String>, direction: Direction) -> Result<Self> {
        let layer = layer.into();
        if !EXPERT_LAYERS.contains(&layer.as_str()) {
            return Err(Error::UnknownLayer(format!(
                "{layer} is not a branch point (expected one of {})",
                EXPERT_LAYERS.join(", ")
            )));
        }
        Ok(Self { layer, direction })
    }
}

impl fmt::Display for BranchPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.direction, self.layer)
    }
}

/// Parses `tree@FC6` or `inverted@Conv3`.
impl FromStr for BranchPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dir, layer) = s.split_once('@').ok_or_else(|| {
            Error::InvalidArgument(format!("branch point {s:?} is not of the form direction@layer"))
        })?;
        BranchPoint::new(layer, dir.parse()?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEnsemble {
    pub branch_point: BranchPoint,
    /// The trunk for a TreeNet, the tail for an inverted tree.
    pub shared: Network,
    /// One unshared fragment per member, in ensemble order.
    pub branches: Vec<(Specialization, Network)>,
    pub mean: Vec<f32>,
}

/// Index in `net` of the branch-point layer.
fn branch_index(net: &Network, bp: &BranchPoint) -> Result<usize> {
    net.layer_index(&bp.layer)
        .ok_or_else(|| Error::UnknownLayer(bp.layer.clone()))
}

/// A tree whose shared fragment and branches all start from `clean`.
pub fn make_tree(
    clean: &ExpertModel,
    bp: &BranchPoint,
    members: &[Specialization],
) -> Result<TreeEnsemble> {
    if members.len() < 2 {
        return Err(Error::InvalidArgument("a tree needs at least two members".into()));
    }
    let (head, tail) = clean.network.split_at(branch_index(&clean.network, bp)?)?;
    let (shared, branch) = match bp.direction {
        Direction::Tree => (head, tail),
        Direction::Inverted => (tail, head),
    };
    Ok(TreeEnsemble {
        branch_point: bp.clone(),
        shared,
        branches: members.iter().map(|&s| (s, branch.clone())).collect(),
        mean: clean.mean.clone(),
    })
}

impl TreeEnsemble {
    /// The full expert network of member `i`.
    pub fn assemble(&self, i: usize) -> Result<Network> {
        let branch = &self.branches[i].1;
        match self.branch_point.direction {
            Direction::Tree => self.shared.concat(branch),
            Direction::Inverted => branch.concat(&self.shared),
        }
    }

    fn shared_names(&self) -> BTreeSet<String> {
        self.shared.params().keys().cloned().collect()
    }

    /// Shared parameters counted once, plus every branch, plus the gate.
    pub fn unique_params(&self, gate: Option<&GatingNetwork>) -> usize {
        self.shared.param_count()
            + self.branches.iter().map(|(_, b)| b.param_count()).sum::<usize>()
            + gate.map_or(0, |g| g.network.param_count())
    }

    /// Class probabilities per image, computing the shared fragment once.
    pub fn forward(&self, gate: &GatingNetwork, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        if gate.num_experts() != self.branches.len() {
            return Err(Error::Shape(format!(
                "gate has {} outputs for {} branches",
                gate.num_experts(),
                self.branches.len()
            )));
        }
        let idx: Vec<usize> = (0..batch.batch()).collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(CHUNK) {
            out.extend(self.forward_chunk(gate, &batch.select(chunk))?);
        }
        Ok(out)
    }

    fn forward_chunk(&self, gate: &GatingNetwork, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let weights = gate_weights(gate, batch)?;
        let x = preprocess(batch, &self.mean)?;
        match self.branch_point.direction {
            Direction::Tree => {
                let trunk = self.shared.infer(&x)?;
                let outs = self
                    .branches
                    .iter()
                    .map(|(_, b)| b.infer(&trunk))
                    .collect::<Result<Vec<_>>>()?;
                (0..x.batch())
                    .map(|i| {
                        let p = EnsembleOutput::new(
                            outs.iter()
                                .map(|o| o.sample(i).iter().map(|&v| v as f64).collect())
                                .collect(),
                        )?;
                        weighted_mixture(&p, weights[i].as_slice())
                    })
                    .collect()
            }
            Direction::Inverted => {
                let heads = self
                    .branches
                    .iter()
                    .map(|(_, b)| b.infer(&x))
                    .collect::<Result<Vec<_>>>()?;
                let mut blend = Tensor::zeros(heads[0].shape().to_vec());
                let mut acc = vec![0.0f64; blend.sample_len()];
                for i in 0..x.batch() {
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (h, &wk) in heads.iter().zip(weights[i].as_slice()) {
                        for (o, &a) in acc.iter_mut().zip(h.sample(i)) {
                            *o += wk * a as f64;
                        }
                    }
                    for (o, &a) in blend.sample_mut(i).iter_mut().zip(&acc) {
                        *o = a as f32;
                    }
                }
                let p = self.shared.infer(&blend)?;
                Ok(p
                    .data()
                    .chunks(p.sample_len())
                    .map(|r| r.iter().map(|&v| v as f64).collect())
                    .collect())
            }
        }
    }
}

/// Fine-tunes every branch with its own policy while the shared fragment
/// stays frozen. Fails if the shared fragment changed in any bit.
pub fn train_branches(
    tree: &TreeEnsemble,
    train: &Dataset,
    val: &Dataset,
    policies: &[BatchPolicy],
    config: &TrainConfig,
) -> Result<TreeEnsemble> {
    if policies.len() != tree.branches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} policies for {} branches",
            policies.len(),
            tree.branches.len()
        )));
    }
    let frozen = tree.shared_names();
    let index = match tree.branch_point.direction {
        Direction::Tree => tree.shared.layers().len(),
        Direction::Inverted => tree.branches[0].1.layers().len(),
    };
    let mut branches = Vec::with_capacity(tree.branches.len());
    for (i, policy) in policies.iter().enumerate() {
        let init = ExpertModel {
            network: tree.assemble(i)?,
            specialization: tree.branches[i].0,
            mean: tree.mean.clone(),
            provenance: None,
        };
        let trained = train_expert_frozen(train, val, policy, config, &init, &frozen)?;
        let (head, tail) = trained.network.split_at(index)?;
        let (shared, branch) = match tree.branch_point.direction {
            Direction::Tree => (head, tail),
            Direction::Inverted => (tail, head),
        };
        if !bit_identical(&shared, &tree.shared) {
            return Err(Error::InvalidArgument(format!(
                "shared layers changed while training branch {i}"
            )));
        }
        branches.push((trained.specialization, branch));
    }
    Ok(TreeEnsemble {
        branch_point: tree.branch_point.clone(),
        shared: tree.shared.clone(),
        branches,
        mean: tree.mean.clone(),
    })
}

/// Whether two networks hold the same layers and bit-identical parameters.
pub fn bit_identical(a: &Network, b: &Network) -> bool {
    a.layers() == b.layers()
        && a.params().len() == b.params().len()
        && a.params().iter().zip(b.params()).all(|((ka, pa), (kb, pb))| {
            ka == kb
                && pa.weight.shape() == pb.weight.shape()
                && pa.weight.data().iter().zip(pb.weight.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                && pa.bias.data().iter().zip(pb.bias.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Unique parameters of `n` unshared experts plus an optional gate.
pub fn plain_ensemble_params(experts: &[&ExpertModel], gate: Option<&GatingNetwork>) -> usize {
    experts.iter().map(|e| e.network.param_count()).sum::<usize>()
        + gate.map_or(0, |g| g.network.param_count())
}

/// Unique parameters of an `n`-member tree over the expert architecture,
/// without building it.
pub fn tree_param_count(expert: &Network, bp: &BranchPoint, n: usize) -> Result<usize> {
    let idx = branch_index(expert, bp)?;
    let before: usize = expert.layers()[..idx]
        .iter()
        .filter_map(|l| expert.params().get(&l.name).map(|p| p.len()))
        .sum();
    let after = expert.param_count() - before;
    Ok(match bp.direction {
        Direction::Tree => before + n * after,
        Direction::Inverted => n * before + after,
    })
}

/// A gated tree as a classifier.
pub struct GatedTree<'a> {
    pub tree: &'a TreeEnsemble,
    pub gate: &'a GatingNetwork,
}

impl Classifier for GatedTree<'_> {
    fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .tree
            .forward(self.gate, images)?
            .iter()
            .map(|p| argmax(p))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeRow {
    pub branch_point: String,
    pub direction: Direction,
    pub unique_params: usize,
    pub auc_noise: f64,
    pub auc_blur: f64,
    pub auc_avg: f64,
}

/// `branch_point,direction,unique_params,auc_noise,auc_blur,auc_avg`
pub fn tree_report_csv(rows: &[TreeRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "branch_point",
        "direction",
        "unique_params",
        "auc_noise",
        "auc_blur",
        "auc_avg",
    ])?;
    for r in rows {
        w.write_record([
            r.branch_point.clone(),
            r.direction.to_string(),
            r.unique_params.to_string(),
            format!("{:.6}", r.auc_noise),
            format!("{:.6}", r.auc_blur),
            format!("{:.6}", r.auc_avg),
        ])?;
    }
    finish(w)
}
