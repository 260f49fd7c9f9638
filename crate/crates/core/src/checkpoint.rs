//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RMOE"  u32 version
//! u32 descriptor length, descriptor JSON
//! u32 entry count
//! per entry: u32 name length, name, u32 rank, rank x u32 dims, f32 data
//! ```
//!
//! The descriptor records what kind of model the file holds, the layer
//! specs of every network in it and the training provenance. Entries are
//! named `<network>/<layer>/weight`, `<network>/<layer>/bias` and `mean`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::experts::{ExpertModel, Provenance, Specialization};
use crate::mixture::GatingNetwork;
use crate::nn::{LayerParams, LayerSpec, Network, Tensor};
use crate::training::TrainHistory;
use crate::tree::{BranchPoint, TreeEnsemble};

pub const MAGIC: [u8; 4] = *b"RMOE";
pub const VERSION: u32 = 1;

/// Any model the pipeline persists.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Expert(ExpertModel),
    Gate(GatingNetwork),
    Tree(TreeEnsemble),
}

impl Model {
    fn kind(&self) -> &'static str {
        match self {
            Model::Expert(_) => "expert",
            Model::Gate(_) => "gate",
            Model::Tree(_) => "tree",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NetDescriptor {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Descriptor {
    Expert {
        network: NetDescriptor,
        specialization: Specialization,
        provenance: Option<Provenance>,
    },
    Gate {
        network: NetDescriptor,
        history: Option<TrainHistory>,
    },
    Tree {
        branch_point: BranchPoint,
        shared: NetDescriptor,
        branches: Vec<(Specialization, NetDescriptor)>,
    },
}

fn describe(name: &str, net: &Network) -> NetDescriptor {
    NetDescriptor {
        name: name.to_string(),
        input_shape: net.input_shape().to_vec(),
        layers: net.layers().to_vec(),
    }
}

struct Writer {
    buf: Vec<u8>,
    entries: u32,
    body: Vec<u8>,
}

impl Writer {
    fn u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| {
            Error::InvalidArgument(format!("{v} does not fit the checkpoint's u32 fields"))
        })?;
        buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn entry(&mut self, name: &str, t: &Tensor) -> Result<()> {
        Self::u32(&mut self.body, name.len())?;
        self.body.extend_from_slice(name.as_bytes());
        Self::u32(&mut self.body, t.shape().len())?;
        for &d in t.shape() {
            Self::u32(&mut self.body, d)?;
        }
        for &x in t.data() {
            self.body.extend_from_slice(&x.to_le_bytes());
        }
        self.entries += 1;
        Ok(())
    }

    fn network(&mut self, prefix: &str, net: &Network) -> Result<()> {
        for (layer, p) in net.params() {
            self.entry(&format!("{prefix}/{layer}/weight"), &p.weight)?;
            self.entry(&format!("{prefix}/{layer}/bias"), &p.bias)?;
        }
        Ok(())
    }
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut w = Writer {
        buf: Vec::new(),
        entries: 0,
        body: Vec::new(),
    };
    let (descriptor, mean) = match model {
        Model::Expert(m) => {
            w.network("net", &m.network)?;
            (
                Descriptor::Expert {
                    network: describe("net", &m.network),
                    specialization: m.specialization,
                    provenance: m.provenance.clone(),
                },
                &m.mean,
            )
        }
        Model::Gate(g) => {
            w.network("net", &g.network)?;
            (
                Descriptor::Gate {
                    network: describe("net", &g.network),
                    history: g.history.clone(),
                },
                &g.mean,
            )
        }
        Model::Tree(t) => {
            w.network("shared", &t.shared)?;
            let mut branches = Vec::with_capacity(t.branches.len());
            for (i, (s, b)) in t.branches.iter().enumerate() {
                let name = format!("branch{i}");
                w.network(&name, b)?;
                branches.push((*s, describe(&name, b)));
            }
            (
                Descriptor::Tree {
                    branch_point: t.branch_point.clone(),
                    shared: describe("shared", &t.shared),
                    branches,
                },
                &t.mean,
            )
        }
    };
    w.entry("mean", &Tensor::new(vec![mean.len()], mean.clone())?)?;
    let json = serde_json::to_vec(&descriptor)
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    w.buf.extend_from_slice(&MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    Writer::u32(&mut w.buf, json.len())?;
    w.buf.extend_from_slice(&json);
    w.buf.extend_from_slice(&w.entries.to_le_bytes());
    w.buf.extend_from_slice(&w.body);
    Ok(w.buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

fn read_entries(r: &mut Reader<'_>) -> Result<BTreeMap<String, Tensor>> {
    let count = r.u32("entry count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32("entry name")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|_| CheckpointError::Descriptor("entry name is not utf-8".into()))?
            .to_string();
        let rank = r.u32("entry shape")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("entry shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Parameter(name.clone()))?;
        let data = r
            .take(n, "parameter data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Parameter(name.clone()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Descriptor(format!("duplicate entry {name}")).into());
        }
    }
    if r.at != r.bytes.len() {
        return Err(CheckpointError::Descriptor(format!(
            "{} trailing bytes after the last entry",
            r.bytes.len() - r.at
        ))
        .into());
    }
    Ok(out)
}

fn rebuild(d: NetDescriptor, entries: &mut BTreeMap<String, Tensor>) -> Result<Network> {
    let mut params = BTreeMap::new();
    for l in d.layers.iter().filter(|l| l.kind.is_learnable()) {
        let mut take = |part: &str| {
            let key = format!("{}/{}/{part}", d.name, l.name);
            entries
                .remove(&key)
                .ok_or(CheckpointError::Parameter(key))
        };
        let weight = take("weight")?;
        let bias = take("bias")?;
        params.insert(l.name.clone(), LayerParams { weight, bias });
    }
    Network::from_parts(d.input_shape, d.layers, params).map_err(|e| {
        Error::Checkpoint(CheckpointError::Descriptor(format!("network {}: {e}", d.name)))
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let len = r.u32("descriptor")? as usize;
    let descriptor: Descriptor = serde_json::from_slice(r.take(len, "descriptor")?)
        .map_err(|e| CheckpointError::Descriptor(e.to_string()))?;
    let mut entries = read_entries(&mut r)?;
    let mean = entries
        .remove("mean")
        .ok_or_else(|| CheckpointError::Parameter("mean".into()))?
        .into_data();
    let model = match descriptor {
        Descriptor::Expert {
            network,
            specialization,
            provenance,
        } => Model::Expert(ExpertModel {
            network: rebuild(network, &mut entries)?,
            specialization,
            mean,
            provenance,
        }),
        Descriptor::Gate { network, history } => Model::Gate(GatingNetwork {
            network: rebuild(network, &mut entries)?,
            mean,
            history,
        }),
        Descriptor::Tree {
            branch_point,
            shared,
            branches,
        } => {
            let shared = rebuild(shared, &mut entries)?;
            let branches = branches
                .into_iter()
                .map(|(s, d)| Ok((s, rebuild(d, &mut entries)?)))
                .collect::<Result<Vec<_>>>()?;
            Model::Tree(TreeEnsemble {
                branch_point,
                shared,
                branches,
                mean,
            })
        }
    };
    if let Some(extra) = entries.keys().next() {
        return Err(CheckpointError::Descriptor(format!("unexpected entry {extra}")).into());
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn wrong_kind(path: &Path, want: &str, got: &Model) -> Error {
    Error::Checkpoint(CheckpointError::Descriptor(format!(
        "{} holds a {} model, expected a {want}",
        path.display(),
        got.kind()
    )))
}

pub fn load_expert(path: &Path) -> Result<ExpertModel> {
    match load_checkpoint(path)? {
        Model::Expert(m) => Ok(m),
        other => Err(wrong_kind(path, "expert", &other)),
    }
}

pub fn load_gate(path: &Path) -> Result<GatingNetwork> {
    match load_checkpoint(path)? {
        Model::Gate(g) => Ok(g),
        other => Err(wrong_kind(path, "gate", &other)),
    }
}

pub fn load_tree(path: &Path) -> Result<TreeEnsemble> {
    match load_checkpoint(path)? {
        Model::Tree(t) => Ok(t),
        other => Err(wrong_kind(path, "tree", &other)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::tree::make_tree;

    fn expert() -> ExpertModel {
        let ds = synth_dataset(3, 2, 16, 0).unwrap();
        ExpertModel::initial(&ds, 4).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = Model::Expert(expert());
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"RMOE");
        assert_eq!(from_bytes(&bytes).unwrap(), m);
        let t = make_tree(&expert(), &"inverted@FC6".parse().unwrap(), &Specialization::ENSEMBLE)
            .unwrap();
        let m = Model::Tree(t);
        assert_eq!(from_bytes(&to_bytes(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn distinct_decoding_errors() {
        let bytes = to_bytes(&Model::Expert(expert())).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 9, expected: 1 }))
        ));
        for cut in [2, 6, 10, bytes.len() - 1] {
            assert!(matches!(
                from_bytes(&bytes[..cut]),
                Err(Error::Checkpoint(CheckpointError::Truncated(_)))
            ));
        }
    }
}
