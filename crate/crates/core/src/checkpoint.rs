//! Binary container for trained parameters and exported datasets.
//!
//! Layout: the 8-byte magic `DA2SCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header of that many bytes,
//! then every tensor listed in the header as little-endian floats, in order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Role;
use crate::config::RunConfig;
use crate::data::{Dataset, Normalizer};
use crate::discretize::Genotype;
use crate::error::{Error, Result};
use crate::supernet::{ArchParams, CellType, NetworkSpec, SuperNetwork};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"DA2SCKPT";
pub const FORMAT_VERSION: u32 = 1;
const FLOAT_BYTES: usize = std::mem::size_of::<Float>();

fn dtype() -> &'static str {
    if FLOAT_BYTES == 8 {
        "f64"
    } else {
        "f32"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

fn write_container(path: &Path, kind: &str, entries: Vec<TensorEntry>, tensors: &[&Tensor], meta: serde_json::Value) -> Result<()> {
    let header = Header { kind: kind.into(), dtype: dtype().into(), tensors: entries, meta };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + header.len() + tensors.iter().map(|t| t.numel() * FLOAT_BYTES).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    file.write_all(&out)?;
    Ok(())
}

fn read_container(path: &Path, kind: &str) -> Result<(Header, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    parse_container(&bytes, kind)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format {
        offset: *at as u64,
        message: format!("truncated {what}: need {n} bytes, {} remain", bytes.len() - *at),
    })?;
    let slice = &bytes[*at..end];
    *at = end;
    Ok(slice)
}

fn parse_container(bytes: &[u8], kind: &str) -> Result<(Header, Vec<Tensor>)> {
    let mut at = 0;
    if take(bytes, &mut at, 8, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, message: "not a checkpoint file (bad magic)".into() });
    }
    let version = u32::from_le_bytes(take(bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format { offset: 8, message: format!("unsupported container version {version}") });
    }
    let len = u64::from_le_bytes(take(bytes, &mut at, 8, "header length")?.try_into().expect("8 bytes"));
    let header_at = at;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, len as usize, "header")?)
        .map_err(|e| Error::Format { offset: header_at as u64, message: format!("bad header: {e}") })?;
    if header.kind != kind {
        return Err(Error::Format { offset: header_at as u64, message: format!("expected a {kind} container, found {}", header.kind) });
    }
    if header.dtype != dtype() {
        return Err(Error::Format {
            offset: header_at as u64,
            message: format!("payload is {} but this build uses {}", header.dtype, dtype()),
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(bytes, &mut at, n * FLOAT_BYTES, &format!("tensor {}", entry.name))?;
        let data = raw
            .chunks_exact(FLOAT_BYTES)
            .map(|c| Float::from_le_bytes(c.try_into().expect("float width")))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if at != bytes.len() {
        return Err(Error::Format { offset: at as u64, message: format!("{} trailing bytes", bytes.len() - at) });
    }
    Ok((header, tensors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    network: NetworkSpec,
    cell_types: Vec<CellType>,
    nodes: usize,
    seed: u64,
    normalizer: Normalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    discrete: Option<Genotype>,
}

/// Trained weights and architecture of a search run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub net: SuperNetwork,
    pub arch: ArchParams,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut tensors: Vec<&Tensor> = Vec::new();
        for (name, t) in self.net.theta.names().iter().zip(self.net.theta.tensors()) {
            entries.push(TensorEntry { name: name.clone(), role: Role::Theta, shape: t.shape().to_vec() });
            tensors.push(t);
        }
        for (k, &ct) in self.arch.cell_types.iter().enumerate() {
            entries.push(TensorEntry { name: format!("alpha/{ct}"), role: Role::Alpha, shape: self.arch.alpha[k].shape().to_vec() });
            tensors.push(&self.arch.alpha[k]);
            entries.push(TensorEntry { name: format!("beta/{ct}"), role: Role::Beta, shape: self.arch.beta[k].shape().to_vec() });
            tensors.push(&self.arch.beta[k]);
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            network: self.net.spec.clone(),
            cell_types: self.arch.cell_types.clone(),
            nodes: self.arch.cell.nodes,
            seed: self.config.seed,
            normalizer: self.normalizer.clone(),
            discrete: self.arch.discrete.clone(),
        };
        write_container(path, "checkpoint", entries, &tensors, serde_json::to_value(meta)?)
    }

    /// Rebuilds the network and overwrites its weights with the stored ones.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let (header, tensors) = read_container(path, "checkpoint")?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta)?;
        let mut net = SuperNetwork::new(meta.network.clone(), meta.seed)?;
        let mut arch = ArchParams::uniform(net.cell, &meta.cell_types);
        arch.discrete = meta.discrete;
        let mut theta = Vec::new();
        for (entry, t) in header.tensors.iter().zip(tensors) {
            match entry.role {
                Role::Theta => theta.push((entry, t)),
                Role::Alpha | Role::Beta => {
                    let ct = arch
                        .cell_types
                        .iter()
                        .position(|c| entry.name.ends_with(&format!("/{c}")))
                        .ok_or_else(|| Error::contract(format!("unknown architecture tensor {}", entry.name)))?;
                    let slot = if entry.role == Role::Alpha { &mut arch.alpha[ct] } else { &mut arch.beta[ct] };
                    if slot.shape() != t.shape() {
                        return Err(Error::contract(format!("{} has shape {:?}, expected {:?}", entry.name, t.shape(), slot.shape())));
                    }
                    *slot = t;
                }
            }
        }
        if theta.len() != net.theta.len() {
            return Err(Error::contract(format!("checkpoint holds {} weights, network has {}", theta.len(), net.theta.len())));
        }
        for (k, (entry, t)) in theta.into_iter().enumerate() {
            if net.theta.names()[k] != entry.name || net.theta.tensors()[k].shape() != t.shape() {
                return Err(Error::contract(format!("weight {} does not match the network layout", entry.name)));
            }
            net.theta.tensors_mut()[k] = t;
        }
        Ok(Checkpoint { config: meta.config, net, arch, normalizer: meta.normalizer })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    classes: usize,
    labels: Vec<usize>,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let entry = TensorEntry { name: "images".into(), role: Role::Theta, shape: dataset.images.shape().to_vec() };
    let meta = DatasetMeta { classes: dataset.classes, labels: dataset.labels.clone() };
    write_container(path, "dataset", vec![entry], &[&dataset.images], serde_json::to_value(meta)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (header, mut tensors) = read_container(path, "dataset")?;
    let meta: DatasetMeta = serde_json::from_value(header.meta)?;
    let images = tensors.pop().ok_or_else(|| Error::Format { offset: 0, message: "dataset has no images".into() })?;
    Dataset::new(images, meta.labels, meta.classes)
}
