//! Versioned tensor container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "OSNETCKP"
//! 8       4     format version, u32 little-endian
//! 12      8     header length L in bytes, u64 little-endian
//! 20      L     UTF-8 JSON header
//! 20+L    ...   f64 little-endian payloads, concatenated in manifest order
//! ```
//!
//! The header names every tensor with its shape and role; a payload holds
//! exactly `product(shape)` values.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use osnet_core::nn::{build_model, build_supernet, Model, ModelSpec};
use osnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"OSNETCKP";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Model,
    Supernet,
    Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Param,
    RunningMean,
    RunningVar,
    Data,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    /// Batches folded into a running mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<u64>,
}

impl Entry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    pub tensors: Vec<Entry>,
    /// Free-form run information (epoch, seed, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    /// One payload per manifest entry.
    pub data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(kind: Kind, model: Option<ModelSpec>) -> Self {
        Checkpoint { header: Header { kind, model, tensors: Vec::new(), meta: BTreeMap::new() }, data: Vec::new() }
    }

    pub fn push(&mut self, entry: Entry, data: Vec<f64>) {
        debug_assert_eq!(entry.len(), data.len());
        self.header.tensors.push(entry);
        self.data.push(data);
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.header.meta.insert(key.to_owned(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.tensors.len() != self.data.len() {
            return Err(Error::Malformed(format!(
                "{} manifest entries but {} payloads",
                self.header.tensors.len(),
                self.data.len()
            )));
        }
        for (e, d) in self.header.tensors.iter().zip(&self.data) {
            if e.len() != d.len() {
                return Err(Error::Malformed(format!("{}: shape {:?} but {} values", e.name, e.shape, d.len())));
            }
        }
        let header = serde_json::to_vec(&self.header)?;
        let values: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 8 * values);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.data.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < PREAMBLE {
            return Err(Error::Malformed("truncated preamble".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body = &bytes[PREAMBLE..];
        let header_len = usize::try_from(header_len)
            .ok()
            .filter(|&l| l <= body.len())
            .ok_or_else(|| Error::Malformed(format!("header length {header_len} exceeds file size")))?;
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        let payload = &body[header_len..];
        let expected: usize = header.tensors.iter().map(Entry::len).sum();
        if payload.len() != 8 * expected {
            return Err(Error::Malformed(format!("payload holds {} bytes, manifest needs {}", payload.len(), 8 * expected)));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let data = header.tensors.iter().map(|e| values.by_ref().take(e.len()).collect()).collect();
        Ok(Checkpoint { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }

    /// A single data tensor.
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        let mut c = Checkpoint::new(Kind::Tensor, None);
        c.push(Entry { name: name.into(), shape: t.shape().to_vec(), role: Role::Data, batches: None }, t.data().to_vec());
        c
    }

    /// The first data tensor of the container.
    pub fn tensor(&self) -> Result<Tensor> {
        let i = self
            .header
            .tensors
            .iter()
            .position(|e| e.role == Role::Data)
            .ok_or_else(|| Error::Malformed("no data tensor".into()))?;
        Ok(Tensor::new(&self.header.tensors[i].shape, self.data[i].clone())?)
    }

    /// Every parameter and running statistic of a network.
    pub fn from_model(model: &Model) -> Self {
        let kind = if model.net.is_search() { Kind::Supernet } else { Kind::Model };
        let mut c = Checkpoint::new(kind, Some(model.spec.clone()));
        for p in model.store.params() {
            let entry = Entry { name: p.name.clone(), shape: p.value.shape().to_vec(), role: Role::Param, batches: None };
            c.push(entry, p.value.data().to_vec());
        }
        for s in model.store.all_stats() {
            let shape = vec![s.mean.len()];
            let mean = Entry { name: s.name.clone(), shape: shape.clone(), role: Role::RunningMean, batches: Some(s.batches) };
            c.push(mean, s.mean.clone());
            c.push(Entry { name: s.name.clone(), shape, role: Role::RunningVar, batches: None }, s.var.clone());
        }
        c
    }

    /// Rebuilds the network described by the header and loads every tensor.
    /// The manifest must cover the network exactly.
    pub fn to_model(&self) -> Result<Model> {
        let spec = self.header.model.as_ref().ok_or_else(|| Error::Malformed("no model spec in header".into()))?;
        let mut model = match self.header.kind {
            Kind::Model => build_model(spec, 0)?,
            Kind::Supernet => build_supernet(spec, 0)?,
            Kind::Tensor => return Err(Error::Malformed("container holds a tensor, not a model".into())),
        };
        let mut index: HashMap<(Role, String), usize> = HashMap::new();
        for (i, e) in self.header.tensors.iter().enumerate() {
            if index.insert((e.role, e.name.clone()), i).is_some() {
                return Err(Error::Malformed(format!("duplicate entry {} ({:?})", e.name, e.role)));
            }
        }
        let mut take = |role: Role, name: &str, len: usize| -> Result<(usize, &Entry)> {
            let i = index
                .remove(&(role, name.to_owned()))
                .ok_or_else(|| Error::Malformed(format!("missing {role:?} entry {name}")))?;
            let e = &self.header.tensors[i];
            if e.len() != len {
                return Err(Error::Malformed(format!("{name}: {} values, network needs {len}", e.len())));
            }
            Ok((i, e))
        };
        for p in model.store.params_mut() {
            let (i, e) = take(Role::Param, &p.name, p.value.len())?;
            if e.shape != p.value.shape() {
                return Err(Error::Malformed(format!("{}: shape {:?}, network needs {:?}", p.name, e.shape, p.value.shape())));
            }
            p.value.data_mut().copy_from_slice(&self.data[i]);
        }
        for s in model.store.all_stats_mut() {
            let (i, e) = take(Role::RunningMean, &s.name, s.mean.len())?;
            s.batches = e.batches.unwrap_or(0);
            s.mean.copy_from_slice(&self.data[i]);
            let (i, _) = take(Role::RunningVar, &s.name, s.var.len())?;
            s.var.copy_from_slice(&self.data[i]);
        }
        if let Some((role, name)) = index.keys().next() {
            return Err(Error::Malformed(format!("entry {name} ({role:?}) does not belong to the network")));
        }
        Ok(model)
    }
}
