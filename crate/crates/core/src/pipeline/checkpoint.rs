//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `TGDACKPT`, `u32` format version, `u64` header
//! length, a UTF-8 JSON header, then the raw little-endian tensor payloads
//! in header order. The header holds the architecture, the run config, and
//! a directory `name -> {section, dtype, shape, offset, length}` with
//! offsets relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{DType, RngState, Tensor};
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Model, ParamStore};

pub const MAGIC: &[u8; 8] = b"TGDACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Section {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    section: Section,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    arch: ArchSpec,
    config: Value,
    epoch: usize,
    rng: Option<RngState>,
    metrics: Value,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    /// Resolved config of the run that produced it.
    pub config: Value,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub metrics: Value,
    pub params: ParamStore<f32>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, config: Value, epoch: usize, rng: Option<RngState>, metrics: Value) -> Self {
        Checkpoint {
            arch: model.graph.arch.clone(),
            config,
            epoch,
            rng,
            metrics,
            params: model.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut payload = Vec::new();
        let sections = self
            .params
            .params()
            .map(|(n, t)| (n, t, Section::Param))
            .chain(self.params.buffers().map(|(n, t)| (n, t, Section::Buffer)));
        for (name, t, section) in sections {
            let bytes = t.to_le_bytes();
            let entry = TensorEntry {
                section,
                dtype: DType::F32,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                length: bytes.len() as u64,
            };
            if tensors.insert(name.clone(), entry).is_some() {
                return Err(corrupt(format!("tensor {name} is both a parameter and a buffer")));
            }
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            arch: self.arch.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            metrics: self.metrics.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("malformed header: {e}")))?;
        if header.format_version != version {
            return Err(corrupt("header version disagrees with preamble"));
        }
        let payload = &body[hlen..];
        let mut params = ParamStore::new();
        let mut end = 0u64;
        for (name, e) in &header.tensors {
            if e.dtype != DType::F32 {
                return Err(corrupt(format!("{name}: only f32 tensors are supported, got {:?}", e.dtype)));
            }
            let stop = e.offset.checked_add(e.length).filter(|&s| s as usize <= payload.len());
            let stop = stop.ok_or_else(|| corrupt(format!("{name}: payload out of bounds")))?;
            end = end.max(stop);
            let t = Tensor::<f32>::from_le_bytes(&e.shape, &payload[e.offset as usize..stop as usize])
                .map_err(|err| corrupt(format!("{name}: {err}")))?;
            match e.section {
                Section::Param => params.insert_param(name.clone(), t)?,
                Section::Buffer => params.insert_buffer(name.clone(), t)?,
            }
        }
        if end as usize != payload.len() {
            return Err(corrupt("trailing bytes after tensor payload"));
        }
        Ok(Checkpoint {
            arch: header.arch,
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            metrics: header.metrics,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the model; any missing, extra or misshapen tensor is an
    /// architecture mismatch.
    pub fn to_model(&self) -> Result<Model<f32>> {
        Model::from_parts(self.arch.build()?, self.params.clone())
    }

    /// Loads into a model of architecture `arch`, refusing any other.
    pub fn to_model_as(&self, arch: &ArchSpec) -> Result<Model<f32>> {
        let graph = arch.build()?;
        graph.check_store(&self.params)?;
        if &self.arch != arch {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint architecture {} differs from requested {}",
                serde_json::to_string(&self.arch)?,
                serde_json::to_string(arch)?
            )));
        }
        Model::from_parts(graph, self.params.clone())
    }
}
