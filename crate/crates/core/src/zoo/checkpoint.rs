//! `ATLZ1` checkpoints.
//!
//! Layout: 5-byte magic, `u32` little-endian metadata length, UTF-8 JSON
//! metadata, then every parameter tensor as little-endian `f32` in graph
//! order. The same container (with another magic) stores adversarial example
//! caches.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::graph::{InputSpec, LayerDesc, ModelGraph};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ATLZ1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated file: parameter `{param}` needs {expected} bytes, {available} available")]
    Truncated { param: String, expected: usize, available: usize },
    #[error("truncated header: {0}")]
    TruncatedHeader(&'static str),
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("metadata/architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("{0} trailing bytes after the last parameter")]
    TrailingBytes(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMeta {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub name: String,
    /// Zoo architecture tag, when the graph came from [`super::build`].
    pub arch: Option<String>,
    pub input_spec: InputSpec,
    pub layers: Vec<LayerDesc>,
    pub seed: u64,
    pub dataset: String,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub params: Vec<ParamMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: ModelGraph,
}

impl Checkpoint {
    /// Wrap a model; the parameter table is filled from the graph.
    pub fn new(model: ModelGraph, arch: Option<String>, seed: u64, dataset: impl Into<String>) -> Self {
        let meta = CheckpointMeta {
            name: model.name().to_string(),
            arch,
            input_spec: model.input_spec(),
            layers: model.descriptor(),
            seed,
            dataset: dataset.into(),
            train_accuracy: None,
            test_accuracy: None,
            params: model
                .params()
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    len: p.values.len(),
                })
                .collect(),
        };
        Self { meta, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let blobs: Vec<(&str, &[f32])> = params.iter().map(|p| (p.name.as_str(), p.values)).collect();
        encode_container(CHECKPOINT_MAGIC, &self.meta, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (meta, mut reader): (CheckpointMeta, BlobReader<'_>) = decode_container(CHECKPOINT_MAGIC, bytes)?;
        let mut model = ModelGraph::from_descriptor(&meta.name, meta.input_spec, &meta.layers)
            .map_err(|e| CheckpointError::ArchitectureMismatch(e.to_string()))?;
        let expected: Vec<(String, usize)> = model.params().iter().map(|p| (p.name.clone(), p.values.len())).collect();
        let listed: Vec<(String, usize)> = meta.params.iter().map(|p| (p.name.clone(), p.len)).collect();
        if expected != listed {
            return Err(CheckpointError::ArchitectureMismatch(format!(
                "parameter table lists {} tensors that do not match the {} implied by the layer descriptor",
                listed.len(),
                expected.len()
            )));
        }
        let mut blobs = Vec::with_capacity(meta.params.len());
        for p in &meta.params {
            blobs.push(reader.read(&p.name, p.len)?);
        }
        reader.finish()?;
        let mut blobs = blobs.into_iter();
        model.visit_params_mut(|_, values, _| {
            *values = blobs.next().expect("blob per parameter");
        });
        Ok(Self { meta, model })
    }
}

/// Serialize a container: magic, metadata length, JSON metadata, blobs.
pub(crate) fn encode_container<M: Serialize>(magic: &[u8; 5], meta: &M, blobs: &[(&str, &[f32])]) -> Vec<u8> {
    let json = serde_json::to_vec(meta).expect("metadata serializes");
    let total: usize = blobs.iter().map(|(_, b)| b.len() * 4).sum();
    let mut out = Vec::with_capacity(9 + json.len() + total);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, blob) in blobs {
        for v in *blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub(crate) struct BlobReader<'a> {
    rest: &'a [u8],
}

impl BlobReader<'_> {
    pub(crate) fn read(&mut self, name: &str, len: usize) -> Result<Vec<f32>, CheckpointError> {
        let need = len * 4;
        if self.rest.len() < need {
            return Err(CheckpointError::Truncated {
                param: name.to_string(),
                expected: need,
                available: self.rest.len(),
            });
        }
        let (head, tail) = self.rest.split_at(need);
        self.rest = tail;
        Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    pub(crate) fn finish(self) -> Result<(), CheckpointError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::TrailingBytes(self.rest.len()))
        }
    }
}

pub(crate) fn decode_container<'a, M: DeserializeOwned>(magic: &[u8; 5], bytes: &'a [u8]) -> Result<(M, BlobReader<'a>), CheckpointError> {
    let found = &bytes[..bytes.len().min(5)];
    if found != magic {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let len_bytes = bytes.get(5..9).ok_or(CheckpointError::TruncatedHeader("metadata length"))?;
    let meta_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let json = bytes.get(9..9 + meta_len).ok_or(CheckpointError::TruncatedHeader("metadata"))?;
    let meta = serde_json::from_slice(json).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    Ok((
        meta,
        BlobReader {
            rest: &bytes[9 + meta_len..],
        },
    ))
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    write_atomic(path, &ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
