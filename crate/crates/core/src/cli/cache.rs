//! Cached adversarial images, stored in the checkpoint container with their
//! own magic so transforms can be re-applied without re-crafting.

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::tensor::{Shape, Tensor};
use crate::zoo::{decode_container, encode_container, CheckpointError};

pub const AE_MAGIC: &[u8; 5] = b"ATAE1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeMeta {
    pub source: Vec<String>,
    pub attack: String,
    pub config: AttackConfig,
    pub dataset: String,
    /// `[b, h, w, c]`.
    pub shape: [usize; 4],
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeCache {
    pub meta: AeMeta,
    pub images: Tensor,
}

impl AeCache {
    pub fn new(source: Vec<String>, attack: &str, config: AttackConfig, dataset: &str, images: Tensor, labels: Vec<usize>) -> Self {
        let s = images.shape();
        Self {
            meta: AeMeta {
                source,
                attack: attack.to_string(),
                config,
                dataset: dataset.to_string(),
                shape: [s.b, s.h, s.w, s.c],
                labels,
            },
            images,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_container(AE_MAGIC, &self.meta, &[("images", self.images.data())])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (meta, mut reader): (AeMeta, _) = decode_container(AE_MAGIC, bytes)?;
        let [b, h, w, c] = meta.shape;
        let shape = Shape::new(b, h, w, c);
        if meta.labels.len() != b {
            return Err(CheckpointError::Metadata(format!("{} labels for {b} images", meta.labels.len())));
        }
        let data = reader.read("images", shape.len())?;
        reader.finish()?;
        let images = Tensor::from_vec(shape, data).expect("length checked by reader");
        Ok(Self { meta, images })
    }
}
