//! Labelled image sets: the synthetic glyph generator and the CIFAR-10
//! binary format used both for real data and for storing generated sets.

mod cifar;
mod synthetic;

pub use cifar::{encode_cifar10_bin, load_cifar10_bin, parse_cifar10_bin, CIFAR_IMAGE_BYTES, CIFAR_RECORD_BYTES};
pub use synthetic::{generate, render, Glyph, SyntheticConfig, GLYPHS};

use crate::tensor::Tensor;
use crate::zoo::InputSpec;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("file length {len} is not a multiple of the {record}-byte record size")]
    BadLength { len: usize, record: usize },
    #[error("record {record} has label {label}; labels must be 0-9")]
    BadLabel { record: usize, label: u8 },
    #[error("invalid synthetic dataset config: {0}")]
    InvalidConfig(String),
    #[error("dataset images must be 32x32x3 for the CIFAR-10 format, got {0}")]
    NotCifarShaped(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    /// `[n, h, w, c]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            id: self.id.clone(),
            images: self.images.slice_batch(0..n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        let s = self.images.shape();
        InputSpec::new(s.h, s.w, s.c, self.num_classes)
    }

    pub fn check_against(&self, spec: InputSpec) -> Result<(), String> {
        let s = self.images.shape();
        if (s.h, s.w, s.c) != (spec.h, spec.w, spec.c) {
            return Err(format!(
                "dataset `{}` holds {}x{}x{} images, model expects {}x{}x{}",
                self.id, s.h, s.w, s.c, spec.h, spec.w, spec.c
            ));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= spec.num_classes) {
            return Err(format!(
                "dataset `{}` label {l} at index {i} exceeds {} classes",
                self.id, spec.num_classes
            ));
        }
        if s.b != self.labels.len() {
            return Err(format!("dataset `{}` has {} images but {} labels", self.id, s.b, self.labels.len()));
        }
        Ok(())
    }
}

/// Train and test partitions of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}
