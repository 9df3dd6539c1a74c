//! The model zoo: four fixed toy architectures, a deterministic trainer and
//! the `ATLZ1` checkpoint format.

mod checkpoint;
mod graph;
mod train;

pub(crate) use checkpoint::{decode_container, encode_container};
pub use checkpoint::{load, save, Checkpoint, CheckpointError, CheckpointMeta, ParamMeta, CHECKPOINT_MAGIC};
pub use graph::{InputSpec, LayerDesc, ModelGraph, NamedParam};
pub use train::{train, AdvTrain, TrainConfig, TrainMetrics};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::attack::AttackError;
use crate::tensor::{BatchNorm, Conv2d, Dense, Layer, LayerKind, TensorError};

pub const MIN_INPUT_EXTENT: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("input {h}x{w} is too small for the pooling pyramid (minimum {min}x{min})")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("dataset does not match model: {0}")]
    DatasetMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("adversarial training: {0}")]
    Attack(#[from] AttackError),
}

/// The four zoo architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Three 3x3 conv stages with pooling, global average pool.
    Plain,
    /// Two 5x5 conv stages, the second strided.
    Wide,
    /// Stem conv followed by an additive residual block.
    Resnet,
    /// Deep, narrow 3x3 stack with batch norm and a flatten head.
    Vgg,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Plain, Arch::Wide, Arch::Resnet, Arch::Vgg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Plain => "plain",
            Arch::Wide => "wide",
            Arch::Resnet => "resnet",
            Arch::Vgg => "vgg",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown architecture `{s}` (expected plain, wide, resnet or vgg)"))
    }
}

fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Layer {
    Layer::new(name, LayerKind::Conv2d(Conv2d::zeroed(in_ch, out_ch, kernel, stride, kernel / 2)))
}

fn relu(name: &str) -> Layer {
    Layer::new(name, LayerKind::ReLU)
}

fn pool(name: &str) -> Layer {
    Layer::new(name, LayerKind::MaxPool { k: 2, s: 2 })
}

fn bn(name: &str, ch: usize) -> Layer {
    Layer::new(name, LayerKind::BatchNormInference(BatchNorm::identity(ch)))
}

fn dense(name: &str, i: usize, o: usize) -> Layer {
    Layer::new(name, LayerKind::Dense(Dense::zeroed(i, o)))
}

fn topology(arch: Arch, spec: InputSpec) -> Vec<Layer> {
    let (c, k) = (spec.c, spec.num_classes);
    match arch {
        Arch::Plain => vec![
            conv("conv1", c, 8, 3, 1),
            bn("bn1", 8),
            relu("relu1"),
            pool("pool1"),
            conv("conv2", 8, 16, 3, 1),
            bn("bn2", 16),
            relu("relu2"),
            pool("pool2"),
            conv("conv3", 16, 32, 3, 1),
            relu("relu3"),
            Layer::new("gap", LayerKind::AvgPoolGlobal),
            dense("fc", 32, k),
        ],
        Arch::Wide => vec![
            conv("conv1", c, 16, 5, 1),
            bn("bn1", 16),
            relu("relu1"),
            pool("pool1"),
            conv("conv2", 16, 32, 5, 2),
            bn("bn2", 32),
            relu("relu2"),
            Layer::new("gap", LayerKind::AvgPoolGlobal),
            dense("fc", 32, k),
        ],
        Arch::Resnet => vec![
            conv("stem", c, 12, 3, 1),
            bn("stem_bn", 12),
            relu("stem_relu"),
            pool("pool1"),
            Layer::new(
                "res1",
                LayerKind::Residual(vec![
                    conv("res1.conv_a", 12, 12, 3, 1),
                    relu("res1.relu"),
                    conv("res1.conv_b", 12, 12, 3, 1),
                ]),
            ),
            relu("res1_out"),
            pool("pool2"),
            conv("conv3", 12, 24, 3, 1),
            relu("relu3"),
            Layer::new("gap", LayerKind::AvgPoolGlobal),
            dense("fc", 24, k),
        ],
        Arch::Vgg => {
            let flat = 16 * (spec.h / 8) * (spec.w / 8);
            vec![
                conv("conv1", c, 8, 3, 1),
                bn("bn1", 8),
                relu("relu1"),
                pool("pool1"),
                conv("conv2", 8, 8, 3, 1),
                relu("relu2"),
                conv("conv3", 8, 16, 3, 1),
                bn("bn3", 16),
                relu("relu3"),
                pool("pool2"),
                conv("conv4", 16, 16, 3, 1),
                relu("relu4"),
                pool("pool3"),
                Layer::new("flatten", LayerKind::Flatten),
                dense("fc", flat, k),
            ]
        }
    }
}

/// He-normal initialisation of every conv and dense weight; biases start at
/// zero and batch norm at identity.
pub fn init_weights(model: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fans = Vec::new();
    collect_fans(model.layers(), &mut fans);
    let mut fans = fans.into_iter();
    model.visit_params_mut(|name, values, _| {
        if name.ends_with(".weight") {
            let fan_in = fans.next().expect("fan-in per weight");
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
            for v in values.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    });
}

fn collect_fans(layers: &[Layer], out: &mut Vec<usize>) {
    for l in layers {
        match &l.kind {
            LayerKind::Conv2d(c) => out.push(c.fan_in()),
            LayerKind::Dense(d) => out.push(d.in_dim),
            LayerKind::Residual(body) => collect_fans(body, out),
            _ => {}
        }
    }
}

/// Build one architecture with freshly initialised weights.
pub fn build(arch: Arch, name: &str, spec: InputSpec, seed: u64) -> Result<ModelGraph, ZooError> {
    if spec.h < MIN_INPUT_EXTENT || spec.w < MIN_INPUT_EXTENT {
        return Err(ZooError::InputTooSmall {
            h: spec.h,
            w: spec.w,
            min: MIN_INPUT_EXTENT,
        });
    }
    let mut g = ModelGraph::new(name, spec, topology(arch, spec))?;
    init_weights(&mut g, seed);
    Ok(g)
}

/// The four zoo members, named after their architecture. Member `i` is
/// initialised from `seed + i`.
pub fn build_zoo(spec: InputSpec, seed: u64) -> Result<Vec<ModelGraph>, ZooError> {
    Arch::ALL
        .iter()
        .enumerate()
        .map(|(i, &arch)| build(arch, arch.as_str(), spec, seed.wrapping_add(i as u64)))
        .collect()
}
