use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::attack::{AttackConfig, Variant};
use crate::bench::DEFAULT_K;
use crate::seed;
use crate::xform::TransformSpec;
use crate::zoo::{AdvTrain, Arch, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub zoo: ZooConfig,
    #[serde(default)]
    pub attacks: Vec<NamedAttack>,
    #[serde(default)]
    pub protocols: Vec<Protocol>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10Bin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Synthetic training images.
    #[serde(default = "default_train_size")]
    pub size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Generator seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Leading test images used for attacks and transfer evaluation.
    #[serde(default = "default_eval_images")]
    pub eval_images: usize,
}

fn default_train_size() -> usize {
    2000
}
fn default_test_size() -> usize {
    500
}
fn default_classes() -> usize {
    10
}
fn default_eval_images() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooConfig {
    pub models: Vec<ModelEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub arch: Arch,
    pub train: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_train_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub adv_train: Option<AdvTrain>,
}

fn default_batch() -> usize {
    32
}
fn default_train_momentum() -> f32 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    pub epsilon: f32,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub step: Option<f32>,
    #[serde(default = "default_attack_momentum")]
    pub momentum: f32,
    pub variant: Variant,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_iters() -> usize {
    10
}
fn default_attack_momentum() -> f32 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// Clean images, every zoo model.
    Clean {
        #[serde(default = "default_transforms")]
        transforms: Vec<TransformSpec>,
    },
    Single {
        white_box: String,
        #[serde(default)]
        black_boxes: Option<Vec<String>>,
        #[serde(default)]
        attacks: Option<Vec<String>>,
        #[serde(default = "default_transforms")]
        transforms: Vec<TransformSpec>,
    },
    Ensemble {
        members: Vec<String>,
        #[serde(default)]
        black_boxes: Option<Vec<String>>,
        #[serde(default)]
        attacks: Option<Vec<String>>,
        #[serde(default = "default_transforms")]
        transforms: Vec<TransformSpec>,
    },
    /// One-degree rotations either way in place of the transpose.
    Rotate1 {
        white_box: String,
        #[serde(default)]
        black_boxes: Option<Vec<String>>,
        #[serde(default)]
        attacks: Option<Vec<String>>,
    },
    Sweep {
        white_box: String,
        #[serde(default)]
        black_boxes: Option<Vec<String>>,
        attack: String,
        #[serde(default = "default_stride")]
        stride: u32,
    },
    Featdiff {
        white_box: String,
        black_box: String,
        attack: String,
        layer: String,
        #[serde(default = "default_k")]
        k: usize,
    },
}

fn default_transforms() -> Vec<TransformSpec> {
    vec![TransformSpec::Transpose]
}
fn default_stride() -> u32 {
    10
}
fn default_k() -> usize {
    DEFAULT_K
}

/// Where an attack's adversarial images come from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Single(String),
    Ensemble(Vec<String>),
}

impl Source {
    pub fn id(&self) -> String {
        match self {
            Source::Single(m) => m.clone(),
            Source::Ensemble(ms) => format!("ens-{}", ms.join("+")),
        }
    }

    pub fn members(&self) -> Vec<String> {
        match self {
            Source::Single(m) => vec![m.clone()],
            Source::Ensemble(ms) => ms.clone(),
        }
    }
}

impl Protocol {
    pub fn kind(&self) -> &'static str {
        match self {
            Protocol::Clean { .. } => "clean",
            Protocol::Single { .. } => "single",
            Protocol::Ensemble { .. } => "ensemble",
            Protocol::Rotate1 { .. } => "rotate1",
            Protocol::Sweep { .. } => "sweep",
            Protocol::Featdiff { .. } => "featdiff",
        }
    }

    pub fn source(&self) -> Option<Source> {
        match self {
            Protocol::Clean { .. } => None,
            Protocol::Ensemble { members, .. } => Some(Source::Ensemble(members.clone())),
            Protocol::Single { white_box, .. }
            | Protocol::Rotate1 { white_box, .. }
            | Protocol::Sweep { white_box, .. }
            | Protocol::Featdiff { white_box, .. } => Some(Source::Single(white_box.clone())),
        }
    }

    /// Attack names this protocol needs, resolved against the config.
    pub fn attack_names(&self, cfg: &RunConfig) -> Vec<String> {
        let all = || cfg.attacks.iter().map(|a| a.name.clone()).collect();
        match self {
            Protocol::Clean { .. } => Vec::new(),
            Protocol::Single { attacks, .. } | Protocol::Ensemble { attacks, .. } | Protocol::Rotate1 { attacks, .. } => {
                attacks.clone().unwrap_or_else(all)
            }
            Protocol::Sweep { attack, .. } | Protocol::Featdiff { attack, .. } => vec![attack.clone()],
        }
    }

    /// Black boxes, defaulting to every zoo model outside the source.
    pub fn black_boxes(&self, cfg: &RunConfig) -> Vec<String> {
        let rest = |src: Vec<String>| -> Vec<String> { cfg.zoo.models.iter().map(|m| m.name.clone()).filter(|n| !src.contains(n)).collect() };
        match self {
            Protocol::Clean { .. } => cfg.zoo.models.iter().map(|m| m.name.clone()).collect(),
            Protocol::Featdiff { black_box, .. } => vec![black_box.clone()],
            Protocol::Single { black_boxes, .. }
            | Protocol::Ensemble { black_boxes, .. }
            | Protocol::Rotate1 { black_boxes, .. }
            | Protocol::Sweep { black_boxes, .. } => black_boxes
                .clone()
                .unwrap_or_else(|| rest(self.source().map(|s| s.members()).unwrap_or_default())),
        }
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        s.push('/');
        match seg {
            Segment::Seq { index } => s.push_str(&index.to_string()),
            Segment::Map { key } => s.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => s.push_str(variant),
            Segment::Unknown => s.push('?'),
        }
    }
    if s.is_empty() {
        s.push('/');
    }
    s
}

fn invalid(pointer: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let p = pointer(e.path());
            invalid(p, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; `XPOSE_SEED`, when set, replaces the run seed.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("", format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(v) = std::env::var("XPOSE_SEED") {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| invalid("/seed", format!("XPOSE_SEED `{v}` is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synthetic => {
                if !(2..=10).contains(&d.classes) {
                    return Err(invalid("/dataset/classes", "synthetic classes must be in 2..=10"));
                }
                if d.size == 0 || d.test_size == 0 {
                    return Err(invalid("/dataset/size", "dataset sizes must be >= 1"));
                }
            }
            DatasetKind::Cifar10Bin => {
                if d.path.is_none() {
                    return Err(invalid("/dataset/path", "cifar10-bin needs a path"));
                }
            }
        }
        if d.eval_images == 0 {
            return Err(invalid("/dataset/eval_images", "eval_images must be >= 1"));
        }
        let mut names = BTreeSet::new();
        for (i, m) in self.zoo.models.iter().enumerate() {
            if m.name.is_empty() || m.name.contains(['/', '\\', '+']) || m.name.starts_with("ens-") {
                return Err(invalid(
                    format!("/zoo/models/{i}/name"),
                    "model names must be non-empty, without / \\ + and not start with ens-",
                ));
            }
            if !names.insert(m.name.as_str()) {
                return Err(invalid(format!("/zoo/models/{i}/name"), format!("duplicate model `{}`", m.name)));
            }
            self.train_config(m)
                .validate()
                .map_err(|e| invalid(format!("/zoo/models/{i}/train"), e))?;
        }
        let mut attacks = BTreeSet::new();
        for (i, a) in self.attacks.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(['/', '\\']) || a.name.contains("__") {
                return Err(invalid(format!("/attacks/{i}/name"), "attack names must be non-empty without / \\ or __"));
            }
            if !attacks.insert(a.name.as_str()) {
                return Err(invalid(format!("/attacks/{i}/name"), format!("duplicate attack `{}`", a.name)));
            }
            self.attack_config(a, &Source::Single(String::new()))
                .validate()
                .map_err(|e| invalid(format!("/attacks/{i}"), e.to_string()))?;
        }
        for (i, p) in self.protocols.iter().enumerate() {
            let at = |field: &str| format!("/protocols/{i}/{field}");
            let model = |field: &str, n: &String| -> Result<(), CliError> {
                if names.contains(n.as_str()) {
                    Ok(())
                } else {
                    Err(invalid(at(field), format!("unknown model `{n}`")))
                }
            };
            if let Some(src) = p.source() {
                let field = if matches!(p, Protocol::Ensemble { .. }) {
                    "members"
                } else {
                    "white_box"
                };
                let members = src.members();
                if members.is_empty() {
                    return Err(invalid(at(field), "needs at least one model"));
                }
                for m in &members {
                    model(field, m)?;
                }
                let bbs = p.black_boxes(self);
                if bbs.is_empty() {
                    return Err(invalid(at("black_boxes"), "no black boxes left to evaluate"));
                }
                for b in &bbs {
                    model("black_boxes", b)?;
                    if members.contains(b) {
                        return Err(invalid(at("black_boxes"), format!("`{b}` is also a white box")));
                    }
                }
            }
            for a in p.attack_names(self) {
                if !attacks.contains(a.as_str()) {
                    return Err(invalid(at("attacks"), format!("unknown attack `{a}`")));
                }
            }
            if let Protocol::Sweep { stride, .. } = p {
                if *stride == 0 || 360 % stride != 0 {
                    return Err(invalid(at("stride"), "stride must be a positive divisor of 360"));
                }
            }
            if let Protocol::Featdiff { k, .. } = p {
                if *k == 0 {
                    return Err(invalid(at("k"), "k must be >= 1"));
                }
            }
            if let Protocol::Clean { transforms } | Protocol::Single { transforms, .. } | Protocol::Ensemble { transforms, .. } = p {
                if transforms.is_empty() {
                    return Err(invalid(at("transforms"), "needs at least one transform"));
                }
            }
        }
        Ok(())
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or_else(|| seed::derive_named(self.seed, "dataset"))
    }

    pub fn init_seed(&self, model: &str) -> u64 {
        seed::derive_named(self.seed, &format!("init/{model}"))
    }

    pub fn train_config(&self, m: &ModelEntry) -> TrainConfig {
        let t = &m.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: t.seed.unwrap_or_else(|| seed::derive_named(self.seed, &format!("train/{}", m.name))),
            adv_train: t.adv_train,
        }
    }

    pub fn attack_config(&self, a: &NamedAttack, source: &Source) -> AttackConfig {
        AttackConfig {
            epsilon: a.epsilon,
            iters: a.iters,
            step: a.step,
            momentum: a.momentum,
            variant: a.variant,
            seed: a
                .seed
                .unwrap_or_else(|| seed::derive_named(self.seed, &format!("attack/{}/{}", a.name, source.id()))),
        }
    }

    pub fn model(&self, name: &str) -> Option<&ModelEntry> {
        self.zoo.models.iter().find(|m| m.name == name)
    }

    pub fn attack(&self, name: &str) -> Option<&NamedAttack> {
        self.attacks.iter().find(|a| a.name == name)
    }

    /// Every (source, attack) pair some protocol needs, in a stable order.
    pub fn required_crafts(&self) -> Vec<(Source, String)> {
        let mut out: Vec<(Source, String)> = Vec::new();
        for p in &self.protocols {
            if let Some(src) = p.source() {
                for a in p.attack_names(self) {
                    let pair = (src.clone(), a);
                    if !out.contains(&pair) {
                        out.push(pair);
                    }
                }
            }
        }
        out
    }
}
