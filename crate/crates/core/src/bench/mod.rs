//! Evaluation protocols: how often images (clean or adversarial) fool a set
//! of black-box models, with and without a post-hoc geometric transform.
//!
//! A rate is the percentage of all evaluation images whose top-1 prediction
//! differs from the true label.

mod featdiff;
mod sweep;

pub use featdiff::{feature_diff, find_feature_pair, top_k_channels, FeatureDiffReport, DEFAULT_K};
pub use sweep::{rotation_sweep, sweep_angles, sweep_cached, SweepCurve, SweepPoint};

use serde::{Deserialize, Serialize};

use crate::attack::{craft, AttackConfig, AttackError, Ensemble};
use crate::data::Dataset;
use crate::tensor::{predict, Tensor, TensorError};
use crate::xform::TransformSpec;
use crate::zoo::ModelGraph;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cannot compute a success rate over an empty image set")]
    EmptyImageSet,
    #[error("{labels} labels for {images} images")]
    LabelCount { images: usize, labels: usize },
    #[error("model `{0}` is both a white box and a black box")]
    OverlappingModels(String),
    #[error("no black-box models to evaluate")]
    NoBlackBoxes,
    #[error("sweep stride {0} must be a positive divisor of 360")]
    InvalidStride(u32),
    #[error("unknown layer `{layer}` (valid: {valid})")]
    UnknownLayer { layer: String, valid: String },
    #[error("layer `{0}` has no spatial channels to compare")]
    NotAFeatureMap(String),
    #[error("feature-diff inputs must be single images of equal shape")]
    PairShape,
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `100 * |{i : pred_i != label_i}| / n`.
pub fn rate_from_predictions(pred: &[usize], labels: &[usize]) -> Result<f64, BenchError> {
    if labels.is_empty() {
        return Err(BenchError::EmptyImageSet);
    }
    if pred.len() != labels.len() {
        return Err(BenchError::LabelCount {
            images: pred.len(),
            labels: labels.len(),
        });
    }
    let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

pub fn success_rate(model: &ModelGraph, images: &Tensor, labels: &[usize]) -> Result<f64, BenchError> {
    if images.shape().b == 0 {
        return Err(BenchError::EmptyImageSet);
    }
    if images.shape().b != labels.len() {
        return Err(BenchError::LabelCount {
            images: images.shape().b,
            labels: labels.len(),
        });
    }
    rate_from_predictions(&predict(model, images)?, labels)
}

/// One black box's column: rates on the raw and on the transformed images,
/// plus the predictions they were counted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub black_box: String,
    pub baseline_rate: f64,
    pub transformed_rate: f64,
    pub baseline_predictions: Vec<usize>,
    pub transformed_predictions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Crafting model(s); empty for clean-image runs.
    pub white_box: Vec<String>,
    /// Attack name, or `clean`.
    pub attack: String,
    pub transform: TransformSpec,
    pub dataset: String,
    pub seed: u64,
    pub labels: Vec<usize>,
    pub rows: Vec<TransferRow>,
}

impl TransferReport {
    pub fn images(&self) -> usize {
        self.labels.len()
    }

    pub fn white_box_id(&self) -> String {
        if self.white_box.is_empty() {
            "-".into()
        } else {
            self.white_box.join("+")
        }
    }

    pub fn row(&self, black_box: &str) -> Option<&TransferRow> {
        self.rows.iter().find(|r| r.black_box == black_box)
    }
}

/// Mean and max of `transformed / baseline` over cells with a nonzero
/// baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub mean: f64,
    pub max: f64,
    pub cells: usize,
    pub skipped: usize,
}

pub fn ratio_stats<'a>(reports: impl IntoIterator<Item = &'a TransferReport>) -> Option<RatioStats> {
    ratio_stats_of(
        reports
            .into_iter()
            .flat_map(|r| &r.rows)
            .map(|row| (row.transformed_rate, row.baseline_rate)),
    )
}

/// Same statistic over raw `(transformed, baseline)` pairs.
pub fn ratio_stats_of(cells: impl IntoIterator<Item = (f64, f64)>) -> Option<RatioStats> {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for (transformed, baseline) in cells {
        if baseline > 0.0 {
            ratios.push(transformed / baseline);
        } else {
            skipped += 1;
        }
    }
    if ratios.is_empty() {
        return None;
    }
    Some(RatioStats {
        mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
        max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        cells: ratios.len(),
        skipped,
    })
}

fn eval_row(model: &ModelGraph, x: &Tensor, xt: &Tensor, labels: &[usize]) -> Result<TransferRow, BenchError> {
    let baseline_predictions = predict(model, x)?;
    let transformed_predictions = predict(model, xt)?;
    Ok(TransferRow {
        black_box: model.name().to_string(),
        baseline_rate: rate_from_predictions(&baseline_predictions, labels)?,
        transformed_rate: rate_from_predictions(&transformed_predictions, labels)?,
        baseline_predictions,
        transformed_predictions,
    })
}

/// Evaluate fixed images (clean or previously crafted) on every black box,
/// raw and transformed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_images(
    white_box: Vec<String>,
    attack: &str,
    images: &Tensor,
    labels: &[usize],
    dataset: &str,
    seed: u64,
    black_boxes: &[&ModelGraph],
    spec: TransformSpec,
) -> Result<TransferReport, BenchError> {
    if images.shape().b == 0 {
        return Err(BenchError::EmptyImageSet);
    }
    if images.shape().b != labels.len() {
        return Err(BenchError::LabelCount {
            images: images.shape().b,
            labels: labels.len(),
        });
    }
    let transformed = spec.apply(images);
    let rows = black_boxes
        .iter()
        .map(|m| eval_row(m, images, &transformed, labels))
        .collect::<Result<_, BenchError>>()?;
    Ok(TransferReport {
        white_box,
        attack: attack.to_string(),
        transform: spec,
        dataset: dataset.to_string(),
        seed,
        labels: labels.to_vec(),
        rows,
    })
}

/// Clean images only: each model's error with and without the transform.
pub fn clean_transform_protocol(models: &[&ModelGraph], ds: &Dataset, spec: TransformSpec) -> Result<TransferReport, BenchError> {
    evaluate_images(Vec::new(), "clean", &ds.images, &ds.labels, &ds.id, 0, models, spec)
}

fn check_disjoint(white: &[&str], black_boxes: &[&ModelGraph]) -> Result<(), BenchError> {
    if black_boxes.is_empty() {
        return Err(BenchError::NoBlackBoxes);
    }
    if let Some(m) = black_boxes.iter().find(|m| white.contains(&m.name())) {
        return Err(BenchError::OverlappingModels(m.name().to_string()));
    }
    Ok(())
}

/// Craft on `white_box` once, then evaluate the adversarial images raw and
/// transformed on every black box.
pub fn single_model_protocol(
    white_box: &ModelGraph,
    black_boxes: &[&ModelGraph],
    ds: &Dataset,
    cfg: &AttackConfig,
    spec: TransformSpec,
) -> Result<TransferReport, BenchError> {
    check_disjoint(&[white_box.name()], black_boxes)?;
    let adv = craft(white_box, &ds.images, &ds.labels, cfg)?;
    evaluate_images(
        vec![white_box.name().to_string()],
        cfg.variant.name(),
        &adv,
        &ds.labels,
        &ds.id,
        cfg.seed,
        black_boxes,
        spec,
    )
}

/// As [`single_model_protocol`], crafting on the ensemble's mean logits.
pub fn ensemble_protocol(
    ensemble: &Ensemble<'_>,
    black_boxes: &[&ModelGraph],
    ds: &Dataset,
    cfg: &AttackConfig,
    spec: TransformSpec,
) -> Result<TransferReport, BenchError> {
    let names: Vec<&str> = ensemble.members().iter().map(|m| m.name()).collect();
    check_disjoint(&names, black_boxes)?;
    let adv = craft(ensemble, &ds.images, &ds.labels, cfg)?;
    evaluate_images(
        names.iter().map(|s| s.to_string()).collect(),
        cfg.variant.name(),
        &adv,
        &ds.labels,
        &ds.id,
        cfg.seed,
        black_boxes,
        spec,
    )
}
