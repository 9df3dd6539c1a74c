use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelGraph, ZooError};
use crate::attack::{craft, AttackConfig, Variant};
use crate::data::Dataset;
use crate::tensor::{predict, train_step, Tensor, TensorError};

const BN_MOMENTUM: f32 = 0.1;
const LR_DECAY: f32 = 0.1;
const LR_DECAY_AT: f64 = 0.8;

/// Adversarial augmentation: every batch is extended with I-FGSM examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvTrain {
    pub epsilon: f32,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub seed: u64,
    #[serde(default)]
    pub adv_train: Option<AdvTrain>,
}

fn default_momentum() -> f32 {
    0.9
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err("learning_rate must be finite and >= 0".into());
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err("momentum must be in [0, 1)".into());
        }
        if let Some(adv) = &self.adv_train {
            if !(adv.epsilon > 0.0 && adv.epsilon <= 1.0) || adv.steps == 0 {
                return Err("adv_train needs 0 < epsilon <= 1 and steps >= 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Running accuracy over the final epoch's (clean) training batches.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f32,
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.shape().b)
        .map(|n| {
            let row = t.image(n);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mini-batch SGD with momentum and a single x0.1 step decay at 80% of the
/// epochs. Batch norm trains on batch moments; running statistics are
/// tracked with an exponential average and become the inference statistics
/// of the returned model. Deterministic for a fixed `cfg.seed`.
pub fn train(mut model: ModelGraph, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<(ModelGraph, TrainMetrics), ZooError> {
    cfg.validate().map_err(ZooError::InvalidConfig)?;
    for ds in [train_set, test_set] {
        ds.check_against(model.input_spec()).map_err(ZooError::DatasetMismatch)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f32>> = model.params().iter().filter(|p| p.trainable).map(|p| vec![0.0; p.values.len()]).collect();
    let decay_epoch = (cfg.epochs as f64 * LR_DECAY_AT).ceil() as usize;
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_loss = f32::NAN;
    let mut epoch_hits = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = if epoch >= decay_epoch {
            cfg.learning_rate * LR_DECAY
        } else {
            cfg.learning_rate
        };
        order.shuffle(&mut rng);
        epoch_hits = 0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clean = train_set.images.select(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let (x, y) = match &cfg.adv_train {
                Some(adv) => {
                    let acfg = AttackConfig {
                        epsilon: adv.epsilon,
                        iters: adv.steps,
                        step: None,
                        momentum: 0.0,
                        variant: Variant::Ifgsm,
                        seed: 0,
                    };
                    let x_adv = craft(&model, &clean, &labels, &acfg)?;
                    let x = Tensor::concat(&[&clean, &x_adv])?;
                    let y = labels.iter().chain(&labels).copied().collect();
                    (x, y)
                }
                None => (clean, labels.clone()),
            };
            let step = match train_step(&model, &x, &y) {
                Ok(s) => s,
                Err(TensorError::NonFinite(_)) => return Err(ZooError::Divergence { epoch, batch }),
                Err(e) => return Err(e.into()),
            };
            if !step.loss.is_finite() || step.grads.iter().any(|g| g.grad.iter().any(|v| !v.is_finite())) {
                return Err(ZooError::Divergence { epoch, batch });
            }
            last_loss = step.loss;
            epoch_hits += argmax_rows(&step.logits).iter().zip(&labels).filter(|(p, l)| p == l).count();

            let mut grads = step.grads.iter();
            let mut vel = velocity.iter_mut();
            let mut moments = step.moments.into_iter();
            let mut pending_var = None;
            model.visit_params_mut(|name, values, trainable| {
                if trainable {
                    let g = grads.next().expect("grad per trainable param");
                    let v = vel.next().expect("velocity per trainable param");
                    for ((p, vi), &gi) in values.iter_mut().zip(v.iter_mut()).zip(&g.grad) {
                        *vi = cfg.momentum * *vi + gi;
                        *p -= lr * *vi;
                    }
                } else if name.ends_with(".running_mean") {
                    let (mean, var) = moments.next().expect("moments per batch norm");
                    for (r, m) in values.iter_mut().zip(&mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    pending_var = Some(var);
                } else if name.ends_with(".running_var") {
                    let var = pending_var.take().expect("running_var follows running_mean");
                    for (r, v) in values.iter_mut().zip(&var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
            });
        }
    }

    let test_pred = predict(&model, &test_set.images)?;
    let metrics = TrainMetrics {
        train_accuracy: epoch_hits as f64 / n.max(1) as f64,
        test_accuracy: accuracy(&test_pred, &test_set.labels),
        final_loss: last_loss,
    };
    Ok((model, metrics))
}
