//! Iterative sign-gradient attacks.
//!
//! Every variant plugs into one momentum loop: starting from `g = 0` (or a
//! pre-converged momentum for GI-FGSM), each iteration computes a variant
//! gradient, L1-normalises it per image, accumulates `g = mu * g + g_hat`
//! and steps `x = clip01(clip_eps(x + alpha * sign(g)))`. The loss is the
//! untargeted cross-entropy of the true label.

mod surrogate;
mod variants;

pub use surrogate::{Ensemble, Surrogate};
pub use variants::{dim_draw, dim_transform, gaussian_kernel, smooth_depthwise, DimDraw};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("invalid attack input: {0}")]
    InvalidInput(String),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Gradient variant plugged into the momentum loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    /// Plain iterative FGSM; momentum is forced to zero.
    Ifgsm,
    Mifgsm,
    /// Input diversity: random resize-and-pad with probability `p`.
    Dim {
        p: f64,
    },
    /// Translation invariance: Gaussian smoothing of the gradient, kernel `k`.
    Tim {
        k: usize,
    },
    /// Scale invariance: mean gradient over `m` copies scaled by `1/2^i`.
    Sim {
        m: usize,
    },
    /// Flat-region gradients from `n` neighbourhood samples.
    Pgn {
        n: usize,
        delta: f32,
        zeta: f32,
    },
    /// Global momentum initialised by `k_pre` iterations of step `s * alpha`.
    Gifgsm {
        k_pre: usize,
        s: f32,
    },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ifgsm => "ifgsm",
            Variant::Mifgsm => "mifgsm",
            Variant::Dim { .. } => "dim",
            Variant::Tim { .. } => "tim",
            Variant::Sim { .. } => "sim",
            Variant::Pgn { .. } => "pgn",
            Variant::Gifgsm { .. } => "gifgsm",
        }
    }

    /// Default hyper-parameters used in the transfer experiments.
    pub fn dim() -> Self {
        Variant::Dim { p: 0.5 }
    }
    pub fn tim() -> Self {
        Variant::Tim { k: 7 }
    }
    pub fn sim() -> Self {
        Variant::Sim { m: 5 }
    }
    pub fn pgn() -> Self {
        Variant::Pgn {
            n: 20,
            delta: 0.5,
            zeta: 3.0,
        }
    }
    pub fn gifgsm() -> Self {
        Variant::Gifgsm { k_pre: 5, s: 10.0 }
    }

    /// All seven variants with their default hyper-parameters.
    pub fn all_defaults() -> [Variant; 7] {
        [
            Variant::Ifgsm,
            Variant::Mifgsm,
            Variant::dim(),
            Variant::tim(),
            Variant::sim(),
            Variant::pgn(),
            Variant::gifgsm(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity budget on the `[0, 1]` pixel scale (16/255, 4/255, ...).
    pub epsilon: f32,
    pub iters: usize,
    /// Step size; `epsilon / iters` when absent.
    #[serde(default)]
    pub step: Option<f32>,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f32 {
    1.0
}

impl AttackConfig {
    /// MI-FGSM with `mu = 1` and ten iterations.
    pub fn new(epsilon: f32, variant: Variant) -> Self {
        Self {
            epsilon,
            iters: 10,
            step: None,
            momentum: 1.0,
            variant,
            seed: 0,
        }
    }

    pub fn alpha(&self) -> f32 {
        self.step.unwrap_or(self.epsilon / self.iters.max(1) as f32)
    }

    pub fn effective_momentum(&self) -> f32 {
        if matches!(self.variant, Variant::Ifgsm) {
            0.0
        } else {
            self.momentum
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must be in [0, 1]");
        }
        if self.iters == 0 {
            return bad("iters must be >= 1");
        }
        if let Some(a) = self.step {
            if !(a > 0.0 && a.is_finite()) {
                return bad("step must be > 0");
            }
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return bad("momentum must be >= 0");
        }
        match self.variant {
            Variant::Dim { p } if !(0.0..=1.0).contains(&p) => bad("dim p must be in [0, 1]"),
            Variant::Tim { k } if k % 2 == 0 => bad("tim kernel size must be odd"),
            Variant::Sim { m: 0 } => bad("sim copies m must be >= 1"),
            Variant::Pgn { n, delta, zeta } if n == 0 || !(0.0..=1.0).contains(&delta) || !(zeta >= 0.0 && zeta.is_finite()) => {
                bad("pgn needs n >= 1, delta in [0, 1], zeta >= 0")
            }
            Variant::Gifgsm { s, .. } if !(s >= 1.0 && s.is_finite()) => bad("gifgsm s must be >= 1"),
            _ => Ok(()),
        }
    }
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Divide each image by its L1 norm; all-zero images are left as they are.
pub fn normalize_l1(g: &mut Tensor) {
    let len = g.shape().image_len();
    for img in g.data_mut().chunks_exact_mut(len) {
        let norm: f32 = img.iter().map(|v| v.abs()).sum();
        if norm > 0.0 {
            img.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// `x = clip01(clip(x + alpha * sign(g), x0 - eps, x0 + eps))`, in place.
fn sign_step(x: &mut Tensor, g: &Tensor, x_clean: &Tensor, alpha: f32, eps: f32) {
    for ((xi, &gi), &x0) in x.data_mut().iter_mut().zip(g.data()).zip(x_clean.data()) {
        let v = *xi + alpha * sign(gi);
        *xi = v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    }
}

fn accumulate(g: &mut Tensor, mut g_hat: Tensor, mu: f32) {
    normalize_l1(&mut g_hat);
    for (a, &b) in g.data_mut().iter_mut().zip(g_hat.data()) {
        *a = mu * *a + b;
    }
}

fn check_inputs(x: &Tensor, labels: &[usize]) -> Result<(), AttackError> {
    if labels.len() != x.shape().b {
        return Err(AttackError::InvalidInput(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.shape().b
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(AttackError::InvalidInput(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

fn finite(g: Tensor, iteration: usize) -> Result<Tensor, AttackError> {
    if g.all_finite() {
        Ok(g)
    } else {
        Err(AttackError::NonFiniteGradient { iteration })
    }
}

/// Craft untargeted adversarial examples for `x_clean` against `surrogate`.
/// Stochastic variants draw from a stream seeded by `cfg.seed`.
pub fn craft<S: Surrogate + ?Sized>(surrogate: &S, x_clean: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor, AttackError> {
    cfg.validate()?;
    check_inputs(x_clean, labels)?;
    let x_clean = x_clean.clone().with_requires_grad(false);
    let alpha = cfg.alpha();
    let eps = cfg.epsilon;
    let mu = cfg.effective_momentum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut g = match cfg.variant {
        Variant::Gifgsm { k_pre, s } => pre_converge(surrogate, &x_clean, labels, cfg, k_pre, s)?,
        _ => Tensor::zeros(x_clean.shape()),
    };
    let mut x = x_clean.clone();
    for t in 0..cfg.iters {
        let g_hat = variants::variant_gradient(surrogate, &x, labels, cfg, alpha, &mut rng)?;
        let g_hat = finite(g_hat, t)?;
        accumulate(&mut g, g_hat, mu);
        sign_step(&mut x, &g, &x_clean, alpha, eps);
    }
    Ok(x)
}

/// GI-FGSM warm start: `k_pre` MI-FGSM iterations with step `s * alpha`
/// from the clean input. Only the accumulated momentum is kept.
pub fn pre_converge<S: Surrogate + ?Sized>(
    surrogate: &S,
    x_clean: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    k_pre: usize,
    s: f32,
) -> Result<Tensor, AttackError> {
    let alpha = cfg.alpha() * s;
    let mut g = Tensor::zeros(x_clean.shape());
    let mut x = x_clean.clone();
    for t in 0..k_pre {
        let g_hat = finite(surrogate.loss_grad(&x, labels)?, t)?;
        accumulate(&mut g, g_hat, cfg.momentum);
        sign_step(&mut x, &g, x_clean, alpha, cfg.epsilon);
    }
    Ok(g)
}
