//! Shared helpers for the integration tests: an independent f64 reference
//! forward pass, random small networks and finite-difference checks.
#![allow(dead_code)]

pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpose::tensor::{BatchNorm, Conv2d, Dense, Layer, LayerKind, Shape, Tensor};
use xpose::zoo::{InputSpec, ModelGraph};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: Shape, lo: f32, hi: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn conv(rng: &mut impl Rng, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Conv2d {
    let bound = 1.5 / ((kernel * kernel * in_ch) as f32).sqrt();
    Conv2d {
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
        weight: (0..kernel * kernel * in_ch * out_ch).map(|_| rng.gen_range(-bound..bound)).collect(),
        bias: (0..out_ch).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    }
}

fn dense(rng: &mut impl Rng, i: usize, o: usize) -> Dense {
    let bound = 1.5 / (i as f32).sqrt();
    Dense {
        in_dim: i,
        out_dim: o,
        weight: (0..i * o).map(|_| rng.gen_range(-bound..bound)).collect(),
        bias: (0..o).map(|_| rng.gen_range(0.1..0.3)).collect(),
    }
}

fn bn(rng: &mut impl Rng, c: usize) -> BatchNorm {
    BatchNorm {
        gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        beta: (0..c).map(|_| rng.gen_range(0.0..0.3)).collect(),
        running_mean: (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        running_var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
        eps: 1e-5,
    }
}

/// A small random convnet. Every net has conv, batch norm, ReLU, a
/// residual block, max pooling, flatten and dense layers; even-numbered
/// nets also pool globally before the head.
pub fn random_net(index: u64) -> ModelGraph {
    let mut r = rng(1000 + index);
    let c_in = r.gen_range(1..=3);
    let side = r.gen_range(6..=9);
    let classes = r.gen_range(2..=4);
    let c1 = r.gen_range(2..=4);
    let (k1, s1, p1) = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 1, 0)][index as usize % 4];
    let first = conv(&mut r, c_in, c1, k1, s1, p1);
    let h1 = (side + 2 * p1 - k1) / s1 + 1;
    let mut layers = vec![
        Layer::new("conv1", LayerKind::Conv2d(first)),
        Layer::new("bn1", LayerKind::BatchNormInference(bn(&mut r, c1))),
        Layer::new("relu1", LayerKind::ReLU),
        Layer::new(
            "res",
            LayerKind::Residual(vec![
                Layer::new("res.conv_a", LayerKind::Conv2d(conv(&mut r, c1, c1, 3, 1, 1))),
                Layer::new("res.relu", LayerKind::ReLU),
                Layer::new("res.conv_b", LayerKind::Conv2d(conv(&mut r, c1, c1, 3, 1, 1))),
            ]),
        ),
        Layer::new("pool", LayerKind::MaxPool { k: 2, s: 2 }),
    ];
    let hp = (h1 - 2) / 2 + 1;
    let flat = if index.is_multiple_of(2) {
        layers.push(Layer::new("gap", LayerKind::AvgPoolGlobal));
        c1
    } else {
        hp * hp * c1
    };
    let hidden = r.gen_range(4..=8);
    layers.push(Layer::new("flatten", LayerKind::Flatten));
    layers.push(Layer::new("fc1", LayerKind::Dense(dense(&mut r, flat, hidden))));
    layers.push(Layer::new("relu2", LayerKind::ReLU));
    layers.push(Layer::new("fc2", LayerKind::Dense(dense(&mut r, hidden, classes))));
    ModelGraph::new(format!("net{index}"), InputSpec::new(side, side, c_in, classes), layers).unwrap()
}

/// `max |a - n| / max(|n|_inf, floor)`.
pub fn rel_err(analytic: &[f32], numeric: &[f64], floor: f64) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic.iter().zip(numeric).map(|(a, n)| (*a as f64 - n).abs()).fold(0.0, f64::max) / scale
}

pub struct GradCheck {
    pub logits_err: f64,
    pub input_rel: f64,
    pub param_rel: f64,
    /// Largest numeric gradient magnitudes, to rule out vacuous passes.
    pub input_scale: f64,
    pub param_scale: f64,
    pub probes: usize,
    pub skipped: usize,
}

/// Compare the engine's input and parameter gradients with kink-aware
/// central differences of the f64 reference, on a random batch of two.
pub fn gradient_check(model: &ModelGraph, seed: u64) -> GradCheck {
    use xpose::tensor::{backward_to_input, backward_to_params, logits};
    let spec = model.input_spec();
    let mut r = rng(seed);
    let x = uniform_tensor(spec.batch_shape(2), 0.0, 1.0, &mut r);
    let labels: Vec<usize> = (0..2).map(|_| r.gen_range(0..spec.num_classes)).collect();
    let (shape, xf) = reference::tensor_f64(&x);
    let base = reference::forward(model, shape, &xf, &labels);

    let engine_logits = logits(model, &x).unwrap();
    let logits_err = engine_logits
        .data()
        .iter()
        .zip(&base.logits)
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);

    let mut probes = 0;
    let mut skipped = 0;
    let gx = backward_to_input(model, &x.clone().with_requires_grad(true), &labels).unwrap();
    let mut num_in = Vec::with_capacity(xf.len());
    let mut ana_in = Vec::with_capacity(xf.len());
    for i in 0..xf.len() {
        probes += 1;
        let d = reference::kink_aware_diff(&base.pattern, |h| {
            let mut xp = xf.clone();
            xp[i] += h;
            reference::forward(model, shape, &xp, &labels)
        });
        match d {
            Some(v) => {
                num_in.push(v);
                ana_in.push(gx.data()[i]);
            }
            None => skipped += 1,
        }
    }

    let grads = backward_to_params(model, &x, &labels).unwrap();
    let mut num_p = Vec::new();
    let mut ana_p = Vec::new();
    for pg in &grads {
        for j in 0..pg.grad.len() {
            probes += 1;
            let probe = |h: f64| -> (reference::RefOut, f64) {
                let mut m = model.clone();
                let mut moved = 0.0;
                m.visit_params_mut(|name, values, _| {
                    if name == pg.name {
                        let old = values[j];
                        let new = (old as f64 + h) as f32;
                        moved = new as f64 - old as f64;
                        values[j] = new;
                    }
                });
                (reference::forward(&m, shape, &xf, &labels), moved)
            };
            let mut h = 1e-3;
            let mut found = None;
            while h >= 1e-6 {
                let (p, dp) = probe(h);
                let (m, dm) = probe(-h);
                if p.pattern == base.pattern && m.pattern == base.pattern {
                    found = Some((p.loss - m.loss) / (dp - dm));
                    break;
                }
                h /= 10.0;
            }
            match found {
                Some(v) => {
                    num_p.push(v);
                    ana_p.push(pg.grad[j]);
                }
                None => skipped += 1,
            }
        }
    }
    GradCheck {
        logits_err,
        input_rel: rel_err(&ana_in, &num_in, 1e-6),
        param_rel: rel_err(&ana_p, &num_p, 1e-6),
        input_scale: num_in.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        param_scale: num_p.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        probes,
        skipped,
    }
}
