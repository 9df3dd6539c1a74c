use std::collections::{BTreeMap, BTreeSet};

use super::kernels::{self, BnCache};
use super::layer::{Layer, LayerKind};
use super::loss::softmax_cross_entropy;
use super::{Shape, Tensor, TensorError};
use crate::zoo::ModelGraph;

/// Logits plus any tapped intermediate activations.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub activations: BTreeMap<String, Tensor>,
}

/// Gradient of the loss with respect to one trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub name: String,
    pub grad: Vec<f32>,
}

enum Record {
    Conv(Tensor),
    MaxPool { in_shape: Shape, argmax: Vec<u32> },
    Avg(Shape),
    Relu(Tensor),
    Bn(BnCache),
    Dense(Tensor),
    Flatten(Shape),
    Residual(Vec<Record>),
}

struct Ctx<'a> {
    taps: &'a BTreeSet<&'a str>,
    activations: BTreeMap<String, Tensor>,
    record: bool,
    batch_stats: bool,
    moments: Vec<kernels::Pair>,
}

fn run(layers: &[Layer], mut x: Tensor, ctx: &mut Ctx<'_>) -> Result<(Tensor, Vec<Record>), TensorError> {
    let mut tape = Vec::with_capacity(if ctx.record { layers.len() } else { 0 });
    for layer in layers {
        let out_shape = layer.output_shape(x.shape())?;
        let (y, rec) = match &layer.kind {
            LayerKind::Conv2d(conv) => {
                let y = kernels::conv2d_forward(conv, &x, out_shape);
                (y, Record::Conv(x))
            }
            LayerKind::MaxPool { k, s } => {
                let (y, argmax) = kernels::maxpool_forward(&x, *k, *s, out_shape);
                (y, Record::MaxPool { in_shape: x.shape(), argmax })
            }
            LayerKind::AvgPoolGlobal => (kernels::avgpool_forward(&x), Record::Avg(x.shape())),
            LayerKind::ReLU => {
                let y = kernels::relu_forward(&x);
                let rec = if ctx.record {
                    Record::Relu(y.clone())
                } else {
                    Record::Flatten(out_shape)
                };
                (y, rec)
            }
            LayerKind::BatchNormInference(bn) => {
                let (y, cache, moments) = kernels::batchnorm_forward(bn, &x, ctx.batch_stats);
                if let Some(m) = moments {
                    ctx.moments.push(m);
                }
                (y, Record::Bn(cache))
            }
            LayerKind::Dense(d) => (kernels::dense_forward(d, &x), Record::Dense(x)),
            LayerKind::Flatten => {
                let in_shape = x.shape();
                let y = Tensor::from_vec(out_shape, x.into_data())?;
                (y, Record::Flatten(in_shape))
            }
            LayerKind::Residual(body) => {
                let (branch, inner) = run(body, x.clone(), ctx)?;
                let mut y = x;
                for (a, b) in y.data_mut().iter_mut().zip(branch.data()) {
                    *a += b;
                }
                (y.with_requires_grad(false), Record::Residual(inner))
            }
        };
        if ctx.taps.contains(layer.name.as_str()) {
            ctx.activations.insert(layer.name.clone(), y.clone());
        }
        if ctx.record {
            tape.push(rec);
        }
        x = y;
    }
    Ok((x, tape))
}

/// Walks the tape backwards. Parameter gradients are pushed in reverse graph
/// order; callers reverse the list once at the end.
fn back(layers: &[Layer], tape: &[Record], mut dout: Tensor, want: bool, grads: &mut Vec<Vec<f32>>) -> Tensor {
    for (layer, rec) in layers.iter().zip(tape).rev() {
        dout = match (&layer.kind, rec) {
            (LayerKind::Conv2d(conv), Record::Conv(input)) => {
                let (dx, pg) = kernels::conv2d_backward(conv, input, &dout, want);
                if let Some((dw, db)) = pg {
                    grads.push(db);
                    grads.push(dw);
                }
                dx
            }
            (LayerKind::MaxPool { .. }, Record::MaxPool { in_shape, argmax }) => kernels::maxpool_backward(*in_shape, argmax, &dout),
            (LayerKind::AvgPoolGlobal, Record::Avg(in_shape)) => kernels::avgpool_backward(*in_shape, &dout),
            (LayerKind::ReLU, Record::Relu(out)) => kernels::relu_backward(out, &dout),
            (LayerKind::BatchNormInference(bn), Record::Bn(cache)) => {
                let (dx, pg) = kernels::batchnorm_backward(bn, cache, &dout, want);
                if let Some((dgamma, dbeta)) = pg {
                    grads.push(dbeta);
                    grads.push(dgamma);
                }
                dx
            }
            (LayerKind::Dense(d), Record::Dense(input)) => {
                let (dx, pg) = kernels::dense_backward(d, input, &dout, want);
                if let Some((dw, db)) = pg {
                    grads.push(db);
                    grads.push(dw);
                }
                dx
            }
            (LayerKind::Flatten, Record::Flatten(in_shape)) => Tensor::from_vec(*in_shape, dout.into_data()).expect("flatten grad"),
            (LayerKind::Residual(body), Record::Residual(inner)) => {
                let branch = back(body, inner, dout.clone(), want, grads);
                for (a, b) in dout.data_mut().iter_mut().zip(branch.data()) {
                    *a += b;
                }
                dout
            }
            _ => unreachable!("tape out of sync with layer list"),
        };
    }
    dout
}

fn check_input(model: &ModelGraph, x: &Tensor) -> Result<(), TensorError> {
    let spec = model.input_spec();
    let s = x.shape();
    if (s.h, s.w, s.c) != (spec.h, spec.w, spec.c) {
        return Err(TensorError::ShapeMismatch {
            layer: "input".into(),
            detail: format!("model `{}` expects [b, {}, {}, {}], got {s}", model.name(), spec.h, spec.w, spec.c),
        });
    }
    Ok(())
}

/// Pure forward pass. Every name in `taps` must be a layer of the graph
/// (nested residual layers included).
pub fn forward(model: &ModelGraph, x: &Tensor, taps: &[&str]) -> Result<ForwardOutput, TensorError> {
    check_input(model, x)?;
    let names = model.layer_names();
    for &tap in taps {
        if !names.iter().any(|n| n == tap) {
            return Err(TensorError::UnknownTap {
                name: tap.to_string(),
                valid: names,
            });
        }
    }
    let taps: BTreeSet<&str> = taps.iter().copied().collect();
    let mut ctx = Ctx {
        taps: &taps,
        activations: BTreeMap::new(),
        record: false,
        batch_stats: false,
        moments: Vec::new(),
    };
    let (logits, _) = run(model.layers(), x.clone().with_requires_grad(false), &mut ctx)?;
    Ok(ForwardOutput {
        logits,
        activations: ctx.activations,
    })
}

pub fn logits(model: &ModelGraph, x: &Tensor) -> Result<Tensor, TensorError> {
    forward(model, x, &[]).map(|o| o.logits)
}

const PREDICT_CHUNK: usize = 128;

/// Top-1 class per batch entry; ties resolve to the lowest class index.
pub fn predict(model: &ModelGraph, x: &Tensor) -> Result<Vec<usize>, TensorError> {
    let b = x.shape().b;
    let mut out = Vec::with_capacity(b);
    let mut start = 0;
    while start < b {
        let end = (start + PREDICT_CHUNK).min(b);
        let l = logits(model, &x.slice_batch(start..end))?;
        for n in 0..end - start {
            let row = l.image(n);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
        start = end;
    }
    Ok(out)
}

fn record(model: &ModelGraph, x: &Tensor, batch_stats: bool) -> Result<(Tensor, Vec<Record>, Vec<kernels::Pair>), TensorError> {
    check_input(model, x)?;
    let taps = BTreeSet::new();
    let mut ctx = Ctx {
        taps: &taps,
        activations: BTreeMap::new(),
        record: true,
        batch_stats,
        moments: Vec::new(),
    };
    let (logits, tape) = run(model.layers(), x.clone().with_requires_grad(false), &mut ctx)?;
    Ok((logits, tape, ctx.moments))
}

fn check_dlogits(logits: &Tensor, dlogits: &Tensor) -> Result<(), TensorError> {
    if logits.shape() != dlogits.shape() {
        return Err(TensorError::ShapeMismatch {
            layer: "logits".into(),
            detail: format!("upstream gradient {} vs logits {}", dlogits.shape(), logits.shape()),
        });
    }
    Ok(())
}

/// Vector-Jacobian product: pulls an arbitrary logit-space gradient back to
/// the input.
pub fn vjp_input(model: &ModelGraph, x: &Tensor, dlogits: &Tensor) -> Result<Tensor, TensorError> {
    let (logits, tape, _) = record(model, x, false)?;
    check_dlogits(&logits, dlogits)?;
    let mut unused = Vec::new();
    Ok(back(model.layers(), &tape, dlogits.clone(), false, &mut unused))
}

/// Gradient of the mean cross-entropy with respect to `x`.
pub fn backward_to_input(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<Tensor, TensorError> {
    if !x.requires_grad() {
        return Err(TensorError::NoGradRequested);
    }
    let (logits, tape, _) = record(model, x, false)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let mut unused = Vec::new();
    let dx = back(model.layers(), &tape, dlogits, false, &mut unused);
    if !dx.all_finite() {
        return Err(TensorError::NonFinite("input gradient"));
    }
    Ok(dx)
}

fn name_grads(model: &ModelGraph, mut grads: Vec<Vec<f32>>) -> Vec<ParamGrad> {
    grads.reverse();
    let names: Vec<String> = model.params().into_iter().filter(|p| p.trainable).map(|p| p.name).collect();
    debug_assert_eq!(names.len(), grads.len());
    names.into_iter().zip(grads).map(|(name, grad)| ParamGrad { name, grad }).collect()
}

/// Gradient of the mean cross-entropy with respect to every trainable
/// parameter, in graph order. Batch norm uses its stored statistics.
pub fn backward_to_params(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<Vec<ParamGrad>, TensorError> {
    let (logits, tape, _) = record(model, x, false)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let mut grads = Vec::new();
    back(model.layers(), &tape, dlogits, true, &mut grads);
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("parameter gradient"));
    }
    Ok(name_grads(model, grads))
}

pub(crate) struct TrainStep {
    pub loss: f32,
    pub grads: Vec<ParamGrad>,
    /// Batch moments observed at each batch-norm layer, in graph order.
    pub moments: Vec<kernels::Pair>,
    pub logits: Tensor,
}

/// Loss and parameter gradients with batch norm in training mode: layers
/// normalise with the current batch moments and differentiate through them.
pub(crate) fn train_step(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Result<TrainStep, TensorError> {
    let (logits, tape, moments) = record(model, x, true)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let mut grads = Vec::new();
    back(model.layers(), &tape, dlogits, true, &mut grads);
    Ok(TrainStep {
        loss,
        grads: name_grads(model, grads),
        moments,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Conv2d, Dense};
    use crate::zoo::InputSpec;

    fn dense_identity(n: usize) -> ModelGraph {
        let mut d = Dense::zeroed(n, n);
        for i in 0..n {
            d.weight[i * n + i] = 1.0;
        }
        ModelGraph::new("id", InputSpec::new(1, 1, n, n), vec![Layer::new("fc", LayerKind::Dense(d))]).unwrap()
    }

    #[test]
    fn identity_dense_passes_values_through() {
        let m = dense_identity(3);
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 3), vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.0]).unwrap();
        let out = forward(&m, &x, &[]).unwrap();
        assert_eq!(out.logits.data(), x.data());
        assert_eq!(out.logits.shape(), Shape::new(2, 1, 1, 3));
    }

    #[test]
    fn relu_tap() {
        let mut layers = dense_identity(3).layers().to_vec();
        layers.insert(0, Layer::new("relu", LayerKind::ReLU));
        let m = ModelGraph::new("r", InputSpec::new(1, 1, 3, 3), layers).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let out = forward(&m, &x, &["relu"]).unwrap();
        assert_eq!(out.activations["relu"].data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn ones_kernel_on_ones_image_sums_neighbourhood() {
        let mut conv = Conv2d::zeroed(1, 1, 3, 1, 1);
        conv.weight.iter_mut().for_each(|w| *w = 1.0);
        let layers = vec![
            Layer::new("conv", LayerKind::Conv2d(conv)),
            Layer::new("flat", LayerKind::Flatten),
            Layer::new("fc", LayerKind::Dense(Dense::zeroed(25, 2))),
        ];
        let m = ModelGraph::new("c", InputSpec::new(5, 5, 1, 2), layers).unwrap();
        let x = Tensor::full(Shape::new(1, 5, 5, 1), 1.0);
        let out = forward(&m, &x, &["conv"]).unwrap();
        let a = &out.activations["conv"];
        // hand convolution: interior 9, edges 6, corners 4
        for i in 0..5 {
            for j in 0..5 {
                let rows = if i == 0 || i == 4 { 2 } else { 3 };
                let cols = if j == 0 || j == 4 { 2 } else { 3 };
                assert_eq!(a.at(0, i, j, 0), (rows * cols) as f32);
            }
        }
    }

    #[test]
    fn unknown_tap_lists_valid_names() {
        let m = dense_identity(2);
        let x = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let err = forward(&m, &x, &["nope"]).unwrap_err();
        match err {
            TensorError::UnknownTap { name, valid } => {
                assert_eq!(name, "nope");
                assert_eq!(valid, vec!["fc".to_string()]);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn input_shape_mismatch_is_reported() {
        let m = dense_identity(2);
        let x = Tensor::zeros(Shape::new(1, 1, 1, 3));
        assert!(matches!(forward(&m, &x, &[]), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_final_dense_gives_zero_input_gradient() {
        let mut conv = Conv2d::zeroed(1, 2, 3, 1, 1);
        conv.weight.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f32 * 0.37).sin());
        let layers = vec![
            Layer::new("conv", LayerKind::Conv2d(conv)),
            Layer::new("relu", LayerKind::ReLU),
            Layer::new("gap", LayerKind::AvgPoolGlobal),
            Layer::new("fc", LayerKind::Dense(Dense::zeroed(2, 3))),
        ];
        let m = ModelGraph::new("z", InputSpec::new(4, 4, 1, 3), layers).unwrap();
        let x = Tensor::full(Shape::new(2, 4, 4, 1), 0.5).with_requires_grad(true);
        let g = backward_to_input(&m, &x, &[0, 2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_requires_flag() {
        let m = dense_identity(2);
        let x = Tensor::zeros(Shape::new(1, 1, 1, 2));
        assert!(matches!(backward_to_input(&m, &x, &[0]), Err(TensorError::NoGradRequested)));
    }

    #[test]
    fn single_dense_weight_gradient_is_outer_product() {
        let mut d = Dense::zeroed(3, 2);
        d.weight = vec![0.2, -0.1, 0.4, 0.3, -0.5, 0.1];
        d.bias = vec![0.05, -0.05];
        let m = ModelGraph::new("d", InputSpec::new(1, 1, 3, 2), vec![Layer::new("fc", LayerKind::Dense(d.clone()))]).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, 0.6, 0.9]).unwrap();
        let grads = backward_to_params(&m, &x, &[1]).unwrap();
        let l = logits(&m, &x).unwrap();
        let z = l.data();
        let e: Vec<f32> = z.iter().map(|v| v.exp()).collect();
        let sum: f32 = e.iter().sum();
        let delta = [e[0] / sum, e[1] / sum - 1.0];
        assert_eq!(grads[0].name, "fc.weight");
        for i in 0..3 {
            for (o, d) in delta.iter().enumerate() {
                let want = x.data()[i] * d;
                assert!((grads[0].grad[i * 2 + o] - want).abs() < 1e-6);
            }
        }
        assert_eq!(grads[1].name, "fc.bias");
    }

    #[test]
    fn duplicated_sample_keeps_mean_gradient() {
        let mut d = Dense::zeroed(2, 2);
        d.weight = vec![0.5, -0.25, 0.125, 0.75];
        let m = ModelGraph::new("d", InputSpec::new(1, 1, 2, 2), vec![Layer::new("fc", LayerKind::Dense(d))]).unwrap();
        let one = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.25, 0.5]).unwrap();
        let two = Tensor::concat(&[&one, &one]).unwrap();
        let g1 = backward_to_params(&m, &one, &[0]).unwrap();
        let g2 = backward_to_params(&m, &two, &[0, 0]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.grad.iter().zip(&b.grad) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }
}
