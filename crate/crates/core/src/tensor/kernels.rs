//! Raw NHWC kernels. Shapes are validated by the caller.

use super::layer::{BatchNorm, Conv2d, Dense};
use super::{Shape, Tensor};

/// Two vectors travelling together: weight and bias gradients, or batch
/// mean and variance.
pub(crate) type Pair = (Vec<f32>, Vec<f32>);

pub(crate) fn conv2d_forward(conv: &Conv2d, x: &Tensor, out_shape: Shape) -> Tensor {
    let s = x.shape();
    let (k, co, ci) = (conv.kernel, conv.out_ch, conv.in_ch);
    let mut out = vec![0.0f32; out_shape.len()];
    let xd = x.data();
    for n in 0..s.b {
        for oh in 0..out_shape.h {
            for ow in 0..out_shape.w {
                let base = ((n * out_shape.h + oh) * out_shape.w + ow) * co;
                let acc = &mut out[base..base + co];
                acc.copy_from_slice(&conv.bias);
                for kh in 0..k {
                    let ih = (oh * conv.stride + kh) as isize - conv.pad as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * conv.stride + kw) as isize - conv.pad as isize;
                        if iw < 0 || iw >= s.w as isize {
                            continue;
                        }
                        let xb = ((n * s.h + ih as usize) * s.w + iw as usize) * ci;
                        let wb = (kh * k + kw) * ci * co;
                        for c in 0..ci {
                            let v = xd[xb + c];
                            if v == 0.0 {
                                continue;
                            }
                            let row = &conv.weight[wb + c * co..wb + (c + 1) * co];
                            for (a, &w) in acc.iter_mut().zip(row) {
                                *a += v * w;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("conv output length")
}

/// Returns `dx` and, when `param_grads` is set, `(dweight, dbias)`.
pub(crate) fn conv2d_backward(conv: &Conv2d, x: &Tensor, dout: &Tensor, param_grads: bool) -> (Tensor, Option<Pair>) {
    let s = x.shape();
    let os = dout.shape();
    let (k, co, ci) = (conv.kernel, conv.out_ch, conv.in_ch);
    let mut dx = vec![0.0f32; s.len()];
    let mut dw = if param_grads { vec![0.0f32; conv.weight.len()] } else { Vec::new() };
    let mut db = vec![0.0f32; if param_grads { co } else { 0 }];
    let xd = x.data();
    let gd = dout.data();
    for n in 0..s.b {
        for oh in 0..os.h {
            for ow in 0..os.w {
                let gb = ((n * os.h + oh) * os.w + ow) * co;
                let g = &gd[gb..gb + co];
                if param_grads {
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d += v;
                    }
                }
                for kh in 0..k {
                    let ih = (oh * conv.stride + kh) as isize - conv.pad as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    for kw in 0..k {
                        let iw = (ow * conv.stride + kw) as isize - conv.pad as isize;
                        if iw < 0 || iw >= s.w as isize {
                            continue;
                        }
                        let xb = ((n * s.h + ih as usize) * s.w + iw as usize) * ci;
                        let wb = (kh * k + kw) * ci * co;
                        for c in 0..ci {
                            let row = &conv.weight[wb + c * co..wb + (c + 1) * co];
                            let mut dot = 0.0f32;
                            for (&w, &v) in row.iter().zip(g) {
                                dot += w * v;
                            }
                            dx[xb + c] += dot;
                            if param_grads {
                                let xv = xd[xb + c];
                                if xv != 0.0 {
                                    let drow = &mut dw[wb + c * co..wb + (c + 1) * co];
                                    for (d, &v) in drow.iter_mut().zip(g) {
                                        *d += xv * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dx = Tensor::from_vec(s, dx).expect("conv dx length");
    (dx, param_grads.then_some((dw, db)))
}

/// Max pooling without padding. Returns the output and the flat input index
/// chosen for each output element (first maximum wins).
pub(crate) fn maxpool_forward(x: &Tensor, k: usize, stride: usize, out_shape: Shape) -> (Tensor, Vec<u32>) {
    let s = x.shape();
    let mut out = vec![0.0f32; out_shape.len()];
    let mut arg = vec![0u32; out_shape.len()];
    let xd = x.data();
    for n in 0..s.b {
        for oh in 0..out_shape.h {
            for ow in 0..out_shape.w {
                for c in 0..s.c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for kh in 0..k {
                        for kw in 0..k {
                            let i = ((n * s.h + oh * stride + kh) * s.w + ow * stride + kw) * s.c + c;
                            if xd[i] > best || (kh == 0 && kw == 0) {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = ((n * out_shape.h + oh) * out_shape.w + ow) * s.c + c;
                    out[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    (Tensor::from_vec(out_shape, out).expect("pool length"), arg)
}

pub(crate) fn maxpool_backward(in_shape: Shape, argmax: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = vec![0.0f32; in_shape.len()];
    for (&i, &g) in argmax.iter().zip(dout.data()) {
        dx[i as usize] += g;
    }
    Tensor::from_vec(in_shape, dx).expect("pool dx length")
}

pub(crate) fn avgpool_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut out = vec![0.0f32; s.b * s.c];
    for n in 0..s.b {
        let acc = &mut out[n * s.c..(n + 1) * s.c];
        for px in x.image(n).chunks_exact(s.c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        let inv = 1.0 / hw as f32;
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Tensor::from_vec(Shape::new(s.b, 1, 1, s.c), out).expect("avgpool length")
}

pub(crate) fn avgpool_backward(in_shape: Shape, dout: &Tensor) -> Tensor {
    let inv = 1.0 / (in_shape.h * in_shape.w) as f32;
    let c = in_shape.c;
    let mut dx = vec![0.0f32; in_shape.len()];
    for n in 0..in_shape.b {
        let g = &dout.data()[n * c..(n + 1) * c];
        for px in dx[n * in_shape.image_len()..(n + 1) * in_shape.image_len()].chunks_exact_mut(c) {
            for (d, &v) in px.iter_mut().zip(g) {
                *d = v * inv;
            }
        }
    }
    Tensor::from_vec(in_shape, dx).expect("avgpool dx length")
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient gate uses the forward output: `y > 0`.
pub(crate) fn relu_backward(out: &Tensor, dout: &Tensor) -> Tensor {
    let data = out.data().iter().zip(dout.data()).map(|(&y, &g)| if y > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_vec(out.shape(), data).expect("relu dx length")
}

pub(crate) fn dense_forward(d: &Dense, x: &Tensor) -> Tensor {
    let b = x.shape().b;
    let mut out = vec![0.0f32; b * d.out_dim];
    for n in 0..b {
        let acc = &mut out[n * d.out_dim..(n + 1) * d.out_dim];
        acc.copy_from_slice(&d.bias);
        for (i, &v) in x.image(n).iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &d.weight[i * d.out_dim..(i + 1) * d.out_dim];
            for (a, &w) in acc.iter_mut().zip(row) {
                *a += v * w;
            }
        }
    }
    Tensor::from_vec(Shape::new(b, 1, 1, d.out_dim), out).expect("dense length")
}

pub(crate) fn dense_backward(d: &Dense, x: &Tensor, dout: &Tensor, param_grads: bool) -> (Tensor, Option<Pair>) {
    let b = x.shape().b;
    let mut dx = vec![0.0f32; x.shape().len()];
    let mut dw = vec![0.0f32; if param_grads { d.weight.len() } else { 0 }];
    let mut db = vec![0.0f32; if param_grads { d.out_dim } else { 0 }];
    for n in 0..b {
        let g = &dout.data()[n * d.out_dim..(n + 1) * d.out_dim];
        let xi = x.image(n);
        for i in 0..d.in_dim {
            let row = &d.weight[i * d.out_dim..(i + 1) * d.out_dim];
            let mut dot = 0.0f32;
            for (&w, &v) in row.iter().zip(g) {
                dot += w * v;
            }
            dx[n * d.in_dim + i] = dot;
            if param_grads && xi[i] != 0.0 {
                let drow = &mut dw[i * d.out_dim..(i + 1) * d.out_dim];
                for (dd, &v) in drow.iter_mut().zip(g) {
                    *dd += xi[i] * v;
                }
            }
        }
        if param_grads {
            for (dd, &v) in db.iter_mut().zip(g) {
                *dd += v;
            }
        }
    }
    let dx = Tensor::from_vec(x.shape(), dx).expect("dense dx length");
    (dx, param_grads.then_some((dw, db)))
}

/// Cached values needed by the batch-norm backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Statistics were computed from the batch (training mode).
    pub batch_stats: bool,
}

/// Normalise with either the stored running statistics or, in training mode,
/// the biased moments of the current batch. Returns the batch moments used.
pub(crate) fn batchnorm_forward(bn: &BatchNorm, x: &Tensor, batch_stats: bool) -> (Tensor, BnCache, Option<Pair>) {
    let s = x.shape();
    let c = s.c;
    let (mean, var) = if batch_stats {
        let count = (s.b * s.h * s.w) as f32;
        let mut mean = vec![0.0f32; c];
        for px in x.data().chunks_exact(c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0f32; c];
        for px in x.data().chunks_exact(c) {
            for ((acc, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; s.len()];
    let mut out = vec![0.0f32; s.len()];
    for ((px, hx), o) in x.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            hx[ch] = h;
            o[ch] = bn.gamma[ch] * h + bn.beta[ch];
        }
    }
    let moments = batch_stats.then_some((mean, var));
    (
        Tensor::from_vec(s, out).expect("bn length"),
        BnCache { xhat, inv_std, batch_stats },
        moments,
    )
}

pub(crate) fn batchnorm_backward(bn: &BatchNorm, cache: &BnCache, dout: &Tensor, param_grads: bool) -> (Tensor, Option<Pair>) {
    let s = dout.shape();
    let c = s.c;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for (g, h) in dout.data().chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += g[ch];
            dgamma[ch] += g[ch] * h[ch];
        }
    }
    let mut dx = vec![0.0f32; s.len()];
    if cache.batch_stats {
        let count = (s.b * s.h * s.w) as f32;
        for ((d, g), h) in dx.chunks_exact_mut(c).zip(dout.data().chunks_exact(c)).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                d[ch] = bn.gamma[ch] * cache.inv_std[ch] / count * (count * g[ch] - dbeta[ch] - h[ch] * dgamma[ch]);
            }
        }
    } else {
        for (d, g) in dx.chunks_exact_mut(c).zip(dout.data().chunks_exact(c)) {
            for ch in 0..c {
                d[ch] = g[ch] * bn.gamma[ch] * cache.inv_std[ch];
            }
        }
    }
    let dx = Tensor::from_vec(s, dx).expect("bn dx length");
    (dx, param_grads.then_some((dgamma, dbeta)))
}
