//! Plain f64 re-implementation of the forward pass, written directly from
//! the layer definitions. Besides the loss it returns the activation
//! pattern (ReLU signs, max-pool winners) so finite differences can avoid
//! straddling a kink.

use xpose::tensor::{Layer, LayerKind, Tensor};
use xpose::zoo::ModelGraph;

#[derive(Clone)]
struct A {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f64>,
}

impl A {
    fn at(&self, n: usize, i: usize, j: usize, k: usize) -> f64 {
        self.v[((n * self.h + i) * self.w + j) * self.c + k]
    }
}

/// Activation pattern: one entry per ReLU input element and per pooling
/// window.
pub type Pattern = Vec<u32>;

fn run(layers: &[Layer], mut x: A, pat: &mut Pattern) -> A {
    for l in layers {
        x = match &l.kind {
            LayerKind::Conv2d(cv) => {
                let oh = (x.h + 2 * cv.pad - cv.kernel) / cv.stride + 1;
                let ow = (x.w + 2 * cv.pad - cv.kernel) / cv.stride + 1;
                let mut v = vec![0.0; x.b * oh * ow * cv.out_ch];
                for n in 0..x.b {
                    for i in 0..oh {
                        for j in 0..ow {
                            for o in 0..cv.out_ch {
                                let mut s = cv.bias[o] as f64;
                                for a in 0..cv.kernel {
                                    for bb in 0..cv.kernel {
                                        let si = (i * cv.stride + a) as isize - cv.pad as isize;
                                        let sj = (j * cv.stride + bb) as isize - cv.pad as isize;
                                        if si < 0 || sj < 0 || si >= x.h as isize || sj >= x.w as isize {
                                            continue;
                                        }
                                        for ci in 0..cv.in_ch {
                                            let wt = cv.weight[((a * cv.kernel + bb) * cv.in_ch + ci) * cv.out_ch + o] as f64;
                                            s += wt * x.at(n, si as usize, sj as usize, ci);
                                        }
                                    }
                                }
                                v[((n * oh + i) * ow + j) * cv.out_ch + o] = s;
                            }
                        }
                    }
                }
                A {
                    b: x.b,
                    h: oh,
                    w: ow,
                    c: cv.out_ch,
                    v,
                }
            }
            LayerKind::MaxPool { k, s } => {
                let oh = (x.h - k) / s + 1;
                let ow = (x.w - k) / s + 1;
                let mut v = vec![0.0; x.b * oh * ow * x.c];
                for n in 0..x.b {
                    for i in 0..oh {
                        for j in 0..ow {
                            for ch in 0..x.c {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for a in 0..*k {
                                    for bb in 0..*k {
                                        let val = x.at(n, i * s + a, j * s + bb, ch);
                                        if val > best {
                                            best = val;
                                            arg = a * k + bb;
                                        }
                                    }
                                }
                                pat.push(arg as u32);
                                v[((n * oh + i) * ow + j) * x.c + ch] = best;
                            }
                        }
                    }
                }
                A {
                    b: x.b,
                    h: oh,
                    w: ow,
                    c: x.c,
                    v,
                }
            }
            LayerKind::AvgPoolGlobal => {
                let mut v = vec![0.0; x.b * x.c];
                for n in 0..x.b {
                    for i in 0..x.h {
                        for j in 0..x.w {
                            for ch in 0..x.c {
                                v[n * x.c + ch] += x.at(n, i, j, ch) / (x.h * x.w) as f64;
                            }
                        }
                    }
                }
                A {
                    b: x.b,
                    h: 1,
                    w: 1,
                    c: x.c,
                    v,
                }
            }
            LayerKind::ReLU => {
                pat.extend(x.v.iter().map(|&t| u32::from(t > 0.0)));
                A {
                    v: x.v.iter().map(|&t| t.max(0.0)).collect(),
                    ..x
                }
            }
            LayerKind::BatchNormInference(bn) => {
                let mut v = x.v.clone();
                for (idx, t) in v.iter_mut().enumerate() {
                    let ch = idx % x.c;
                    let inv = 1.0 / (bn.running_var[ch] as f64 + bn.eps as f64).sqrt();
                    *t = bn.gamma[ch] as f64 * (*t - bn.running_mean[ch] as f64) * inv + bn.beta[ch] as f64;
                }
                A { v, ..x }
            }
            LayerKind::Dense(d) => {
                let mut v = vec![0.0; x.b * d.out_dim];
                for n in 0..x.b {
                    for o in 0..d.out_dim {
                        let mut s = d.bias[o] as f64;
                        for i in 0..d.in_dim {
                            s += d.weight[i * d.out_dim + o] as f64 * x.v[n * d.in_dim + i];
                        }
                        v[n * d.out_dim + o] = s;
                    }
                }
                A {
                    b: x.b,
                    h: 1,
                    w: 1,
                    c: d.out_dim,
                    v,
                }
            }
            LayerKind::Flatten => A {
                h: 1,
                w: 1,
                c: x.h * x.w * x.c,
                ..x
            },
            LayerKind::Residual(body) => {
                let y = run(body, x.clone(), pat);
                A {
                    v: x.v.iter().zip(&y.v).map(|(a, b)| a + b).collect(),
                    ..x
                }
            }
        };
    }
    x
}

pub struct RefOut {
    pub logits: Vec<f64>,
    pub loss: f64,
    pub pattern: Pattern,
}

/// Forward `x` (given as f64 values in NHWC order) and the mean
/// cross-entropy of `labels`.
pub fn forward(model: &ModelGraph, shape: [usize; 4], x: &[f64], labels: &[usize]) -> RefOut {
    forward_layers(model.layers(), shape, x, labels)
}

pub fn forward_layers(layers: &[Layer], shape: [usize; 4], x: &[f64], labels: &[usize]) -> RefOut {
    let [b, h, w, c] = shape;
    let mut pattern = Vec::new();
    let out = run(layers, A { b, h, w, c, v: x.to_vec() }, &mut pattern);
    let k = out.c;
    let mut loss = 0.0;
    for n in 0..b {
        let row = &out.v[n * k..(n + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[labels[n]];
    }
    RefOut {
        logits: out.v,
        loss: loss / b as f64,
        pattern,
    }
}

pub fn tensor_f64(x: &Tensor) -> ([usize; 4], Vec<f64>) {
    let s = x.shape();
    ([s.b, s.h, s.w, s.c], x.data().iter().map(|&v| v as f64).collect())
}

/// Central difference of `f` around zero displacement, shrinking the step
/// until both probes keep the base activation pattern. `None` if no step
/// down to 1e-7 avoids a kink.
pub fn kink_aware_diff(base: &Pattern, mut f: impl FnMut(f64) -> RefOut) -> Option<f64> {
    let mut h = 1e-3;
    while h >= 1e-7 {
        let p = f(h);
        let m = f(-h);
        if &p.pattern == base && &m.pattern == base {
            return Some((p.loss - m.loss) / (2.0 * h));
        }
        h /= 10.0;
    }
    None
}
