use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AttackConfig, AttackError, Surrogate, Variant};
use crate::tensor::{Shape, Tensor};

/// Gradient for one iteration of the chosen variant at the current iterate.
pub(super) fn variant_gradient<S: Surrogate + ?Sized>(
    surrogate: &S,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    alpha: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, AttackError> {
    match cfg.variant {
        Variant::Ifgsm | Variant::Mifgsm | Variant::Gifgsm { .. } => surrogate.loss_grad(x, labels),
        Variant::Dim { p } => {
            if rng.gen::<f64>() < p {
                let draw = dim_draw(rng, x.shape().h, x.shape().w);
                let (xt, map) = dim_transform(x, draw);
                let gt = surrogate.loss_grad(&xt, labels)?;
                Ok(scatter(&gt, &map, x.shape()))
            } else {
                surrogate.loss_grad(x, labels)
            }
        }
        Variant::Tim { k } => {
            let g = surrogate.loss_grad(x, labels)?;
            Ok(smooth_depthwise(&g, &gaussian_kernel(k), k))
        }
        Variant::Sim { m } => {
            let mut acc = surrogate.loss_grad(x, labels)?;
            for i in 1..m {
                let scale = 0.5f32.powi(i as i32);
                let g = surrogate.loss_grad(&x.map(|v| v * scale), labels)?;
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += scale * b);
            }
            if m > 1 {
                let inv = m as f32;
                acc.data_mut().iter_mut().for_each(|v| *v /= inv);
            }
            Ok(acc)
        }
        Variant::Pgn { n, delta, zeta } => pgn_gradient(surrogate, x, labels, cfg.epsilon, alpha, n, delta, zeta, rng),
    }
}

#[allow(clippy::too_many_arguments)]
fn pgn_gradient<S: Surrogate + ?Sized>(
    surrogate: &S,
    x: &Tensor,
    labels: &[usize],
    eps: f32,
    alpha: f32,
    n: usize,
    delta: f32,
    zeta: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, AttackError> {
    let radius = zeta * eps;
    let img = x.shape().image_len();
    let mut acc = Tensor::zeros(x.shape());
    for _ in 0..n {
        let mut xs = x.clone();
        if radius > 0.0 {
            xs.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-radius..=radius));
        }
        let g1 = surrogate.loss_grad(&xs, labels)?;
        if delta > 0.0 {
            // look-ahead against the normalised neighbour gradient
            let mut ahead = xs.clone();
            for (xa, gi) in ahead.data_mut().chunks_exact_mut(img).zip(g1.data().chunks_exact(img)) {
                let mean_abs = gi.iter().map(|v| v.abs()).sum::<f32>() / img as f32;
                if mean_abs > 0.0 {
                    xa.iter_mut().zip(gi).for_each(|(a, g)| *a -= alpha * g / mean_abs);
                }
            }
            let g2 = surrogate.loss_grad(&ahead, labels)?;
            for ((a, &u), &v) in acc.data_mut().iter_mut().zip(g1.data()).zip(g2.data()) {
                *a += (1.0 - delta) * u + delta * v;
            }
        } else {
            acc.data_mut().iter_mut().zip(g1.data()).for_each(|(a, b)| *a += b);
        }
    }
    if n > 1 {
        let inv = n as f32;
        acc.data_mut().iter_mut().for_each(|v| *v /= inv);
    }
    Ok(acc)
}

/// One random resize-and-pad draw: resize to `r_h x r_w`, then place at
/// `(top, left)` on a `canvas_h x canvas_w` zero canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DimDraw {
    pub r_h: usize,
    pub r_w: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub top: usize,
    pub left: usize,
}

fn canvas(side: usize) -> usize {
    (side * 11).div_ceil(10)
}

/// Draw `r` uniformly in `[h, ceil(1.1 h)]` and a uniform offset.
pub fn dim_draw(rng: &mut impl Rng, h: usize, w: usize) -> DimDraw {
    let canvas_h = canvas(h);
    let canvas_w = canvas(w);
    let r_h = rng.gen_range(h..=canvas_h);
    let r_w = ((r_h * w + h / 2) / h).clamp(w, canvas_w);
    let top = rng.gen_range(0..=canvas_h - r_h);
    let left = rng.gen_range(0..=canvas_w - r_w);
    DimDraw {
        r_h,
        r_w,
        canvas_h,
        canvas_w,
        top,
        left,
    }
}

/// Apply a draw and scale the canvas back to the input size with
/// nearest-neighbour sampling. Returns the transformed batch and, per output
/// pixel, the source pixel it copies (or `None` for padding).
pub fn dim_transform(x: &Tensor, d: DimDraw) -> (Tensor, Vec<Option<usize>>) {
    let s = x.shape();
    let mut map = Vec::with_capacity(s.h * s.w);
    for i in 0..s.h {
        let ci = i * d.canvas_h / s.h;
        for j in 0..s.w {
            let cj = j * d.canvas_w / s.w;
            let inside = ci >= d.top && ci < d.top + d.r_h && cj >= d.left && cj < d.left + d.r_w;
            map.push(inside.then(|| {
                let si = (ci - d.top) * s.h / d.r_h;
                let sj = (cj - d.left) * s.w / d.r_w;
                si * s.w + sj
            }));
        }
    }
    let plane = s.h * s.w;
    let mut out = vec![0.0f32; s.len()];
    let src = x.data();
    for n in 0..s.b {
        for (p, m) in map.iter().enumerate() {
            if let Some(q) = m {
                let dst = (n * plane + p) * s.c;
                let from = (n * plane + q) * s.c;
                out[dst..dst + s.c].copy_from_slice(&src[from..from + s.c]);
            }
        }
    }
    (Tensor::from_vec(s, out).expect("same shape"), map)
}

/// Adjoint of the gather: add each output-pixel gradient onto its source.
fn scatter(g: &Tensor, map: &[Option<usize>], shape: Shape) -> Tensor {
    let plane = shape.h * shape.w;
    let c = shape.c;
    let mut out = vec![0.0f32; shape.len()];
    let src = g.data();
    for n in 0..shape.b {
        for (p, m) in map.iter().enumerate() {
            if let Some(q) = m {
                for k in 0..c {
                    out[(n * plane + q) * c + k] += src[(n * plane + p) * c + k];
                }
            }
        }
    }
    Tensor::from_vec(shape, out).expect("same shape")
}

/// Normalised `k x k` Gaussian with standard deviation `k / 3`, row-major.
pub fn gaussian_kernel(k: usize) -> Vec<f32> {
    let sigma = k as f64 / 3.0;
    let half = (k as f64 - 1.0) / 2.0;
    let one: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut ker: Vec<f64> = one.iter().flat_map(|a| one.iter().map(move |b| a * b)).collect();
    let total: f64 = ker.iter().sum();
    ker.iter_mut().for_each(|v| *v /= total);
    ker.into_iter().map(|v| v as f32).collect()
}

/// Convolve every channel of every image with the same `k x k` kernel,
/// zero-padded to keep the spatial size.
pub fn smooth_depthwise(g: &Tensor, kernel: &[f32], k: usize) -> Tensor {
    let s = g.shape();
    if k == 1 {
        return g.map(|v| v * kernel[0]);
    }
    let half = (k / 2) as isize;
    let src = g.data();
    let mut out = vec![0.0f32; s.len()];
    for n in 0..s.b {
        for i in 0..s.h as isize {
            for j in 0..s.w as isize {
                let dst = ((n * s.h + i as usize) * s.w + j as usize) * s.c;
                for a in 0..k as isize {
                    let si = i + a - half;
                    if si < 0 || si >= s.h as isize {
                        continue;
                    }
                    for b in 0..k as isize {
                        let sj = j + b - half;
                        if sj < 0 || sj >= s.w as isize {
                            continue;
                        }
                        let wgt = kernel[(a * k as isize + b) as usize];
                        let from = ((n * s.h + si as usize) * s.w + sj as usize) * s.c;
                        for ch in 0..s.c {
                            out[dst + ch] += wgt * src[from + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}
