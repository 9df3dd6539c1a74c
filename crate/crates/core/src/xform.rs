//! Geometric transforms applied to image batches after crafting.
//!
//! Rotation angles are in degrees, counter-clockwise as displayed ("left");
//! the canvas keeps its size, samples are bilinear and anything that falls
//! outside the source frame reads as 0.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TransformSpec {
    Identity,
    Transpose,
    FlipLr,
    /// Counter-clockwise angle in degrees, normalised to `[0, 360)`.
    Rotate(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid transform `{0}` (expected identity, transpose, fliplr or rotate:<deg>)")]
pub struct TransformParseError(pub String);

impl TransformSpec {
    /// A rotation by `deg` degrees; negative angles turn clockwise.
    pub fn rotate(deg: f64) -> Result<Self, TransformParseError> {
        if !deg.is_finite() {
            return Err(TransformParseError(format!("rotate:{deg}")));
        }
        let mut a = deg.rem_euclid(360.0);
        if a >= 360.0 {
            a = 0.0;
        }
        Ok(TransformSpec::Rotate(a))
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        match *self {
            TransformSpec::Identity => x.clone(),
            TransformSpec::Transpose => transpose(x),
            TransformSpec::FlipLr => flip_lr(x),
            TransformSpec::Rotate(a) => rotate(x, a),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TransformSpec::Identity)
    }

    /// File-name friendly form, e.g. `rotate_359`.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "_")
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Identity => f.write_str("identity"),
            TransformSpec::Transpose => f.write_str("transpose"),
            TransformSpec::FlipLr => f.write_str("fliplr"),
            TransformSpec::Rotate(a) => write!(f, "rotate:{a}"),
        }
    }
}

impl FromStr for TransformSpec {
    type Err = TransformParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(TransformSpec::Identity),
            "transpose" => Ok(TransformSpec::Transpose),
            "fliplr" => Ok(TransformSpec::FlipLr),
            _ => {
                let deg = s
                    .strip_prefix("rotate:")
                    .and_then(|d| d.parse::<f64>().ok())
                    .ok_or_else(|| TransformParseError(s.to_string()))?;
                TransformSpec::rotate(deg).map_err(|_| TransformParseError(s.to_string()))
            }
        }
    }
}

impl TryFrom<String> for TransformSpec {
    type Error = TransformParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TransformSpec> for String {
    fn from(t: TransformSpec) -> String {
        t.to_string()
    }
}

/// Swap the height and width axes: `[b, h, w, c] -> [b, w, h, c]`.
pub fn transpose(x: &Tensor) -> Tensor {
    let s = x.shape();
    let out_shape = Shape::new(s.b, s.w, s.h, s.c);
    let mut out = vec![0.0f32; s.len()];
    let src = x.data();
    for n in 0..s.b {
        for i in 0..s.h {
            for j in 0..s.w {
                let from = ((n * s.h + i) * s.w + j) * s.c;
                let to = ((n * s.w + j) * s.h + i) * s.c;
                out[to..to + s.c].copy_from_slice(&src[from..from + s.c]);
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("same element count")
}

/// Mirror each row: `out[n, i, j, k] = x[n, i, w-1-j, k]`.
pub fn flip_lr(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = vec![0.0f32; s.len()];
    let src = x.data();
    for row in 0..s.b * s.h {
        for j in 0..s.w {
            let from = (row * s.w + (s.w - 1 - j)) * s.c;
            let to = (row * s.w + j) * s.c;
            out[to..to + s.c].copy_from_slice(&src[from..from + s.c]);
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let a = deg.rem_euclid(360.0);
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == 90.0 {
        (1.0, 0.0)
    } else if a == 180.0 {
        (0.0, -1.0)
    } else if a == 270.0 {
        (-1.0, 0.0)
    } else {
        a.to_radians().sin_cos()
    }
}

/// Bilinear tap: up to four `(pixel index, weight)` pairs.
type Taps = Vec<(usize, f32)>;

fn rotation_taps(h: usize, w: usize, deg: f64) -> Vec<Taps> {
    let (sin, cos) = sin_cos_deg(deg);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut taps = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sc = cx + cos * dx - sin * dy;
            let sr = cy + sin * dx + cos * dy;
            let r0 = sr.floor();
            let c0 = sc.floor();
            let fr = (sr - r0) as f32;
            let fc = (sc - c0) as f32;
            let mut t = Vec::with_capacity(4);
            for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
                if wr == 0.0 {
                    continue;
                }
                for (dc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
                    if wc == 0.0 {
                        continue;
                    }
                    let r = r0 as isize + dr;
                    let c = c0 as isize + dc;
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        t.push((r as usize * w + c as usize, wr * wc));
                    }
                }
            }
            taps.push(t);
        }
    }
    taps
}

/// Rotate every image about its centre `((h-1)/2, (w-1)/2)` by `deg`
/// degrees counter-clockwise.
///
/// # Panics
/// If `deg` is not finite.
pub fn rotate(x: &Tensor, deg: f64) -> Tensor {
    assert!(deg.is_finite(), "rotation angle must be finite, got {deg}");
    if deg.rem_euclid(360.0) == 0.0 {
        return x.clone().with_requires_grad(false);
    }
    let s = x.shape();
    let taps = rotation_taps(s.h, s.w, deg);
    let mut out = vec![0.0f32; s.len()];
    let src = x.data();
    let plane = s.h * s.w;
    for n in 0..s.b {
        for (p, t) in taps.iter().enumerate() {
            let dst = (n * plane + p) * s.c;
            for k in 0..s.c {
                let mut v = 0.0f32;
                for &(q, wt) in t {
                    v += wt * src[(n * plane + q) * s.c + k];
                }
                out[dst + k] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}
