//! Synthetic "glyph" images: coloured, orientation-bearing shapes on a noisy
//! textured background. Labels enumerate shape x hue combinations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, Dataset, Split};
use crate::seed;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    /// Upright "T".
    Tee,
    /// "L": left stroke plus bottom stroke.
    Ell,
    /// Filled triangle with the apex at the top.
    TriangleUp,
    /// Two horizontal bars.
    Bars,
    /// Chevron pointing right.
    Chevron,
}

pub const GLYPHS: [Glyph; 5] = [Glyph::Tee, Glyph::Ell, Glyph::TriangleUp, Glyph::Bars, Glyph::Chevron];

const HUES: [[f32; 3]; 2] = [[0.85, 0.45, 0.2], [0.2, 0.55, 0.85]];
const STROKE: f32 = 0.24;
const GLYPH_ALPHA: (f32, f32) = (0.5, 0.75);
const PIXEL_NOISE: f32 = 0.08;

impl Glyph {
    /// Coverage test in unit-box coordinates (`u` across, `v` down).
    fn covers(self, u: f32, v: f32) -> bool {
        let t = STROKE;
        match self {
            Glyph::Tee => v <= t || (u - 0.5).abs() <= t / 2.0,
            Glyph::Ell => u <= t || v >= 1.0 - t,
            Glyph::TriangleUp => (u - 0.5).abs() <= v / 2.0,
            Glyph::Bars => (0.1..=0.1 + t).contains(&v) || (0.9 - t..=0.9).contains(&v),
            Glyph::Chevron => {
                // distance to the polyline (0,0) -> (1,0.5) -> (0,1)
                let d1 = seg_dist(u, v, (0.0, 0.0), (1.0, 0.5));
                let d2 = seg_dist(u, v, (1.0, 0.5), (0.0, 1.0));
                d1.min(d2) <= t / 2.0
            }
        }
    }
}

fn seg_dist(u: f32, v: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((u - a.0) * dx + (v - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (px, py) = (a.0 + t * dx, a.1 + t * dy);
    ((u - px).powi(2) + (v - py).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    /// Image height and width in pixels.
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let max = GLYPHS.len() * HUES.len();
        if self.classes < 2 || self.classes > max {
            return Err(DataError::InvalidConfig(format!("classes must be in 2..={max}")));
        }
        if self.size < 16 {
            return Err(DataError::InvalidConfig("size must be >= 16".into()));
        }
        if self.train == 0 || self.test == 0 {
            return Err(DataError::InvalidConfig("train and test counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Class `label` maps to glyph `label % 5` drawn in hue `label / 5`.
pub fn class_glyph(label: usize) -> (Glyph, usize) {
    (GLYPHS[label % GLYPHS.len()], label / GLYPHS.len())
}

/// Render one image for `label` from its own RNG. Values are quantised to
/// 256 levels so the CIFAR-format round trip is lossless.
pub fn render(label: usize, size: usize, rng: &mut impl Rng) -> Vec<f32> {
    let (glyph, hue) = class_glyph(label);
    let mut img = vec![0.0f32; size * size * 3];
    // background: random base colour plus a linear gradient
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let grad: [[f32; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)]);
    let tint: [f32; 3] = std::array::from_fn(|c| (HUES[hue][c] + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
    let alpha = rng.gen_range(GLYPH_ALPHA.0..GLYPH_ALPHA.1);
    let side = rng.gen_range(0.55..0.85) * size as f32;
    let x0 = rng.gen_range(0.0..(size as f32 - side).max(1e-3));
    let y0 = rng.gen_range(0.0..(size as f32 - side).max(1e-3));
    for i in 0..size {
        for j in 0..size {
            let (fy, fx) = (i as f32 / size as f32 - 0.5, j as f32 / size as f32 - 0.5);
            let u = (j as f32 + 0.5 - x0) / side;
            let v = (i as f32 + 0.5 - y0) / side;
            let inside = (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && glyph.covers(u, v);
            for c in 0..3 {
                let mut p = base[c] + grad[c][0] * fy + grad[c][1] * fx;
                if inside {
                    p = (1.0 - alpha) * p + alpha * tint[c];
                }
                p += rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
                img[(i * size + j) * 3 + c] = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    img
}

fn make_split(cfg: &SyntheticConfig, count: usize, split: &str) -> Dataset {
    let split_seed = seed::derive_named(cfg.seed, split);
    let mut data = Vec::with_capacity(count * cfg.size * cfg.size * 3);
    let mut labels = Vec::with_capacity(count);
    for n in 0..count {
        let label = n % cfg.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(split_seed, n as u64));
        data.extend(render(label, cfg.size, &mut rng));
        labels.push(label);
    }
    Dataset {
        id: format!("synthetic-s{}-{split}", cfg.seed),
        images: Tensor::from_vec(Shape::new(count, cfg.size, cfg.size, 3), data).expect("image count"),
        labels,
        num_classes: cfg.classes,
    }
}

/// Deterministic, label-balanced train/test split. Each image draws from a
/// stream keyed by (seed, split, index), so the two splits never share a
/// stream.
pub fn generate(cfg: &SyntheticConfig) -> Result<Split, DataError> {
    cfg.validate()?;
    Ok(Split {
        train: make_split(cfg, cfg.train, "train"),
        test: make_split(cfg, cfg.test, "test"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SyntheticConfig {
        SyntheticConfig {
            train: 40,
            test: 20,
            size: 32,
            classes: 10,
            seed: 3,
        }
    }

    #[test]
    fn balanced_and_in_range() {
        let s = generate(&cfg()).unwrap();
        for ds in [&s.train, &s.test] {
            let mut counts = [0usize; 10];
            ds.labels.iter().for_each(|&l| counts[l] += 1);
            assert!(counts.iter().all(|&c| c == ds.len() / 10));
            assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate(&cfg()).unwrap(), generate(&cfg()).unwrap());
        let other = SyntheticConfig { seed: 4, ..cfg() };
        assert_ne!(generate(&cfg()).unwrap().train.images, generate(&other).unwrap().train.images);
    }

    #[test]
    fn splits_are_disjoint() {
        let s = generate(&cfg()).unwrap();
        for i in 0..s.train.len() {
            for j in 0..s.test.len() {
                assert_ne!(s.train.images.image(i), s.test.images.image(j));
            }
        }
    }

    #[test]
    fn glyphs_are_not_transpose_symmetric() {
        for g in GLYPHS {
            let n = 24;
            let mask: Vec<bool> = (0..n * n)
                .map(|k| g.covers((k % n) as f32 / n as f32 + 0.02, (k / n) as f32 / n as f32 + 0.02))
                .collect();
            let transposed: Vec<bool> = (0..n * n).map(|k| mask[(k % n) * n + k / n]).collect();
            assert_ne!(mask, transposed, "{g:?}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SyntheticConfig { classes: 11, ..cfg() }).is_err());
        assert!(generate(&SyntheticConfig { size: 8, ..cfg() }).is_err());
    }
}
