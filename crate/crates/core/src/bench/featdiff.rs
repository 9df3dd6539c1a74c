use super::BenchError;
use crate::tensor::{forward, predict, Tensor, TensorError};
use crate::xform::rotate;
use crate::zoo::ModelGraph;

pub const DEFAULT_K: usize = 16;

/// Per-channel activation differences between an adversarial image that
/// does not fool a model and a slightly rotated twin that does.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDiffReport {
    pub layer: String,
    /// Channels actually selected: `min(requested K, channels)`.
    pub k: usize,
    /// Selected channels, by descending mean absolute difference.
    pub indices: Vec<usize>,
    /// Mean absolute difference of every channel, in channel order.
    pub channel_diffs: Vec<f32>,
    pub map_h: usize,
    pub map_w: usize,
    /// Row-major `map_h x map_w` maps of the selected channels.
    pub maps_fail: Vec<Vec<f32>>,
    pub maps_success: Vec<Vec<f32>>,
    pub maps_diff: Vec<Vec<f32>>,
    pub input_fail: Tensor,
    pub input_success: Tensor,
}

/// Indices of the `k` largest values, descending; equal values keep
/// ascending index order.
pub fn top_k_channels(diffs: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..diffs.len()).collect();
    idx.sort_by(|&a, &b| diffs[b].total_cmp(&diffs[a]));
    idx.truncate(k);
    idx
}

fn channel_maps(a: &Tensor, ch: usize) -> Vec<f32> {
    let s = a.shape();
    (0..s.h * s.w).map(|p| a.data()[p * s.c + ch]).collect()
}

pub fn feature_diff(black_box: &ModelGraph, x_fail: &Tensor, x_success: &Tensor, layer: &str, k: usize) -> Result<FeatureDiffReport, BenchError> {
    if x_fail.shape() != x_success.shape() || x_fail.shape().b != 1 {
        return Err(BenchError::PairShape);
    }
    let tap = |x: &Tensor| -> Result<Tensor, BenchError> {
        let mut out = forward(black_box, x, &[layer]).map_err(|e| match e {
            TensorError::UnknownTap { name, valid } => BenchError::UnknownLayer {
                layer: name,
                valid: valid.join(", "),
            },
            other => BenchError::Tensor(other),
        })?;
        Ok(out.activations.remove(layer).expect("requested tap"))
    };
    let a = tap(x_fail)?;
    let b = tap(x_success)?;
    let s = a.shape();
    if s.c == 0 || s.h * s.w == 0 {
        return Err(BenchError::NotAFeatureMap(layer.to_string()));
    }
    let plane = (s.h * s.w) as f32;
    let mut channel_diffs = vec![0.0f32; s.c];
    for (u, v) in a.data().chunks_exact(s.c).zip(b.data().chunks_exact(s.c)) {
        for ch in 0..s.c {
            channel_diffs[ch] += (u[ch] - v[ch]).abs();
        }
    }
    channel_diffs.iter_mut().for_each(|d| *d /= plane);
    if k > s.c {
        log::warn!("feature diff: K = {k} exceeds the {} channels of `{layer}`; using {}", s.c, s.c);
    }
    let k = k.min(s.c);
    let indices = top_k_channels(&channel_diffs, k);
    let maps_fail: Vec<Vec<f32>> = indices.iter().map(|&c| channel_maps(&a, c)).collect();
    let maps_success: Vec<Vec<f32>> = indices.iter().map(|&c| channel_maps(&b, c)).collect();
    let maps_diff = maps_fail
        .iter()
        .zip(&maps_success)
        .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).abs()).collect())
        .collect();
    Ok(FeatureDiffReport {
        layer: layer.to_string(),
        k,
        indices,
        channel_diffs,
        map_h: s.h,
        map_w: s.w,
        maps_fail,
        maps_success,
        maps_diff,
        input_fail: x_fail.clone(),
        input_success: x_success.clone(),
    })
}

/// First adversarial image the black box still classifies correctly whose
/// rotation by one of `angles` (tried in order) fools it. Returns the image
/// index and the angle.
pub fn find_feature_pair(black_box: &ModelGraph, x_adv: &Tensor, labels: &[usize], angles: &[f64]) -> Result<Option<(usize, f64)>, BenchError> {
    let raw = predict(black_box, x_adv)?;
    let rotated: Vec<Vec<usize>> = angles.iter().map(|&a| predict(black_box, &rotate(x_adv, a))).collect::<Result<_, _>>()?;
    for (i, &label) in labels.iter().enumerate() {
        if raw[i] != label {
            continue;
        }
        if let Some((a, _)) = angles.iter().zip(&rotated).find(|(_, p)| p[i] != label) {
            return Ok(Some((i, *a)));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_keep_channel_order() {
        assert_eq!(top_k_channels(&[0.0; 20], 16), (0..16).collect::<Vec<_>>());
        assert_eq!(top_k_channels(&[0.1, 0.5, 0.1, 0.5, 0.2], 3), vec![1, 3, 4]);
        assert_eq!(top_k_channels(&[1.0, 2.0], 5), vec![1, 0]);
    }
}
