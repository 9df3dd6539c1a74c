use super::{Shape, Tensor, TensorError};

/// Mean softmax cross-entropy over the batch, computed from a max-shifted
/// log-softmax. Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / b`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor), TensorError> {
    let s = logits.shape();
    let classes = s.image_len();
    if labels.len() != s.b {
        return Err(TensorError::LabelCount {
            labels: labels.len(),
            batch: s.b,
        });
    }
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::LabelOutOfRange { index, label, classes });
        }
    }
    let inv_b = 1.0 / s.b as f32;
    let mut grad = vec![0.0f32; s.len()];
    let mut total = 0.0f32;
    for (n, &label) in labels.iter().enumerate() {
        let row = logits.image(n);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = &mut grad[n * classes..(n + 1) * classes];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite("cross-entropy loss"));
    }
    Ok((loss, Tensor::from_vec(Shape::new(s.b, 1, 1, classes), grad)?))
}
