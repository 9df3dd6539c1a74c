use super::{Shape, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[kernel, kernel, in_ch, out_ch]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeroed(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: vec![0.0; kernel * kernel * in_ch * out_ch],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_ch
    }

    pub(crate) fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[in_dim, out_dim]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }
}

/// Per-channel affine normalisation using stored statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2d),
    MaxPool {
        k: usize,
        s: usize,
    },
    AvgPoolGlobal,
    ReLU,
    BatchNormInference(BatchNorm),
    Dense(Dense),
    Flatten,
    /// `x + body(x)`; the body must preserve the shape of its input.
    Residual(Vec<Layer>),
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPoolGlobal => "avgpool_global",
            LayerKind::ReLU => "relu",
            LayerKind::BatchNormInference(_) => "batchnorm",
            LayerKind::Dense(_) => "dense",
            LayerKind::Flatten => "flatten",
            LayerKind::Residual(_) => "residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    fn invalid(&self, detail: impl Into<String>) -> TensorError {
        TensorError::InvalidLayer {
            layer: self.name.clone(),
            detail: detail.into(),
        }
    }

    fn mismatch(&self, detail: impl Into<String>) -> TensorError {
        TensorError::ShapeMismatch {
            layer: self.name.clone(),
            detail: detail.into(),
        }
    }

    /// Output shape for the given input, validating hyper-parameters.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, TensorError> {
        match &self.kind {
            LayerKind::Conv2d(conv) => {
                if conv.kernel == 0 || conv.stride == 0 || conv.out_ch == 0 || conv.in_ch == 0 {
                    return Err(self.invalid("kernel, stride and channels must be positive"));
                }
                if conv.weight.len() != conv.fan_in() * conv.out_ch || conv.bias.len() != conv.out_ch {
                    return Err(self.invalid("parameter length does not match geometry"));
                }
                if input.c != conv.in_ch {
                    return Err(self.mismatch(format!("expected {} input channels, got {}", conv.in_ch, input.c)));
                }
                let (Some(h), Some(w)) = (conv.out_extent(input.h), conv.out_extent(input.w)) else {
                    return Err(self.mismatch(format!("input {input} smaller than kernel")));
                };
                Ok(Shape::new(input.b, h, w, conv.out_ch))
            }
            LayerKind::MaxPool { k, s } => {
                if *k == 0 || *s == 0 {
                    return Err(self.invalid("pool size and stride must be positive"));
                }
                if input.h < *k || input.w < *k {
                    return Err(self.mismatch(format!("input {input} smaller than pool {k}")));
                }
                Ok(Shape::new(input.b, (input.h - k) / s + 1, (input.w - k) / s + 1, input.c))
            }
            LayerKind::AvgPoolGlobal => Ok(Shape::new(input.b, 1, 1, input.c)),
            LayerKind::ReLU => Ok(input),
            LayerKind::BatchNormInference(bn) => {
                if bn.eps.is_nan() || bn.eps <= 0.0 {
                    return Err(self.invalid("batchnorm eps must be > 0"));
                }
                let c = bn.channels();
                if bn.beta.len() != c || bn.running_mean.len() != c || bn.running_var.len() != c {
                    return Err(self.invalid("batchnorm vectors differ in length"));
                }
                if input.c != c {
                    return Err(self.mismatch(format!("expected {c} channels, got {}", input.c)));
                }
                Ok(input)
            }
            LayerKind::Dense(d) => {
                if d.in_dim == 0 || d.out_dim == 0 {
                    return Err(self.invalid("dense dimensions must be positive"));
                }
                if d.weight.len() != d.in_dim * d.out_dim || d.bias.len() != d.out_dim {
                    return Err(self.invalid("parameter length does not match geometry"));
                }
                if input.h != 1 || input.w != 1 || input.c != d.in_dim {
                    return Err(self.mismatch(format!("expected [b, 1, 1, {}], got {input}", d.in_dim)));
                }
                Ok(Shape::new(input.b, 1, 1, d.out_dim))
            }
            LayerKind::Flatten => Ok(Shape::new(input.b, 1, 1, input.image_len())),
            LayerKind::Residual(body) => {
                let mut s = input;
                for layer in body {
                    s = layer.output_shape(s)?;
                }
                if s != input {
                    return Err(self.mismatch(format!("residual body maps {input} to {s}")));
                }
                Ok(input)
            }
        }
    }

    /// Visit parameter tensors in graph order as `(name, values, trainable)`.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f32], bool)) {
        let n = &self.name;
        match &self.kind {
            LayerKind::Conv2d(c) => {
                f(format!("{n}.weight"), &c.weight, true);
                f(format!("{n}.bias"), &c.bias, true);
            }
            LayerKind::Dense(d) => {
                f(format!("{n}.weight"), &d.weight, true);
                f(format!("{n}.bias"), &d.bias, true);
            }
            LayerKind::BatchNormInference(bn) => {
                f(format!("{n}.gamma"), &bn.gamma, true);
                f(format!("{n}.beta"), &bn.beta, true);
                f(format!("{n}.running_mean"), &bn.running_mean, false);
                f(format!("{n}.running_var"), &bn.running_var, false);
            }
            LayerKind::Residual(body) => {
                for l in body {
                    l.visit_params(f);
                }
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f32>, bool)) {
        let n = self.name.clone();
        match &mut self.kind {
            LayerKind::Conv2d(c) => {
                f(format!("{n}.weight"), &mut c.weight, true);
                f(format!("{n}.bias"), &mut c.bias, true);
            }
            LayerKind::Dense(d) => {
                f(format!("{n}.weight"), &mut d.weight, true);
                f(format!("{n}.bias"), &mut d.bias, true);
            }
            LayerKind::BatchNormInference(bn) => {
                f(format!("{n}.gamma"), &mut bn.gamma, true);
                f(format!("{n}.beta"), &mut bn.beta, true);
                f(format!("{n}.running_mean"), &mut bn.running_mean, false);
                f(format!("{n}.running_var"), &mut bn.running_var, false);
            }
            LayerKind::Residual(body) => {
                for l in body {
                    l.visit_params_mut(f);
                }
            }
            _ => {}
        }
    }

    /// Names of this layer and any nested layers, depth first.
    pub fn collect_names(&self, out: &mut Vec<String>) {
        out.push(self.name.clone());
        if let LayerKind::Residual(body) = &self.kind {
            for l in body {
                l.collect_names(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shape() {
        let l = Layer::new("c", LayerKind::Conv2d(Conv2d::zeroed(3, 8, 3, 2, 1)));
        assert_eq!(l.output_shape(Shape::new(2, 32, 32, 3)).unwrap(), Shape::new(2, 16, 16, 8));
        let err = l.output_shape(Shape::new(2, 32, 32, 4)).unwrap_err();
        assert!(err.to_string().contains("`c`"));
    }

    #[test]
    fn zero_stride_is_invalid() {
        let l = Layer::new("p", LayerKind::MaxPool { k: 2, s: 0 });
        assert!(matches!(l.output_shape(Shape::new(1, 4, 4, 1)), Err(TensorError::InvalidLayer { .. })));
    }

    #[test]
    fn batchnorm_eps_must_be_positive() {
        let mut bn = BatchNorm::identity(2);
        bn.eps = 0.0;
        let l = Layer::new("bn", LayerKind::BatchNormInference(bn));
        assert!(l.output_shape(Shape::new(1, 2, 2, 2)).is_err());
    }

    #[test]
    fn residual_body_must_preserve_shape() {
        let body = vec![Layer::new("inner", LayerKind::Conv2d(Conv2d::zeroed(2, 3, 1, 1, 0)))];
        let l = Layer::new("res", LayerKind::Residual(body));
        assert!(matches!(l.output_shape(Shape::new(1, 4, 4, 2)), Err(TensorError::ShapeMismatch { .. })));
    }
}
