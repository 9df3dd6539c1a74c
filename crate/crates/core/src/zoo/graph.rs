use serde::{Deserialize, Serialize};

use crate::tensor::{BatchNorm, Conv2d, Dense, Layer, LayerKind, Shape, TensorError};

/// Image geometry a model accepts and the number of classes it scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub num_classes: usize,
}

impl InputSpec {
    pub const fn new(h: usize, w: usize, c: usize, num_classes: usize) -> Self {
        Self { h, w, c, num_classes }
    }

    pub const fn batch_shape(&self, b: usize) -> Shape {
        Shape::new(b, self.h, self.w, self.c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<'a> {
    pub name: String,
    pub values: &'a [f32],
    pub trainable: bool,
}

/// A small classifier: an ordered list of uniquely named layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_spec: InputSpec,
    layers: Vec<Layer>,
}

impl ModelGraph {
    /// Validates that layer names are unique, shapes compose and the final
    /// layer emits `[b, 1, 1, num_classes]`.
    pub fn new(name: impl Into<String>, input_spec: InputSpec, layers: Vec<Layer>) -> Result<Self, TensorError> {
        let graph = Self {
            name: name.into(),
            input_spec,
            layers,
        };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<(), TensorError> {
        let mut names = self.layer_names();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(TensorError::InvalidLayer {
                layer: w[0].clone(),
                detail: "duplicate layer name".into(),
            });
        }
        let out = self.output_shapes()?.last().copied().unwrap_or(self.input_spec.batch_shape(1));
        if (out.h, out.w, out.c) != (1, 1, self.input_spec.num_classes) {
            let layer = self.layers.last().map(|l| l.name.clone()).unwrap_or_else(|| "output".into());
            return Err(TensorError::ShapeMismatch {
                layer,
                detail: format!("graph emits {out}, expected [1, 1, 1, {}]", self.input_spec.num_classes),
            });
        }
        Ok(())
    }

    /// Output shape of every top-level layer for a batch of one.
    pub fn output_shapes(&self) -> Result<Vec<Shape>, TensorError> {
        let mut s = self.input_spec.batch_shape(1);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            s = l.output_shape(s)?;
            out.push(s);
        }
        Ok(out)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input_spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for weight surgery. Geometry changes are rejected.
    pub fn with_layers_mut<R>(&mut self, f: impl FnOnce(&mut [Layer]) -> R) -> Result<R, TensorError> {
        let r = f(&mut self.layers);
        self.validate()?;
        Ok(r)
    }

    /// All layer names, nested residual layers included, depth first.
    pub fn layer_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.collect_names(&mut out);
        }
        out
    }

    /// Every parameter tensor (trainable weights and batch-norm buffers) in
    /// graph order.
    pub fn params(&self) -> Vec<NamedParam<'_>> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.visit_params(&mut |name, values, trainable| out.push(NamedParam { name, values, trainable }));
        }
        out
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<f32>, bool)) {
        for l in &mut self.layers {
            l.visit_params_mut(&mut |name, values, trainable| f(&name, values, trainable));
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().filter(|p| p.trainable).map(|p| p.values.len()).sum()
    }

    /// Serializable description of the layer topology.
    pub fn descriptor(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(LayerDesc::from_layer).collect()
    }

    /// Rebuild a zero-initialised graph from a descriptor.
    pub fn from_descriptor(name: &str, input_spec: InputSpec, desc: &[LayerDesc]) -> Result<Self, TensorError> {
        Self::new(name, input_spec, desc.iter().map(LayerDesc::to_layer).collect())
    }
}

/// Topology of one layer without its parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Conv2d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        name: String,
        k: usize,
        s: usize,
    },
    AvgPoolGlobal {
        name: String,
    },
    Relu {
        name: String,
    },
    BatchNorm {
        name: String,
        channels: usize,
        eps: f32,
    },
    Dense {
        name: String,
        in_dim: usize,
        out_dim: usize,
    },
    Flatten {
        name: String,
    },
    Residual {
        name: String,
        body: Vec<LayerDesc>,
    },
}

impl LayerDesc {
    pub fn from_layer(l: &Layer) -> Self {
        let name = l.name.clone();
        match &l.kind {
            LayerKind::Conv2d(c) => LayerDesc::Conv2d {
                name,
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
            },
            LayerKind::MaxPool { k, s } => LayerDesc::MaxPool { name, k: *k, s: *s },
            LayerKind::AvgPoolGlobal => LayerDesc::AvgPoolGlobal { name },
            LayerKind::ReLU => LayerDesc::Relu { name },
            LayerKind::BatchNormInference(bn) => LayerDesc::BatchNorm {
                name,
                channels: bn.channels(),
                eps: bn.eps,
            },
            LayerKind::Dense(d) => LayerDesc::Dense {
                name,
                in_dim: d.in_dim,
                out_dim: d.out_dim,
            },
            LayerKind::Flatten => LayerDesc::Flatten { name },
            LayerKind::Residual(body) => LayerDesc::Residual {
                name,
                body: body.iter().map(LayerDesc::from_layer).collect(),
            },
        }
    }

    pub fn to_layer(&self) -> Layer {
        match self {
            LayerDesc::Conv2d {
                name,
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => Layer::new(name.clone(), LayerKind::Conv2d(Conv2d::zeroed(*in_ch, *out_ch, *kernel, *stride, *pad))),
            LayerDesc::MaxPool { name, k, s } => Layer::new(name.clone(), LayerKind::MaxPool { k: *k, s: *s }),
            LayerDesc::AvgPoolGlobal { name } => Layer::new(name.clone(), LayerKind::AvgPoolGlobal),
            LayerDesc::Relu { name } => Layer::new(name.clone(), LayerKind::ReLU),
            LayerDesc::BatchNorm { name, channels, eps } => {
                let mut bn = BatchNorm::identity(*channels);
                bn.eps = *eps;
                Layer::new(name.clone(), LayerKind::BatchNormInference(bn))
            }
            LayerDesc::Dense { name, in_dim, out_dim } => Layer::new(name.clone(), LayerKind::Dense(Dense::zeroed(*in_dim, *out_dim))),
            LayerDesc::Flatten { name } => Layer::new(name.clone(), LayerKind::Flatten),
            LayerDesc::Residual { name, body } => Layer::new(name.clone(), LayerKind::Residual(body.iter().map(LayerDesc::to_layer).collect())),
        }
    }
}
