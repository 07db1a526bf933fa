//! Sequential models built from a flat list of layer specs.

use std::ops::Range;

use crate::autograd::{Activation, Graph, Mode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Activation(Activation),
    BatchNorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    /// Reshape each sample to `dims`, keeping the batch axis.
    Reshape {
        dims: Vec<usize>,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    /// Shapes of the trainable tensors this layer owns, in declaration order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![vec![in_ch, out_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::BatchNorm2d { channels, .. } => vec![vec![channels], vec![channels]],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![vec![in_features, out_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::ConvTranspose2d { .. }
        )
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            }
            | LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => {
                if *in_ch == 0 || *out_ch == 0 || *kernel == 0 || *stride == 0 {
                    return bad(format!("degenerate convolution {self:?}"));
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return bad(format!("degenerate pooling {self:?}"));
                }
            }
            LayerSpec::Activation(Activation::LeakyRelu(s)) => {
                if !(*s > 0.0 && *s < 1.0) {
                    return bad(format!("leaky slope {s} not in (0,1)"));
                }
            }
            LayerSpec::BatchNorm2d {
                channels,
                eps,
                momentum,
            } => {
                if *channels == 0 || !(*eps > 0.0) || !(0.0..=1.0).contains(momentum) {
                    return bad(format!("invalid batch-norm {self:?}"));
                }
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return bad(format!("dropout p {p} not in [0,1)"));
                }
            }
            LayerSpec::Reshape { dims } => {
                if dims.is_empty() || dims.contains(&0) {
                    return bad(format!("invalid reshape {dims:?}"));
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if *in_features == 0 || *out_features == 0 {
                    return bad(format!("degenerate linear {self:?}"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform `±sqrt(6/fan_in)` weights, uniform `±1/sqrt(fan_in)` biases.
    KaimingUniform,
    /// `N(0, std)` weights and zero biases; batch-norm scale `N(1, std)`.
    Normal { std: f64 },
}

/// Output of [`Model::forward`].
pub struct Forward {
    pub output: Var,
    /// Graph handles of the parameters, in declaration order.
    pub params: Vec<Var>,
    /// Output of each layer.
    pub layers: Vec<Var>,
}

/// An ordered layer stack with its parameters and batch-norm buffers.
#[derive(Clone, Debug)]
pub struct Model<T> {
    specs: Vec<LayerSpec>,
    params: Vec<Tensor<T>>,
    param_ranges: Vec<Range<usize>>,
    buffers: Vec<Option<RunningStats<T>>>,
    mode: Mode,
}

impl<T: Scalar> Model<T> {
    /// Allocate a model with zero weights, unit batch-norm scale.
    pub fn new(specs: Vec<LayerSpec>) -> Result<Self> {
        let mut params = Vec::new();
        let mut param_ranges = Vec::with_capacity(specs.len());
        let mut buffers = Vec::with_capacity(specs.len());
        for spec in &specs {
            spec.validate()?;
            let start = params.len();
            for shape in spec.param_shapes() {
                params.push(Tensor::zeros(shape));
            }
            if let LayerSpec::BatchNorm2d { channels, .. } = spec {
                params[start] = Tensor::full(vec![*channels], T::one());
                buffers.push(Some(RunningStats::new(*channels)));
            } else {
                buffers.push(None);
            }
            param_ranges.push(start..params.len());
        }
        Ok(Self {
            specs,
            params,
            param_ranges,
            buffers,
            mode: Mode::Train,
        })
    }

    pub fn init(&mut self, init: Init, rng: &mut Rng) {
        for (spec, range) in self.specs.iter().zip(&self.param_ranges) {
            let params = &mut self.params[range.clone()];
            match (spec, init) {
                (LayerSpec::BatchNorm2d { channels, .. }, Init::Normal { std }) => {
                    params[0] = Tensor::from_fn(vec![*channels], |_| {
                        T::from_f64_lossy(1.0 + std * rng.normal())
                    });
                    params[1] = Tensor::zeros(vec![*channels]);
                }
                (LayerSpec::BatchNorm2d { .. }, Init::KaimingUniform) => {}
                (_, _) if params.is_empty() => {}
                (_, Init::KaimingUniform) => {
                    let fan_in = fan_in(spec) as f64;
                    let wb = (6.0 / fan_in).sqrt();
                    let bb = 1.0 / fan_in.sqrt();
                    let ws = params[0].shape().to_vec();
                    params[0] = Tensor::uniform(ws, -wb, wb, rng);
                    let bs = params[1].shape().to_vec();
                    params[1] = Tensor::uniform(bs, -bb, bb, rng);
                }
                (_, Init::Normal { std }) => {
                    let ws = params[0].shape().to_vec();
                    params[0] = Tensor::randn(ws, std, rng);
                    let bs = params[1].shape().to_vec();
                    params[1] = Tensor::zeros(bs);
                }
            }
        }
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Parameter index range owned by layer `layer`.
    pub fn layer_params(&self, layer: usize) -> Range<usize> {
        self.param_ranges[layer].clone()
    }

    pub fn buffers(&self) -> impl Iterator<Item = &RunningStats<T>> {
        self.buffers.iter().flatten()
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = &mut RunningStats<T>> {
        self.buffers.iter_mut().flatten()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn bind_params(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Run the stack on `input`, recording every op on `g`. Parameters are
    /// bound as fresh `requires_grad` leaves. In train mode batch-norm
    /// running statistics are updated.
    pub fn forward(&mut self, g: &mut Graph<T>, input: Var, rng: &mut Rng) -> Result<Forward> {
        let params = self.bind_params(g, true);
        self.forward_with(g, input, params, rng)
    }

    /// As [`Model::forward`] with caller-bound parameter handles.
    pub fn forward_with(
        &mut self,
        g: &mut Graph<T>,
        input: Var,
        params: Vec<Var>,
        rng: &mut Rng,
    ) -> Result<Forward> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let mode = self.mode;
        let mut x = input;
        let mut layers = Vec::with_capacity(self.specs.len());
        for (idx, spec) in self.specs.iter().enumerate() {
            let p = &params[self.param_ranges[idx].clone()];
            x = match spec {
                LayerSpec::Conv2d { stride, pad, .. } => g.conv2d(x, p[0], p[1], *stride, *pad),
                LayerSpec::ConvTranspose2d { stride, pad, .. } => {
                    g.conv_transpose2d(x, p[0], p[1], *stride, *pad)
                }
                LayerSpec::MaxPool2d { kernel, stride } => g.maxpool2d(x, *kernel, *stride),
                LayerSpec::Activation(a) => g.activation(*a, x),
                LayerSpec::BatchNorm2d { eps, momentum, .. } => {
                    let running = self.buffers[idx].as_mut().expect("batch-norm buffer");
                    g.batchnorm2d(x, p[0], p[1], running, *eps, *momentum, mode)
                }
                LayerSpec::Dropout { p: prob } => g.dropout(x, *prob, mode, rng),
                LayerSpec::Flatten => g.flatten(x),
                LayerSpec::Reshape { dims } => {
                    let mut shape = vec![g.value(x).shape()[0]];
                    shape.extend_from_slice(dims);
                    g.reshape(x, shape)
                }
                LayerSpec::Linear { .. } => g.linear(x, p[0], p[1]),
            }
            .map_err(|e| e.context(format!("layer {idx} ({spec:?})")))?;
            layers.push(x);
        }
        Ok(Forward {
            output: x,
            params,
            layers,
        })
    }

    /// Forward pass without gradient bookkeeping in the current mode.
    pub fn predict(&mut self, input: Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let params = self.bind_params(&mut g, false);
        let fwd = self.forward_with(&mut g, x, params, rng)?;
        Ok(g.value(fwd.output).clone())
    }

    /// Gradients of the bound parameters after `g.backward`, zero-filled for
    /// parameters the root did not depend on.
    pub fn collect_grads(&self, g: &Graph<T>, params: &[Var]) -> Vec<Tensor<T>> {
        params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect()
    }

    /// Replace parameters and buffers from flat arrays, checking shapes.
    pub(crate) fn load_state(
        &mut self,
        params: Vec<Tensor<T>>,
        buffers: Vec<RunningStats<T>>,
    ) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape("parameter count mismatch".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(params) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src;
        }
        let slots: Vec<&mut RunningStats<T>> = self.buffers_mut().collect();
        if slots.len() != buffers.len() {
            return Err(Error::Shape("buffer count mismatch".into()));
        }
        for (dst, src) in slots.into_iter().zip(buffers) {
            if dst.mean.len() != src.mean.len() || dst.var.len() != src.var.len() {
                return Err(Error::Shape("buffer length mismatch".into()));
            }
            *dst = src;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            specs: self.specs.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            param_ranges: self.param_ranges.clone(),
            buffers: self
                .buffers
                .iter()
                .map(|b| {
                    b.as_ref().map(|rs| RunningStats {
                        mean: rs.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                        var: rs.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    })
                })
                .collect(),
            mode: self.mode,
        }
    }
}

fn fan_in(spec: &LayerSpec) -> usize {
    match *spec {
        LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
        // weight is [in, out, k, k]; each output pixel sees in_ch * k * k
        // taps at most.
        LayerSpec::ConvTranspose2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
        LayerSpec::Linear { in_features, .. } => in_features,
        _ => 1,
    }
}
