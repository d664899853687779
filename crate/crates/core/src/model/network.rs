use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, LayerKind};
use super::layers::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

/// A parameter tensor: shape plus row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Gradient buffers aligned with a model's parameter list.
pub type Grads<T> = Vec<Vec<T>>;

/// Who a set of weights belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Device { type_index: usize, device_index: usize },
    PreAggregate { type_index: usize },
    Proxy { type_index: usize },
    GlobalProxy,
    Unassigned,
}

/// Trainable weights for one architecture.
#[derive(Clone, Debug)]
pub struct DeviceModel<T> {
    arch: Arc<ArchitectureSpec>,
    params: Vec<Param<T>>,
    pub owner: Owner,
}

/// Activations and caches kept by a training forward pass.
pub struct Trace<T> {
    /// `outputs[0]` is the input batch; `outputs[i + 1]` is layer `i`'s output.
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

enum Cache<T> {
    None,
    Cols(Vec<T>),
    Argmax(Vec<usize>),
    Residual {
        cols1: Vec<T>,
        mid: Tensor<T>,
        cols2: Vec<T>,
    },
}

impl<T> Trace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("trace has outputs")
    }

    /// Output of layer `layer`.
    pub fn layer_output(&self, layer: usize) -> &Tensor<T> {
        &self.outputs[layer + 1]
    }
}

/// Feature maps at each tap plus the logits.
pub struct Features<T> {
    pub taps: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> DeviceModel<T> {
    /// Fresh weights: every weight tensor is drawn from
    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`; biases start at zero.
    pub fn instantiate(arch: Arc<ArchitectureSpec>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut params = Vec::new();
        for layer in &arch.layers {
            let bound = (6.0 / layer.kind.fan_in() as f64).sqrt();
            for shape in layer.kind.param_shapes() {
                let mut p = Param::zeros(shape);
                if p.shape.len() > 1 {
                    for v in p.data.iter_mut() {
                        *v = T::of(rng.random_range(-bound..bound));
                    }
                }
                params.push(p);
            }
        }
        Ok(DeviceModel {
            arch,
            params,
            owner: Owner::Unassigned,
        })
    }

    /// Wrap existing weights; shapes must match the architecture exactly.
    pub fn from_params(arch: Arc<ArchitectureSpec>, params: Vec<Param<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: format!("parameter list of `{}`", arch.name),
                expected: vec![shapes.len()],
                actual: vec![params.len()],
            });
        }
        for (s, p) in shapes.iter().zip(&params) {
            if *s != p.shape || p.data.len() != s.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    context: format!("parameter of `{}`", arch.name),
                    expected: s.clone(),
                    actual: p.shape.clone(),
                });
            }
        }
        Ok(DeviceModel {
            arch,
            params,
            owner: Owner::Unassigned,
        })
    }

    pub fn with_owner(mut self, owner: Owner) -> Self {
        self.owner = owner;
        self
    }

    pub fn arch(&self) -> &Arc<ArchitectureSpec> {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// All weights concatenated in storage order.
    pub fn flat(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    /// Same weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> DeviceModel<U> {
        DeviceModel {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            owner: self.owner,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if [c, h, w] != self.arch.input_shape {
            return Err(Error::ShapeMismatch {
                context: format!("input to `{}`", self.arch.name),
                expected: self.arch.input_shape.to_vec(),
                actual: vec![c, h, w],
            });
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Trace<T> {
        let ranges = self.arch.layer_param_ranges();
        let mut outputs = Vec::with_capacity(self.arch.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        outputs.push(x.clone());
        for (layer, range) in self.arch.layers.iter().zip(ranges) {
            let p = &self.params[range];
            let input = outputs.last().expect("input present");
            let (y, cache) = match layer.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let g = ConvGeom::new(input.shape(), kernel, stride, padding);
                    let (y, cols) = layers::conv_forward(input, &p[0].data, &p[1].data, out_channels, &g);
                    (y, Cache::Cols(cols))
                }
                LayerKind::DepthwiseConv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let g = ConvGeom::new(input.shape(), kernel, stride, padding);
                    (layers::depthwise_forward(input, &p[0].data, &p[1].data, &g), Cache::None)
                }
                LayerKind::Relu => (layers::relu_forward(input), Cache::None),
                LayerKind::MaxPool2d { size } => {
                    let (y, arg) = layers::maxpool_forward(input, size);
                    (y, Cache::Argmax(arg))
                }
                LayerKind::Residual { channels, kernel } => {
                    let g = ConvGeom::new(input.shape(), kernel, 1, kernel / 2);
                    let (h1, cols1) = layers::conv_forward(input, &p[0].data, &p[1].data, channels, &g);
                    let mid = layers::relu_forward(&h1);
                    let (mut h2, cols2) = layers::conv_forward(&mid, &p[2].data, &p[3].data, channels, &g);
                    h2.add_assign(input);
                    let y = layers::relu_forward(&h2);
                    (y, Cache::Residual { cols1, mid, cols2 })
                }
                LayerKind::GlobalAvgPool => (layers::gap_forward(input), Cache::None),
                LayerKind::Flatten => {
                    let [b, c, h, w] = input.shape();
                    (input.clone().reshaped([b, c * h * w, 1, 1]), Cache::None)
                }
                LayerKind::Linear { out_features, .. } => (
                    layers::linear_forward(input, &p[0].data, &p[1].data, out_features),
                    Cache::None,
                ),
            };
            outputs.push(y);
            caches.push(if keep { cache } else { Cache::None });
        }
        Trace { outputs, caches }
    }

    /// Training forward pass keeping everything needed by [`Self::backward`].
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        self.check_input(x)?;
        Ok(self.run(x, true))
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut t = self.run(x, false);
        Ok(t.outputs.pop().expect("logits"))
    }

    /// Feature maps at every tap (in tap order) and the logits; no mutation.
    pub fn forward_features(&self, x: &Tensor<T>) -> Result<Features<T>> {
        self.check_input(x)?;
        let t = self.run(x, false);
        Ok(self.features_of(&t))
    }

    pub fn features_of(&self, trace: &Trace<T>) -> Features<T> {
        Features {
            taps: self
                .arch
                .tap_layers()
                .into_iter()
                .map(|i| trace.layer_output(i).clone())
                .collect(),
            logits: trace.logits().clone(),
        }
    }

    /// Backpropagate `d_logits` (gradient of the loss w.r.t. the logits) plus
    /// optional extra gradients injected at each feature tap (in tap order).
    pub fn backward(
        &self,
        trace: &Trace<T>,
        d_logits: &Tensor<T>,
        tap_grads: &[Option<Tensor<T>>],
    ) -> Grads<T> {
        let ranges = self.arch.layer_param_ranges();
        let tap_layers = self.arch.tap_layers();
        let mut grads = self.zero_grads();
        let mut grad = d_logits.clone();
        for i in (0..self.arch.layers.len()).rev() {
            for (t, &layer) in tap_layers.iter().enumerate() {
                if layer == i {
                    if let Some(Some(g)) = tap_grads.get(t) {
                        grad.add_assign(g);
                    }
                }
            }
            let need_dx = i > 0;
            let input = &trace.outputs[i];
            let output = &trace.outputs[i + 1];
            let range = ranges[i].clone();
            let p = &self.params[range.clone()];
            let dx = match (&self.arch.layers[i].kind, &trace.caches[i]) {
                (LayerKind::Conv2d { kernel, stride, padding, .. }, Cache::Cols(cols)) => {
                    let g = ConvGeom::new(input.shape(), *kernel, *stride, *padding);
                    let (dx, dw, db) = layers::conv_backward(&grad, cols, &p[0].data, &g, need_dx);
                    grads[range.start] = dw;
                    grads[range.start + 1] = db;
                    dx
                }
                (LayerKind::DepthwiseConv2d { kernel, stride, padding, .. }, _) => {
                    let g = ConvGeom::new(input.shape(), *kernel, *stride, *padding);
                    let (dx, dw, db) = layers::depthwise_backward(&grad, input, &p[0].data, &g, need_dx);
                    grads[range.start] = dw;
                    grads[range.start + 1] = db;
                    dx
                }
                (LayerKind::Relu, _) => Some(layers::relu_backward(&grad, output)),
                (LayerKind::MaxPool2d { .. }, Cache::Argmax(arg)) => {
                    Some(layers::maxpool_backward(&grad, arg, input.shape()))
                }
                (LayerKind::Residual { kernel, .. }, Cache::Residual { cols1, mid, cols2 }) => {
                    let g = ConvGeom::new(input.shape(), *kernel, 1, kernel / 2);
                    let ds = layers::relu_backward(&grad, output);
                    let (dmid, dw2, db2) = layers::conv_backward(&ds, cols2, &p[2].data, &g, true);
                    let dh1 = layers::relu_backward(&dmid.expect("requested"), mid);
                    let (dx1, dw1, db1) = layers::conv_backward(&dh1, cols1, &p[0].data, &g, need_dx);
                    grads[range.start] = dw1;
                    grads[range.start + 1] = db1;
                    grads[range.start + 2] = dw2;
                    grads[range.start + 3] = db2;
                    dx1.map(|mut dx| {
                        dx.add_assign(&ds);
                        dx
                    })
                }
                (LayerKind::GlobalAvgPool, _) => Some(layers::gap_backward(&grad, input.shape())),
                (LayerKind::Flatten, _) => Some(grad.clone().reshaped(input.shape())),
                (LayerKind::Linear { .. }, _) => {
                    let (dx, dw, db) = layers::linear_backward(&grad, input, &p[0].data, need_dx);
                    grads[range.start] = dw;
                    grads[range.start + 1] = db;
                    dx
                }
                _ => unreachable!("trace was recorded without caches"),
            };
            match dx {
                Some(dx) if need_dx => grad = dx,
                _ => break,
            }
        }
        grads
    }
}
