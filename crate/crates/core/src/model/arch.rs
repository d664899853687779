//! Architecture descriptions and the three shipped device tiers.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a sequential layer graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Per-channel convolution (one `kernel x kernel` filter per channel).
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping max pooling with window and stride `size`.
    MaxPool2d { size: usize },
    /// `relu(x + conv(relu(conv(x))))` with two same-padded convolutions.
    Residual { channels: usize, kernel: usize },
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    /// Parameter tensor shapes, in storage order (weights before biases).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerKind::DepthwiseConv2d {
                channels, kernel, ..
            } => vec![vec![channels, 1, kernel, kernel], vec![channels]],
            LayerKind::Residual { channels, kernel } => vec![
                vec![channels, channels, kernel, kernel],
                vec![channels],
                vec![channels, channels, kernel, kernel],
                vec![channels],
            ],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            LayerKind::Relu
            | LayerKind::MaxPool2d { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::Flatten => Vec::new(),
        }
    }

    /// Fan-in of each parameter tensor's consumer, used for initialization.
    pub(crate) fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerKind::DepthwiseConv2d { kernel, .. } => kernel * kernel,
            LayerKind::Residual { channels, kernel } => channels * kernel * kernel,
            LayerKind::Linear { in_features, .. } => in_features,
            _ => 1,
        }
    }

    /// Output shape for input `[c, h, w]`.
    pub fn output_shape(&self, input: [usize; 3]) -> std::result::Result<[usize; 3], String> {
        let [c, h, w] = input;
        let conv_out = |size: usize, k: usize, s: usize, p: usize| -> std::result::Result<usize, String> {
            if s == 0 || k == 0 {
                return Err("kernel and stride must be positive".into());
            }
            if size + 2 * p < k {
                return Err(format!("kernel {k} larger than padded input {}", size + 2 * p));
            }
            Ok((size + 2 * p - k) / s + 1)
        };
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels != c {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                Ok([
                    out_channels,
                    conv_out(h, kernel, stride, padding)?,
                    conv_out(w, kernel, stride, padding)?,
                ])
            }
            LayerKind::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                padding,
            } => {
                if channels != c {
                    return Err(format!("expects {channels} channels, got {c}"));
                }
                Ok([
                    channels,
                    conv_out(h, kernel, stride, padding)?,
                    conv_out(w, kernel, stride, padding)?,
                ])
            }
            LayerKind::Relu => Ok(input),
            LayerKind::MaxPool2d { size } => {
                if size == 0 || h < size || w < size {
                    return Err(format!("pool size {size} does not fit {h}x{w}"));
                }
                Ok([c, h / size, w / size])
            }
            LayerKind::Residual { channels, kernel } => {
                if channels != c {
                    return Err(format!("expects {channels} channels, got {c}"));
                }
                if kernel % 2 == 0 {
                    return Err("residual kernel must be odd".into());
                }
                Ok(input)
            }
            LayerKind::GlobalAvgPool => Ok([c, 1, 1]),
            LayerKind::Flatten => Ok([c * h * w, 1, 1]),
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if h != 1 || w != 1 || c != in_features {
                    return Err(format!(
                        "expects a flat vector of {in_features}, got {c}x{h}x{w}"
                    ));
                }
                Ok([out_features, 1, 1])
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { id: id.into(), kind }
    }
}

/// A named sequential layer graph with designated transfer endpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Ids of layers whose outputs are exposed as feature maps.
    pub feature_taps: Vec<String>,
}

impl ArchitectureSpec {
    /// Check ids, taps and shape flow; the final layer must emit
    /// `[num_classes, 1, 1]`.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Error::domain(format!("architecture `{}`: {msg}", self.name));
        if self.layers.is_empty() {
            return Err(invalid("no layers".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for l in &self.layers {
            if !ids.insert(l.id.as_str()) {
                return Err(invalid(format!("duplicate layer id `{}`", l.id)));
            }
        }
        for t in &self.feature_taps {
            if !ids.contains(t.as_str()) {
                return Err(invalid(format!("feature tap `{t}` is not a layer id")));
            }
        }
        let mut shape = self.input_shape;
        for l in &self.layers {
            shape = l
                .kind
                .output_shape(shape)
                .map_err(|m| invalid(format!("layer `{}`: {m}", l.id)))?;
        }
        if shape != [self.num_classes, 1, 1] {
            return Err(invalid(format!(
                "output shape {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Output shape of every layer, in order.
    pub fn layer_output_shapes(&self) -> Vec<[usize; 3]> {
        let mut shape = self.input_shape;
        self.layers
            .iter()
            .map(|l| {
                shape = l.kind.output_shape(shape).expect("validated architecture");
                shape
            })
            .collect()
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    /// Layer index of each feature tap, in tap order.
    pub fn tap_layers(&self) -> Vec<usize> {
        self.feature_taps
            .iter()
            .map(|t| self.layer_index(t).expect("validated architecture"))
            .collect()
    }

    /// Feature-map shape of each tap, in tap order.
    pub fn tap_shapes(&self) -> Vec<[usize; 3]> {
        let shapes = self.layer_output_shapes();
        self.tap_layers().into_iter().map(|i| shapes[i]).collect()
    }

    /// All parameter tensor shapes, flattened across layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| l.kind.param_shapes())
            .collect()
    }

    /// Range of parameter tensor indices owned by each layer.
    pub fn layer_param_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|l| {
                let n = l.kind.param_shapes().len();
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Residual conv net; the largest tier (about 95K parameters on 1x8x8 input).
pub fn large(input_shape: [usize; 3], num_classes: usize) -> ArchitectureSpec {
    use LayerKind::*;
    let [c, h, w] = input_shape;
    let flat = 32 * (h / 2).div_ceil(2) * (w / 2).div_ceil(2);
    ArchitectureSpec {
        name: "large".into(),
        input_shape,
        num_classes,
        layers: vec![
            LayerSpec::new("stem", Conv2d { in_channels: c, out_channels: 16, kernel: 3, stride: 1, padding: 1 }),
            LayerSpec::new("stem_relu", Relu),
            LayerSpec::new("stem_pool", MaxPool2d { size: 2 }),
            LayerSpec::new("res1", Residual { channels: 16, kernel: 3 }),
            LayerSpec::new("down", Conv2d { in_channels: 16, out_channels: 32, kernel: 3, stride: 2, padding: 1 }),
            LayerSpec::new("down_relu", Relu),
            LayerSpec::new("res2", Residual { channels: 32, kernel: 3 }),
            LayerSpec::new("flatten", Flatten),
            LayerSpec::new("fc1", Linear { in_features: flat, out_features: 256 }),
            LayerSpec::new("fc1_relu", Relu),
            LayerSpec::new("fc2", Linear { in_features: 256, out_features: 128 }),
            LayerSpec::new("fc2_relu", Relu),
            LayerSpec::new("head", Linear { in_features: 128, out_features: num_classes }),
        ],
        feature_taps: vec!["res1".into(), "res2".into(), "fc2_relu".into()],
    }
}

/// Depthwise-separable conv net; the middle tier (about 29K parameters).
pub fn medium(input_shape: [usize; 3], num_classes: usize) -> ArchitectureSpec {
    use LayerKind::*;
    let [c, h, w] = input_shape;
    let flat = 64 * (h / 2).div_ceil(2) * (w / 2).div_ceil(2);
    ArchitectureSpec {
        name: "medium".into(),
        input_shape,
        num_classes,
        layers: vec![
            LayerSpec::new("stem", Conv2d { in_channels: c, out_channels: 16, kernel: 3, stride: 1, padding: 1 }),
            LayerSpec::new("stem_relu", Relu),
            LayerSpec::new("dw1", DepthwiseConv2d { channels: 16, kernel: 3, stride: 2, padding: 1 }),
            LayerSpec::new("dw1_relu", Relu),
            LayerSpec::new("pw1", Conv2d { in_channels: 16, out_channels: 32, kernel: 1, stride: 1, padding: 0 }),
            LayerSpec::new("pw1_relu", Relu),
            LayerSpec::new("dw2", DepthwiseConv2d { channels: 32, kernel: 3, stride: 2, padding: 1 }),
            LayerSpec::new("dw2_relu", Relu),
            LayerSpec::new("pw2", Conv2d { in_channels: 32, out_channels: 64, kernel: 1, stride: 1, padding: 0 }),
            LayerSpec::new("pw2_relu", Relu),
            LayerSpec::new("flatten", Flatten),
            LayerSpec::new("fc1", Linear { in_features: flat, out_features: 96 }),
            LayerSpec::new("fc1_relu", Relu),
            LayerSpec::new("head", Linear { in_features: 96, out_features: num_classes }),
        ],
        feature_taps: vec!["pw1_relu".into(), "pw2_relu".into(), "fc1_relu".into()],
    }
}

/// Two-conv LeNet-style net; the smallest tier (5,750 parameters on 1x8x8).
pub fn small(input_shape: [usize; 3], num_classes: usize) -> ArchitectureSpec {
    use LayerKind::*;
    let [c, h, w] = input_shape;
    let flat = 16 * (h / 2 / 2) * (w / 2 / 2);
    ArchitectureSpec {
        name: "small".into(),
        input_shape,
        num_classes,
        layers: vec![
            LayerSpec::new("conv1", Conv2d { in_channels: c, out_channels: 6, kernel: 3, stride: 1, padding: 1 }),
            LayerSpec::new("conv1_relu", Relu),
            LayerSpec::new("pool1", MaxPool2d { size: 2 }),
            LayerSpec::new("conv2", Conv2d { in_channels: 6, out_channels: 16, kernel: 3, stride: 1, padding: 1 }),
            LayerSpec::new("conv2_relu", Relu),
            LayerSpec::new("pool2", MaxPool2d { size: 2 }),
            LayerSpec::new("flatten", Flatten),
            LayerSpec::new("fc1", Linear { in_features: flat, out_features: 64 }),
            LayerSpec::new("fc1_relu", Relu),
            LayerSpec::new("head", Linear { in_features: 64, out_features: num_classes }),
        ],
        feature_taps: vec!["pool1".into(), "pool2".into(), "fc1_relu".into()],
    }
}

/// Look up a shipped tier by name.
pub fn tier(name: &str, input_shape: [usize; 3], num_classes: usize) -> Option<ArchitectureSpec> {
    match name {
        "large" => Some(large(input_shape, num_classes)),
        "medium" => Some(medium(input_shape, num_classes)),
        "small" => Some(small(input_shape, num_classes)),
        _ => None,
    }
}
