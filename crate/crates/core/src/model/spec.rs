use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv_output_len;

/// One layer of a CONV-FC network. No layer carries a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Fc {
        out_features: usize,
    },
}

impl Layer {
    pub fn conv3(out_channels: usize) -> Self {
        Layer::Conv {
            kernel: 3,
            stride: 1,
            padding: 1,
            out_channels,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Fc { .. })
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            Layer::Conv {
                kernel,
                stride,
                padding,
                out_channels,
            } => {
                let &[_, h, w] = input else {
                    return Err(Error::Spec(format!("conv needs a [C,H,W] input, got {input:?}")));
                };
                let oh = conv_output_len(h, kernel, stride, padding).map_err(|e| Error::Spec(e.to_string()))?;
                let ow = conv_output_len(w, kernel, stride, padding).map_err(|e| Error::Spec(e.to_string()))?;
                Ok(vec![out_channels, oh, ow])
            }
            Layer::MaxPool { window, stride } => {
                let &[c, h, w] = input else {
                    return Err(Error::Spec(format!("maxpool needs a [C,H,W] input, got {input:?}")));
                };
                if window > h || window > w {
                    return Err(Error::Spec(format!("pool window {window} exceeds {h}x{w}")));
                }
                let oh = conv_output_len(h, window, stride, 0).map_err(|e| Error::Spec(e.to_string()))?;
                let ow = conv_output_len(w, window, stride, 0).map_err(|e| Error::Spec(e.to_string()))?;
                Ok(vec![c, oh, ow])
            }
            Layer::Fc { out_features } => {
                if input.len() != 1 {
                    return Err(Error::Spec(format!(
                        "fc needs a flat input, got {input:?} (insert a flatten layer)"
                    )));
                }
                Ok(vec![out_features])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Relu => Ok(input.to_vec()),
            Layer::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Spec(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Weight tensor shape for parameterized layers.
    pub fn param_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            Layer::Conv {
                kernel, out_channels, ..
            } => Some(vec![out_channels, input[0], kernel, kernel]),
            Layer::Fc { out_features } => Some(vec![out_features, input.iter().product()]),
            _ => None,
        }
    }
}

/// Layer list plus input geometry and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// `conv_layers` blocks of 3x3 conv + ReLU, then max-pool(2,2), dropout(0.25), flatten, fc.
    pub fn conv_fc(input_shape: [usize; 3], conv_layers: usize, channels: usize, num_classes: usize) -> Self {
        let mut layers = Vec::new();
        for _ in 0..conv_layers {
            layers.push(Layer::conv3(channels));
            layers.push(Layer::Relu);
        }
        layers.extend([
            Layer::MaxPool { window: 2, stride: 2 },
            Layer::Dropout { rate: 0.25 },
            Layer::Flatten,
            Layer::Fc {
                out_features: num_classes,
            },
        ]);
        Self {
            input_shape: input_shape.to_vec(),
            num_classes,
            layers,
        }
    }

    /// Five 32-channel conv blocks for 28x28 grayscale digits.
    pub fn reference_mnist() -> Self {
        Self::conv_fc([1, 28, 28], 5, 32, 10)
    }

    /// Five 64-channel conv blocks for 32x32 color images.
    pub fn reference_cifar10() -> Self {
        Self::conv_fc([3, 32, 32], 5, 64, 10)
    }

    /// Three 8-channel conv blocks; small enough to train on a laptop CPU in minutes.
    pub fn desk_mnist() -> Self {
        Self::conv_fc([1, 28, 28], 3, 8, 10)
    }

    /// Output shape of every layer, validating that consecutive layers compose.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!(
                "input shape must be a nonempty [C,H,W], got {:?}",
                self.input_shape
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Spec("class count must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .output_shape(&cur)
                .map_err(|e| Error::Spec(format!("layer {i} ({layer:?}): {e}")))?;
            if cur.contains(&0) {
                return Err(Error::Spec(format!("layer {i} produces an empty shape {cur:?}")));
            }
            shapes.push(cur.clone());
        }
        if cur != [self.num_classes] {
            return Err(Error::Spec(format!(
                "network output {cur:?} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Input shape of layer `l`.
    pub fn input_shape_of(&self, shapes: &[Vec<usize>], l: usize) -> Vec<usize> {
        if l == 0 {
            self.input_shape.clone()
        } else {
            shapes[l - 1].clone()
        }
    }

    /// Stable human-readable layer names: `conv2.conv`, `conv2.relu`, `pool1`, `fc1`, ...
    pub fn layer_names(&self) -> Vec<String> {
        let (mut conv, mut fc, mut pool, mut drop, mut flat, mut relu) = (0, 0, 0, 0, 0, 0);
        let mut names: Vec<String> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let name = match layer {
                Layer::Conv { .. } => {
                    conv += 1;
                    format!("conv{conv}.conv")
                }
                Layer::Fc { .. } => {
                    fc += 1;
                    format!("fc{fc}")
                }
                Layer::MaxPool { .. } => {
                    pool += 1;
                    format!("pool{pool}")
                }
                Layer::Dropout { .. } => {
                    drop += 1;
                    format!("dropout{drop}")
                }
                Layer::Flatten => {
                    flat += 1;
                    format!("flatten{flat}")
                }
                Layer::Relu => match i.checked_sub(1).map(|p| &self.layers[p]) {
                    Some(Layer::Conv { .. }) => format!("conv{conv}.relu"),
                    Some(Layer::Fc { .. }) => format!("fc{fc}.relu"),
                    _ => {
                        relu += 1;
                        format!("relu{relu}")
                    }
                },
            };
            names.push(name);
        }
        names
    }

    /// Resolves a layer by name or by numeric index.
    pub fn layer_index(&self, name: &str) -> Result<usize> {
        let names = self.layer_names();
        if let Some(i) = names.iter().position(|n| n == name) {
            return Ok(i);
        }
        if let Ok(i) = name.parse::<usize>() {
            if i < names.len() {
                return Ok(i);
            }
        }
        Err(Error::arg(format!(
            "unknown layer '{name}'; valid layers: {}",
            names.join(", ")
        )))
    }

    pub fn relu_layers(&self) -> Vec<usize> {
        self.indices_where(|l| matches!(l, Layer::Relu))
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.indices_where(|l| matches!(l, Layer::Conv { .. }))
    }

    fn indices_where(&self, f: impl Fn(&Layer) -> bool) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| f(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// ReLU layer fed by the last convolution.
    pub fn last_conv_relu(&self) -> Option<usize> {
        let last_conv = *self.conv_layers().last()?;
        self.layers[last_conv + 1..]
            .iter()
            .position(|l| matches!(l, Layer::Relu))
            .map(|p| last_conv + 1 + p)
            .filter(|&r| {
                self.layers[last_conv + 1..r]
                    .iter()
                    .all(|l| matches!(l, Layer::Dropout { .. }))
            })
    }
}
