//! Layer specifications and a sequential container.
//!
//! Every layer's output shape is a pure function of the input shape, so a
//! model's shape algebra can be checked before any weights exist.

use super::rng::RngStream;
use super::tape::{Tape, ValueId};
use super::tensor::Tensor;
use super::NumericsError;

/// One layer in a sequential model. Shapes below are per-sample; the batch
/// dimension is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
    },
    Upsample2x,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "transposed-conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Upsample2x => "upsample2x",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NumericsError> {
        let mismatch = |expected: Vec<usize>| NumericsError::ShapeMismatch {
            expected,
            got: input.to_vec(),
            context: self.kind_name().into(),
        };
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(mismatch(vec![*in_channels, 0, 0]));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < *kernel || w < *kernel {
                    return Err(mismatch(vec![*in_channels, *kernel, *kernel]));
                }
                Ok(vec![
                    *out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(mismatch(vec![*in_channels, 0, 0]));
                }
                let oh = (input[1] - 1) * stride + kernel;
                let ow = (input[2] - 1) * stride + kernel;
                if oh < 2 * padding || ow < 2 * padding {
                    return Err(mismatch(vec![*in_channels, *kernel, *kernel]));
                }
                Ok(vec![*out_channels, oh - 2 * padding, ow - 2 * padding])
            }
            LayerSpec::MaxPool2d { size } => {
                if input.len() != 3 || input[1] < *size || input[2] < *size {
                    return Err(mismatch(vec![0, *size, *size]));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Upsample2x => {
                if input.len() != 3 {
                    return Err(mismatch(vec![0, 0, 0]));
                }
                Ok(vec![input[0], input[1] * 2, input[2] * 2])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(mismatch(vec![*inputs]));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                let need: usize = shape.iter().product();
                let have: usize = input.iter().product();
                if need != have {
                    return Err(mismatch(shape.clone()));
                }
                Ok(shape.clone())
            }
        }
    }

    /// Parameter tensors this layer owns, as (name suffix, shape).
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![*out_channels, *in_channels, *kernel, *kernel]),
                ("bias", vec![*out_channels]),
            ],
            LayerSpec::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![*in_channels, *out_channels, *kernel, *kernel]),
                ("bias", vec![*out_channels]),
            ],
            LayerSpec::Dense { inputs, outputs } => vec![
                ("weight", vec![*inputs, *outputs]),
                ("bias", vec![*outputs]),
            ],
            _ => Vec::new(),
        }
    }

    fn init_fan_in(&self) -> usize {
        match self {
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            }
            | LayerSpec::ConvTranspose2d {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerSpec::Dense { inputs, .. } => *inputs,
            _ => 1,
        }
    }
}

/// A layer list with its parameters, applied in order.
#[derive(Debug, Clone)]
pub struct Sequential {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    params: Vec<Tensor>,
    param_names: Vec<String>,
    /// Index into `params` of each layer's first parameter.
    param_offsets: Vec<usize>,
}

impl Sequential {
    /// Build with He-normal weight init and zero biases. Validates that the
    /// layer chain composes over `input_shape`.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: &[usize],
        stream: &mut RngStream,
    ) -> Result<Self, NumericsError> {
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|e| e.at_layer(i))?;
        }
        let mut params = Vec::new();
        let mut param_names = Vec::new();
        let mut param_offsets = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            param_offsets.push(params.len());
            let fan_in = layer.init_fan_in();
            for (suffix, pshape) in layer.param_shapes() {
                let tensor = if suffix == "bias" {
                    Tensor::zeros(&pshape)
                } else {
                    let std = (2.0 / fan_in as f32).sqrt();
                    let n: usize = pshape.iter().product();
                    let data = (0..n).map(|_| stream.normal(0.0, std)).collect();
                    Tensor::from_vec(&pshape, data)?
                };
                params.push(tensor);
                param_names.push(format!("layer{i}.{suffix}"));
            }
        }
        Ok(Self {
            layers,
            input_shape: input_shape.to_vec(),
            params,
            param_names,
            param_offsets,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer
                .output_shape(&shape)
                .expect("validated at construction");
        }
        shape
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on the tape, in layer order. With
    /// `requires_grad`, backward will fill gradients retrievable via the
    /// returned ids.
    pub fn register_params(&self, tape: &mut Tape, requires_grad: bool) -> Vec<ValueId> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(requires_grad);
                tape.leaf(&t)
            })
            .collect()
    }

    /// Forward through all layers using previously registered parameter ids.
    /// `x` is `[B, ...input_shape]`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: &[ValueId],
        x: ValueId,
    ) -> Result<ValueId, NumericsError> {
        let batch = {
            let s = tape.shape(x);
            if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
                return Err(NumericsError::ShapeMismatch {
                    expected: self.input_shape.clone(),
                    got: s.to_vec(),
                    context: "model input".into(),
                });
            }
            s[0]
        };
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let off = self.param_offsets[i];
            cur = match layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let y = tape.conv2d(cur, params[off], *stride, *padding)?;
                    tape.bias_add(y, params[off + 1], 1)?
                }
                LayerSpec::ConvTranspose2d {
                    stride, padding, ..
                } => {
                    let y = tape.conv_transpose2d(cur, params[off], *stride, *padding)?;
                    tape.bias_add(y, params[off + 1], 1)?
                }
                LayerSpec::MaxPool2d { size } => tape.max_pool2d(cur, *size)?,
                LayerSpec::Upsample2x => tape.upsample2x(cur)?,
                LayerSpec::Dense { .. } => {
                    let y = tape.matmul(cur, params[off])?;
                    tape.bias_add(y, params[off + 1], 1)?
                }
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::Sigmoid => tape.sigmoid(cur),
                LayerSpec::Flatten => {
                    let n: usize = tape.shape(cur)[1..].iter().product();
                    tape.reshape(cur, &[batch, n])?
                }
                LayerSpec::Reshape { shape } => {
                    let mut full = vec![batch];
                    full.extend_from_slice(shape);
                    tape.reshape(cur, &full)?
                }
            };
        }
        Ok(cur)
    }

    /// Inference on a private tape without gradient tracking.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let mut tape = Tape::new();
        let mut input = x.clone();
        input.set_requires_grad(false);
        let x_id = tape.leaf(&input);
        let params = self.register_params(&mut tape, false);
        let out = self.forward_with(&mut tape, &params, x_id)?;
        Ok(tape.to_tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_passes_input_through() {
        let mut stream = RngStream::seed(0);
        let mut net = Sequential::new(
            vec![LayerSpec::Dense {
                inputs: 3,
                outputs: 3,
            }],
            &[3],
            &mut stream,
        )
        .unwrap();
        let eye = vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ];
        net.params_mut()[0] = Tensor::from_vec(&[3, 3], eye).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = net.forward_value(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let mut stream = RngStream::seed(0);
        let err = Sequential::new(
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 10,
                    outputs: 2,
                },
            ],
            &[1, 4, 4],
            &mut stream,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 1"), "message was: {msg}");
        assert!(msg.contains("[10]") && msg.contains("[16]"), "message was: {msg}");
    }

    #[test]
    fn same_seed_same_weights() {
        let layers = || {
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 4 * 8 * 8,
                    outputs: 2,
                },
            ]
        };
        let a = Sequential::new(layers(), &[1, 8, 8], &mut RngStream::seed(42)).unwrap();
        let b = Sequential::new(layers(), &[1, 8, 8], &mut RngStream::seed(42)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn output_shape_composes() {
        let mut stream = RngStream::seed(1);
        let net = Sequential::new(
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::MaxPool2d { size: 2 },
                LayerSpec::Upsample2x,
            ],
            &[1, 16, 16],
            &mut stream,
        )
        .unwrap();
        assert_eq!(net.output_shape(), vec![8, 16, 16]);
    }
}
