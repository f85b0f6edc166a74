//! Layer descriptions, shape inference and the per-layer forward/backward rules.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{
    self, conv2d, conv2d_backward, conv_out_shape, matmul, maxpool, maxpool_backward, transpose,
    InitScheme, KernelShape, Padding, PoolIndex, Rng, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Along the last axis. Only valid as the network's final layer.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv2d {
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::Conv2d { activation, .. } => *activation,
            _ => Activation::Identity,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { units, .. } => {
                if input.len() != 1 {
                    return Err(Error::Shape(format!(
                        "dense layer needs a flat input, got {input:?} (insert a flatten layer)"
                    )));
                }
                if units == 0 {
                    return Err(Error::Shape("dense layer with zero units".into()));
                }
                Ok(vec![units])
            }
            LayerSpec::Conv2d {
                filters,
                kernel: (kh, kw),
                stride,
                padding,
                ..
            } => conv_out_shape(input, KernelShape::Conv { kh, kw, filters }, stride, padding),
            LayerSpec::MaxPool { window, stride } => {
                conv_out_shape(input, KernelShape::Pool { window }, stride, Padding::Valid)
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Weight shape, bias length, fan-in and fan-out, for layers with parameters.
    fn param_layout(&self, input: &[usize]) -> Option<(Vec<usize>, usize, usize, usize)> {
        match *self {
            LayerSpec::Dense { units, .. } => Some((vec![input[0], units], units, input[0], units)),
            LayerSpec::Conv2d {
                filters,
                kernel: (kh, kw),
                ..
            } => {
                let cin = input[2];
                Some((
                    vec![kh, kw, cin, filters],
                    filters,
                    kh * kw * cin,
                    kh * kw * filters,
                ))
            }
            _ => None,
        }
    }

    /// Fresh parameters for this layer at global position `layer_index`.
    ///
    /// Each layer draws from its own stream of `seed`, so a layer gets the same
    /// parameters whichever party ends up hosting it.
    pub fn init_params(&self, input: &[usize], layer_index: usize, seed: u64) -> Option<LayerParams> {
        let (shape, bias, fan_in, fan_out) = self.param_layout(input)?;
        let scheme = match self.activation() {
            Activation::Relu => InitScheme::He,
            _ => InitScheme::Xavier,
        };
        let mut rng = Rng::with_stream(seed, layer_index as u64);
        let (weight, bias) = tensor::init_params(&shape, bias, fan_in, fan_out, scheme, &mut rng);
        Some(LayerParams { weight, bias })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Softmax => "softmax",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        Self {
            weight: self.weight.scale(k),
            bias: self.bias.scale(k),
        }
    }

    pub fn max_abs_diff(&self, other: &LayerParams) -> Option<f64> {
        Some(
            self.weight
                .max_abs_diff(&other.weight)?
                .max(self.bias.max_abs_diff(&other.bias)?),
        )
    }
}

/// What one layer keeps from its forward pass beyond its input and output.
#[derive(Debug, Clone)]
pub(crate) enum Residue {
    None,
    Pool(PoolIndex),
}

fn add_bias(z: &mut Tensor, bias: &Tensor) {
    let c = bias.len();
    let b = bias.data();
    for row in z.data_mut().chunks_mut(c) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

fn bias_grad(dz: &Tensor, channels: usize) -> Tensor {
    let mut db = vec![0.0; channels];
    for row in dz.data().chunks(channels) {
        for (a, v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    Tensor::new(vec![channels], db).expect("bias length")
}

fn activate(z: Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => z,
        Activation::Relu => z.map(|v| v.max(0.0)),
        Activation::Softmax => {
            let c = *z.shape().last().expect("rank >= 1");
            let mut y = z;
            for row in y.data_mut().chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            y
        }
    }
}

/// Gradient w.r.t. the pre-activation, given the activation output `y`.
fn activation_backward(y: &Tensor, dy: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => dy.clone(),
        Activation::Relu => y
            .zip_map(dy, "relu_backward", |yv, g| if yv > 0.0 { g } else { 0.0 })
            .expect("same shape"),
        Activation::Softmax => {
            let c = *y.shape().last().expect("rank >= 1");
            let mut dz = dy.clone();
            for (row, yrow) in dz.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                let dot: f64 = row.iter().zip(yrow).map(|(g, p)| g * p).sum();
                for (g, p) in row.iter_mut().zip(yrow) {
                    *g = p * (*g - dot);
                }
            }
            dz
        }
    }
}

pub(crate) fn layer_forward(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    x: &Tensor,
    out_shape: &[usize],
) -> Result<(Tensor, Residue)> {
    let batch = x.batch();
    let mut full_out = vec![batch];
    full_out.extend_from_slice(out_shape);
    let (y, residue) = match spec {
        LayerSpec::Dense { activation, .. } => {
            let p = params.expect("dense layer has params");
            let mut z = matmul(x, &p.weight)?;
            add_bias(&mut z, &p.bias);
            (activate(z, *activation), Residue::None)
        }
        LayerSpec::Conv2d {
            stride,
            padding,
            activation,
            ..
        } => {
            let p = params.expect("conv layer has params");
            let mut z = conv2d(x, &p.weight, *stride, *padding)?;
            add_bias(&mut z, &p.bias);
            (activate(z, *activation), Residue::None)
        }
        LayerSpec::MaxPool { window, stride } => {
            let (y, idx) = maxpool(x, *window, *stride)?;
            (y, Residue::Pool(idx))
        }
        LayerSpec::Flatten => (x.reshape(&full_out)?, Residue::None),
    };
    y.debug_check_finite("layer forward");
    Ok((y, residue))
}

/// Returns parameter gradients (if any) and the gradient w.r.t. the layer input.
pub(crate) fn layer_backward(
    spec: &LayerSpec,
    params: Option<&LayerParams>,
    x: &Tensor,
    y: &Tensor,
    residue: &Residue,
    dy: &Tensor,
) -> Result<(Option<LayerParams>, Tensor)> {
    match spec {
        LayerSpec::Dense { activation, .. } => {
            let p = params.expect("dense layer has params");
            let dz = activation_backward(y, dy, *activation);
            let weight = matmul(&transpose(x)?, &dz)?;
            let bias = bias_grad(&dz, p.bias.len());
            let dx = matmul(&dz, &transpose(&p.weight)?)?;
            Ok((Some(LayerParams { weight, bias }), dx))
        }
        LayerSpec::Conv2d {
            stride,
            padding,
            activation,
            ..
        } => {
            let p = params.expect("conv layer has params");
            let dz = activation_backward(y, dy, *activation);
            let g = conv2d_backward(x, &p.weight, &dz, *stride, *padding)?;
            let bias = bias_grad(&dz, p.bias.len());
            Ok((
                Some(LayerParams {
                    weight: g.kernel,
                    bias,
                }),
                g.input,
            ))
        }
        LayerSpec::MaxPool { .. } => match residue {
            Residue::Pool(idx) => Ok((None, maxpool_backward(dy, idx)?)),
            Residue::None => Err(Error::State("maxpool cache lacks its index map".into())),
        },
        LayerSpec::Flatten => Ok((None, dy.reshape(x.shape())?)),
    }
}
