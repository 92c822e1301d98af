//! Encoder and decoder networks shared by the AEF and VAE models.
//!
//! Weights are stored as `(in, out)` so a layer computes `x W + b` on row batches.

use candle_core::{Tensor, D};

use crate::config::{Activation, Architecture};
use crate::data::DataShape;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// PyTorch-style uniform init with bound `1/sqrt(in)`.
    pub fn new(b: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self::with_bound(b, in_dim, out_dim, bound)
    }

    pub fn with_bound(
        b: &mut ParamBuilder,
        in_dim: usize,
        out_dim: usize,
        bound: f64,
    ) -> Result<Self> {
        let weight = b.uniform("weight", &[in_dim, out_dim], bound)?;
        let bias = b.uniform("bias", &[out_dim], bound)?;
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    /// `x (W ⊙ mask) + b`.
    pub fn forward_masked(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let w = (&self.weight * mask)?;
        Ok(x.matmul(&w)?.broadcast_add(&self.bias)?)
    }
}

/// Fully connected stack; the activation is applied between layers, never after the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new(
        b: &mut ParamBuilder,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().chain(std::iter::once(&out_dim)).enumerate() {
            layers.push(Linear::new(&mut b.pp(&format!("layer{i}")), prev, h)?);
            prev = h;
        }
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    kernel: Tensor,
    bias: Tensor,
}

impl Conv {
    fn new(b: &mut ParamBuilder, shape: [usize; 4], fan_in: usize, out_channels: usize) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            kernel: b.uniform("kernel", &shape, bound)?,
            bias: b.uniform("bias", &[1, out_channels, 1, 1], bound)?,
        })
    }
}

fn check_conv_shape(shape: DataShape) -> Result<()> {
    if shape.height % 4 != 0 || shape.width % 4 != 0 || shape.height == 0 || shape.width == 0 {
        return Err(Error::Dimension(format!(
            "convolutional nets need height and width divisible by 4, got {}x{}",
            shape.height, shape.width
        )));
    }
    Ok(())
}

/// Feature extractor feeding the encoder heads.
#[derive(Clone, Debug)]
enum Trunk {
    Mlp(Mlp, Activation),
    Identity,
    Conv {
        shape: DataShape,
        conv1: Conv,
        conv2: Conv,
    },
}

impl Trunk {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Trunk::Identity => Ok(x.clone()),
            Trunk::Mlp(mlp, act) => act.apply(&mlp.forward(x)?),
            Trunk::Conv {
                shape,
                conv1,
                conv2,
            } => {
                let b = x.dim(0)?;
                let img = x.reshape((b, shape.channels, shape.height, shape.width))?;
                let h = img
                    .conv2d(&conv1.kernel, 1, 2, 1, 1)?
                    .broadcast_add(&conv1.bias)?
                    .relu()?;
                let h = h
                    .conv2d(&conv2.kernel, 1, 2, 1, 1)?
                    .broadcast_add(&conv2.bias)?
                    .relu()?;
                Ok(h.flatten_from(1)?)
            }
        }
    }
}

/// Mean and log-scale encoder with a shared trunk and two linear heads.
#[derive(Clone, Debug)]
pub struct Encoder {
    trunk: Trunk,
    mean: Linear,
    log_scale: Linear,
}

impl Encoder {
    pub fn new(
        b: &mut ParamBuilder,
        arch: &Architecture,
        shape: DataShape,
        latent_dim: usize,
    ) -> Result<Self> {
        let n = shape.numel();
        let (trunk, features) = match arch {
            Architecture::Mlp { hidden, .. } if hidden.is_empty() => (Trunk::Identity, n),
            Architecture::Mlp { hidden, activation } => {
                let (body, last) = hidden.split_at(hidden.len() - 1);
                let mlp = Mlp::new(&mut b.pp("trunk"), n, body, last[0], *activation)?;
                (Trunk::Mlp(mlp, *activation), last[0])
            }
            Architecture::Conv { channels } => {
                check_conv_shape(shape)?;
                let [c1, c2] = *channels;
                let conv1 = Conv::new(
                    &mut b.pp("conv1"),
                    [c1, shape.channels, 3, 3],
                    shape.channels * 9,
                    c1,
                )?;
                let conv2 = Conv::new(&mut b.pp("conv2"), [c2, c1, 3, 3], c1 * 9, c2)?;
                let features = c2 * (shape.height / 4) * (shape.width / 4);
                (
                    Trunk::Conv {
                        shape,
                        conv1,
                        conv2,
                    },
                    features,
                )
            }
        };
        Ok(Self {
            trunk,
            mean: Linear::new(&mut b.pp("mean"), features, latent_dim)?,
            log_scale: Linear::new(&mut b.pp("log_scale"), features, latent_dim)?,
        })
    }

    /// Returns `(mean, raw log-scale)`; callers apply [`clamp_log_scale`](crate::flow::clamp_log_scale).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.trunk.forward(x)?;
        Ok((self.mean.forward(&h)?, self.log_scale.forward(&h)?))
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.trunk.forward(x)?;
        self.mean.forward(&h)
    }
}

#[derive(Clone, Debug)]
enum DecoderBody {
    Mlp(Mlp),
    Conv {
        shape: DataShape,
        channels: [usize; 2],
        input: Linear,
        up1: Conv,
        up2: Conv,
    },
}

/// Maps latents in `R^D` to means in `R^N`.
#[derive(Clone, Debug)]
pub struct Decoder {
    body: DecoderBody,
}

impl Decoder {
    pub fn new(
        b: &mut ParamBuilder,
        arch: &Architecture,
        shape: DataShape,
        latent_dim: usize,
    ) -> Result<Self> {
        let n = shape.numel();
        let body = match arch {
            Architecture::Mlp { hidden, activation } => {
                let rev: Vec<usize> = hidden.iter().rev().copied().collect();
                DecoderBody::Mlp(Mlp::new(b, latent_dim, &rev, n, *activation)?)
            }
            Architecture::Conv { channels } => {
                check_conv_shape(shape)?;
                let [c1, c2] = *channels;
                let (h4, w4) = (shape.height / 4, shape.width / 4);
                let input = Linear::new(&mut b.pp("input"), latent_dim, c2 * h4 * w4)?;
                // conv_transpose2d kernels are laid out (in, out, k, k)
                let up1 = Conv::new(&mut b.pp("up1"), [c2, c1, 4, 4], c2 * 16, c1)?;
                let up2 = Conv::new(&mut b.pp("up2"), [c1, shape.channels, 4, 4], c1 * 16, shape.channels)?;
                DecoderBody::Conv {
                    shape,
                    channels: *channels,
                    input,
                    up1,
                    up2,
                }
            }
        };
        Ok(Self { body })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        match &self.body {
            DecoderBody::Mlp(mlp) => mlp.forward(z),
            DecoderBody::Conv {
                shape,
                channels,
                input,
                up1,
                up2,
            } => {
                let b = z.dim(0)?;
                let h = input.forward(z)?.relu()?.reshape((
                    b,
                    channels[1],
                    shape.height / 4,
                    shape.width / 4,
                ))?;
                let h = h
                    .conv_transpose2d(&up1.kernel, 1, 0, 2, 1)?
                    .broadcast_add(&up1.bias)?
                    .relu()?;
                let h = h
                    .conv_transpose2d(&up2.kernel, 1, 0, 2, 1)?
                    .broadcast_add(&up2.bias)?;
                Ok(h.flatten_from(1)?)
            }
        }
    }
}

/// Row-wise sum over the last dimension: `(B, K) -> (B,)`.
pub fn row_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.sum(D::Minus1)?)
}
