//! Minimal trainable layers on top of [`crate::params`].

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::params::{Buffer, Init, Scope};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    /// Truncated-normal weights (std 0.02), zero bias.
    pub fn new(s: &Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = s.param("weight", (out_dim, in_dim), Init::TruncNormal { std: 0.02 })?;
        let bias = if bias {
            Some(s.param("bias", out_dim, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Dense 2D convolution on `(B, C, H, W)` via im2col and one batched GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    kernel: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub const fn pointwise(bias: bool) -> Self {
        Self { kernel: 1, stride: 1, padding: 0, bias }
    }

    pub const fn same3(bias: bool) -> Self {
        Self { kernel: 3, stride: 1, padding: 1, bias }
    }
}

impl Conv2d {
    pub fn new(s: &Scope, in_ch: usize, out_ch: usize, spec: ConvSpec) -> Result<Self> {
        let k = spec.kernel;
        let weight = s.param(
            "weight",
            (out_ch, in_ch, k, k),
            Init::ConvFanOut { fan_out: k * k * out_ch },
        )?;
        let bias = if spec.bias {
            Some(s.param("bias", out_ch, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_with(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()), self.kernel, self.stride, self.padding)
    }
}

/// Functional convolution with an explicit `(C_out, C_in, k, k)` kernel.
pub fn conv2d_with(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c || kh != k || kw != k {
        return Err(Error::shape(format!(
            "conv kernel {:?} incompatible with input channels {c}",
            weight.dims()
        )));
    }
    let y = x.conv2d(weight, padding, stride, 1, 1)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, co, 1, 1))?)?,
        None => y,
    };
    let _ = b;
    Ok(y)
}

/// 3x3 depthwise convolution with zero padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3 {
    weight: Var,
    bias: Var,
}

impl DepthwiseConv3 {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        let weight = s.param("weight", (channels, 9), Init::ConvFanOut { fan_out: 9 })?;
        let bias = s.param("bias", channels, Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let y = crate::kernels::depthwise3(x, self.weight.as_tensor(), 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalization over `(B, H, W)` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Buffer,
    running_var: Buffer,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("weight", channels, Init::Ones)?,
            beta: s.param("bias", channels, Init::Zeros)?,
            running_mean: s.buffer("running_mean", channels, Init::Zeros)?,
            running_var: s.buffer("running_var", channels, Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn gamma(&self) -> &Var {
        &self.gamma
    }

    pub fn beta(&self) -> &Var {
        &self.beta
    }

    /// In training mode normalizes with batch statistics and folds them into
    /// the running estimates (unbiased variance, momentum 0.1).
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let n = b * h * w;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let m = self.momentum;
            let unbiased = if n > 1 {
                (var.detach() * (n as f64 / (n - 1) as f64))?
            } else {
                var.detach()
            };
            let rm = ((self.running_mean.get() * (1.0 - m))? + (mean.detach().reshape(c)? * m)?)?;
            let rv = ((self.running_var.get() * (1.0 - m))? + (unbiased.reshape(c)? * m)?)?;
            self.running_mean.set(rm);
            self.running_var.set(rv);
            (mean, var)
        } else {
            (
                self.running_mean.get().reshape(shape)?,
                self.running_var.get().reshape(shape)?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.param("weight", dim, Init::Ones)?,
            beta: s.param("bias", dim, Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}
