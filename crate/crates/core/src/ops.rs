//! Differentiable tensor helpers shared by the network modules.
//!
//! Everything here is composed from primitive candle operations. Spatial
//! resampling is a pair of small interpolation matrices applied on each side
//! of the `(H, W)` plane, which makes the forward pass exactly reproducible
//! by a scalar reference implementation.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

/// Spatial resampling kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    /// Bilinear with half-pixel centers (`align_corners = false`).
    Bilinear,
    /// Box average over the exact source footprint of each output pixel.
    Area,
}

/// Row-major `(out_len, in_len)` interpolation matrix.
pub fn resample_weights(in_len: usize, out_len: usize, mode: Resample) -> Vec<f64> {
    let mut m = vec![0f64; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let row = &mut m[o * in_len..(o + 1) * in_len];
        match mode {
            Resample::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let frac = src - i0 as f64;
                row[i0] += 1.0 - frac;
                row[i1] += frac;
            }
            Resample::Area => {
                let start = o as f64 * scale;
                let end = (o as f64 + 1.0) * scale;
                let first = start.floor() as usize;
                let last = (end.ceil() as usize).min(in_len);
                for (i, w) in row.iter_mut().enumerate().take(last).skip(first) {
                    let lo = start.max(i as f64);
                    let hi = end.min(i as f64 + 1.0);
                    if hi > lo {
                        *w = (hi - lo) / scale;
                    }
                }
            }
        }
    }
    m
}

fn weights_tensor(
    in_len: usize,
    out_len: usize,
    mode: Resample,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let w = resample_weights(in_len, out_len, mode);
    Ok(Tensor::from_vec(w, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Resamples the two trailing (spatial) dimensions of `x` to `(h, w)`.
pub fn resize(x: &Tensor, h: usize, w: usize, mode: Resample) -> Result<Tensor> {
    let dims = x.dims();
    if dims.len() < 2 {
        return Err(Error::shape(format!("resize needs rank >= 2, got {dims:?}")));
    }
    let (in_h, in_w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if in_h == h && in_w == w {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    if in_w != w {
        let cols = weights_tensor(in_w, w, mode, x.dtype(), x.device())?;
        out = out.broadcast_matmul(&cols.t()?)?;
    }
    if in_h != h {
        let rows = weights_tensor(in_h, h, mode, x.dtype(), x.device())?;
        out = rows.broadcast_matmul(&out)?;
    }
    Ok(out)
}

/// Pads the spatial dimensions of a `(B, C, H, W)` tensor by one pixel with
/// reflection that excludes the edge (`[a b c] -> [b a b c b]`).
pub fn reflect_pad1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "reflect padding needs spatial size >= 2, got {h}x{w}"
        )));
    }
    let x = Tensor::cat(&[x.narrow(2, 1, 1)?, x.clone(), x.narrow(2, h - 2, 1)?], 2)?;
    let x = Tensor::cat(&[x.narrow(3, 1, 1)?, x.clone(), x.narrow(3, w - 2, 1)?], 3)?;
    Ok(x)
}

/// Pads the bottom and right edges by repeating the last row and column.
pub fn replicate_pad_br(x: &Tensor, extra_h: usize, extra_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let mut out = x.clone();
    if extra_h > 0 {
        let last = out.narrow(2, h - 1, 1)?;
        let rep = last.repeat((1, 1, extra_h, 1))?;
        out = Tensor::cat(&[out, rep], 2)?;
    }
    if extra_w > 0 {
        let last = out.narrow(3, w - 1, 1)?;
        let rep = last.repeat((1, 1, 1, extra_w))?;
        out = Tensor::cat(&[out, rep], 3)?;
    }
    Ok(out)
}

/// The `k x k` shifted windows of a `(B, C, H, W)` tensor after zero padding,
/// in row-major kernel order, each of shape `(B, C, Ho, Wo)`.
pub fn shifted_windows(
    x: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<Tensor>, usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k} does not fit a {h}x{w} input with padding {pad}"
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    // Extra trailing zeros so every window can be cut at length `ho * stride`.
    let tail = stride - 1;
    let xp = if pad > 0 || tail > 0 {
        x.pad_with_zeros(2, pad, pad + tail)?
            .pad_with_zeros(3, pad, pad + tail)?
    } else {
        x.clone()
    };
    let mut windows = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let v = xp.narrow(2, ky, ho * stride)?.narrow(3, kx, wo * stride)?;
            let v = if stride > 1 { subsample(&v, stride)? } else { v };
            windows.push(v);
        }
    }
    Ok((windows, ho, wo))
}

/// Keeps every `stride`-th row and column starting at 0.
fn subsample(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / stride, w / stride);
    let v = x
        .reshape((b, c, ho, stride, wo, stride))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?;
    Ok(v.reshape((b, c, ho, wo))?)
}

/// im2col: `(B, C, H, W) -> (B, C*k*k, Ho*Wo)` with channel-major columns,
/// matching a `(C_out, C, k, k)` weight flattened to `(C_out, C*k*k)`.
pub fn unfold(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, usize, usize)> {
    let (b, c, _, _) = x.dims4()?;
    if k == 1 && stride == 1 && pad == 0 {
        let (_, _, h, w) = x.dims4()?;
        return Ok((x.reshape((b, c, h * w))?, h, w));
    }
    let (windows, ho, wo) = shifted_windows(x, k, stride, pad)?;
    let cols = Tensor::stack(&windows, 2)?.reshape((b, c * k * k, ho * wo))?;
    Ok((cols, ho, wo))
}

/// Logistic function as `(1 + tanh(x / 2)) / 2`, finite in value and
/// gradient for any finite input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `(B, C, H, W) -> (B, H*W, C)`, contiguous.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C) -> (B, C, H, W)`, contiguous.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens cannot form a {h}x{w} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Flattens a tensor to a `Vec<f64>` regardless of its dtype.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Reads a rank-0 or single-element tensor as `f64`.
pub fn scalar_f64(x: &Tensor) -> Result<f64> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
