//! Noise-residual front end feeding the second encoder branch.
//!
//! Two interchangeable extractors:
//!
//! * `srm_fixed`: three fixed zero-sum high-pass kernels (horizontal
//!   second-order derivative, 3x3 square Laplacian-type, horizontal
//!   first-order difference). Output channel `k` correlates kernel `k` with
//!   every color channel and sums, then truncates to `[-t, t]` with
//!   `t = 2/255` and rescales by `1/t`, so residuals land in `[-1, 1]`.
//! * `learned_highpass`: one constrained 5x5 convolution (3 -> 3 channels)
//!   whose every `(out, in)` slice is projected after each optimizer step to
//!   center `-1` and off-center sum `1`.
//!
//! Both emit three channels so the noise branch reuses the RGB encoder
//! unchanged.

use candle_core::{Tensor, Var};

use crate::config::NoiseMode;
use crate::error::{Error, Result};
use crate::layers::conv2d_with;
use crate::params::{Init, Scope};

/// Residual truncation threshold in normalized intensity units.
pub const SRM_TRUNCATION: f64 = 2.0 / 255.0;

/// The fixed high-pass bank, row-major 3x3.
pub const SRM_KERNELS: [[f64; 9]; 3] = [
    // second-order horizontal derivative
    [0.0, 0.0, 0.0, 0.5, -1.0, 0.5, 0.0, 0.0, 0.0],
    // 3x3 square
    [-0.25, 0.5, -0.25, 0.5, -1.0, 0.5, -0.25, 0.5, -0.25],
    // first-order horizontal difference
    [0.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0],
];

const LEARNED_K: usize = 5;

#[derive(Debug)]
pub enum NoiseFront {
    SrmFixed { kernel: Tensor },
    LearnedHighpass { weight: Var },
}

impl NoiseFront {
    pub fn new(s: &Scope, mode: NoiseMode) -> Result<Self> {
        match mode {
            NoiseMode::SrmFixed => {
                let mut w = Vec::with_capacity(3 * 3 * 9);
                for k in SRM_KERNELS.iter() {
                    for _ in 0..3 {
                        w.extend_from_slice(k);
                    }
                }
                let kernel = Tensor::from_vec(w, (3, 3, 3, 3), s.device())?.to_dtype(s.dtype())?;
                Ok(NoiseFront::SrmFixed { kernel })
            }
            NoiseMode::LearnedHighpass => {
                let weight = s.param(
                    "weight",
                    (3, 3, LEARNED_K, LEARNED_K),
                    Init::Uniform { bound: 0.1 },
                )?;
                let front = NoiseFront::LearnedHighpass { weight };
                front.project()?;
                Ok(front)
            }
        }
    }

    pub fn mode(&self) -> NoiseMode {
        match self {
            NoiseFront::SrmFixed { .. } => NoiseMode::SrmFixed,
            NoiseFront::LearnedHighpass { .. } => NoiseMode::LearnedHighpass,
        }
    }

    /// `(B, 3, H, W)` image to `(B, 3, H, W)` residual.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("noise front expects 3 channels, got {c}")));
        }
        match self {
            NoiseFront::SrmFixed { kernel } => {
                let r = conv2d_with(x, kernel, None, 3, 1, 1)?;
                let t = SRM_TRUNCATION;
                Ok((r.clamp(-t, t)? / t)?)
            }
            NoiseFront::LearnedHighpass { weight } => {
                let p = LEARNED_K / 2;
                conv2d_with(x, weight.as_tensor(), None, LEARNED_K, 1, p)
            }
        }
    }

    /// Re-imposes the constrained-convolution structure; a no-op for the
    /// fixed bank. Call after every optimizer step.
    pub fn project(&self) -> Result<()> {
        let NoiseFront::LearnedHighpass { weight } = self else {
            return Ok(());
        };
        let dtype = weight.dtype();
        let kk = LEARNED_K * LEARNED_K;
        let center = kk / 2;
        let mut w = weight
            .as_tensor()
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        for slice in w.chunks_mut(kk) {
            slice[center] = 0.0;
            let sum: f64 = slice.iter().sum();
            if sum.abs() < 1e-8 {
                slice.iter_mut().for_each(|v| *v = 1.0 / (kk - 1) as f64);
            } else {
                slice.iter_mut().for_each(|v| *v /= sum);
            }
            slice[center] = -1.0;
        }
        let t = Tensor::from_vec(w, weight.shape(), weight.device())?.to_dtype(dtype)?;
        weight.set(&t)?;
        Ok(())
    }

    pub fn learned_weight(&self) -> Option<&Var> {
        match self {
            NoiseFront::LearnedHighpass { weight } => Some(weight),
            NoiseFront::SrmFixed { .. } => None,
        }
    }
}
