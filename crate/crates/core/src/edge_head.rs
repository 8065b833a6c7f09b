//! Progressive edge prediction from the raw RGB pyramid.
//!
//! Level 1 sees only `R_1`; each later level combines `R_i` with the
//! previous edge map (area-downsampled to `R_i`'s grid) before the
//! 1x1 conv -> Edge Block -> 1x1 conv -> sigmoid chain. Only `E_4` is
//! supervised.

use candle_core::Tensor;

use crate::config::{CombineMode, EdgeConfig};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, ConvSpec};
use crate::kernels::depthwise3;
use crate::ops::{self, reflect_pad1, resize, Resample};
use crate::params::Scope;
use crate::pyramid::{DomainTag, EdgePyramid, FeaturePyramid};

/// Added under the square root of the Sobel magnitude.
pub const SOBEL_EPS: f64 = 1e-6;

/// Horizontal-gradient Sobel kernel, row-major.
pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
/// Vertical-gradient Sobel kernel, row-major.
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Per-channel Sobel responses `(gx, gy)` with reflect padding.
pub fn sobel_gradients(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = x.dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let c = x.dim(1)?;
    let xp = reflect_pad1(x)?;
    let bank = |k: &[f64; 9]| -> Result<Tensor> {
        Ok(Tensor::new(k, x.device())?.to_dtype(x.dtype())?.unsqueeze(0)?.repeat((c, 1))?)
    };
    Ok((depthwise3(&xp, &bank(&SOBEL_X)?, 0)?, depthwise3(&xp, &bank(&SOBEL_Y)?, 0)?))
}

/// `sqrt(gx^2 + gy^2 + eps)` per channel; shape preserved.
pub fn sobel_magnitude(x: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel_gradients(x)?;
    Ok(((gx.sqr()? + gy.sqr()?)? + SOBEL_EPS)?.sqrt()?)
}

/// Sobel magnitude -> 3x3 conv -> BatchNorm -> ReLU, channels preserved.
#[derive(Debug)]
pub struct EdgeBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl EdgeBlock {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&s.pp("conv"), channels, channels, ConvSpec::same3(false))?,
            bn: BatchNorm2d::new(&s.pp("bn"), channels)?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(&sobel_magnitude(x)?)?;
        Ok(self.bn.forward(&y, train)?.relu()?)
    }
}

#[derive(Debug)]
pub struct EdgeLevel {
    pub pre: Conv2d,
    pub block: EdgeBlock,
    pub post: Conv2d,
}

#[derive(Debug)]
pub struct EdgeHead {
    levels: Vec<EdgeLevel>,
    combine: CombineMode,
}

impl EdgeHead {
    pub fn new(s: &Scope, cfg: &EdgeConfig, rgb_dims: [usize; 4]) -> Result<Self> {
        let levels = (0..4)
            .map(|i| {
                let ls = s.pp(format!("level{}", i + 1));
                let extra = usize::from(i > 0 && cfg.combine == CombineMode::Concat);
                Ok(EdgeLevel {
                    pre: Conv2d::new(&ls.pp("pre"), rgb_dims[i] + extra, cfg.width, ConvSpec::pointwise(true))?,
                    block: EdgeBlock::new(&ls.pp("block"), cfg.width)?,
                    post: Conv2d::new(&ls.pp("post"), cfg.width, 1, ConvSpec::pointwise(true))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels, combine: cfg.combine })
    }

    pub fn level(&self, i: usize) -> &EdgeLevel {
        &self.levels[i]
    }

    pub fn combine_mode(&self) -> CombineMode {
        self.combine
    }

    /// Edge logits for level `i` (0-based) from `r` and an optional prior
    /// probability map at any resolution.
    pub fn level_logits(&self, i: usize, r: &Tensor, prior: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let input = match prior {
            None => r.clone(),
            Some(e) => {
                let (_, _, h, w) = r.dims4()?;
                let e = resize(e, h, w, Resample::Area)?;
                match self.combine {
                    CombineMode::Multiply => r.broadcast_mul(&(e + 1.0)?)?,
                    CombineMode::Concat => Tensor::cat(&[r, &e], 1)?,
                }
            }
        };
        let lvl = &self.levels[i];
        let y = lvl.pre.forward(&input)?;
        let y = lvl.block.forward(&y, train)?;
        lvl.post.forward(&y)
    }

    pub fn predict_edges(&self, rgb: &FeaturePyramid, train: bool) -> Result<EdgePyramid> {
        self.predict_edges_with(rgb, train, |_, e| Ok(e))
    }

    /// As [`predict_edges`](Self::predict_edges), but the prior handed to
    /// level `i + 1` is `override_prior(i, E_i)`.
    pub fn predict_edges_with<F>(&self, rgb: &FeaturePyramid, train: bool, override_prior: F) -> Result<EdgePyramid>
    where
        F: Fn(usize, Tensor) -> Result<Tensor>,
    {
        rgb.expect_tag(&[DomainTag::Rgb])?;
        let mut logits = Vec::with_capacity(4);
        let mut probs = Vec::with_capacity(4);
        let mut prior: Option<Tensor> = None;
        for i in 0..4 {
            let l = self.level_logits(i, &rgb.levels[i], prior.as_ref(), train)?;
            let p = ops::sigmoid(&l)?;
            prior = Some(override_prior(i, p.clone())?);
            logits.push(l);
            probs.push(p);
        }
        Ok(EdgePyramid {
            logits: logits.try_into().expect("four levels"),
            probs: probs.try_into().expect("four levels"),
        })
    }
}
