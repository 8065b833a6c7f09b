//! Coarse-to-fine mask prediction over the fused pyramid.
//!
//! Each scale has its own SCCM head: a squeeze-excitation channel branch and
//! a non-local spatial branch run in parallel on the input, are projected
//! back to `C` channels and added to it, and a 3x3 conv + sigmoid reads the
//! one-channel mask. `M_4` comes from `f_4` alone; `M_i` for `i < 4` from
//! `f_i` gated by the bilinearly upsampled `M_{i+1}`.

use candle_core::{Tensor, D};

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec, Linear};
use crate::ops::{self, from_tokens, resize, to_tokens, Resample};
use crate::params::Scope;
use crate::pyramid::{DomainTag, FeaturePyramid, MaskPyramid};
use crate::raster::Mask;

#[derive(Debug)]
pub struct SccmOutput {
    pub attended: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

#[derive(Debug)]
pub struct Sccm {
    se_down: Linear,
    se_up: Linear,
    w_ch: Conv2d,
    theta: Conv2d,
    phi: Conv2d,
    g: Conv2d,
    w_sp: Conv2d,
    mask: Conv2d,
    inner: usize,
    max_keys: usize,
}

impl Sccm {
    pub fn new(s: &Scope, channels: usize, reduction: usize, max_keys: usize) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::invalid(format!(
                "cannot reduce {channels} channels by {reduction}"
            )));
        }
        let inner = (channels / 2).max(1);
        let pw = ConvSpec::pointwise(false);
        Ok(Self {
            se_down: Linear::new(&s.pp("se.down"), channels, channels / reduction, true)?,
            se_up: Linear::new(&s.pp("se.up"), channels / reduction, channels, true)?,
            w_ch: Conv2d::new(&s.pp("se.out"), channels, channels, pw)?,
            theta: Conv2d::new(&s.pp("nl.theta"), channels, inner, pw)?,
            phi: Conv2d::new(&s.pp("nl.phi"), channels, inner, pw)?,
            g: Conv2d::new(&s.pp("nl.g"), channels, inner, pw)?,
            w_sp: Conv2d::new(&s.pp("nl.out"), inner, channels, pw)?,
            mask: Conv2d::new(&s.pp("mask"), channels, 1, ConvSpec::same3(true))?,
            inner,
            max_keys: max_keys.max(1),
        })
    }

    /// Output projections of the channel and spatial branches.
    pub fn output_projections(&self) -> (&Conv2d, &Conv2d) {
        (&self.w_ch, &self.w_sp)
    }

    fn key_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h.min(self.max_keys), w.min(self.max_keys))
    }

    /// Query-key affinity `(B, h*w, keys)`; rows are softmax-normalised.
    pub fn affinity(&self, feat: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = feat.dims4()?;
        let (kh, kw) = self.key_grid(h, w);
        let q = to_tokens(&self.theta.forward(feat)?)?;
        let k = to_tokens(&resize(&self.phi.forward(feat)?, kh, kw, Resample::Area)?)?;
        let scores = (q.matmul(&k.t()?)? / (self.inner as f64).sqrt())?;
        ops::softmax_last(&scores)
    }

    /// Per-example channel gate `(B, C, 1, 1)` in `(0, 1)`.
    pub fn channel_gate(&self, feat: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = feat.dims4()?;
        let pooled = feat.mean(D::Minus1)?.mean(D::Minus1)?;
        let z = self.se_down.forward(&pooled)?.relu()?;
        let gate = ops::sigmoid(&self.se_up.forward(&z)?)?;
        Ok(gate.reshape((b, c, 1, 1))?)
    }

    pub fn forward(&self, feat: &Tensor) -> Result<SccmOutput> {
        let (_, _, h, w) = feat.dims4()?;
        let (kh, kw) = self.key_grid(h, w);
        let a = self.affinity(feat)?;
        let v = to_tokens(&resize(&self.g.forward(feat)?, kh, kw, Resample::Area)?)?;
        let y = from_tokens(&a.matmul(&v)?, h, w)?;
        let spatial = self.w_sp.forward(&y)?;
        let channel = self.w_ch.forward(&feat.broadcast_mul(&self.channel_gate(feat)?)?)?;
        let attended = ((feat + spatial)? + channel)?;
        let logits = self.mask.forward(&attended)?;
        let probs = ops::sigmoid(&logits)?;
        Ok(SccmOutput { attended, logits, probs })
    }
}

#[derive(Debug)]
pub struct LocHead {
    heads: Vec<Sccm>,
}

impl LocHead {
    pub fn new(s: &Scope, cfg: &HeadConfig, dims: [usize; 4]) -> Result<Self> {
        let heads = (0..4)
            .map(|i| Sccm::new(&s.pp(format!("level{}", i + 1)), dims[i], cfg.se_reduction, cfg.nonlocal_max_keys))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    pub fn head(&self, i: usize) -> &Sccm {
        &self.heads[i]
    }

    pub fn predict_masks(&self, fused: &FeaturePyramid) -> Result<MaskPyramid> {
        self.predict_masks_with(fused, |_, m| Ok(m))
    }

    /// As [`predict_masks`](Self::predict_masks), but the prior that gates
    /// level `i - 1` is `override_prior(i, M_i)` (0-based `i`).
    pub fn predict_masks_with<F>(&self, fused: &FeaturePyramid, override_prior: F) -> Result<MaskPyramid>
    where
        F: Fn(usize, Tensor) -> Result<Tensor>,
    {
        fused.expect_tag(&[DomainTag::FusedDomain])?;
        let mut logits: [Option<Tensor>; 4] = Default::default();
        let mut probs: [Option<Tensor>; 4] = Default::default();
        let mut prior: Option<Tensor> = None;
        for i in (0..4).rev() {
            let f = &fused.levels[i];
            let input = match &prior {
                None => f.clone(),
                Some(m) => {
                    let (_, _, h, w) = f.dims4()?;
                    f.broadcast_mul(&resize(m, h, w, Resample::Bilinear)?)?
                }
            };
            let out = self.heads[i].forward(&input)?;
            prior = Some(override_prior(i, out.probs.clone())?);
            logits[i] = Some(out.logits);
            probs[i] = Some(out.probs);
        }
        Ok(MaskPyramid {
            logits: logits.map(|t| t.expect("filled")),
            probs: probs.map(|t| t.expect("filled")),
        })
    }
}

/// Binary masks at `(out_h, out_w)`: `M_1` upsampled bilinearly, a pixel is
/// forged iff its probability is strictly above `threshold`.
pub fn finalize(masks: &MaskPyramid, out_h: usize, out_w: usize, threshold: f64) -> Result<Vec<Mask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    threshold_probs(&resize(&masks.probs[0], out_h, out_w, Resample::Bilinear)?, threshold)
}

/// Thresholds a `(B, 1, H, W)` probability map into per-example masks.
pub fn threshold_probs(p: &Tensor, threshold: f64) -> Result<Vec<Mask>> {
    let (b, _, h, w) = p.dims4()?;
    let v = ops::to_f64_vec(p)?;
    v.chunks(h * w)
        .take(b)
        .map(|c| Mask::new(h, w, c.iter().map(|&x| u8::from(x > threshold)).collect()))
        .collect()
}
