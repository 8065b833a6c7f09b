use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Resize,
    GaussianNoise,
}

/// A post-processing attack applied before evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Scale factor in `(0, 1]`.
    pub resize_ratio: f64,
    /// Noise variance in squared 0..255 gray levels.
    pub noise_variance: f64,
    pub seed: u64,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            resize_ratio: 0.9,
            noise_variance: 3.0,
            seed: 0,
        }
    }
}

impl AttackSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn resize(ratio: f64) -> Self {
        Self {
            kind: AttackKind::Resize,
            resize_ratio: ratio,
            ..Self::default()
        }
    }

    pub fn gaussian_noise(variance: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::GaussianNoise,
            noise_variance: variance,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resize_ratio > 0.0 && self.resize_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "resize ratio {} outside (0, 1]",
                self.resize_ratio
            )));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(Error::invalid(format!(
                "noise variance {} must be finite and non-negative",
                self.noise_variance
            )));
        }
        Ok(())
    }

    /// Short label: `none`, `resize:0.9`, `noise:3`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::None => "none".to_string(),
            AttackKind::Resize => format!("resize:{}", self.resize_ratio),
            AttackKind::GaussianNoise => format!("noise:{}", self.noise_variance),
        }
    }

    /// Parses the labels produced by [`AttackSpec::label`].
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let text = text.trim();
        let (kind, arg) = match text.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (text, None),
        };
        let num = |a: Option<&str>, default: f64| -> Result<f64> {
            match a {
                None => Ok(default),
                Some(s) => s
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad attack parameter `{s}` in `{text}`"))),
            }
        };
        let spec = match kind {
            "none" | "clean" => Self::none(),
            "resize" => Self::resize(num(arg, 0.9)?),
            "noise" | "gaussian_noise" => Self::gaussian_noise(num(arg, 3.0)?, seed),
            other => return Err(Error::invalid(format!("unknown attack `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies `spec` to a sample. Resizing uses bilinear interpolation for the
/// image and nearest neighbour for the mask; the new side is `floor(side *
/// ratio)`. Gaussian noise has standard deviation `sqrt(variance) / 255`
/// and the result is clamped to `[0, 1]`.
pub fn apply_attack(sample: &Sample, spec: &AttackSpec) -> Result<Sample> {
    spec.validate()?;
    match spec.kind {
        AttackKind::None => Ok(sample.clone()),
        AttackKind::Resize => {
            let h = ((sample.image.height as f64 * spec.resize_ratio).floor() as usize).max(1);
            let w = ((sample.image.width as f64 * spec.resize_ratio).floor() as usize).max(1);
            Ok(Sample {
                image: sample.image.resize_bilinear(h, w),
                gt_mask: sample.gt_mask.resize_nearest(h, w),
                meta: sample.meta.clone(),
            })
        }
        AttackKind::GaussianNoise => {
            if spec.noise_variance == 0.0 {
                return Ok(sample.clone());
            }
            let std = spec.noise_variance.sqrt() / 255.0;
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let mut out = sample.clone();
            for v in out.image.data.iter_mut() {
                let n: f64 = normal.sample(&mut rng);
                *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
            }
            Ok(out)
        }
    }
}
