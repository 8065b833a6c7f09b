//! Batched inputs and the multi-scale containers passed between stages.

use std::fmt;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::ops::to_f64_vec;

/// Every input side must be a multiple of this (four stride-2 stages).
pub const SIZE_MULTIPLE: usize = 16;

/// A validated `(B, 3, H, W)` image batch with `H, W` divisible by 16.
#[derive(Debug, Clone)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        let (b, c, h, w) = t
            .dims4()
            .map_err(|_| Error::shape(format!("image batch must be rank 4, got {:?}", t.dims())))?;
        if b == 0 {
            return Err(Error::invalid("image batch is empty"));
        }
        if c != 3 {
            return Err(Error::shape(format!("image batch needs 3 channels, got {c}")));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by {SIZE_MULTIPLE}"
            )));
        }
        if to_f64_vec(&t.sum_all()?)?.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image batch contains NaN or Inf"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4().expect("validated rank 4")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Rgb,
    Noise,
    FusedScale,
    FusedDomain,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DomainTag::Rgb => "rgb",
            DomainTag::Noise => "noise",
            DomainTag::FusedScale => "fused_scale",
            DomainTag::FusedDomain => "fused_domain",
        };
        f.write_str(s)
    }
}

/// Four feature maps at strides 2, 4, 8 and 16, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
    pub tag: DomainTag,
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 4], tag: DomainTag) -> Result<Self> {
        let mut prev: Option<(usize, usize, usize)> = None;
        for (i, l) in levels.iter().enumerate() {
            let (b, _, h, w) = l.dims4()?;
            if let Some((pb, ph, pw)) = prev {
                if b != pb || ph != 2 * h || pw != 2 * w {
                    return Err(Error::shape(format!(
                        "level {} is {h}x{w}, expected half of {ph}x{pw}",
                        i + 1
                    )));
                }
            }
            prev = Some((b, h, w));
        }
        Ok(Self { levels, tag })
    }

    pub fn expect_tag(&self, expected: &[DomainTag]) -> Result<()> {
        if expected.contains(&self.tag) {
            Ok(())
        } else {
            Err(Error::TagMismatch {
                expected: expected
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" or "),
                found: self.tag.to_string(),
            })
        }
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.levels[i].dims()[1])
    }

    /// `(h, w)` per level.
    pub fn sizes(&self) -> [(usize, usize); 4] {
        std::array::from_fn(|i| {
            let d = self.levels[i].dims();
            (d[2], d[3])
        })
    }
}

/// Progressive edge probabilities `E_1..E_4`; `E_4` is supervised.
#[derive(Debug, Clone)]
pub struct EdgePyramid {
    pub logits: [Tensor; 4],
    pub probs: [Tensor; 4],
}

/// Progressive mask predictions `M_1..M_4`; `M_1` is the final mask.
#[derive(Debug, Clone)]
pub struct MaskPyramid {
    pub logits: [Tensor; 4],
    pub probs: [Tensor; 4],
}

impl MaskPyramid {
    pub fn sizes(&self) -> [(usize, usize); 4] {
        std::array::from_fn(|i| {
            let d = self.probs[i].dims();
            (d[2], d[3])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn image_batch_validation() {
        let dev = Device::Cpu;
        assert!(ImageBatch::new(Tensor::zeros((1, 3, 32, 48), DType::F32, &dev).unwrap()).is_ok());
        assert!(ImageBatch::new(Tensor::zeros((1, 3, 30, 32), DType::F32, &dev).unwrap()).is_err());
        assert!(ImageBatch::new(Tensor::zeros((1, 1, 32, 32), DType::F32, &dev).unwrap()).is_err());
        let nan = Tensor::new(&[f32::NAN], &dev).unwrap().broadcast_as((1, 3, 16, 16)).unwrap();
        assert!(ImageBatch::new(nan.contiguous().unwrap()).is_err());
    }
}
