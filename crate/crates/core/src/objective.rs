//! Ground-truth pyramids, the edge target and the composite training loss
//! `sum_i BCE(M_i, G_i) + Dice(E_4, G_E)`.
//!
//! Losses are evaluated in `f64` whatever the network dtype, so the scalar
//! breakdown adds up bit-for-bit in the order it is reported.

use candle_core::{DType, Device, Tensor};

use crate::edge_head::{SOBEL_X, SOBEL_Y};
use crate::error::{Error, Result};
use crate::ops::scalar_f64;
use crate::pyramid::{EdgePyramid, MaskPyramid};
use crate::raster::{masks_to_tensor, Mask};

/// Probability clamp used when BCE is given probabilities.
pub const PROB_CLAMP: f64 = 1e-7;
/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    /// `G_1..G_4`, finest first.
    pub levels: [Mask; 4],
    pub edge: Mask,
}

/// `G_i` by nearest-neighbour downsampling; `G_E` marks every pixel of
/// `G_4` with a nonzero Sobel response (reflect padding).
pub fn build_targets(gt: &Mask, scales: [(usize, usize); 4]) -> TargetSet {
    let levels = scales.map(|(h, w)| gt.resize_nearest(h, w));
    let edge = sobel_support(&levels[3]);
    TargetSet { levels, edge }
}

/// Pixels where the integer Sobel gradient of a binary mask is nonzero.
pub fn sobel_support(m: &Mask) -> Mask {
    let (h, w) = (m.height, m.width);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i >= n {
            (2 * n - 2 - i) as usize
        } else {
            i as usize
        }
    };
    let mut out = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0i32, 0i32);
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let v = m.get(reflect(y as isize + ky as isize - 1, h), reflect(x as isize + kx as isize - 1, w)) as i32;
                gx += SOBEL_X[k] as i32 * v;
                gy += SOBEL_Y[k] as i32 * v;
            }
            if gx * gx + gy * gy > 0 {
                out.data[y * w + x] = 1;
            }
        }
    }
    out
}

/// Batched targets as `(B, 1, h, w)` tensors.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub levels: [Tensor; 4],
    pub edge: Tensor,
}

impl TargetBatch {
    pub fn new(sets: &[TargetSet], dtype: DType, device: &Device) -> Result<Self> {
        let levels = (0..4)
            .map(|i| {
                let ms: Vec<&Mask> = sets.iter().map(|t| &t.levels[i]).collect();
                masks_to_tensor(&ms, dtype, device)
            })
            .collect::<Result<Vec<_>>>()?;
        let edges: Vec<&Mask> = sets.iter().map(|t| &t.edge).collect();
        Ok(Self {
            levels: levels.try_into().expect("four levels"),
            edge: masks_to_tensor(&edges, dtype, device)?,
        })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean of `max(x, 0) - x t + ln(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(logits, target, "bce")?;
    let x = logits.to_dtype(DType::F64)?;
    let t = target.to_dtype(DType::F64)?;
    let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let l = ((x.relu()? - (&x * &t)?)? + soft)?;
    Ok(l.mean_all()?)
}

/// BCE on probabilities, clamped to `[1e-7, 1 - 1e-7]` and mapped to logits.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "bce")?;
    let p = pred.to_dtype(DType::F64)?.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let logits = (p.log()? - (p.neg()? + 1.0)?.log()?)?;
    bce_with_logits(&logits, target)
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` over the whole tensor.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "dice")?;
    let p = pred.to_dtype(DType::F64)?;
    let t = target.to_dtype(DType::F64)?;
    let inter = (&p * &t)?.sum_all()?;
    let num = ((inter * 2.0)? + DICE_SMOOTH)?;
    let den = ((p.sum_all()? + t.sum_all()?)? + DICE_SMOOTH)?;
    Ok((num / den)?.neg()?.affine(1.0, 1.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce_per_scale: [f64; 4],
    pub dice_edge: f64,
    /// The total with the edge term removed.
    pub bce_sum: f64,
}

#[derive(Debug)]
pub struct Loss {
    /// Differentiable `f64` scalar.
    pub value: Tensor,
    pub breakdown: LossBreakdown,
}

/// `sum_i BCE(M_i, G_i)` alone, with the per-scale values.
pub fn mask_loss(masks: &MaskPyramid, targets: &TargetBatch) -> Result<(Tensor, [f64; 4])> {
    let mut sum: Option<Tensor> = None;
    let mut per_scale = [0f64; 4];
    for i in 0..4 {
        let b = bce_with_logits(&masks.logits[i], &targets.levels[i])
            .map_err(|e| Error::shape(format!("scale {}: {e}", i + 1)))?;
        per_scale[i] = scalar_f64(&b)?;
        sum = Some(match sum {
            Some(s) => (s + b)?,
            None => b,
        });
    }
    Ok((sum.expect("four scales"), per_scale))
}

pub fn total_loss(masks: &MaskPyramid, edges: &EdgePyramid, targets: &TargetBatch) -> Result<Loss> {
    let (bce_sum, bce_per_scale) = mask_loss(masks, targets)?;
    let dice = dice_loss(&edges.probs[3], &targets.edge).map_err(|e| Error::shape(format!("edge: {e}")))?;
    let value = (&bce_sum + &dice)?;
    let breakdown = LossBreakdown {
        total: scalar_f64(&value)?,
        bce_per_scale,
        dice_edge: scalar_f64(&dice)?,
        bce_sum: scalar_f64(&bce_sum)?,
    };
    Ok(Loss { value, breakdown })
}
