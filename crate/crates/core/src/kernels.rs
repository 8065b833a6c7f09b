//! Hand-written CPU kernels with explicit gradients.

use std::ops::{AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};

use crate::error::{Error, Result};

/// Per-channel 3x3 cross-correlation of `x (B, C, H, W)` with `w (C, 9)`,
/// stride 1, zero padding `pad` (0, 1 or 2) on every side.
pub fn depthwise3(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let (_, c, h, wd) = x.dims4()?;
    if w.dims() != [c, 9] {
        return Err(Error::shape(format!("depthwise kernel {:?} for {c} channels", w.dims())));
    }
    if pad > 2 || h + 2 * pad < 3 || wd + 2 * pad < 3 {
        return Err(Error::shape(format!("depthwise 3x3 with pad {pad} on {h}x{wd}")));
    }
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise3 { pad })?)
}

struct Depthwise3 {
    pad: usize,
}

struct Depthwise3WeightGrad {
    pad: usize,
}

fn out_len(n: usize, pad: usize) -> usize {
    n + 2 * pad - 2
}

/// Index range of output positions whose tap `k` lands inside `[0, n)`.
fn valid(k: usize, pad: usize, n: usize, on: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(on);
    (lo, hi.max(lo))
}

fn correlate<T: Copy + Default + AddAssign + Mul<Output = T>>(
    x: &[T],
    w: &[T],
    dims: (usize, usize, usize, usize),
    pad: usize,
) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let (ho, wo) = (out_len(h, pad), out_len(wd, pad));
    let mut out = vec![T::default(); b * c * ho * wo];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * h * wd..][..h * wd];
            let dst = &mut out[(bi * c + ci) * ho * wo..][..ho * wo];
            for ky in 0..3 {
                let (i0, i1) = valid(ky, pad, h, ho);
                for kx in 0..3 {
                    let (j0, j1) = valid(kx, pad, wd, wo);
                    let wv = w[ci * 9 + ky * 3 + kx];
                    for i in i0..i1 {
                        let srow = &src[(i + ky - pad) * wd..][..wd];
                        let drow = &mut dst[i * wo..][..wo];
                        for j in j0..j1 {
                            drow[j] += wv * srow[j + kx - pad];
                        }
                    }
                }
            }
        }
    }
    out
}

fn weight_grad<T: Copy + Default + AddAssign + Mul<Output = T>>(
    g: &[T],
    x: &[T],
    dims: (usize, usize, usize, usize),
    pad: usize,
) -> Vec<T> {
    let (b, c, h, wd) = dims;
    let (ho, wo) = (out_len(h, pad), out_len(wd, pad));
    let mut out = vec![T::default(); c * 9];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * h * wd..][..h * wd];
            let gr = &g[(bi * c + ci) * ho * wo..][..ho * wo];
            for ky in 0..3 {
                let (i0, i1) = valid(ky, pad, h, ho);
                for kx in 0..3 {
                    let (j0, j1) = valid(kx, pad, wd, wo);
                    let mut acc = T::default();
                    for i in i0..i1 {
                        let srow = &src[(i + ky - pad) * wd..][..wd];
                        let grow = &gr[i * wo..][..wo];
                        for j in j0..j1 {
                            acc += grow[j] * srow[j + kx - pad];
                        }
                    }
                    out[ci * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    }
    out
}

fn contiguous<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("depthwise kernel needs contiguous input".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp2 for Depthwise3 {
    fn name(&self) -> &'static str {
        "depthwise3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l1)?;
        let shape = Shape::from((d.0, d.1, out_len(d.2, self.pad), out_len(d.3, self.pad)));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(correlate(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, d, self.pad))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(correlate(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, d, self.pad))
            }
            _ => candle_core::bail!("depthwise3 supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let flip = Tensor::from_vec((0..9u32).rev().collect::<Vec<_>>(), 9, w.device())?;
        let wf = w.index_select(&flip, 1)?.contiguous()?;
        let gx = grad.apply_op2_no_bwd(&wf, &Depthwise3 { pad: 2 - self.pad })?;
        let gw = grad.apply_op2_no_bwd(x, &Depthwise3WeightGrad { pad: self.pad })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for Depthwise3WeightGrad {
    fn name(&self) -> &'static str {
        "depthwise3-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = dims4(l2)?;
        let shape = Shape::from((d.1, 9));
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(weight_grad(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, d, self.pad))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(weight_grad(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, d, self.pad))
            }
            _ => candle_core::bail!("depthwise3 supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_error_input;
    use crate::ops::shifted_windows;
    use candle_core::{Device, Var};

    fn windowed(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (wins, _, _) = shifted_windows(x, 3, 1, pad)?;
        let mut acc = wins[0].zeros_like()?;
        for (i, win) in wins.iter().enumerate() {
            acc = (acc + win.broadcast_mul(&w.narrow(1, i, 1)?.reshape((1, c, 1, 1))?)?)?;
        }
        Ok(acc)
    }

    #[test]
    fn matches_windowed_reference_for_every_padding() -> Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 5), &dev)?;
        let w = Tensor::randn(0f64, 1.0, (3, 9), &dev)?;
        for pad in 0..3 {
            let a = depthwise3(&x, &w, pad)?;
            let b = windowed(&x, &w, pad)?;
            assert_eq!(a.dims(), b.dims());
            let d = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(d < 1e-12, "pad {pad}: {d}");
        }
        Ok(())
    }

    #[test]
    fn gradients_match_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 2, 6, 5), &dev)?)?;
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 9), &dev)?)?;
        let probe = Tensor::randn(0f64, 1.0, (2, 2, 6, 5), &dev)?;
        let loss = |x: &Tensor, w: &Tensor| -> Result<Tensor> {
            Ok((depthwise3(x, w, 1)? * &probe)?.sum_all()?.sqr()?)
        };
        let entries: Vec<usize> = (0..120).step_by(7).collect();
        let e = max_rel_error_input(x.as_tensor(), |t| loss(t, w.as_tensor()), 1e-6, &entries)?;
        assert!(e < 1e-6, "input grad {e}");
        let e = max_rel_error_input(w.as_tensor(), |t| loss(x.as_tensor(), t), 1e-6, &(0..18).collect::<Vec<_>>())?;
        assert!(e < 1e-6, "weight grad {e}");
        Ok(())
    }
}
