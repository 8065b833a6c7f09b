//! Central finite-difference checks of backpropagated gradients.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::ops::{scalar_f64, to_f64_vec};

/// Worst relative error between the analytic gradient of `loss` with respect
/// to `var` and a central difference with step `h`, over the first
/// `max_entries` coordinates (all when 0). `var` must be `f64`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_rel_error<F>(var: &Var, loss: F, h: f64, max_entries: usize) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if var.dtype() != DType::F64 {
        return Err(Error::invalid("gradient checks need f64 parameters"));
    }
    let grads = loss()?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => to_f64_vec(g)?,
        None => vec![0.0; var.elem_count()],
    };
    let base = to_f64_vec(var.as_tensor())?;
    let n = if max_entries == 0 { base.len() } else { max_entries.min(base.len()) };
    let mut worst = 0f64;
    for i in 0..n {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), var.device())?)?;
            scalar_f64(&loss()?)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    var.set(&Tensor::from_vec(base, var.shape(), var.device())?)?;
    Ok(worst)
}

/// Same check with respect to an input tensor: `loss` receives the
/// (perturbed) input.
pub fn max_rel_error_input<F>(x: &Tensor, loss: F, h: f64, entries: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let var = Var::from_tensor(&x.to_dtype(DType::F64)?)?;
    let grads = loss(var.as_tensor())?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => to_f64_vec(g)?,
        None => vec![0.0; var.elem_count()],
    };
    let base = to_f64_vec(x)?;
    let mut worst = 0f64;
    for &i in entries {
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            scalar_f64(&loss(&Tensor::from_vec(v, x.shape(), x.device())?)?)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_gradient_matches() -> Result<()> {
        let v = Var::from_tensor(&Tensor::new(&[0.3f64, -1.2, 2.0], &Device::Cpu)?)?;
        let err = max_rel_error(&v, || Ok((v.sqr()? * 1.5)?.sum_all()?), 1e-6, 0)?;
        assert!(err < 1e-6, "{err}");
        Ok(())
    }
}
