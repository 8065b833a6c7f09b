//! Cross-scale fusion within a domain and cross-domain fusion between the
//! RGB and noise pyramids.
//!
//! Cross-scale: level `i` concatenates its neighbours `i-1, i, i+1`
//! (truncated at both ends), each resampled to level `i`'s grid (area
//! average from the finer level, bilinear from the coarser), then applies
//! 1x1 conv -> BatchNorm -> ReLU back to the level's width.
//!
//! Cross-domain: concatenate the two fused levels, 1x1 conv to the level
//! width, conditional 3x3 convolution, BatchNorm, ReLU.

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::layers::{conv2d_with, BatchNorm2d, Conv2d, ConvSpec};
use crate::ops::{self, resize, Resample};
use crate::params::{Init, Scope};
use crate::pyramid::{DomainTag, FeaturePyramid};

/// Indices of the levels fused into level `i` (0-based).
pub fn csf_neighbors(i: usize) -> std::ops::RangeInclusive<usize> {
    i.saturating_sub(1)..=(i + 1).min(3)
}

#[derive(Debug)]
pub struct CrossScaleFusion {
    reduce: Vec<Conv2d>,
    norm: Vec<BatchNorm2d>,
}

impl CrossScaleFusion {
    pub fn new(s: &Scope, in_dims: [usize; 4], out_dims: [usize; 4]) -> Result<Self> {
        let mut reduce = Vec::with_capacity(4);
        let mut norm = Vec::with_capacity(4);
        for i in 0..4 {
            let concat: usize = csf_neighbors(i).map(|j| in_dims[j]).sum();
            let ls = s.pp(format!("level{}", i + 1));
            reduce.push(Conv2d::new(&ls.pp("reduce"), concat, out_dims[i], ConvSpec::pointwise(false))?);
            norm.push(BatchNorm2d::new(&ls.pp("bn"), out_dims[i])?);
        }
        Ok(Self { reduce, norm })
    }

    /// Channel-concatenated, resampled neighbourhood of level `i`.
    pub fn gather(p: &FeaturePyramid, i: usize) -> Result<Tensor> {
        let (h, w) = p.sizes()[i];
        let parts = csf_neighbors(i)
            .map(|j| {
                let mode = if j < i { Resample::Area } else { Resample::Bilinear };
                resize(&p.levels[j], h, w, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 1)?)
    }

    pub fn forward(&self, p: &FeaturePyramid, train: bool) -> Result<FeaturePyramid> {
        p.expect_tag(&[DomainTag::Rgb, DomainTag::Noise])?;
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            let cat = Self::gather(p, i)?;
            let y = self.reduce[i].forward(&cat)?;
            out.push(self.norm[i].forward(&y, train)?.relu()?);
        }
        FeaturePyramid::new(out.try_into().expect("four levels"), DomainTag::FusedScale)
    }
}

/// Conditional convolution: the kernel applied to example `b` is
/// `sum_k r_bk * W_k`, with routing weights `r_b = sigmoid(A * gap(x_b) + c)`.
#[derive(Debug)]
pub struct CondConv {
    experts: Var,
    expert_bias: Var,
    router_weight: Var,
    router_bias: Var,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

impl CondConv {
    pub fn new(s: &Scope, in_ch: usize, out_ch: usize, kernel: usize, experts: usize) -> Result<Self> {
        Ok(Self {
            experts: s.param(
                "experts",
                (experts, out_ch, in_ch, kernel, kernel),
                Init::ConvFanOut { fan_out: kernel * kernel * out_ch },
            )?,
            expert_bias: s.param("expert_bias", (experts, out_ch), Init::Zeros)?,
            router_weight: s.param("router.weight", (experts, in_ch), Init::TruncNormal { std: 0.02 })?,
            router_bias: s.param("router.bias", experts, Init::Zeros)?,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.dims()[0]
    }

    pub fn experts(&self) -> &Var {
        &self.experts
    }

    pub fn expert_bias(&self) -> &Var {
        &self.expert_bias
    }

    pub fn router_weight(&self) -> &Var {
        &self.router_weight
    }

    pub fn router_bias(&self) -> &Var {
        &self.router_bias
    }

    /// Per-example routing weights `(B, K)` in `(0, 1)`.
    pub fn routing(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        let logits = pooled
            .matmul(&self.router_weight.t()?)?
            .broadcast_add(&self.router_bias)?;
        ops::sigmoid(&logits)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.routing(x)?;
        self.forward_routed(x, &r)
    }

    /// Convolution with externally supplied routing weights `(B, K)`.
    pub fn forward_routed(&self, x: &Tensor, routing: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        if c != self.in_ch {
            return Err(Error::shape(format!("condconv expects {} channels, got {c}", self.in_ch)));
        }
        let k = self.num_experts();
        let (rb, rk) = routing.dims2()?;
        if rb != b || rk != k {
            return Err(Error::shape(format!("routing {rb}x{rk} does not match batch {b} x {k} experts")));
        }
        let kk = self.kernel * self.kernel;
        let flat = self.experts.reshape((k, self.out_ch * c * kk))?;
        let kernels = routing.matmul(&flat)?.reshape((b, self.out_ch, c, self.kernel, self.kernel))?;
        let bias = routing.matmul(self.expert_bias.as_tensor())?;
        let ys = (0..b)
            .map(|i| Ok(x.narrow(0, i, 1)?.conv2d(&kernels.get(i)?, self.kernel / 2, 1, 1, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let y = Tensor::cat(&ys, 0)?;
        Ok(y.broadcast_add(&bias.reshape((b, self.out_ch, 1, 1))?)?)
    }

    /// Plain convolution with one explicit kernel, used as a reference.
    pub fn plain(&self, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        conv2d_with(x, weight, Some(bias), self.kernel, 1, self.kernel / 2)
    }
}

#[derive(Debug)]
struct CdfLevel {
    squeeze: Conv2d,
    cond: CondConv,
    bn: BatchNorm2d,
}

#[derive(Debug)]
pub struct CrossDomainFusion {
    levels: Vec<CdfLevel>,
}

impl CrossDomainFusion {
    pub fn new(s: &Scope, dims: [usize; 4], experts: usize) -> Result<Self> {
        let levels = (0..4)
            .map(|i| {
                let ls = s.pp(format!("level{}", i + 1));
                Ok(CdfLevel {
                    squeeze: Conv2d::new(&ls.pp("squeeze"), 2 * dims[i], dims[i], ConvSpec::pointwise(true))?,
                    cond: CondConv::new(&ls.pp("condconv"), dims[i], dims[i], 3, experts)?,
                    bn: BatchNorm2d::new(&ls.pp("bn"), dims[i])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn condconv(&self, level: usize) -> &CondConv {
        &self.levels[level].cond
    }

    pub fn forward(&self, rgb: &FeaturePyramid, noise: &FeaturePyramid, train: bool) -> Result<FeaturePyramid> {
        rgb.expect_tag(&[DomainTag::FusedScale])?;
        noise.expect_tag(&[DomainTag::FusedScale])?;
        let mut out = Vec::with_capacity(4);
        for (i, lvl) in self.levels.iter().enumerate() {
            let (a, b) = (&rgb.levels[i], &noise.levels[i]);
            if a.dims() != b.dims() {
                return Err(Error::shape(format!(
                    "level {}: rgb {:?} vs noise {:?}",
                    i + 1,
                    a.dims(),
                    b.dims()
                )));
            }
            let y = lvl.squeeze.forward(&Tensor::cat(&[a, b], 1)?)?;
            let y = lvl.cond.forward(&y)?;
            out.push(lvl.bn.forward(&y, train)?.relu()?);
        }
        FeaturePyramid::new(out.try_into().expect("four levels"), DomainTag::FusedDomain)
    }
}
