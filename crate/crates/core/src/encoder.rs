//! Four-stage hierarchical transformer encoder.
//!
//! Each stage halves the resolution with an overlapping 3x3 stride-2 patch
//! embedding, then runs `depth` pre-norm blocks. A block is either
//! spatial-reduction self-attention or a depthwise-conv token mixer, each
//! followed by a Mix-FFN (linear, depthwise 3x3, GELU, linear). Output
//! strides are 2, 4, 8, 16. Only layer normalization is used, so batch
//! elements never interact.

use candle_core::Tensor;

use crate::config::{EncoderConfig, Mixer};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec, DepthwiseConv3, LayerNorm, Linear};
use crate::ops::{from_tokens, softmax_last, to_tokens};
use crate::params::Scope;
use crate::pyramid::{DomainTag, FeaturePyramid, ImageBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Rgb,
    Noise,
}

impl Branch {
    fn tag(self) -> DomainTag {
        match self {
            Branch::Rgb => DomainTag::Rgb,
            Branch::Noise => DomainTag::Noise,
        }
    }
}

#[derive(Debug)]
struct Attention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    reduce: Option<(Linear, LayerNorm)>,
    heads: usize,
    sr: usize,
}

impl Attention {
    fn new(s: &Scope, dim: usize, heads: usize, sr: usize) -> Result<Self> {
        let reduce = if sr > 1 {
            Some((
                Linear::new(&s.pp("sr"), dim * sr * sr, dim, true)?,
                LayerNorm::new(&s.pp("sr_norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&s.pp("q"), dim, dim, true)?,
            kv: Linear::new(&s.pp("kv"), dim, 2 * dim, true)?,
            proj: Linear::new(&s.pp("proj"), dim, dim, true)?,
            reduce,
            heads,
            sr,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let d = c / self.heads;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, d))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, n)?;
        let src = match &self.reduce {
            Some((lin, norm)) => {
                let sr = self.sr;
                if !h.is_multiple_of(sr) || !w.is_multiple_of(sr) {
                    return Err(Error::shape(format!(
                        "stage grid {h}x{w} not divisible by reduction {sr}"
                    )));
                }
                let (rh, rw) = (h / sr, w / sr);
                let grid = from_tokens(x, h, w)?
                    .reshape((b, c, rh, sr, rw, sr))?
                    .permute((0, 2, 4, 1, 3, 5))?
                    .reshape((b, rh * rw, c * sr * sr))?;
                norm.forward(&lin.forward(&grid)?)?
            }
            None => x.clone(),
        };
        let m = src.dims()[1];
        let kv = self.kv.forward(&src)?;
        let k = split(kv.narrow(2, 0, c)?, m)?;
        let v = split(kv.narrow(2, c, c)?, m)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug)]
struct MixFfn {
    fc1: Linear,
    dw: DepthwiseConv3,
    fc2: Linear,
}

impl MixFfn {
    fn new(s: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&s.pp("fc1"), dim, hidden, true)?,
            dw: DepthwiseConv3::new(&s.pp("dw"), hidden)?,
            fc2: Linear::new(&s.pp("fc2"), hidden, dim, true)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = from_tokens(&self.fc1.forward(x)?, h, w)?;
        let y = self.dw.forward(&y)?.gelu()?;
        self.fc2.forward(&to_tokens(&y)?)
    }
}

#[derive(Debug)]
enum TokenMixer {
    Attention(Attention),
    Conv { dw: DepthwiseConv3, proj: Linear },
}

#[derive(Debug)]
struct Block {
    norm1: LayerNorm,
    mixer: TokenMixer,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl Block {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.norm1.forward(x)?;
        let y = match &self.mixer {
            TokenMixer::Attention(a) => a.forward(&y, h, w)?,
            TokenMixer::Conv { dw, proj } => {
                let g = dw.forward(&from_tokens(&y, h, w)?)?;
                proj.forward(&to_tokens(&g)?)?
            }
        };
        let x = (x + y)?;
        let y = self.ffn.forward(&self.norm2.forward(&x)?, h, w)?;
        Ok((x + y)?)
    }
}

#[derive(Debug)]
struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug)]
pub struct Encoder {
    stages: Vec<Stage>,
    branch: Branch,
    dims: [usize; 4],
}

impl Encoder {
    pub fn new(s: &Scope, cfg: &EncoderConfig, branch: Branch) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for i in 0..4 {
            let st = s.pp(format!("stage{}", i + 1));
            let dim = cfg.dims[i];
            let embed = Conv2d::new(
                &st.pp("patch_embed"),
                in_ch,
                dim,
                ConvSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    bias: true,
                },
            )?;
            let embed_norm = LayerNorm::new(&st.pp("patch_norm"), dim)?;
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            for j in 0..cfg.depths[i] {
                let bs = st.pp(format!("block{j}"));
                let mixer = match cfg.mixer {
                    Mixer::Attention => TokenMixer::Attention(Attention::new(
                        &bs.pp("attn"),
                        dim,
                        cfg.heads[i],
                        cfg.sr_ratios[i],
                    )?),
                    Mixer::ConvMixer => TokenMixer::Conv {
                        dw: DepthwiseConv3::new(&bs.pp("mixer_dw"), dim)?,
                        proj: Linear::new(&bs.pp("mixer_proj"), dim, dim, true)?,
                    },
                };
                blocks.push(Block {
                    norm1: LayerNorm::new(&bs.pp("norm1"), dim)?,
                    mixer,
                    norm2: LayerNorm::new(&bs.pp("norm2"), dim)?,
                    ffn: MixFfn::new(&bs.pp("ffn"), dim, dim * cfg.mlp_ratio)?,
                });
            }
            let norm = LayerNorm::new(&st.pp("norm"), dim)?;
            stages.push(Stage {
                embed,
                embed_norm,
                blocks,
                norm,
            });
            in_ch = dim;
        }
        Ok(Self {
            stages,
            branch,
            dims: cfg.dims,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Encodes a validated batch into features at strides 2, 4, 8, 16.
    pub fn encode(&self, x: &ImageBatch) -> Result<FeaturePyramid> {
        self.encode_tensor(x.tensor())
    }

    /// Like [`Encoder::encode`] for inputs that are not RGB images (the
    /// noise residual). Shape rules are the same.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::shape(format!("input {h}x{w} is not divisible by 16")));
        }
        let mut cur = x.clone();
        let mut levels = Vec::with_capacity(4);
        for st in &self.stages {
            let y = st.embed.forward(&cur)?;
            let (_, _, sh, sw) = y.dims4()?;
            let mut t = st.embed_norm.forward(&to_tokens(&y)?)?;
            for blk in &st.blocks {
                t = blk.forward(&t, sh, sw)?;
            }
            let t = st.norm.forward(&t)?;
            cur = from_tokens(&t, sh, sw)?;
            levels.push(cur.clone());
        }
        let levels: [Tensor; 4] = levels.try_into().expect("four stages");
        FeaturePyramid::new(levels, self.branch.tag())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::ops::to_f64_vec;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn paper_contract_at_256() -> Result<()> {
        let cfg = Config::paper();
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let enc = Encoder::new(&store.root(), &cfg.encoder, Branch::Rgb)?;
        let x = ImageBatch::new(Tensor::rand(0f32, 1.0, (2, 3, 256, 256), &Device::Cpu)?)?;
        let p = enc.encode(&x)?;
        let shapes: Vec<_> = p.levels.iter().map(|l| l.dims().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![2, 32, 128, 128],
                vec![2, 64, 64, 64],
                vec![2, 160, 32, 32],
                vec![2, 256, 16, 16]
            ]
        );
        assert_eq!(p.tag, DomainTag::Rgb);
        Ok(())
    }

    #[test]
    fn contract_at_64_and_determinism() -> Result<()> {
        let cfg = Config::paper();
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let enc = Encoder::new(&store.root(), &cfg.encoder, Branch::Noise)?;
        let x = ImageBatch::new(Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu)?)?;
        let a = enc.encode(&x)?;
        let b = enc.encode(&x)?;
        let sizes = a.sizes();
        assert_eq!(sizes, [(32, 32), (16, 16), (8, 8), (4, 4)]);
        assert_eq!(a.channels(), [32, 64, 160, 256]);
        for i in 0..4 {
            assert_eq!(to_f64_vec(&a.levels[i])?, to_f64_vec(&b.levels[i])?);
        }
        Ok(())
    }

    #[test]
    fn indivisible_input_rejected_before_compute() {
        let cfg = Config::tiny();
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let enc = Encoder::new(&store.root(), &cfg.encoder, Branch::Rgb).unwrap();
        let x = Tensor::zeros((1, 3, 40, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(enc.encode_tensor(&x).is_err());
    }

    #[test]
    fn conv_mixer_variant_honors_contract() -> Result<()> {
        let mut cfg = Config::tiny();
        cfg.encoder.mixer = Mixer::ConvMixer;
        let store = ParamStore::new(1, DType::F32, Device::Cpu);
        let enc = Encoder::new(&store.root(), &cfg.encoder, Branch::Rgb)?;
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu)?;
        let p = enc.encode_tensor(&x)?;
        assert_eq!(p.channels(), cfg.encoder.dims);
        assert_eq!(p.sizes()[3], (2, 2));
        Ok(())
    }

    #[test]
    fn batch_elements_do_not_interact() -> Result<()> {
        let cfg = Config::tiny();
        let store = ParamStore::new(2, DType::F64, Device::Cpu);
        let enc = Encoder::new(&store.root(), &cfg.encoder, Branch::Rgb)?;
        let x = Tensor::rand(0f64, 1.0, (3, 3, 32, 32), &Device::Cpu)?;
        let bumped = Tensor::cat(
            &[x.narrow(0, 0, 1)?, (x.narrow(0, 1, 1)? + 0.3)?, x.narrow(0, 2, 1)?],
            0,
        )?;
        let a = enc.encode_tensor(&x)?;
        let b = enc.encode_tensor(&bumped)?;
        for i in 0..4 {
            for idx in [0, 2] {
                let u = to_f64_vec(&a.levels[i].narrow(0, idx, 1)?)?;
                let v = to_f64_vec(&b.levels[i].narrow(0, idx, 1)?)?;
                assert_eq!(u, v, "level {i} sample {idx}");
            }
            assert_ne!(
                to_f64_vec(&a.levels[i].narrow(0, 1, 1)?)?,
                to_f64_vec(&b.levels[i].narrow(0, 1, 1)?)?
            );
        }
        Ok(())
    }

    #[test]
    fn input_gradient_matches_finite_differences() -> Result<()> {
        let cfg = Config::tiny();
        let store = ParamStore::new(3, DType::F64, Device::Cpu);
        let enc = Encoder::new(&store.root(), &cfg.encoder, Branch::Rgb)?;
        let x = Tensor::rand(0f64, 1.0, (1, 3, 32, 32), &Device::Cpu)?;
        let probes: Vec<Tensor> = enc
            .encode_tensor(&x)?
            .levels
            .iter()
            .map(|l| Tensor::randn(0f64, 1.0, l.dims(), &Device::Cpu).unwrap())
            .collect();
        let readout = |t: &Tensor| -> Result<Tensor> {
            let p = enc.encode_tensor(t)?;
            let mut acc = Tensor::zeros((), DType::F64, &Device::Cpu)?;
            for (l, w) in p.levels.iter().zip(&probes) {
                acc = (acc + (l * w)?.sum_all()?)?;
            }
            Ok(acc)
        };
        let err = crate::gradcheck::max_rel_error_input(&x, readout, 1e-6, &[0, 517, 1500, 2047, 3071])?;
        assert!(err <= 1e-3, "{err}");
        Ok(())
    }
}
