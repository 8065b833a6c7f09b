//! The full network: noise front, two encoders, cross-scale and
//! cross-domain fusion, edge head and localization head.

use candle_core::{DType, Device, Tensor};

use crate::config::{Config, MIN_SIDE};
use crate::edge_head::EdgeHead;
use crate::encoder::{Branch, Encoder};
use crate::error::Result;
use crate::fusion::{CrossDomainFusion, CrossScaleFusion};
use crate::loc_head::{threshold_probs, LocHead};
use crate::noise_front::NoiseFront;
use crate::ops::{replicate_pad_br, resize, to_f64_vec, Resample};
use crate::params::ParamStore;
use crate::pyramid::{EdgePyramid, FeaturePyramid, ImageBatch, MaskPyramid, SIZE_MULTIPLE};
use crate::raster::{images_to_tensor, Mask, RgbImage};

#[derive(Debug)]
pub struct Forward {
    pub rgb: FeaturePyramid,
    pub noise: FeaturePyramid,
    pub fused: FeaturePyramid,
    pub edges: EdgePyramid,
    pub masks: MaskPyramid,
}

/// Output of [`SpliceNet::predict`], cropped to the input size.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: Mask,
    /// Forgery probability, row-major.
    pub prob: Vec<f32>,
    /// `E_4` upsampled to the input size, row-major.
    pub edge: Vec<f32>,
}

#[derive(Debug)]
pub struct SpliceNet {
    config: Config,
    store: ParamStore,
    noise_front: NoiseFront,
    rgb_encoder: Encoder,
    noise_encoder: Encoder,
    csf_rgb: CrossScaleFusion,
    csf_noise: CrossScaleFusion,
    cdf: CrossDomainFusion,
    edge_head: EdgeHead,
    loc_head: LocHead,
}

impl SpliceNet {
    /// Builds a freshly initialised network seeded by `config.train.seed`.
    pub fn new(config: &Config, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(config.train.seed, dtype, device.clone());
        let root = store.root();
        let enc = &config.encoder;
        let fused = config.fused_dims();
        Ok(Self {
            noise_front: NoiseFront::new(&root.pp("noise_front"), config.noise.mode)?,
            rgb_encoder: Encoder::new(&root.pp("encoder_rgb"), enc, Branch::Rgb)?,
            noise_encoder: Encoder::new(&root.pp("encoder_noise"), enc, Branch::Noise)?,
            csf_rgb: CrossScaleFusion::new(&root.pp("csf_rgb"), enc.dims, fused)?,
            csf_noise: CrossScaleFusion::new(&root.pp("csf_noise"), enc.dims, fused)?,
            cdf: CrossDomainFusion::new(&root.pp("cdf"), fused, config.fusion.condconv_experts)?,
            edge_head: EdgeHead::new(&root.pp("edge_head"), &config.edge, enc.dims)?,
            loc_head: LocHead::new(&root.pp("loc_head"), &config.head, fused)?,
            config: config.clone(),
            store,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    /// Swaps in a configuration with the same architecture digest.
    pub(crate) fn set_config(&mut self, config: Config) {
        debug_assert_eq!(config.model_digest(), self.config.model_digest());
        self.config = config;
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn noise_front(&self) -> &NoiseFront {
        &self.noise_front
    }

    pub fn cdf(&self) -> &CrossDomainFusion {
        &self.cdf
    }

    pub fn edge_head(&self) -> &EdgeHead {
        &self.edge_head
    }

    pub fn loc_head(&self) -> &LocHead {
        &self.loc_head
    }

    pub fn forward(&self, x: &ImageBatch, train: bool) -> Result<Forward> {
        let rgb = self.rgb_encoder.encode(x)?;
        let residual = self.noise_front.extract(x.tensor())?;
        let noise = self.noise_encoder.encode_tensor(&residual)?;
        let fr = self.csf_rgb.forward(&rgb, train)?;
        let fnoise = self.csf_noise.forward(&noise, train)?;
        let fused = self.cdf.forward(&fr, &fnoise, train)?;
        let edges = self.edge_head.predict_edges(&rgb, train)?;
        let masks = self.loc_head.predict_masks(&fused)?;
        Ok(Forward { rgb, noise, fused, edges, masks })
    }

    /// Re-imposes parameter constraints; call after every optimizer step.
    pub fn post_step(&self) -> Result<()> {
        self.noise_front.project()
    }

    /// Eval-mode inference on one image of any size: replicate-pads the
    /// bottom/right edges to a multiple of 16 (and at least 48), then crops
    /// every output back.
    pub fn predict(&self, image: &RgbImage, threshold: f64) -> Result<Prediction> {
        let (h, w) = (image.height, image.width);
        let ph = (h.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE).max(MIN_SIDE);
        let pw = (w.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE).max(MIN_SIDE);
        let x = images_to_tensor(&[image], self.dtype(), self.device())?;
        let x = replicate_pad_br(&x, ph - h, pw - w)?;
        let out = self.forward(&ImageBatch::new(x)?, false)?;
        let crop = |t: &Tensor| -> Result<Tensor> {
            Ok(resize(t, ph, pw, Resample::Bilinear)?.narrow(2, 0, h)?.narrow(3, 0, w)?)
        };
        let prob = crop(&out.masks.probs[0])?;
        let edge = crop(&out.edges.probs[3])?;
        let mask = threshold_probs(&prob, threshold)?.remove(0);
        let f32s = |t: &Tensor| -> Result<Vec<f32>> { Ok(to_f64_vec(t)?.into_iter().map(|v| v as f32).collect()) };
        Ok(Prediction { mask, prob: f32s(&prob)?, edge: f32s(&edge)? })
    }
}
