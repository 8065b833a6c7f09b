//! Layered configuration: preset defaults, then an optional TOML file, then
//! `section.key=value` overrides. Every key a user supplies must already
//! exist in the preset, so typos fail loudly with the offending key named.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixer {
    /// Spatial-reduction self-attention followed by a Mix-FFN.
    Attention,
    /// Depthwise 3x3 token mixer followed by a Mix-FFN.
    ConvMixer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    SrmFixed,
    LearnedHighpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// `R_i * (1 + E_{i-1})`, prior broadcast over channels.
    Multiply,
    /// Channel concatenation `[R_i, E_{i-1}]`.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    PerImageMean,
    GlobalPixels,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::PerImageMean => "per_image_mean",
            Aggregation::GlobalPixels => "global_pixels",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel width per stage; the feature contract is (32, 64, 160, 256).
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Key/value spatial reduction per stage.
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    pub mixer: Mixer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub condconv_experts: usize,
    /// Fused channel width per level; empty keeps each level's encoder width.
    pub reduce_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub combine: CombineMode,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub se_reduction: usize,
    pub threshold: f64,
    /// Keys and values of the non-local branch are average-pooled until the
    /// key grid is at most this many pixels per side.
    pub nonlocal_max_keys: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub input_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lr_halve_every: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    /// Validation cadence in epochs; 0 disables validation.
    pub val_every: usize,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub noise: NoiseConfig,
    pub fusion: FusionConfig,
    pub edge: EdgeConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// The architecture-defining subset of [`Config`]; its digest identifies
/// which checkpoints a configuration can load.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig<'a> {
    pub encoder: &'a EncoderConfig,
    pub noise: &'a NoiseConfig,
    pub fusion: &'a FusionConfig,
    pub edge: &'a EdgeConfig,
    pub head_se_reduction: usize,
    pub head_nonlocal_max_keys: usize,
}

/// Smallest network input side: the coarsest level must be at least 3x3
/// for the Sobel operator of the edge head.
pub const MIN_SIDE: usize = 48;

impl Default for Config {
    fn default() -> Self {
        Self::paper()
    }
}

impl Config {
    /// Full-size settings: 256x256 inputs, batch 10, lr 2e-4 halved every 5
    /// epochs over 25 epochs, feature widths (32, 64, 160, 256).
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig {
                dims: [32, 64, 160, 256],
                depths: [2, 2, 2, 2],
                heads: [1, 2, 5, 8],
                sr_ratios: [8, 4, 2, 1],
                mlp_ratio: 4,
                mixer: Mixer::Attention,
            },
            noise: NoiseConfig { mode: NoiseMode::SrmFixed },
            fusion: FusionConfig {
                condconv_experts: 4,
                reduce_channels: Vec::new(),
            },
            edge: EdgeConfig {
                combine: CombineMode::Multiply,
                width: 32,
            },
            head: HeadConfig {
                se_reduction: 4,
                threshold: 0.5,
                nonlocal_max_keys: 16,
            },
            train: TrainConfig {
                input_size: 256,
                batch_size: 10,
                lr: 2e-4,
                epochs: 25,
                lr_halve_every: 5,
                seed: 0,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                weight_decay: 0.0,
                grad_clip: 0.0,
                max_steps: 0,
                val_every: 1,
                checkpoint_every: 5,
            },
            eval: EvalConfig {
                aggregation: Aggregation::PerImageMean,
            },
        }
    }

    /// Reduced widths and depths for CPU-only runs at 128x128.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.encoder.dims = [16, 32, 64, 128];
        c.encoder.depths = [1, 1, 1, 1];
        c.encoder.heads = [1, 1, 2, 4];
        c.encoder.mlp_ratio = 2;
        c.edge.width = 16;
        c.head.nonlocal_max_keys = 8;
        c.train.input_size = 128;
        c.train.batch_size = 8;
        c.train.lr = 2e-3;
        c.train.epochs = 500;
        c.train.lr_halve_every = 150;
        c.train.val_every = 0;
        c.train.checkpoint_every = 0;
        c
    }

    /// Tiny network for unit tests and gradient checks.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.encoder.dims = [8, 8, 16, 16];
        c.encoder.heads = [1, 1, 2, 2];
        c.encoder.sr_ratios = [2, 2, 1, 1];
        c.fusion.condconv_experts = 2;
        c.edge.width = 4;
        c.head.se_reduction = 4;
        c.head.nonlocal_max_keys = 4;
        c.train.input_size = 48;
        c.train.batch_size = 2;
        c
    }

    pub fn model(&self) -> ModelConfig<'_> {
        ModelConfig {
            encoder: &self.encoder,
            noise: &self.noise,
            fusion: &self.fusion,
            edge: &self.edge,
            head_se_reduction: self.head.se_reduction,
            head_nonlocal_max_keys: self.head.nonlocal_max_keys,
        }
    }

    /// Hex SHA-256 of the architecture subset.
    pub fn model_digest(&self) -> String {
        let json = serde_json::to_string(&self.model()).expect("config serializes");
        let d = Sha256::digest(json.as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fused channel widths per level.
    pub fn fused_dims(&self) -> [usize; 4] {
        if self.fusion.reduce_channels.is_empty() {
            self.encoder.dims
        } else {
            let r = &self.fusion.reduce_channels;
            [r[0], r[1], r[2], r[3]]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("`{k}` {why}")));
        let e = &self.encoder;
        for i in 0..4 {
            if e.dims[i] == 0 || e.depths[i] == 0 || e.heads[i] == 0 || e.sr_ratios[i] == 0 {
                return bad("encoder", "entries must be positive");
            }
            if !e.dims[i].is_multiple_of(e.heads[i]) {
                return bad("encoder.heads", "must divide the stage width");
            }
            // stage i runs at stride 2^(i+1); its reduced grid must stay integral
            if 16 % (e.sr_ratios[i] << (i + 1)) != 0 {
                return bad("encoder.sr_ratios", "must divide 16 / stage stride");
            }
        }
        if e.mlp_ratio == 0 {
            return bad("encoder.mlp_ratio", "must be positive");
        }
        if self.fusion.condconv_experts == 0 {
            return bad("fusion.condconv_experts", "must be at least 1");
        }
        let rc = &self.fusion.reduce_channels;
        if !rc.is_empty() && (rc.len() != 4 || rc.contains(&0)) {
            return bad("fusion.reduce_channels", "must be empty or four positive widths");
        }
        if self.edge.width == 0 {
            return bad("edge.width", "must be positive");
        }
        if self.head.se_reduction == 0 {
            return bad("head.se_reduction", "must be positive");
        }
        for c in self.fused_dims() {
            if c < self.head.se_reduction || c < 2 {
                return bad("head.se_reduction", "exceeds a fused channel width");
            }
        }
        if !(self.head.threshold > 0.0 && self.head.threshold < 1.0) {
            return bad("head.threshold", "must lie in (0, 1)");
        }
        if self.head.nonlocal_max_keys == 0 {
            return bad("head.nonlocal_max_keys", "must be positive");
        }
        let t = &self.train;
        if t.input_size < MIN_SIDE || !t.input_size.is_multiple_of(16) {
            return bad("train.input_size", "must be a multiple of 16 and at least 48");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return bad("train.lr", "must be positive");
        }
        if t.lr_halve_every == 0 {
            return bad("train.lr_halve_every", "must be positive");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("train.beta1/beta2", "must lie in [0, 1)");
        }
        if !(t.adam_eps > 0.0) || t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return bad("train", "adam_eps must be positive, weight_decay and grad_clip non-negative");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Applies a TOML document on top of `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("cannot parse TOML: {e}")))?;
        let mut base = toml::Table::try_from(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        merge_table(&mut base, &overlay, "")?;
        let merged: Config = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("{e}")))?;
        merged.validate()?;
        Ok(merged)
    }

    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.merge_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one `section.key=value` override; the value is parsed as a TOML
    /// literal, falling back to a bare string.
    pub fn set(&self, assignment: &str) -> Result<Self> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let value = value.trim();
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        let literal = if toml::from_str::<toml::Table>(&format!("v = {value}")).is_ok() {
            value.to_string()
        } else {
            toml::Value::String(value.to_string()).to_string()
        };
        self.merge_toml(&format!("[{section}]\n{field} = {literal}\n"))
    }
}

fn merge_table(base: &mut toml::Table, overlay: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in overlay {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(k), v) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_table(b, o, &path)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(Error::Config(format!("config key `{path}` is a section")))
            }
            (Some(slot), _) => {
                if let toml::Value::Table(_) = v {
                    return Err(Error::Config(format!("config key `{path}` is not a section")));
                }
                *slot = v.clone();
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = Config::paper();
        assert_eq!(c.train.input_size, 256);
        assert_eq!(c.train.batch_size, 10);
        assert_eq!(c.train.lr, 2e-4);
        assert_eq!(c.train.epochs, 25);
        assert_eq!(c.train.lr_halve_every, 5);
        assert_eq!(c.encoder.dims, [32, 64, 160, 256]);
        c.validate().unwrap();
        Config::desk().validate().unwrap();
        Config::tiny().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::paper().set("fusion.expertz=3").unwrap_err().to_string();
        assert!(err.contains("fusion.expertz"), "{err}");
        let err = Config::paper()
            .merge_toml("[train]\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.bogus"), "{err}");
        let err = Config::paper().set("nosection=1").unwrap_err().to_string();
        assert!(err.contains("nosection"), "{err}");
    }

    #[test]
    fn overrides_layer_in_order() -> Result<()> {
        let c = Config::paper()
            .merge_toml("[fusion]\ncondconv_experts = 2\n[edge]\ncombine = \"concat\"\n")?
            .set("fusion.condconv_experts=6")?
            .set("noise.mode=learned_highpass")?;
        assert_eq!(c.fusion.condconv_experts, 6);
        assert_eq!(c.edge.combine, CombineMode::Concat);
        assert_eq!(c.noise.mode, NoiseMode::LearnedHighpass);
        Ok(())
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::paper().set("train.input_size=250").is_err());
        assert!(Config::paper().set("head.threshold=1.0").is_err());
        assert!(Config::paper().set("edge.combine=\"sum\"").is_err());
    }

    #[test]
    fn digest_tracks_architecture_only() -> Result<()> {
        let a = Config::paper();
        let b = a.set("train.lr=0.1")?;
        let c = a.set("fusion.condconv_experts=2")?;
        assert_eq!(a.model_digest(), b.model_digest());
        assert_ne!(a.model_digest(), c.model_digest());
        Ok(())
    }
}
