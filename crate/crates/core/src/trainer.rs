//! Optimization loop: Adam with step-decayed learning rate over seeded
//! shuffles of a fixed training set.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_digest, Checkpoint, CheckpointMeta, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::config::{Config, TrainConfig};
use crate::datagen::{synth_corpus, AttackSpec, Sample, SynthOptions};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::SpliceNet;
use crate::objective::{build_targets, total_loss, LossBreakdown, TargetBatch, TargetSet};
use crate::pyramid::ImageBatch;
use crate::raster::images_to_tensor;

/// Learning rate during 1-based `epoch`: `lr * 0.5^floor((epoch - 1) / halve_every)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = epoch.saturating_sub(1) / cfg.lr_halve_every.max(1);
    cfg.lr * 0.5f64.powi(k as i32)
}

/// Adam with optional L2 weight decay and global-norm gradient clipping.
#[derive(Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    grad_clip: f64,
    t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Adopts new hyperparameters, keeping the step count and moments.
    pub fn set_hyperparameters(&mut self, cfg: &TrainConfig) {
        self.beta1 = cfg.beta1;
        self.beta2 = cfg.beta2;
        self.eps = cfg.adam_eps;
        self.weight_decay = cfg.weight_decay;
        self.grad_clip = cfg.grad_clip;
    }

    /// Applies one update to every parameter of `model` that received a
    /// gradient. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, model: &SpliceNet, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<f64> {
        let params = model.store().params();
        let mut gs = Vec::with_capacity(params.len());
        let mut sq = 0f64;
        for (name, var) in &params {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.detach();
                let g = if self.weight_decay > 0.0 {
                    (g + (var.as_tensor().detach() * self.weight_decay)?)?
                } else {
                    g
                };
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                gs.push((name, var, g));
            }
        }
        let norm = sq.sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var, g) in gs {
            let g = if scale != 1.0 { (g * scale)? } else { g };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }

    fn export(&self, out: &mut BTreeMap<String, Tensor>) {
        for (k, (m, v)) in &self.moments {
            out.insert(format!("adam_m/{k}"), m.clone());
            out.insert(format!("adam_v/{k}"), v.clone());
        }
    }

    fn import(&mut self, ck: &Checkpoint, dtype: DType) -> Result<()> {
        let ms = ck.section("adam_m/");
        let vs = ck.section("adam_v/");
        self.moments.clear();
        for (k, m) in ms {
            let v = vs
                .get(&k)
                .ok_or_else(|| Error::Checkpoint(format!("adam_v/{k} missing")))?;
            self.moments.insert(k, (m.to_dtype(dtype)?, v.to_dtype(dtype)?));
        }
        self.t = ck.meta.adam_t;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub bce: [f64; 4],
    pub dice_edge: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Training-resolution samples with their target pyramids.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub samples: Vec<Sample>,
    pub targets: Vec<TargetSet>,
}

impl PreparedSet {
    pub fn new(samples: &[Sample], size: usize) -> Self {
        let scales = std::array::from_fn(|i| (size >> (i + 1), size >> (i + 1)));
        let samples: Vec<Sample> = samples
            .iter()
            .map(|s| {
                if s.image.height == size && s.image.width == size {
                    s.clone()
                } else {
                    s.resized(size)
                }
            })
            .collect();
        let targets = samples.iter().map(|s| build_targets(&s.gt_mask, scales)).collect();
        Self { samples, targets }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, idx: &[usize], dtype: DType, device: &Device) -> Result<(ImageBatch, TargetBatch)> {
        let imgs: Vec<_> = idx.iter().map(|&i| &self.samples[i].image).collect();
        let x = ImageBatch::new(images_to_tensor(&imgs, dtype, device)?)?;
        let sets: Vec<TargetSet> = idx.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((x, TargetBatch::new(&sets, dtype, device)?))
    }
}

#[derive(Debug)]
pub struct Trainer {
    model: SpliceNet,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(config: &Config, device: &Device) -> Result<Self> {
        Self::with_dtype(config, DType::F32, device)
    }

    pub fn with_dtype(config: &Config, dtype: DType, device: &Device) -> Result<Self> {
        let model = SpliceNet::new(config, dtype, device)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: Adam::new(&config.train),
            model,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Resumes from a checkpoint, its stored configuration included.
    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let dtype = ck
            .tensors
            .iter()
            .find(|(k, _)| k.starts_with("param/"))
            .map_or(DType::F32, |(_, t)| t.dtype());
        let mut t = Self::with_dtype(&ck.meta.config, dtype, device)?;
        t.model.store().restore(&ck.tensors)?;
        t.adam.import(ck, dtype)?;
        t.rng = ck.meta.rng.restore();
        t.epoch = ck.meta.epoch;
        t.step = ck.meta.step;
        Ok(t)
    }

    pub fn model(&self) -> &SpliceNet {
        &self.model
    }

    pub fn into_model(self) -> SpliceNet {
        self.model
    }

    pub fn config(&self) -> &Config {
        self.model.config()
    }

    /// Replaces the training and evaluation settings of a resumed run;
    /// the architecture must stay the same.
    pub fn set_config(&mut self, config: &Config) -> Result<()> {
        if config.model_digest() != self.model.config().model_digest() {
            return Err(Error::Config("a resumed run cannot change architecture keys".into()));
        }
        config.validate()?;
        self.adam.set_hyperparameters(&config.train);
        self.model.set_config(config.clone());
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = self.model.config();
        let mut tensors = self.model.store().snapshot();
        self.adam.export(&mut tensors);
        Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                config: cfg.clone(),
                model_digest: cfg.model_digest(),
                config_digest: config_digest(cfg),
                epoch: self.epoch,
                step: self.step,
                adam_t: self.adam.steps(),
                rng: RngState::capture(&self.rng),
            },
            tensors,
        }
    }

    /// Training-mode loss on a batch without updating anything but
    /// BatchNorm running statistics.
    pub fn loss(&self, x: &ImageBatch, targets: &TargetBatch) -> Result<LossBreakdown> {
        let out = self.model.forward(x, true)?;
        Ok(total_loss(&out.masks, &out.edges, targets)?.breakdown)
    }

    /// One optimizer step at learning rate `lr`.
    pub fn train_step(&mut self, x: &ImageBatch, targets: &TargetBatch, lr: f64) -> Result<StepRecord> {
        let out = self.model.forward(x, true)?;
        let loss = total_loss(&out.masks, &out.edges, targets)?;
        let b = loss.breakdown;
        if !b.total.is_finite() {
            return Err(Error::Diverged { step: self.step + 1, value: b.total });
        }
        let grads = loss.value.backward()?;
        let grad_norm = self.adam.step(&self.model, &grads, lr)?;
        self.model.post_step()?;
        self.step += 1;
        Ok(StepRecord {
            epoch: self.epoch + 1,
            step: self.step,
            lr,
            total: b.total,
            bce: b.bce_per_scale,
            dice_edge: b.dice_edge,
            grad_norm,
        })
    }

    fn step_cap_reached(&self) -> bool {
        let cap = self.config().train.max_steps;
        cap > 0 && self.step >= cap
    }

    /// Runs one epoch over a fresh shuffle of `data`.
    pub fn train_epoch(&mut self, data: &PreparedSet, history: &mut History) -> Result<EpochRecord> {
        let cfg = self.config().train.clone();
        let lr = lr_at(&cfg, self.epoch + 1);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if self.step_cap_reached() {
                break;
            }
            let (x, t) = data.batch(chunk, self.model.dtype(), self.model.device())?;
            let rec = self.train_step(&x, &t, lr)?;
            sum += rec.total;
            n += 1;
            history.steps.push(rec);
        }
        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            lr,
            mean_total: if n > 0 { sum / n as f64 } else { f64::NAN },
            val_f1: None,
        })
    }

    /// Trains until `config.train.epochs` epochs are complete (or the step
    /// cap is hit). `on_epoch` runs after every epoch.
    pub fn fit<F>(&mut self, train: &[Sample], val: &[Sample], mut on_epoch: F) -> Result<History>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let cfg = self.config().clone();
        let data = PreparedSet::new(train, cfg.train.input_size);
        let mut history = History::default();
        while self.epoch < cfg.train.epochs && !self.step_cap_reached() {
            let mut rec = self.train_epoch(&data, &mut history)?;
            let ve = cfg.train.val_every;
            if ve > 0 && !val.is_empty() && (rec.epoch % ve == 0 || rec.epoch == cfg.train.epochs) {
                let r = evaluate(&self.model, val, &AttackSpec::none(), cfg.eval.aggregation, cfg.head.threshold)?;
                rec.val_f1 = Some(r.f1);
            }
            on_epoch(self, &rec)?;
            history.epochs.push(rec);
        }
        Ok(history)
    }
}

/// Trains a fresh model and returns its final checkpoint.
pub fn train(config: &Config, train_set: &[Sample], val_set: &[Sample]) -> Result<(Checkpoint, History)> {
    let mut t = Trainer::new(config, &Device::Cpu)?;
    let h = t.fit(train_set, val_set, |_, _| Ok(()))?;
    Ok((t.checkpoint(), h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitResult {
    pub f1: f64,
    /// `(step, F1 on the training set)` at every evaluation point.
    pub f1_trace: Vec<(u64, f64)>,
    pub history: History,
}

/// Fits `n_samples` synthetic splices for at most `max_steps` steps and
/// scores the final mask on the same images, every `eval_every` steps
/// (0 = only at the end).
pub fn overfit_on(config: &Config, samples: &[Sample], max_steps: u64, eval_every: u64) -> Result<(Trainer, OverfitResult)> {
    let mut cfg = config.clone();
    cfg.train.max_steps = max_steps;
    cfg.train.epochs = usize::MAX;
    let mut t = Trainer::new(&cfg, &Device::Cpu)?;
    let data = PreparedSet::new(samples, cfg.train.input_size);
    let score = |t: &Trainer| -> Result<f64> {
        Ok(evaluate(t.model(), &data.samples, &AttackSpec::none(), cfg.eval.aggregation, cfg.head.threshold)?.f1)
    };
    let mut history = History::default();
    let mut trace = Vec::new();
    while !t.step_cap_reached() {
        let before = t.step;
        let rec = t.train_epoch(&data, &mut history)?;
        history.epochs.push(rec);
        if eval_every > 0 && t.step / eval_every > before / eval_every && !t.step_cap_reached() {
            trace.push((t.step, score(&t)?));
        }
    }
    let f1 = score(&t)?;
    trace.push((t.step, f1));
    Ok((t, OverfitResult { f1, f1_trace: trace, history }))
}

pub fn overfit_smoke(config: &Config, n_samples: usize, max_steps: u64) -> Result<OverfitResult> {
    let size = config.train.input_size;
    let samples = synth_corpus(n_samples, &SynthOptions::square(size), config.train.seed)?;
    Ok(overfit_on(config, &samples, max_steps, 0)?.1)
}
