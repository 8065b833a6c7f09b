//! Command-line front end: `gen`, `train`, `eval`, `predict`.
//!
//! Every command writes `manifest.json` into its output directory before
//! doing any work and rewrites it with the wall-clock time on success.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::datagen::{load_corpus, synth_corpus, write_corpus, AttackSpec, CorpusLayout, SynthOptions};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_atomic, write_summary, EvalReport};
use crate::model::{Prediction, SpliceNet};
use crate::raster::{save_png, RgbImage};
use crate::trainer::{History, Trainer};

pub const MANIFEST_SCHEMA: &str = "splicenet.manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
/// Overlay blend weight of the prediction colours.
pub const OVERLAY_ALPHA: f32 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "splicenet", version, about = "Image splicing localization")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic splice corpus.
    Gen(GenArgs),
    /// Train a network on a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus, clean and under attacks.
    Eval(EvalArgs),
    /// Predict masks, edge maps and overlays for images.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Boundary feathering width in pixels.
    #[arg(long, default_value_t = 0)]
    pub feather: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Optional validation corpus.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start from the reduced desk-scale preset.
    #[arg(long)]
    pub desk_scale: bool,
    /// Continue from a checkpoint; its configuration wins.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated attacks: `none`, `resize:<ratio>`, `noise:<variance>`.
    #[arg(long, default_value = "none")]
    pub attacks: String,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Input images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Everything needed to replay a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<Config>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_unix: u64,
    /// Seconds; absent until the command finishes.
    pub wall_clock: Option<f64>,
}

impl RunManifest {
    fn new(command: &str, argv: &[String], seed: Option<u64>) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            argv: argv.to_vec(),
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn layered(base: Config, args: &ConfigArgs) -> Result<Config> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        cfg = cfg.merge_file(path)?;
    }
    for o in &args.overrides {
        cfg = cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed, argv),
        Command::Train(a) => cmd_train(a, cli.seed, argv),
        Command::Eval(a) => cmd_eval(a, cli.seed, argv),
        Command::Predict(a) => cmd_predict(a, cli.seed, argv),
    }
}

pub fn cmd_gen(args: &GenArgs, seed: Option<u64>, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let seed_v = seed.unwrap_or(0);
    create_dir(&args.out)?;
    let layout = CorpusLayout::default();
    let mut m = RunManifest::new("gen", argv, Some(seed_v));
    m.outputs = vec![display(&args.out.join(&layout.images_dir)), display(&args.out.join(&layout.masks_dir))];
    m.write(&args.out)?;

    let opts = SynthOptions {
        feather: args.feather,
        ..SynthOptions::square(args.size)
    };
    let samples = synth_corpus(args.n, &opts, seed_v)?;
    write_corpus(&args.out, &layout, &samples)?;
    let meta: Vec<_> = samples.iter().map(|s| &s.meta).collect();
    write_atomic(&args.out.join("samples.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    log::info!("wrote {} samples to {}", samples.len(), args.out.display());

    m.wall_clock = Some(start.elapsed().as_secs_f64());
    m.write(&args.out)
}

fn history_tsv(h: &History) -> String {
    let mut s = String::from("step\tepoch\tlr\ttotal\tbce_1\tbce_2\tbce_3\tbce_4\tdice_edge\tgrad_norm\n");
    for r in &h.steps {
        s.push_str(&format!(
            "{}\t{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.step, r.epoch, r.lr, r.total, r.bce[0], r.bce[1], r.bce[2], r.bce[3], r.dice_edge, r.grad_norm
        ));
    }
    s
}

pub fn cmd_train(args: &TrainArgs, seed: Option<u64>, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let dev = Device::Cpu;
    let resumed = match &args.resume {
        Some(p) => Some(Checkpoint::load(p, &dev)?),
        None => None,
    };
    let base = match &resumed {
        Some(ck) => ck.meta.config.clone(),
        None if args.desk_scale => Config::desk(),
        None => Config::paper(),
    };
    let mut cfg = layered(base, &args.cfg)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if args.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let data = args
        .data
        .as_ref()
        .ok_or_else(|| Error::invalid("train needs --data <corpus dir>"))?;
    let out = args.out.as_ref().ok_or_else(|| Error::invalid("train needs --out <dir>"))?;
    if !data.is_dir() {
        return Err(Error::io(data, std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found")));
    }
    create_dir(out)?;
    let ckpt_dir = out.join("checkpoints");
    let mut m = RunManifest::new("train", argv, Some(cfg.train.seed));
    m.config = Some(cfg.clone());
    m.inputs = [Some(data), args.val.as_ref(), args.resume.as_ref()].into_iter().flatten().map(|p| display(p)).collect();
    m.outputs = ["checkpoint.safetensors", "checkpoints", "history.json", "loss.tsv", "config.toml"]
        .iter()
        .map(|f| display(&out.join(f)))
        .collect();
    m.write(out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;

    let layout = CorpusLayout::default();
    let train_set = load_corpus(data, &layout)?;
    let val_set = match &args.val {
        Some(v) => load_corpus(v, &layout)?,
        None => Vec::new(),
    };
    let mut trainer = match &resumed {
        Some(ck) => {
            ck.check_compatible(&cfg)?;
            let mut t = Trainer::from_checkpoint(ck, &dev)?;
            t.set_config(&cfg)?;
            t
        }
        None => Trainer::new(&cfg, &dev)?,
    };
    let every = cfg.train.checkpoint_every;
    let history = trainer.fit(&train_set, &val_set, |t, rec| {
        log::info!(
            "epoch {} lr {:.3e} loss {:.4}{}",
            rec.epoch,
            rec.lr,
            rec.mean_total,
            rec.val_f1.map(|f| format!(" val_f1 {f:.4}")).unwrap_or_default()
        );
        if every > 0 && rec.epoch % every == 0 {
            create_dir(&ckpt_dir)?;
            t.checkpoint().save(&ckpt_dir.join(format!("epoch_{:04}.safetensors", rec.epoch)))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join("history.json"), serde_json::to_string_pretty(&history)?.as_bytes())?;
    write_atomic(&out.join("loss.tsv"), history_tsv(&history).as_bytes())?;

    m.wall_clock = Some(start.elapsed().as_secs_f64());
    m.write(out)
}

/// Loads a checkpoint and refuses it when the layered configuration
/// describes another architecture.
fn load_model(path: &Path, cfg_args: &ConfigArgs) -> Result<(SpliceNet, Config)> {
    let dev = Device::Cpu;
    let ck = Checkpoint::load(path, &dev)?;
    let cfg = layered(ck.meta.config.clone(), cfg_args)?;
    ck.check_compatible(&cfg)?;
    let model = Trainer::from_checkpoint(&ck, &dev)?.into_model();
    Ok((model, cfg))
}

/// File name of the report for one attack, e.g. `report_resize-0.9.jsonl`.
pub fn report_file_name(attack: &AttackSpec) -> String {
    format!("report_{}.jsonl", attack.label().replace(':', "-"))
}

pub fn cmd_eval(args: &EvalArgs, seed: Option<u64>, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let seed_v = seed.unwrap_or(0);
    let attacks = args
        .attacks
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| AttackSpec::parse(s, seed_v))
        .collect::<Result<Vec<_>>>()?;
    if attacks.is_empty() {
        return Err(Error::invalid("--attacks lists no attack"));
    }
    let (model, cfg) = load_model(&args.checkpoint, &args.cfg)?;
    create_dir(&args.out)?;
    let mut m = RunManifest::new("eval", argv, Some(seed_v));
    m.config = Some(cfg.clone());
    m.inputs = vec![display(&args.checkpoint), display(&args.data)];
    m.outputs = attacks.iter().map(|a| display(&args.out.join(report_file_name(a)))).collect();
    m.outputs.push(display(&args.out.join("summary.json")));
    m.outputs.push(display(&args.out.join("summary.tsv")));
    m.write(&args.out)?;

    let samples = load_corpus(&args.data, &CorpusLayout::default())?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for a in &attacks {
        let r = evaluate(&model, &samples, a, cfg.eval.aggregation, cfg.head.threshold)?;
        log::info!("{}: P {:.4} R {:.4} F1 {:.4}", a.label(), r.precision, r.recall, r.f1);
        write_atomic(&args.out.join(report_file_name(a)), r.to_jsonl()?.as_bytes())?;
        reports.push(r);
    }
    write_summary(&args.out, &reports)?;

    m.wall_clock = Some(start.elapsed().as_secs_f64());
    m.write(&args.out)
}

/// Red carries the mask, green the edge map, blended over the input.
pub fn overlay(image: &RgbImage, pred: &Prediction) -> RgbImage {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            let i = y * image.width + x;
            let paint = [f32::from(pred.mask.get(y, x)), pred.edge[i], 0.0];
            let px = image.pixel(y, x);
            let mut blended = [0.0; 3];
            for c in 0..3 {
                blended[c] = (1.0 - OVERLAY_ALPHA) * px[c] + OVERLAY_ALPHA * paint[c];
            }
            out.set_pixel(y, x, blended);
        }
    }
    out
}

fn edge_png(pred: &Prediction, h: usize, w: usize) -> image::DynamicImage {
    let bytes = pred.edge.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::DynamicImage::ImageLuma8(image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("edge buffer"))
}

pub fn cmd_predict(args: &PredictArgs, seed: Option<u64>, argv: &[String]) -> Result<()> {
    let start = Instant::now();
    let (model, cfg) = load_model(&args.checkpoint, &ConfigArgs { config: None, overrides: Vec::new() })?;
    let threshold = args.threshold.unwrap_or(cfg.head.threshold);
    create_dir(&args.out)?;
    let stems: Vec<String> = args
        .inputs
        .iter()
        .map(|p| p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let mut m = RunManifest::new("predict", argv, seed);
    m.config = Some(cfg);
    m.inputs = std::iter::once(&args.checkpoint).chain(&args.inputs).map(|p| display(p)).collect();
    m.outputs = stems
        .iter()
        .flat_map(|s| ["mask", "edge", "overlay"].map(|k| display(&args.out.join(format!("{s}_{k}.png")))))
        .collect();
    m.write(&args.out)?;

    let mut ok = 0usize;
    for (path, stem) in args.inputs.iter().zip(&stems) {
        let image = match RgbImage::load(path) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        let pred = model.predict(&image, threshold)?;
        pred.mask.save_png(&args.out.join(format!("{stem}_mask.png")))?;
        save_png(&edge_png(&pred, image.height, image.width), &args.out.join(format!("{stem}_edge.png")))?;
        overlay(&image, &pred).save_png(&args.out.join(format!("{stem}_overlay.png")))?;
        ok += 1;
    }
    if ok == 0 {
        return Err(Error::invalid("no input image could be read"));
    }
    m.wall_clock = Some(start.elapsed().as_secs_f64());
    m.write(&args.out)
}
