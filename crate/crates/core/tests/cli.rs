use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::Device;
use splicenet::checkpoint::Checkpoint;
use splicenet::cli::{report_file_name, RunManifest};
use splicenet::config::Config;
use splicenet::datagen::{load_corpus, AttackSpec, CorpusLayout};
use splicenet::metrics::{evaluate, EvalReport};
use splicenet::raster::{Mask, RgbImage};
use splicenet::trainer::Trainer;

fn splicenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splicenet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = splicenet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let bytes = std::fs::read(&p).unwrap();
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
        }
    }
    out
}

fn no_temporaries(dir: &Path) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        assert!(!p.to_string_lossy().ends_with(".tmp"), "leftover {}", p.display());
        if p.is_dir() {
            no_temporaries(&p);
        }
    }
}

#[test]
fn gen_is_deterministic_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--n", "3", "--size", "64", "--seed", "7", "--out", s(d)]);
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 6);
    assert_eq!(fa, files(&b));
    let m = RunManifest::load(&a).unwrap();
    assert_eq!(m.command, "gen");
    assert_eq!(m.seed, Some(7));
    assert!(m.wall_clock.is_some());
    let corpus = load_corpus(&a, &CorpusLayout::default()).unwrap();
    assert_eq!(corpus.len(), 3);
    assert!(corpus.iter().all(|c| c.image.height == 64 && c.gt_mask.width == 64));
    no_temporaries(&a);
}

#[test]
fn gen_zero_gives_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--n", "0", "--out", s(dir.path())]);
    assert!(load_corpus(dir.path(), &CorpusLayout::default()).unwrap().is_empty());
    assert_eq!(RunManifest::load(dir.path()).unwrap().command, "gen");
}

#[test]
fn train_defaults_echo_paper_schedule() {
    let out = ok(&["train", "--print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = Config::paper().merge_toml(&text).unwrap();
    assert_eq!(cfg, Config::paper());
    let t = &cfg.train;
    assert_eq!((t.input_size, t.batch_size, t.lr, t.epochs, t.lr_halve_every), (256, 10, 2e-4, 25, 5));

    let desk = String::from_utf8(ok(&["train", "--desk-scale", "--print-config"]).stdout).unwrap();
    assert_eq!(Config::paper().merge_toml(&desk).unwrap(), Config::desk());
}

#[test]
fn train_rejects_missing_corpus_and_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = splicenet(&["train", "--data", s(&missing), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = splicenet(&["train", "--print-config", "--set", "train.lrr=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lrr"));
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = Config::tiny();
    cfg.train.epochs = 2;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let run = root.join("run");
    let cfg = tiny_config(root);
    ok(&["gen", "--n", "2", "--size", "48", "--seed", "3", "--out", s(&corpus)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&corpus), "--out", s(&run), "--seed", "5"]);
    for f in ["checkpoint.safetensors", "history.json", "loss.tsv", "config.toml", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest = RunManifest::load(&run).unwrap();
    assert_eq!(manifest.config.as_ref().unwrap().train.seed, 5);
    let ckpt = run.join("checkpoint.safetensors");
    let ck = Checkpoint::load(&ckpt, &Device::Cpu).unwrap();
    assert_eq!(ck.meta.epoch, 2);

    // attacks
    let ev = root.join("eval");
    let ev2 = root.join("eval2");
    for d in [&ev, &ev2] {
        ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--out", s(d), "--attacks", "none,resize:0.9,noise:3", "--seed", "9"]);
    }
    let attacks = [AttackSpec::none(), AttackSpec::resize(0.9), AttackSpec::gaussian_noise(3.0, 9)];
    for a in &attacks {
        let name = report_file_name(a);
        let one = std::fs::read_to_string(ev.join(&name)).unwrap();
        assert_eq!(one, std::fs::read_to_string(ev2.join(&name)).unwrap(), "{name}");
        EvalReport::from_jsonl(&one).unwrap();
    }
    assert!(ev.join("summary.json").exists() && ev.join("summary.tsv").exists());

    let model = Trainer::from_checkpoint(&ck, &Device::Cpu).unwrap().into_model();
    let samples = load_corpus(&corpus, &CorpusLayout::default()).unwrap();
    let cfg_used = &ck.meta.config;
    let direct = evaluate(&model, &samples, &AttackSpec::none(), cfg_used.eval.aggregation, cfg_used.head.threshold).unwrap();
    let from_cli = EvalReport::from_jsonl(&std::fs::read_to_string(ev.join(report_file_name(&AttackSpec::none()))).unwrap()).unwrap();
    assert_eq!(from_cli, direct);

    // a different architecture is refused
    let out = splicenet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--out", s(&root.join("bad")), "--set", "edge.width=8"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("architecture"));

    // prediction pads 250 to 256 and crops back
    let img_path = root.join("odd.png");
    RgbImage::filled(250, 250, [0.3, 0.5, 0.7]).save_png(&img_path).unwrap();
    let bogus = root.join("bogus.png");
    std::fs::write(&bogus, b"not an image").unwrap();
    let pred = root.join("pred");
    ok(&["predict", "--checkpoint", s(&ckpt), "--out", s(&pred), s(&img_path), s(&bogus)]);
    for kind in ["mask", "edge", "overlay"] {
        let p = pred.join(format!("odd_{kind}.png"));
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (250, 250), "{kind}");
    }
    let raw = image::open(pred.join("odd_mask.png")).unwrap().to_luma8();
    assert!(raw.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let _ = Mask::load(&pred.join("odd_mask.png")).unwrap();

    let out = splicenet(&["predict", "--checkpoint", s(&ckpt), "--out", s(&root.join("pred2")), s(&bogus)]);
    assert!(!out.status.success());

    for d in [&run, &ev, &pred] {
        no_temporaries(d);
    }
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let cfg = tiny_config(root);
    ok(&["gen", "--n", "2", "--size", "48", "--out", s(&corpus)]);
    let (full, half, rest) = (root.join("full"), root.join("half"), root.join("rest"));
    ok(&["train", "--config", s(&cfg), "--data", s(&corpus), "--out", s(&full), "--set", "train.epochs=3"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&corpus), "--out", s(&half), "--set", "train.epochs=1"]);
    ok(&["train", "--resume", s(&half.join("checkpoint.safetensors")), "--data", s(&corpus), "--out", s(&rest), "--set", "train.epochs=3"]);
    let a = std::fs::read(full.join("checkpoint.safetensors")).unwrap();
    let b = std::fs::read(rest.join("checkpoint.safetensors")).unwrap();
    assert_eq!(a, b);
}
