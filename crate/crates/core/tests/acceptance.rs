//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splicenet::config::Config;
use splicenet::datagen::{synth_corpus, AttackSpec, Region, SynthOptions};
use splicenet::edge_head::{sobel_magnitude, EdgeBlock, SOBEL_EPS};
use splicenet::fusion::CondConv;
use splicenet::gradcheck::max_rel_error;
use splicenet::metrics::{evaluate, prf1, EvalReport};
use splicenet::model::SpliceNet;
use splicenet::objective::{bce_loss, build_targets, dice_loss, mask_loss, total_loss};
use splicenet::ops::{scalar_f64, sigmoid, to_f64_vec};
use splicenet::params::ParamStore;
use splicenet::pyramid::ImageBatch;
use splicenet::raster::Mask;
use splicenet::trainer::{overfit_on, train, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, pass: String, fail: String) -> Outcome {
    if cond {
        Ok(pass)
    } else {
        Err(fail)
    }
}

fn lib<T>(r: splicenet::Result<T>) -> Result<T, String> {
    r.map_err(|e| format!("error: {e}"))
}

fn c1_shape_contract() -> Outcome {
    let net = lib(SpliceNet::new(&Config::paper(), DType::F32, &Device::Cpu))?;
    let x = lib(ImageBatch::new(Tensor::rand(0f32, 1.0, (1, 3, 256, 256), &Device::Cpu).unwrap()))?;
    let out = lib(net.forward(&x, false))?;
    let channels = [32usize, 64, 160, 256];
    for i in 0..4 {
        let s = 128 >> i;
        for (name, p) in [("rgb", &out.rgb), ("noise", &out.noise), ("fused", &out.fused)] {
            if p.levels[i].dims() != [1, channels[i], s, s] {
                return Err(format!("{name} level {} is {:?}", i + 1, p.levels[i].dims()));
            }
        }
        for (name, t) in [("E", &out.edges.probs[i]), ("M", &out.masks.probs[i])] {
            if t.dims() != [1, 1, s, s] {
                return Err(format!("{name}_{} is {:?}", i + 1, t.dims()));
            }
        }
    }
    Ok("pyramids (128,32) (64,64) (32,160) (16,256); E_i and M_i single-channel".into())
}

fn sobel_oracle(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        (if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i }) as usize
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = img[refl(y as isize + dy as isize - 1, h) * w + refl(x as isize + dx as isize - 1, w)];
                    gx += kx[dy][dx] * v;
                    gy += ky[dy][dx] * v;
                }
            }
            out[y * w + x] = (gx * gx + gy * gy + SOBEL_EPS).sqrt();
        }
    }
    out
}

fn c2_sobel() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for _ in 0..50 {
        let v: Vec<f32> = (0..64).map(|_| rng.random::<f32>()).collect();
        let t = Tensor::from_vec(v.clone(), (1, 1, 8, 8), &Device::Cpu).unwrap();
        let got = lib(to_f64_vec(&lib(sobel_magnitude(&t))?))?;
        let want = sobel_oracle(&v.iter().map(|&x| x as f64).collect::<Vec<_>>(), 8, 8);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-5, format!("50 inputs, max abs err {worst:.2e}"), format!("max abs err {worst:.2e} > 1e-5"))
}

/// Direct-loop zero-padded "same" correlation with bias.
fn conv_oracle(x: &[f64], xd: (usize, usize, usize, usize), w: &[f64], co: usize, b: &[f64]) -> Vec<f64> {
    let (n, c, h, wd) = xd;
    let mut out = vec![0.0; n * co * h * wd];
    for bi in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * c + ci) * 3 + ky) * 3 + kx]
                                    * x[((bi * c + ci) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((bi * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c3_condconv() -> Outcome {
    let dev = Device::Cpu;
    let (n, ci, co, h, w) = (2, 4, 5, 6, 7);
    let x = Tensor::randn(0f64, 1.0, (n, ci, h, w), &dev).unwrap();
    let xv = lib(to_f64_vec(&x))?;

    let store = ParamStore::new(31, DType::F64, dev.clone());
    let one = lib(CondConv::new(&store.root().pp("k1"), ci, co, 3, 1))?;
    one.expert_bias().set(&Tensor::randn(0f64, 1.0, (1, co), &dev).unwrap()).unwrap();
    let w0 = lib(to_f64_vec(one.experts().as_tensor()))?;
    let b0 = lib(to_f64_vec(one.expert_bias().as_tensor()))?;
    let plain = conv_oracle(&xv, (n, ci, h, w), &w0, co, &b0);
    let ones = Tensor::ones((n, 1), DType::F64, &dev).unwrap();
    let e1 = max_abs(&lib(to_f64_vec(&lib(one.forward_routed(&x, &ones))?))?, &plain);
    // with its own router the single expert is scaled per example
    let r = lib(to_f64_vec(&lib(one.routing(&x))?))?;
    let routed = lib(to_f64_vec(&lib(one.forward(&x))?))?;
    let per = co * h * w;
    let scaled: Vec<f64> = plain.iter().enumerate().map(|(i, v)| v * r[i / per]).collect();
    let e1r = max_abs(&routed, &scaled);

    let k = 4;
    let many = lib(CondConv::new(&store.root().pp("k4"), ci, co, 3, k))?;
    many.expert_bias().set(&Tensor::randn(0f64, 1.0, (k, co), &dev).unwrap()).unwrap();
    let ex = lib(to_f64_vec(many.experts().as_tensor()))?;
    let eb = lib(to_f64_vec(many.expert_bias().as_tensor()))?;
    let kw = co * ci * 9;
    let avg_w: Vec<f64> = (0..kw).map(|i| (0..k).map(|e| ex[e * kw + i]).sum::<f64>() / k as f64).collect();
    let avg_b: Vec<f64> = (0..co).map(|i| (0..k).map(|e| eb[e * co + i]).sum::<f64>() / k as f64).collect();
    let uniform = Tensor::full(1.0 / k as f64, (n, k), &dev).unwrap();
    let got = lib(to_f64_vec(&lib(many.forward_routed(&x, &uniform))?))?;
    let e2 = max_abs(&got, &conv_oracle(&xv, (n, ci, h, w), &avg_w, co, &avg_b));
    let worst = e1.max(e1r).max(e2);
    check(
        worst <= 1e-5,
        format!("K=1 err {:.1e} (routed {:.1e}), uniform routing err {e2:.1e}", e1, e1r),
        format!("K=1 err {e1:.2e}, routed {e1r:.2e}, uniform {e2:.2e}"),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask { height: h, width: w, data: (0..h * w).map(|_| u8::from(rng.random_bool(p))).collect() }
}

fn c4_loss_metric_oracles() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut bce_err, mut dice_err, mut add_err) = (0f64, 0f64, 0f64);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let p: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        let pt = Tensor::from_vec(p.clone(), (1, 1, h, w), &dev).unwrap();
        let tt = Tensor::from_vec(t.clone(), (1, 1, h, w), &dev).unwrap();
        let nn = (h * w) as f64;
        let bce: f64 = p.iter().zip(&t).map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())).sum::<f64>() / nn;
        let inter: f64 = p.iter().zip(&t).map(|(p, t)| p * t).sum();
        let dice = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + t.iter().sum::<f64>() + 1.0);
        let got_bce = lib(scalar_f64(&lib(bce_loss(&pt, &tt))?))?;
        let got_dice = lib(scalar_f64(&lib(dice_loss(&pt, &tt))?))?;
        bce_err = bce_err.max((got_bce - bce).abs());
        dice_err = dice_err.max((got_dice - dice).abs());
    }
    // additivity on model outputs
    let net = lib(SpliceNet::new(&Config::tiny(), DType::F32, &dev))?;
    for seed in 0..5 {
        let samples = lib(synth_corpus(2, &SynthOptions::square(48), seed))?;
        let data = splicenet::trainer::PreparedSet::new(&samples, 48);
        let (x, tg) = lib(data.batch(&[0, 1], DType::F32, &dev))?;
        let out = lib(net.forward(&x, true))?;
        let b = lib(total_loss(&out.masks, &out.edges, &tg))?.breakdown;
        let direct: f64 = (0..4).map(|i| lib(scalar_f64(&splicenet::objective::bce_with_logits(&out.masks.logits[i], &tg.levels[i]).unwrap())).unwrap()).sum::<f64>()
            + lib(scalar_f64(&lib(dice_loss(&out.edges.probs[3], &tg.edge))?))?;
        add_err = add_err.max((b.total - direct).abs());
    }
    let mut prf_ok = true;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let (pp, pg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let pred = random_mask(&mut rng, h, w, pp);
        let gt = random_mask(&mut rng, h, w, pg);
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (p, g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        let (pr, rc) = match (tp + fp, tp + fn_) {
            (0, 0) => (1.0, 1.0),
            (a, b) => (
                if a == 0 { 0.0 } else { tp as f64 / a as f64 },
                if b == 0 { 0.0 } else { tp as f64 / b as f64 },
            ),
        };
        let f1 = if tp + fp == 0 && tp + fn_ == 0 {
            1.0
        } else if pr + rc == 0.0 {
            0.0
        } else {
            2.0 * pr * rc / (pr + rc)
        };
        let got = lib(prf1(&pred, &gt))?;
        prf_ok &= got.precision == pr && got.recall == rc && got.f1 == f1;
    }
    let ok = bce_err <= 1e-6 && dice_err <= 1e-6 && add_err <= 1e-6 && prf_ok;
    let msg = format!("bce {bce_err:.1e}, dice {dice_err:.1e}, additivity {add_err:.1e}, prf1 exact {prf_ok}");
    check(ok, msg.clone(), msg)
}

fn c5_gradients() -> Outcome {
    let dev = Device::Cpu;
    let store = ParamStore::new(5, DType::F64, dev.clone());
    let eb = lib(EdgeBlock::new(&store.root().pp("eb"), 3))?;
    let x = Tensor::rand(0f64, 1.0, (2, 3, 5, 5), &dev).unwrap();
    let probe = Tensor::randn(0f64, 1.0, (2, 3, 5, 5), &dev).unwrap();
    let e_eb = lib(max_rel_error(eb.conv().weight(), || Ok((eb.forward(&x, true)? * &probe)?.sum_all()?), 1e-6, 0))?;

    let cc = lib(CondConv::new(&store.root().pp("cc"), 6, 6, 3, 3))?;
    cc.router_weight().set(&Tensor::randn(0f64, 0.5, (3, 6), &dev).unwrap()).unwrap();
    let xc = Tensor::randn(0f64, 1.0, (2, 6, 4, 4), &dev).unwrap();
    let pc = Tensor::randn(0f64, 1.0, (2, 6, 4, 4), &dev).unwrap();
    let e_cc = lib(max_rel_error(cc.router_weight(), || Ok((cc.forward(&xc)? * &pc)?.sum_all()?), 1e-6, 0))?;

    let logits = Var::from_tensor(&Tensor::randn(0f64, 1.5, (1, 1, 4, 4), &dev).unwrap()).unwrap();
    let target = Tensor::from_vec((0..16).map(|i| f64::from(u8::from(i % 3 == 0))).collect::<Vec<_>>(), (1, 1, 4, 4), &dev).unwrap();
    let composite = || -> splicenet::Result<Tensor> {
        let p = sigmoid(logits.as_tensor())?;
        Ok((bce_loss(&p, &target)? + dice_loss(&p, &target)?)?)
    };
    let e_loss = lib(max_rel_error(&logits, composite, 1e-6, 0))?;
    let worst = e_eb.max(e_cc).max(e_loss);
    let msg = format!("edge block {e_eb:.1e}, router {e_cc:.1e}, loss {e_loss:.1e}");
    check(worst <= 1e-3, msg.clone(), msg)
}

fn c6_loss_wiring() -> Outcome {
    let dev = Device::Cpu;
    let net = lib(SpliceNet::new(&Config::tiny(), DType::F32, &dev))?;
    let samples = lib(synth_corpus(3, &SynthOptions::square(48), 6))?;
    let data = splicenet::trainer::PreparedSet::new(&samples, 48);
    let (x, tg) = lib(data.batch(&[0, 1, 2], DType::F32, &dev))?;
    let out = lib(net.forward(&x, true))?;
    let loss = lib(total_loss(&out.masks, &out.edges, &tg))?;
    let b = loss.breakdown;
    let bce_sum = ((b.bce_per_scale[0] + b.bce_per_scale[1]) + b.bce_per_scale[2]) + b.bce_per_scale[3];
    let sum_ok = b.bce_sum == bce_sum && b.total == b.bce_sum + b.dice_edge;
    let (without, _) = lib(mask_loss(&out.masks, &tg))?;
    let without = without.to_scalar::<f64>().map_err(|e| e.to_string())?;
    let removed_ok = without == b.bce_sum && without + b.dice_edge == b.total;
    let residual = (b.total - without) - b.dice_edge;
    check(
        sum_ok && removed_ok,
        format!(
            "total {:.6} = bce {:.6} + dice {:.6} bitwise; edge-free total + dice == total bitwise (subtraction residual {residual:.1e})",
            b.total, b.bce_sum, b.dice_edge
        ),
        format!("sum bitwise {sum_ok}, removal exact {removed_ok}"),
    )
}

fn fat_polygon(rng: &mut ChaCha8Rng, size: f64) -> Region {
    let n = rng.random_range(5..=9);
    let c = (size * rng.random_range(0.4..0.6), size * rng.random_range(0.4..0.6));
    let r = size * rng.random_range(0.2..0.3);
    let step = std::f64::consts::TAU / n as f64;
    let phase = rng.random_range(0.0..step);
    let vertices = (0..n)
        .map(|k| {
            let a = phase + k as f64 * step + rng.random_range(-0.2..0.2) * step;
            let rr = r * rng.random_range(0.9..1.1);
            (c.0 + rr * a.sin(), c.1 + rr * a.cos())
        })
        .collect();
    Region::Polygon { vertices }
}

/// Pixels whose reflected 8-neighbourhood holds both labels.
fn neighbour_difference(m: &Mask) -> Vec<u8> {
    let (h, w) = (m.height as isize, m.width as isize);
    let r = |i: isize, n: isize| if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    let mut out = vec![0u8; m.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut seen = [false; 2];
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dy, dx) != (0, 0) {
                        seen[m.data[(r(y + dy, h) * w + r(x + dx, w)) as usize] as usize] = true;
                    }
                }
            }
            out[(y * w + x) as usize] = u8::from(seen[0] && seen[1]);
        }
    }
    out
}

fn c9_edge_targets() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatched = 0;
    let mut edge_px = 0;
    for _ in 0..20 {
        let gt = fat_polygon(&mut rng, 256.0).rasterize(256, 256);
        let tg = build_targets(&gt, [(128, 128), (64, 64), (32, 32), (16, 16)]);
        edge_px += tg.edge.count_ones();
        if tg.edge.data != neighbour_difference(&tg.levels[3]) {
            mismatched += 1;
        }
    }
    check(
        mismatched == 0,
        format!("20 polygons, {edge_px} edge pixels, exact set match"),
        format!("{mismatched}/20 polygons differ from the oracle"),
    )
}

fn c10_determinism() -> Outcome {
    let mut cfg = Config::tiny();
    cfg.train.epochs = 2;
    let samples = lib(synth_corpus(3, &SynthOptions::square(48), 10))?;
    let (a, _) = lib(train(&cfg, &samples, &[]))?;
    let (b, _) = lib(train(&cfg, &samples, &[]))?;
    let same_ckpt = lib(a.to_bytes())? == lib(b.to_bytes())?;
    let model = |ck| lib(Trainer::from_checkpoint(ck, &Device::Cpu)).map(Trainer::into_model);
    let (ma, mb) = (model(&a)?, model(&b)?);
    let mut same_reports = true;
    for attack in [AttackSpec::none(), AttackSpec::gaussian_noise(3.0, 1)] {
        let ra = lib(evaluate(&ma, &samples, &attack, cfg.eval.aggregation, 0.5))?;
        let rb = lib(evaluate(&mb, &samples, &attack, cfg.eval.aggregation, 0.5))?;
        same_reports &= lib(ra.to_jsonl())? == lib(rb.to_jsonl())?;
    }
    check(
        same_ckpt && same_reports,
        "checkpoints byte-identical, reports identical".into(),
        format!("checkpoints identical {same_ckpt}, reports identical {same_reports}"),
    )
}

const OVERFIT_SAMPLES: usize = 8;
const OVERFIT_STEPS: u64 = 150;

fn c7_c8_overfit() -> (Outcome, Outcome) {
    let cfg = Config::desk();
    let start = Instant::now();
    let samples = match synth_corpus(OVERFIT_SAMPLES, &SynthOptions::square(cfg.train.input_size), cfg.train.seed) {
        Ok(s) => s,
        Err(e) => return (Err(format!("error: {e}")), Err("skipped: no overfit model".into())),
    };
    let (trainer, result) = match overfit_on(&cfg, &samples, OVERFIT_STEPS, 50) {
        Ok(r) => r,
        Err(e) => return (Err(format!("error: {e}")), Err("skipped: no overfit model".into())),
    };
    let secs = start.elapsed().as_secs_f64();
    let trace: Vec<String> = result.f1_trace.iter().map(|(s, f)| format!("{s}:{f:.3}")).collect();
    let c7 = check(
        result.f1 >= 0.90 && trainer.step() <= 500,
        format!(
            "{OVERFIT_SAMPLES} splices at {0}x{0}, {1} steps, F1 {2:.4} (trace {3}), {secs:.0}s",
            cfg.train.input_size,
            trainer.step(),
            result.f1,
            trace.join(" ")
        ),
        format!("F1 {:.4} < 0.90 after {} steps", result.f1, trainer.step()),
    );

    let model = trainer.model();
    let run = |attack: &AttackSpec| -> Result<(EvalReport, EvalReport), String> {
        let a = lib(evaluate(model, &samples, attack, cfg.eval.aggregation, cfg.head.threshold))?;
        let b = lib(evaluate(model, &samples, attack, cfg.eval.aggregation, cfg.head.threshold))?;
        Ok((a, b))
    };
    let c8 = (|| {
        let clean = run(&AttackSpec::none())?.0.f1;
        let mut parts = vec![format!("clean {clean:.3}")];
        let mut ok = true;
        for attack in [AttackSpec::resize(0.9), AttackSpec::gaussian_noise(3.0, 8)] {
            let (a, b) = run(&attack)?;
            let same = lib(a.to_jsonl())? == lib(b.to_jsonl())?;
            let drop = clean - a.f1;
            ok &= same && drop < 0.5;
            parts.push(format!("{} {:.3} (drop {drop:.3}, repeatable {same})", attack.label(), a.f1));
        }
        let msg = parts.join(", ");
        check(ok, msg.clone(), msg)
    })();
    (c7, c8)
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    // `cargo test --test acceptance -- 2 6` runs only the listed criteria.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    let single: [Criterion; 6] = [
        (1, "shape contract", c1_shape_contract),
        (2, "sobel oracle", c2_sobel),
        (3, "condconv degeneracies", c3_condconv),
        (4, "loss and metric oracles", c4_loss_metric_oracles),
        (5, "gradient checks", c5_gradients),
        (6, "loss wiring", c6_loss_wiring),
    ];
    let mut results: Vec<(u32, &str, Outcome)> =
        single.iter().filter(|c| wanted(c.0)).map(|&(n, name, f)| (n, name, f())).collect();
    if wanted(7) || wanted(8) {
        let (c7, c8) = c7_c8_overfit();
        results.push((7, "overfit smoke", c7));
        results.push((8, "robustness harness", c8));
    }
    if wanted(9) {
        results.push((9, "edge targets", c9_edge_targets()));
    }
    if wanted(10) {
        results.push((10, "determinism", c10_determinism()));
    }

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(m) => println!("criterion {n:2} PASS  {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {n:2} FAIL  {name}: {m}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
