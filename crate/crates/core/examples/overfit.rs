//! Overfits the desk-scale network on a handful of synthetic splices and
//! reports the final-mask F1 on the same images.
//!
//! cargo run --release --example overfit -- [n_samples] [max_steps]

use std::time::Instant;

use splicenet::config::Config;
use splicenet::datagen::{synth_corpus, AttackSpec, SynthOptions};
use splicenet::metrics::evaluate;
use splicenet::trainer::{History, PreparedSet, Trainer};

fn main() -> splicenet::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(8, |a| a.parse().expect("n_samples"));
    let max_steps: u64 = args.next().map_or(500, |a| a.parse().expect("max_steps"));

    let mut cfg = Config::desk();
    cfg.train.max_steps = max_steps;
    cfg.train.epochs = usize::MAX;
    let size = cfg.train.input_size;
    let samples = synth_corpus(n, &SynthOptions::square(size), cfg.train.seed)?;
    let data = PreparedSet::new(&samples, size);
    let mut trainer = Trainer::new(&cfg, &candle_core::Device::Cpu)?;
    println!("{} parameters", trainer.model().store().num_scalars());

    let start = Instant::now();
    let mut history = History::default();
    while trainer.step() < max_steps {
        trainer.train_epoch(&data, &mut history)?;
        let last = history.steps.last().expect("a step ran");
        if last.step % 25 == 0 {
            let f1 = evaluate(trainer.model(), &data.samples, &AttackSpec::none(), cfg.eval.aggregation, 0.5)?.f1;
            println!(
                "step {:4}  lr {:.2e}  loss {:.4} (bce {:.3} {:.3} {:.3} {:.3}, dice {:.3})  f1 {:.3}  {:.1}s",
                last.step, last.lr, last.total, last.bce[0], last.bce[1], last.bce[2], last.bce[3],
                last.dice_edge, f1, start.elapsed().as_secs_f64()
            );
        }
    }
    let f1 = evaluate(trainer.model(), &data.samples, &AttackSpec::none(), cfg.eval.aggregation, 0.5)?.f1;
    println!("final f1 {f1:.4} after {} steps in {:.1}s", trainer.step(), start.elapsed().as_secs_f64());
    Ok(())
}
