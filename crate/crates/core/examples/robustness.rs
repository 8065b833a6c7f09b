//! Trains the desk-scale network briefly on synthetic splices, then scores
//! it clean, after a 0.9 resize and under Gaussian noise of variance 3.
//!
//! cargo run --release --example robustness -- [steps]

use splicenet::config::Config;
use splicenet::datagen::{synth_corpus, AttackSpec, SynthOptions};
use splicenet::metrics::evaluate;
use splicenet::trainer::overfit_on;

fn main() -> splicenet::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(60, |a| a.parse().expect("steps"));
    let cfg = Config::desk();
    let samples = synth_corpus(8, &SynthOptions::square(cfg.train.input_size), cfg.train.seed)?;
    let (trainer, _) = overfit_on(&cfg, &samples, steps, 0)?;
    println!("attack        precision  recall  f1");
    for attack in [AttackSpec::none(), AttackSpec::resize(0.9), AttackSpec::gaussian_noise(3.0, 1)] {
        let r = evaluate(trainer.model(), &samples, &attack, cfg.eval.aggregation, cfg.head.threshold)?;
        println!("{:<12}  {:.4}     {:.4}  {:.4}", attack.label(), r.precision, r.recall, r.f1);
    }
    Ok(())
}
