//! Loss terms of an untrained tiny network on two synthetic splices.

use candle_core::{DType, Device};
use splicenet::config::Config;
use splicenet::datagen::{synth_corpus, SynthOptions};
use splicenet::model::SpliceNet;
use splicenet::objective::total_loss;
use splicenet::trainer::PreparedSet;

fn main() -> splicenet::Result<()> {
    let cfg = Config::tiny();
    let size = cfg.train.input_size;
    let net = SpliceNet::new(&cfg, DType::F32, &Device::Cpu)?;
    let data = PreparedSet::new(&synth_corpus(2, &SynthOptions::square(size), 1)?, size);
    let (x, t) = data.batch(&[0, 1], DType::F32, &Device::Cpu)?;
    let out = net.forward(&x, true)?;
    let b = total_loss(&out.masks, &out.edges, &t)?.breakdown;
    for (i, v) in b.bce_per_scale.iter().enumerate() {
        println!("bce M_{} vs G_{}: {v:.6}", i + 1, i + 1);
    }
    println!("dice E_4 vs G_E: {:.6}", b.dice_edge);
    println!("total {:.6} = {:.6} + {:.6}", b.total, b.bce_sum, b.dice_edge);
    Ok(())
}
