//! Runs the paper-scale network once on a 256x256 input and prints every
//! pyramid level.

use candle_core::{DType, Device, Tensor};
use splicenet::config::Config;
use splicenet::model::SpliceNet;
use splicenet::pyramid::ImageBatch;

fn main() -> splicenet::Result<()> {
    let cfg = Config::paper();
    let net = SpliceNet::new(&cfg, DType::F32, &Device::Cpu)?;
    println!("{} parameters", net.store().num_scalars());
    let x = ImageBatch::new(Tensor::rand(0f32, 1.0, (1, 3, 256, 256), &Device::Cpu)?)?;
    let out = net.forward(&x, false)?;
    println!("level  rgb              noise            fused            E_i            M_i");
    for i in 0..4 {
        println!(
            "{}      {:<16} {:<16} {:<16} {:<14} {:?}",
            i + 1,
            format!("{:?}", out.rgb.levels[i].dims()),
            format!("{:?}", out.noise.levels[i].dims()),
            format!("{:?}", out.fused.levels[i].dims()),
            format!("{:?}", out.edges.probs[i].dims()),
            out.masks.probs[i].dims()
        );
    }
    Ok(())
}
