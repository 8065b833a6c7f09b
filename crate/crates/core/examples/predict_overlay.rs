//! Predicts a mask and edge map for one synthetic splice of odd size and
//! writes `pred_mask.png`, `pred_edge.png` and `pred_overlay.png`.
//! Without a checkpoint a tiny network is first overfit on the same splice
//! drawn at 64x64.
//!
//! cargo run --release --example predict_overlay -- [checkpoint]

use candle_core::Device;
use splicenet::checkpoint::Checkpoint;
use splicenet::cli::overlay;
use splicenet::config::Config;
use splicenet::datagen::{synth_sample, SynthOptions};
use splicenet::metrics::prf1;
use splicenet::trainer::{overfit_on, Trainer};

fn main() -> splicenet::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path.as_ref(), &Device::Cpu)?, &Device::Cpu)?.into_model(),
        None => {
            let mut cfg = Config::tiny();
            cfg.train.input_size = 64;
            let train = vec![synth_sample(&SynthOptions::square(64), 0)?];
            overfit_on(&cfg, &train, 40, 0)?.0.into_model()
        }
    };
    let opts = SynthOptions { height: 100, width: 90, ..SynthOptions::square(0) };
    let sample = synth_sample(&opts, 0)?;
    let pred = model.predict(&sample.image, model.config().head.threshold)?;
    println!("input {}x{}, mask {}x{}", sample.image.height, sample.image.width, pred.mask.height, pred.mask.width);
    println!("{:?}", prf1(&pred.mask, &sample.gt_mask)?);
    pred.mask.save_png("pred_mask.png".as_ref())?;
    let edge = splicenet::raster::RgbImage {
        height: sample.image.height,
        width: sample.image.width,
        data: pred.edge.iter().flat_map(|&v| [v, v, v]).collect(),
    };
    edge.save_png("pred_edge.png".as_ref())?;
    overlay(&sample.image, &pred).save_png("pred_overlay.png".as_ref())?;
    Ok(())
}
