//! Fixed high-pass residuals of a splice whose donor is noisier than the
//! host (or the reverse): mean |residual| inside vs outside the mask.

use candle_core::{DType, Device};
use splicenet::config::NoiseMode;
use splicenet::datagen::{synth_sample, SynthOptions};
use splicenet::noise_front::NoiseFront;
use splicenet::ops::to_f64_vec;
use splicenet::params::ParamStore;
use splicenet::raster::images_to_tensor;

fn main() -> splicenet::Result<()> {
    let store = ParamStore::new(0, DType::F32, Device::Cpu);
    let front = NoiseFront::new(&store.root(), NoiseMode::SrmFixed)?;
    for seed in 0..4 {
        let s = synth_sample(&SynthOptions::square(128), seed)?;
        let x = images_to_tensor(&[&s.image], DType::F32, &Device::Cpu)?;
        let r = to_f64_vec(&front.extract(&x)?)?;
        let n = 128 * 128;
        for k in 0..3 {
            let (mut inside, mut outside, mut ni) = (0.0, 0.0, 0usize);
            for (i, &m) in s.gt_mask.data.iter().enumerate() {
                let v = r[k * n + i].abs();
                if m == 1 {
                    inside += v;
                    ni += 1;
                } else {
                    outside += v;
                }
            }
            println!(
                "sample {seed} filter {k}: mean |r| forged {:.3}  real {:.3}",
                inside / ni as f64,
                outside / (n - ni) as f64
            );
        }
    }
    Ok(())
}
