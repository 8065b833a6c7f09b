//! Sobel magnitude of a synthetic splice and the edge target derived from
//! its coarsest mask. Writes `sobel.png` and `edge_target.png`.

use candle_core::{DType, Device};
use image::{DynamicImage, GrayImage};
use splicenet::datagen::{synth_sample, SynthOptions};
use splicenet::edge_head::sobel_magnitude;
use splicenet::objective::build_targets;
use splicenet::ops::to_f64_vec;
use splicenet::raster::{images_to_tensor, save_png};

fn main() -> splicenet::Result<()> {
    let sample = synth_sample(&SynthOptions::square(256), 4)?;
    let x = images_to_tensor(&[&sample.image], DType::F32, &Device::Cpu)?;
    let mag = to_f64_vec(&sobel_magnitude(&x.mean_keepdim(1)?)?)?;
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let bytes = mag.iter().map(|v| (255.0 * v / peak).round() as u8).collect();
    save_png(&DynamicImage::ImageLuma8(GrayImage::from_raw(256, 256, bytes).unwrap()), "sobel.png".as_ref())?;

    let t = build_targets(&sample.gt_mask, [(128, 128), (64, 64), (32, 32), (16, 16)]);
    t.edge.resize_nearest(256, 256).save_png("edge_target.png".as_ref())?;
    println!("peak gradient {peak:.3}");
    println!("G_4 has {} forged of 256 pixels, G_E marks {} boundary pixels", t.levels[3].count_ones(), t.edge.count_ones());
    for y in 0..16 {
        let row: String = (0..16)
            .map(|x| match (t.levels[3].get(y, x), t.edge.get(y, x)) {
                (_, 1) => '#',
                (1, _) => 'o',
                _ => '.',
            })
            .collect();
        println!("  {row}");
    }
    Ok(())
}
