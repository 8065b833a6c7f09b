//! Synthetic splice generation, corpus IO and robustness attacks.

mod attack;
mod corpus;
mod region;
mod texture;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attack::{apply_attack, AttackKind, AttackSpec};
pub use corpus::{load_corpus, write_corpus, CorpusLayout};
pub use region::Region;
pub use texture::{TextureKind, TextureSpec};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

/// Provenance of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub stem: String,
    pub host: String,
    pub donor: String,
    pub region: Option<Region>,
    pub seed: u64,
}

/// An image with its full-resolution ground-truth forgery mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: RgbImage,
    pub gt_mask: Mask,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn new(image: RgbImage, gt_mask: Mask, meta: SampleMeta) -> Result<Self> {
        if image.height != gt_mask.height || image.width != gt_mask.width {
            return Err(Error::shape(format!(
                "image is {}x{} but mask is {}x{}",
                image.height, image.width, gt_mask.height, gt_mask.width
            )));
        }
        Ok(Self { image, gt_mask, meta })
    }

    /// Resizes to a square training resolution (bilinear image, nearest mask).
    pub fn resized(&self, size: usize) -> Sample {
        Sample {
            image: self.image.resize_bilinear(size, size),
            gt_mask: self.gt_mask.resize_nearest(size, size),
            meta: self.meta.clone(),
        }
    }
}

/// A named source raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Source {
    pub id: String,
    pub image: RgbImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub struct SpliceOptions {
    /// Width in pixels of the blend ramp just inside the region boundary.
    pub feather: usize,
}


/// Pastes `donor` into `host` inside `region`.
///
/// The donor is read at a seed-dependent cyclic offset so that the pasted
/// content does not line up with the host. Pixels outside the region are the
/// host's, bit for bit. Feathering only blends the image; every pixel inside
/// the region stays labeled forged.
pub fn generate_splice(
    host: &Source,
    donor: &Source,
    region: &Region,
    opts: &SpliceOptions,
    seed: u64,
) -> Result<Sample> {
    let (h, w) = (host.image.height, host.image.width);
    if h == 0 || w == 0 {
        return Err(Error::invalid("host image is empty"));
    }
    let donor_img = if donor.image.height != h || donor.image.width != w {
        donor.image.resize_bilinear(h, w)
    } else {
        donor.image.clone()
    };
    let mask = region.rasterize(h, w);
    let ones = mask.count_ones();
    if ones == 0 {
        return Err(Error::DegenerateRegion(format!(
            "{region:?} covers no pixel of a {h}x{w} canvas"
        )));
    }
    let frac = ones as f64 / (h * w) as f64;
    if !(0.01..=0.5).contains(&frac) {
        return Err(Error::invalid(format!(
            "region covers {:.2}% of the image; expected 1%..50%",
            frac * 100.0
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = rng.random_range(0..h);
    let dx = rng.random_range(0..w);
    let alpha = feather_alpha(&mask, opts.feather);

    let mut image = host.image.clone();
    for y in 0..h {
        for x in 0..w {
            let a = alpha[y * w + x];
            if a == 0.0 {
                continue;
            }
            let d = donor_img.pixel((y + dy) % h, (x + dx) % w);
            if a == 1.0 {
                image.set_pixel(y, x, d);
            } else {
                let hp = host.image.pixel(y, x);
                let mix = |i: usize| hp[i] * (1.0 - a) + d[i] * a;
                image.set_pixel(y, x, [mix(0), mix(1), mix(2)]);
            }
        }
    }
    Sample::new(
        image,
        mask,
        SampleMeta {
            stem: format!("splice_{seed}"),
            host: host.id.clone(),
            donor: donor.id.clone(),
            region: Some(region.clone()),
            seed,
        },
    )
}

/// Donor weight per pixel: 0 outside, ramping from `1 / (feather + 1)` at
/// the boundary to 1 at distance `> feather` inside.
fn feather_alpha(mask: &Mask, feather: usize) -> Vec<f32> {
    let (h, w) = (mask.height, mask.width);
    let mut alpha: Vec<f32> = mask.data.iter().map(|&v| v as f32).collect();
    if feather == 0 {
        return alpha;
    }
    let r = feather as isize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let mut best = f64::INFINITY;
            for oy in -r..=r {
                for ox in -r..=r {
                    let (ny, nx) = (y as isize + oy, x as isize + ox);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    if mask.get(ny as usize, nx as usize) == 0 {
                        best = best.min(((oy * oy + ox * ox) as f64).sqrt());
                    }
                }
            }
            if best <= feather as f64 {
                alpha[y * w + x] = (best / (feather as f64 + 1.0)) as f32;
            }
        }
    }
    alpha
}

/// Parameters of the procedural splice generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub height: usize,
    pub width: usize,
    pub feather: usize,
    /// Target forged-area fraction range.
    pub area: (f64, f64),
}

impl SynthOptions {
    pub fn square(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            feather: 0,
            area: (0.06, 0.3),
        }
    }
}

/// Draws a random region covering roughly `area` of the canvas.
pub fn random_region(rng: &mut impl Rng, height: usize, width: usize, area: f64) -> Region {
    let (hf, wf) = (height as f64, width as f64);
    let target = area * hf * wf;
    match rng.random_range(0..3) {
        0 => {
            let aspect: f64 = rng.random_range(0.5..2.0);
            let rh = ((target * aspect).sqrt().round() as i64).clamp(2, height as i64);
            let rw = ((target / rh as f64).round() as i64).clamp(2, width as i64);
            Region::Rect {
                top: rng.random_range(0..=(height as i64 - rh)),
                left: rng.random_range(0..=(width as i64 - rw)),
                height: rh,
                width: rw,
            }
        }
        1 => {
            let aspect: f64 = rng.random_range(0.6..1.6);
            let ry = (target * aspect / std::f64::consts::PI).sqrt().min(hf / 2.0 - 1.0);
            let rx = (target / (std::f64::consts::PI * ry)).min(wf / 2.0 - 1.0);
            Region::Ellipse {
                cy: rng.random_range(ry..=hf - ry),
                cx: rng.random_range(rx..=wf - rx),
                ry,
                rx,
            }
        }
        _ => {
            let n = rng.random_range(5..=9);
            let radius = (target / (0.8 * std::f64::consts::PI)).sqrt().min(hf.min(wf) / 2.0 - 1.0);
            let cy = rng.random_range(radius..=hf - radius);
            let cx = rng.random_range(radius..=wf - radius);
            let step = std::f64::consts::TAU / n as f64;
            let start: f64 = rng.random_range(0.0..step);
            let vertices = (0..n)
                .map(|i| {
                    let a = start + step * (i as f64 + rng.random_range(-0.2..0.2));
                    let r = radius * rng.random_range(0.8..1.0);
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Region::Polygon { vertices }
        }
    }
}

/// Generates one procedural splice: two textures with clearly different
/// sensor-noise strengths and a random rectangle, ellipse or polygon region.
pub fn synth_sample(opts: &SynthOptions, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5A11_CE00_0000);
    let kinds = TextureKind::ALL;
    let host_kind = kinds[rng.random_range(0..kinds.len())];
    let donor_kind = kinds[rng.random_range(0..kinds.len())];
    let quiet = rng.random_range(0.5..2.0);
    let loud = rng.random_range(6.0..12.0);
    let (host_sigma, donor_sigma) = if rng.random_bool(0.5) {
        (quiet, loud)
    } else {
        (loud, quiet)
    };
    let host = TextureSpec {
        kind: host_kind,
        noise_sigma: host_sigma,
        seed: rng.random(),
    };
    let donor = TextureSpec {
        kind: donor_kind,
        noise_sigma: donor_sigma,
        seed: rng.random(),
    };
    let host = Source {
        id: host.id(),
        image: host.render(opts.height, opts.width),
    };
    let donor = Source {
        id: donor.id(),
        image: donor.render(opts.height, opts.width),
    };
    for _ in 0..16 {
        let area = rng.random_range(opts.area.0..=opts.area.1);
        let region = random_region(&mut rng, opts.height, opts.width, area);
        match generate_splice(&host, &donor, &region, &SpliceOptions { feather: opts.feather }, seed) {
            Ok(s) => return Ok(s),
            Err(Error::DegenerateRegion(_)) | Err(Error::InvalidInput(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateRegion(format!(
        "no admissible region found for a {}x{} canvas",
        opts.height, opts.width
    )))
}

/// `n` synthetic samples with stems `splice_0000`, `splice_0001`, ...
pub fn synth_corpus(n: usize, opts: &SynthOptions, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let mut s = synth_sample(opts, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            s.meta.stem = format!("splice_{i:04}");
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(h: usize, w: usize, v: f32, id: &str) -> Source {
        Source {
            id: id.to_string(),
            image: RgbImage::filled(h, w, [v, v, v]),
        }
    }

    #[test]
    fn centered_square_has_exact_area() -> Result<()> {
        let region = Region::Rect {
            top: 96,
            left: 96,
            height: 64,
            width: 64,
        };
        let s = generate_splice(
            &flat(256, 256, 0.5, "gray"),
            &flat(256, 256, 1.0, "white"),
            &region,
            &SpliceOptions::default(),
            3,
        )?;
        assert_eq!(s.gt_mask.count_ones(), 4096);
        for y in 0..256 {
            for x in 0..256 {
                let want = if s.gt_mask.get(y, x) == 1 { 1.0 } else { 0.5 };
                assert_eq!(s.image.pixel(y, x), [want; 3]);
            }
        }
        Ok(())
    }

    #[test]
    fn splice_is_deterministic() -> Result<()> {
        let opts = SynthOptions::square(64);
        let a = synth_sample(&opts, 42)?;
        let b = synth_sample(&opts, 42)?;
        assert_eq!(a, b);
        assert_ne!(a, synth_sample(&opts, 43)?);
        Ok(())
    }

    #[test]
    fn ellipse_area_matches_brute_force_and_pi_ab() -> Result<()> {
        let host = TextureSpec { kind: TextureKind::Blobs, noise_sigma: 1.0, seed: 1 };
        let donor = TextureSpec { kind: TextureKind::Stripes, noise_sigma: 8.0, seed: 2 };
        let host = Source { id: host.id(), image: host.render(128, 128) };
        let donor = Source { id: donor.id(), image: donor.render(128, 128) };
        for (a, b) in [(20.0, 30.0), (25.5, 17.25), (40.0, 40.0)] {
            let region = Region::Ellipse { cy: 64.0, cx: 63.0, ry: a, rx: b };
            let s = generate_splice(&host, &donor, &region, &SpliceOptions::default(), 9)?;
            // oracle: independent point-in-ellipse count over pixel centers
            let mut brute = 0usize;
            for y in 0..128 {
                for x in 0..128 {
                    let (py, px) = (y as f64 + 0.5 - 64.0, x as f64 + 0.5 - 63.0);
                    if (py / a).powi(2) + (px / b).powi(2) <= 1.0 {
                        brute += 1;
                    }
                }
            }
            let got = s.gt_mask.count_ones();
            assert_eq!(got, brute);
            let analytic = std::f64::consts::PI * a * b;
            assert!((got as f64 - analytic).abs() / analytic < 0.02, "{got} vs {analytic}");
        }
        Ok(())
    }

    #[test]
    fn empty_region_is_rejected() {
        let r = Region::Rect { top: 300, left: 0, height: 10, width: 10 };
        let err = generate_splice(&flat(64, 64, 0.2, "a"), &flat(64, 64, 0.8, "b"), &r, &SpliceOptions::default(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateRegion(_)), "{err}");
        let too_big = Region::Rect { top: 0, left: 0, height: 64, width: 48 };
        assert!(generate_splice(&flat(64, 64, 0.2, "a"), &flat(64, 64, 0.8, "b"), &too_big, &SpliceOptions::default(), 0).is_err());
    }

    #[test]
    fn feathering_blends_image_but_not_mask() -> Result<()> {
        let region = Region::Rect { top: 16, left: 16, height: 24, width: 24 };
        let host = flat(64, 64, 0.0, "black");
        let donor = flat(64, 64, 1.0, "white");
        let hard = generate_splice(&host, &donor, &region, &SpliceOptions::default(), 1)?;
        let soft = generate_splice(&host, &donor, &region, &SpliceOptions { feather: 3 }, 1)?;
        assert_eq!(hard.gt_mask, soft.gt_mask);
        assert!(soft.image.pixel(16, 20)[0] > 0.0 && soft.image.pixel(16, 20)[0] < 1.0);
        assert_eq!(soft.image.pixel(28, 28), [1.0; 3]);
        for y in 0..64 {
            for x in 0..64 {
                if soft.gt_mask.get(y, x) == 0 {
                    assert_eq!(soft.image.pixel(y, x), [0.0; 3]);
                }
            }
        }
        Ok(())
    }

    #[test]
    fn mismatched_donor_is_resampled() -> Result<()> {
        let region = Region::Rect { top: 4, left: 4, height: 8, width: 8 };
        let s = generate_splice(&flat(32, 32, 0.1, "a"), &flat(16, 20, 0.9, "b"), &region, &SpliceOptions::default(), 0)?;
        assert_eq!((s.image.height, s.image.width), (32, 32));
        Ok(())
    }

    #[test]
    fn synthetic_forged_fraction_within_bounds() -> Result<()> {
        for s in synth_corpus(12, &SynthOptions::square(96), 5)? {
            let f = s.gt_mask.forged_fraction();
            assert!(f > 0.0 && f <= 0.9, "{f}");
        }
        Ok(())
    }
}
