//! Procedural source images for the synthetic splice corpus.
//!
//! Each source is a smooth colored pattern plus i.i.d. Gaussian "sensor"
//! noise of a per-source strength, so that host and donor differ both in
//! appearance and in their high-frequency residual statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    ValueNoise,
    Stripes,
    Blobs,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [TextureKind::ValueNoise, TextureKind::Stripes, TextureKind::Blobs];

    pub fn name(&self) -> &'static str {
        match self {
            TextureKind::ValueNoise => "value_noise",
            TextureKind::Stripes => "stripes",
            TextureKind::Blobs => "blobs",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Standard deviation of the additive sensor noise in 0..255 gray levels.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl TextureSpec {
    pub fn id(&self) -> String {
        format!("{}(sigma={:.2},seed={})", self.kind.name(), self.noise_sigma, self.seed)
    }

    /// Renders the texture, quantized to 8-bit levels.
    pub fn render(&self, height: usize, width: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let c0 = random_color(&mut rng);
        let c1 = random_color(&mut rng);
        let field: Vec<f64> = match self.kind {
            TextureKind::ValueNoise => value_noise(height, width, &mut rng),
            TextureKind::Stripes => stripes(height, width, &mut rng),
            TextureKind::Blobs => blobs(height, width, &mut rng),
        };
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0) / 255.0).expect("finite sigma");
        let mut data = Vec::with_capacity(height * width * 3);
        for t in field {
            for c in 0..3 {
                let base = c0[c] * (1.0 - t) + c1[c] * t;
                let v = base + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        RgbImage {
            height,
            width,
            data,
        }
        .quantized()
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Three octaves of lattice value noise, normalized to `[0, 1]`.
fn value_noise(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut field = vec![0f64; height * width];
    let base_cell = rng.random_range(16.0..48.0f64);
    let mut amp = 1.0;
    let mut total = 0.0;
    for octave in 0..3 {
        let cell = base_cell / (1 << octave) as f64;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
        for y in 0..height {
            let fy = y as f64 / cell;
            let (y0, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..width {
                let fx = x as f64 / cell;
                let (x0, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |r: usize, c: usize| lattice[r * gw + c];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                field[y * width + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    field.iter_mut().for_each(|v| *v /= total);
    field
}

fn stripes(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let period = rng.random_range(6.0..24.0f64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    let mut field = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 * c + y as f64 * s) / period;
            field.push(0.5 + 0.5 * (std::f64::consts::TAU * u + phase).sin());
        }
    }
    field
}

fn blobs(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(4..10);
    let centers: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(0.08..0.3) * height.max(width) as f64,
            )
        })
        .collect();
    let mut field = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let v: f64 = centers
                .iter()
                .map(|&(cy, cx, r)| {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    (-d2 / (2.0 * r * r)).exp()
                })
                .sum();
            field.push(v.min(1.0));
        }
    }
    field
}
