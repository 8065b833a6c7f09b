//! Host-side RGB images and binary masks, their PNG encoding, and conversion
//! to batched tensors.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{resample_weights, Resample};

/// Interleaved `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// `H x W` mask with values in `{0, 1}`; 1 marks a forged pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{} values cannot fill a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Separable bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let wy = resample_weights(self.height, height, Resample::Bilinear);
        let wx = resample_weights(self.width, width, Resample::Bilinear);
        let taps = |w: &[f64], n: usize, o: usize| -> Vec<(usize, f64)> {
            w[o * n..(o + 1) * n]
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect()
        };
        // horizontal pass
        let mut tmp = vec![0f64; self.height * width * 3];
        for x in 0..width {
            let tx = taps(&wx, self.width, x);
            for y in 0..self.height {
                for c in 0..3 {
                    tmp[(y * width + x) * 3 + c] = tx
                        .iter()
                        .map(|&(i, w)| w * self.data[(y * self.width + i) * 3 + c] as f64)
                        .sum();
                }
            }
        }
        let mut out = vec![0f32; height * width * 3];
        for y in 0..height {
            let ty = taps(&wy, self.height, y);
            for x in 0..width {
                for c in 0..3 {
                    let v: f64 = ty.iter().map(|&(i, w)| w * tmp[(i * width + x) * 3 + c]).sum();
                    out[(y * width + x) * 3 + c] = v as f32;
                }
            }
        }
        RgbImage {
            height,
            width,
            data: out,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|v| quantize(*v)).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&image::DynamicImage::ImageRgb8(self.to_rgb8()), path)
    }

    /// Rounds every value to the nearest 8-bit level, so that a PNG round
    /// trip is lossless.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| quantize(*v) as f32 / 255.0).collect(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values cannot fill a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn forged_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.data.len().max(1) as f64
    }

    /// Nearest-neighbour resampling: output pixel `o` reads source pixel
    /// `floor((o + 0.5) * in / out)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let ys: Vec<usize> = (0..height).map(|o| nearest_index(o, self.height, height)).collect();
        let xs: Vec<usize> = (0..width).map(|o| nearest_index(o, self.width, width)).collect();
        let mut data = Vec::with_capacity(height * width);
        for &y in &ys {
            for &x in &xs {
                data.push(self.get(y, x));
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let bytes = self.data.iter().map(|&v| v * 255).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    /// Loads a grayscale mask and binarizes it at half intensity.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
        let g = img.to_luma8();
        Ok(Self {
            height: g.height() as usize,
            width: g.width() as usize,
            data: g.as_raw().iter().map(|&v| u8::from(v >= 128)).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(&image::DynamicImage::ImageLuma8(self.to_luma8()), path)
    }
}

pub(crate) fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
    src.min(in_len - 1)
}

/// Writes a PNG through a temporary file and an atomic rename.
pub fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    let tmp = path.with_extension("png.tmp");
    img.save_with_format(&tmp, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: tmp.clone(),
            source: e,
        })?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot batch zero images"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height, img.width
            )));
        }
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3).copied());
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks equally sized masks into a `(B, 1, H, W)` tensor of 0/1 values.
pub fn masks_to_tensor(masks: &[&Mask], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("cannot batch zero masks"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.height != h || m.width != w {
            return Err(Error::shape("batch mixes mask sizes"));
        }
        data.extend(m.data.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}
