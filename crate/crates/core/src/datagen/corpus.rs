//! On-disk corpus layout: `<root>/images/<stem>.<png|jpg|jpeg>` paired with
//! `<root>/masks/<stem>.png` (single channel, 0 = real, 255 = forged).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLayout {
    pub images_dir: String,
    pub masks_dir: String,
}

impl Default for CorpusLayout {
    fn default() -> Self {
        Self {
            images_dir: "images".into(),
            masks_dir: "masks".into(),
        }
    }
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Loads every image/mask pair under `root` in lexicographic stem order.
pub fn load_corpus(root: &Path, layout: &CorpusLayout) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "corpus directory not found"),
        ));
    }
    let images = root.join(&layout.images_dir);
    let masks = root.join(&layout.masks_dir);
    if !images.exists() {
        return Ok(Vec::new());
    }
    let mut stems: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let path = entry.map_err(|e| Error::io(&images, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some(e) if IMAGE_EXTS.contains(&e)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            stems.insert(stem.to_string(), path.clone());
        }
    }
    let mut out = Vec::with_capacity(stems.len());
    for (stem, img_path) in stems {
        let mask_path = masks.join(format!("{stem}.png"));
        if !mask_path.exists() {
            return Err(Error::MissingMask { stem, dir: masks });
        }
        let image = RgbImage::load(&img_path)?;
        let gt_mask = Mask::load(&mask_path)?;
        let sample = Sample::new(
            image,
            gt_mask,
            SampleMeta {
                stem: stem.clone(),
                host: img_path.display().to_string(),
                donor: String::new(),
                region: None,
                seed: 0,
            },
        )
        .map_err(|e| Error::invalid(format!("{stem}: {e}")))?;
        out.push(sample);
    }
    Ok(out)
}

/// Writes samples in the corpus layout, named by `meta.stem`.
pub fn write_corpus(root: &Path, layout: &CorpusLayout, samples: &[Sample]) -> Result<()> {
    let images = root.join(&layout.images_dir);
    let masks = root.join(&layout.masks_dir);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for s in samples {
        s.image.save_png(&images.join(format!("{}.png", s.meta.stem)))?;
        s.gt_mask.save_png(&masks.join(format!("{}.png", s.meta.stem)))?;
    }
    Ok(())
}
