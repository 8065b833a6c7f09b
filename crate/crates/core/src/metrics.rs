//! Pixel-level precision, recall and F1, and the evaluation harness.
//!
//! Report files:
//!
//! * `<name>.jsonl`: first line `{"schema":"splicenet.eval/1", ...header}`,
//!   then one object per image (`stem`, `precision`, `recall`, `f1`, `tp`,
//!   `fp`, `fn`, `tn`), sorted by stem.
//! * summary JSON / TSV written by [`write_summary`].

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Aggregation;
use crate::datagen::{apply_attack, AttackSpec, Sample};
use crate::error::{Error, Result};
use crate::model::SpliceNet;
use crate::raster::Mask;

pub const REPORT_SCHEMA: &str = "splicenet.eval/1";

/// Confusion counts with forged (1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }

    /// Empty denominators give 0, except when neither prediction nor ground
    /// truth has a positive pixel, which scores 1 across the board.
    pub fn scores(&self) -> Prf1 {
        if self.tp + self.fp + self.fn_ == 0 {
            return Prf1 { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf1 { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf1(pred: &Mask, gt: &Mask) -> Result<Prf1> {
    Ok(Counts::from_masks(pred, gt)?.scores())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub stem: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    /// `None` for clean evaluation.
    pub attack: Option<AttackSpec>,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Pooled counts over every evaluated pixel.
    pub counts: Counts,
    pub per_image: Vec<ImageScore>,
}

impl EvalReport {
    /// Assembles a report from per-image results in any order.
    pub fn from_scores(
        mut per_image: Vec<ImageScore>,
        aggregation: Aggregation,
        attack: Option<AttackSpec>,
        threshold: f64,
    ) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::invalid("cannot report on zero images"));
        }
        per_image.sort_by(|a, b| a.stem.cmp(&b.stem));
        let counts = per_image.iter().fold(Counts::default(), |acc, s| acc.add(s.counts));
        let agg = match aggregation {
            Aggregation::GlobalPixels => counts.scores(),
            Aggregation::PerImageMean => {
                let n = per_image.len() as f64;
                let mean = |f: fn(&ImageScore) -> f64| per_image.iter().map(f).sum::<f64>() / n;
                Prf1 {
                    precision: mean(|s| s.precision),
                    recall: mean(|s| s.recall),
                    f1: mean(|s| s.f1),
                }
            }
        };
        Ok(Self {
            aggregation,
            attack,
            threshold,
            precision: agg.precision,
            recall: agg.recall,
            f1: agg.f1,
            counts,
            per_image,
        })
    }

    pub fn attack_label(&self) -> String {
        self.attack.as_ref().map_or_else(|| "none".to_string(), |a| a.label())
    }

    /// Scores under the other aggregation, from the same per-image data.
    pub fn reaggregate(&self, aggregation: Aggregation) -> Result<Self> {
        Self::from_scores(self.per_image.clone(), aggregation, self.attack, self.threshold)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = serde_json::json!({
            "schema": REPORT_SCHEMA,
            "aggregation": self.aggregation,
            "attack": self.attack,
            "threshold": self.threshold,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "counts": self.counts,
            "images": self.per_image.len(),
        });
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.per_image {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = serde_json::from_str(
            lines.next().ok_or_else(|| Error::invalid("empty report"))?,
        )?;
        if header["schema"] != REPORT_SCHEMA {
            return Err(Error::invalid(format!("unsupported report schema {}", header["schema"])));
        }
        let per_image = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<ImageScore>, _>>()?;
        Ok(Self {
            aggregation: serde_json::from_value(header["aggregation"].clone())?,
            attack: serde_json::from_value(header["attack"].clone())?,
            threshold: serde_json::from_value(header["threshold"].clone())?,
            precision: serde_json::from_value(header["precision"].clone())?,
            recall: serde_json::from_value(header["recall"].clone())?,
            f1: serde_json::from_value(header["f1"].clone())?,
            counts: serde_json::from_value(header["counts"].clone())?,
            per_image,
        })
    }
}

/// Applies `attack` to every sample, predicts at the attacked resolution
/// and scores the final mask. Noise attacks draw per-sample streams from
/// `attack.seed` and the sample position.
pub fn evaluate(
    model: &SpliceNet,
    samples: &[Sample],
    attack: &AttackSpec,
    aggregation: Aggregation,
    threshold: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation needs at least one sample"));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let spec = AttackSpec {
            seed: attack.seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            ..*attack
        };
        let attacked = apply_attack(s, &spec)?;
        let pred = model.predict(&attacked.image, threshold)?;
        let counts = Counts::from_masks(&pred.mask, &attacked.gt_mask)?;
        let p = counts.scores();
        scores.push(ImageScore {
            stem: s.meta.stem.clone(),
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            counts,
        });
    }
    let attack = (attack.kind != crate::datagen::AttackKind::None).then_some(*attack);
    EvalReport::from_scores(scores, aggregation, attack, threshold)
}

/// Writes `text` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, text: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(text).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `summary.json` (array of header objects) and `summary.tsv` (one row per
/// report, both aggregations).
pub fn write_summary(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut rows = Vec::new();
    let mut tsv = String::from("attack\taggregation\tprecision\trecall\tf1\tmean_f1\tglobal_f1\timages\n");
    for r in reports {
        let mean = r.reaggregate(Aggregation::PerImageMean)?;
        let global = r.reaggregate(Aggregation::GlobalPixels)?;
        rows.push(serde_json::json!({
            "schema": REPORT_SCHEMA,
            "attack": r.attack_label(),
            "aggregation": r.aggregation,
            "precision": r.precision,
            "recall": r.recall,
            "f1": r.f1,
            "per_image_mean_f1": mean.f1,
            "global_pixels_f1": global.f1,
            "images": r.per_image.len(),
        }));
        tsv.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
            r.attack_label(),
            r.aggregation.as_str(),
            r.precision,
            r.recall,
            r.f1,
            mean.f1,
            global.f1,
            r.per_image.len()
        ));
    }
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    write_atomic(&dir.join("summary.tsv"), tsv.as_bytes())
}
