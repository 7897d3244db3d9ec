//! Class-agnostic average precision over mask IoU thresholds.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::EntityMap;
use crate::mask::{score_order, BinaryMask, Level, MaskError, RleRecord, ScoredMask};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground-truth masks in any image")]
    NoGroundTruth,
    #[error("{preds} prediction images vs {gts} ground-truth images")]
    Misaligned { preds: usize, gts: usize },
    #[error("image {0} differs in size between prediction and ground truth")]
    SizeMismatch(String),
    #[error("image {0} has no ground truth")]
    MissingImage(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Greedy matching in score order: each prediction takes the unmatched
/// ground truth of highest IoU at or above `iou_threshold`, lower index on
/// ties. Returns `(prediction index, matched gt)` in score order.
pub fn match_predictions(
    preds: &[ScoredMask],
    gts: &[BinaryMask],
    iou_threshold: f64,
) -> Result<Vec<(usize, Option<usize>)>, MaskError> {
    let ious = iou_table(preds, gts)?;
    Ok(match_with_table(preds, &ious, gts.len(), iou_threshold))
}

fn iou_table(preds: &[ScoredMask], gts: &[BinaryMask]) -> Result<Vec<Vec<f64>>, MaskError> {
    preds
        .par_iter()
        .map(|p| gts.iter().map(|g| p.mask.iou(g)).collect::<Result<Vec<f64>, _>>())
        .collect()
}

fn match_with_table(
    preds: &[ScoredMask],
    ious: &[Vec<f64>],
    n_gt: usize,
    iou_threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut taken = vec![false; n_gt];
    score_order(preds)
        .into_iter()
        .map(|i| {
            let mut best: Option<(f64, usize)> = None;
            for (g, &v) in ious[i].iter().enumerate() {
                if !taken[g] && v >= iou_threshold && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, g));
                }
            }
            if let Some((_, g)) = best {
                taken[g] = true;
            }
            (i, best.map(|(_, g)| g))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_threshold: Vec<(f64, f64)>,
}

/// 101-point interpolated AP of a ranked list of hit flags.
pub fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP pooled over images at each threshold. `ap50` and `ap75` are computed
/// at 0.5 and 0.75 even when those are not among `thresholds`.
pub fn average_precision(
    preds: &[EntityMap],
    gts: &[EntityMap],
    thresholds: &[f64],
) -> Result<EvalResult, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::Misaligned { preds: preds.len(), gts: gts.len() });
    }
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    if n_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let tables: Vec<Vec<Vec<f64>>> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let gm: Vec<BinaryMask> = g.masks().iter().map(|m| m.mask.clone()).collect();
            iou_table(p.masks(), &gm)
        })
        .collect::<Result<_, _>>()?;
    // global ranking: score descending, then image, then per-image order
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        for (rank, i) in score_order(p.masks()).into_iter().enumerate() {
            ranked.push((p.masks()[i].score(), img, rank));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let ap_at = |t: f64| {
        let hit: Vec<Vec<bool>> = preds
            .iter()
            .zip(gts)
            .zip(&tables)
            .map(|((p, g), table)| {
                match_with_table(p.masks(), table, g.len(), t).into_iter().map(|(_, m)| m.is_some()).collect()
            })
            .collect();
        let flags: Vec<bool> = ranked.iter().map(|&(_, img, rank)| hit[img][rank]).collect();
        interpolated_ap(&flags, n_gt)
    };
    let per_threshold: Vec<(f64, f64)> = thresholds.iter().map(|&t| (t, ap_at(t))).collect();
    let ap = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().map(|(_, v)| v).sum::<f64>() / per_threshold.len() as f64
    };
    Ok(EvalResult { ap, ap50: ap_at(0.5), ap75: ap_at(0.75), per_threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub rle: RleRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// One line of a prediction or ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub height: u32,
    pub width: u32,
    pub masks: Vec<MaskRecord>,
}

impl ImageRecord {
    pub fn from_map(image_id: &str, map: &EntityMap, with_scores: bool) -> Self {
        Self {
            image_id: image_id.to_owned(),
            height: map.height(),
            width: map.width(),
            masks: map
                .masks()
                .iter()
                .map(|m| MaskRecord { rle: RleRecord::from(&m.mask), score: with_scores.then_some(m.score()) })
                .collect(),
        }
    }

    /// Ground-truth records have no scores and read as 1.0.
    pub fn to_map(&self) -> Result<EntityMap, MaskError> {
        let masks = self
            .masks
            .iter()
            .map(|r| {
                let mask = BinaryMask::try_from(&r.rle)?;
                if (mask.height(), mask.width()) != (self.height, self.width) {
                    return Err(MaskError::Mismatch {
                        a_h: self.height,
                        a_w: self.width,
                        b_h: mask.height(),
                        b_w: mask.width(),
                    });
                }
                ScoredMask::new(mask, r.score.unwrap_or(1.0), Level::Object)
            })
            .collect::<Result<Vec<_>, _>>()?;
        EntityMap::new(self.height, self.width, masks)
    }
}

pub fn read_records(reader: impl BufRead) -> Result<Vec<ImageRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_records(mut writer: impl Write, records: &[ImageRecord]) -> Result<(), EvalError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Pairs prediction and ground-truth records by image id and evaluates.
/// Ground-truth images without a prediction line count as empty predictions.
pub fn evaluate_records(preds: &[ImageRecord], gts: &[ImageRecord]) -> Result<EvalResult, EvalError> {
    let mut pm = Vec::new();
    let mut gm = Vec::new();
    for g in gts {
        let gt = g.to_map()?;
        let pred = match preds.iter().find(|p| p.image_id == g.image_id) {
            Some(p) => {
                if (p.height, p.width) != (g.height, g.width) {
                    return Err(EvalError::SizeMismatch(g.image_id.clone()));
                }
                p.to_map()?
            }
            None => EntityMap::empty(g.height, g.width),
        };
        pm.push(pred);
        gm.push(gt);
    }
    if let Some(p) = preds.iter().find(|p| !gts.iter().any(|g| g.image_id == p.image_id)) {
        return Err(EvalError::MissingImage(p.image_id.clone()));
    }
    average_precision(&pm, &gm, &coco_thresholds())
}
