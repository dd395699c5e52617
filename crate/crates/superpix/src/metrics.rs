//! Segmentation quality metrics against ground-truth label maps.
//!
//! Two standard measures: achievable segmentation accuracy (ASA), the
//! fraction of pixels preserved when every superpixel is assigned to its
//! best-overlapping ground-truth segment, and boundary recall (BR), the
//! fraction of ground-truth boundary pixels matched by a predicted boundary
//! within a Chebyshev tolerance radius.
//!
//! Boundaries are one-sided: a pixel is on a boundary iff its right or
//! bottom neighbor carries a different label. This avoids double-width
//! boundary bands and is applied identically to predictions and ground
//! truth. Datasets with several human annotations per image are handled by
//! [`evaluate`], which averages over annotations and keeps the per-annotation
//! breakdown.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::LabelMap;
use crate::{Error, Result};

/// Metrics for one prediction against one annotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationMetrics {
    pub asa: f64,
    pub br: f64,
}

/// Metrics for one prediction, averaged over all annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean achievable segmentation accuracy.
    pub asa: f64,
    /// Mean boundary recall.
    pub br: f64,
    /// Number of distinct labels in the prediction.
    pub n_superpixels_used: usize,
    /// One entry per ground-truth annotation, in input order.
    pub per_annotation: Vec<AnnotationMetrics>,
}

/// Achievable segmentation accuracy: each predicted superpixel is credited
/// with its largest single-segment overlap, `Σ_s max_g |pred_s ∩ gt_g| / HW`.
pub fn asa(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            what: format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.shape(),
                gt.shape()
            ),
        });
    }
    let mut intersections: HashMap<(u32, u32), u64> = HashMap::new();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        *intersections.entry((p, g)).or_insert(0) += 1;
    }
    let mut best: HashMap<u32, u64> = HashMap::new();
    for (&(p, _), &count) in &intersections {
        let entry = best.entry(p).or_insert(0);
        *entry = (*entry).max(count);
    }
    let kept: u64 = best.values().sum();
    Ok(kept as f64 / pred.labels().len() as f64)
}

/// One-sided boundary mask (row-major, `h*w` entries): a pixel is boundary
/// iff its right or bottom neighbor has a different label.
pub fn boundary_map(labels: &LabelMap) -> Vec<bool> {
    let (h, w) = labels.shape();
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = labels.at(y, x);
            if (x + 1 < w && labels.at(y, x + 1) != l) || (y + 1 < h && labels.at(y + 1, x) != l) {
                mask[y * w + x] = true;
            }
        }
    }
    mask
}

/// Boundary recall: the fraction of ground-truth boundary pixels with a
/// predicted boundary pixel within Chebyshev distance `r`. Ground truth
/// without any boundary (a single segment) scores 1.0.
pub fn boundary_recall(pred: &LabelMap, gt: &LabelMap, r: usize) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            what: format!(
                "prediction is {:?}, ground truth is {:?}",
                pred.shape(),
                gt.shape()
            ),
        });
    }
    let (h, w) = gt.shape();
    let gt_boundary = boundary_map(gt);
    let pred_boundary = boundary_map(pred);
    let mut total = 0u64;
    let mut hit = 0u64;
    for y in 0..h {
        for x in 0..w {
            if !gt_boundary[y * w + x] {
                continue;
            }
            total += 1;
            let y0 = y.saturating_sub(r);
            let x0 = x.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            let x1 = (x + r).min(w - 1);
            'window: for ny in y0..=y1 {
                for nx in x0..=x1 {
                    if pred_boundary[ny * w + nx] {
                        hit += 1;
                        break 'window;
                    }
                }
            }
        }
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(hit as f64 / total as f64)
    }
}

/// Evaluates one prediction against every annotation and averages.
pub fn evaluate(pred: &LabelMap, gts: &[LabelMap], r: usize) -> Result<MetricsReport> {
    if gts.is_empty() {
        return Err(Error::Config(
            "no ground-truth annotations to evaluate against".into(),
        ));
    }
    let mut per_annotation = Vec::with_capacity(gts.len());
    for gt in gts {
        per_annotation.push(AnnotationMetrics {
            asa: asa(pred, gt)?,
            br: boundary_recall(pred, gt, r)?,
        });
    }
    let n = per_annotation.len() as f64;
    Ok(MetricsReport {
        asa: per_annotation.iter().map(|m| m.asa).sum::<f64>() / n,
        br: per_annotation.iter().map(|m| m.br).sum::<f64>() / n,
        n_superpixels_used: pred.distinct_labels(),
        per_annotation,
    })
}
