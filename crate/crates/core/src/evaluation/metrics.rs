use serde::{Deserialize, Serialize};

use crate::task_stream::{BoundingBox, ClassId};

/// One scored detection on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub score: f64,
    pub image_id: String,
}

/// A ground-truth instance of the class being scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub image_id: String,
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices ranked by descending score; equal scores keep input order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy NMS: highest score first, ties by insertion order; drops any box
/// whose IoU with an already kept box exceeds `threshold`.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<&Detection> = Vec::new();
    for i in rank_by_score(&scores) {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= threshold) {
            kept.push(&dets[i]);
        }
    }
    kept.into_iter().cloned().collect()
}

/// True-positive flags for detections in ranked order.
///
/// Each detection takes the unmatched GT of its image with the highest IoU
/// (first such GT on ties) provided the IoU is at least `iou_thresh`;
/// otherwise it is a false positive. Duplicates of a matched GT therefore
/// count as false positives.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut taken = vec![false; gts.len()];
    rank_by_score(&scores)
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image_id != d.image_id {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_thresh && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the all-points interpolated precision/recall curve.
/// `None` when there are no ground-truth instances.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let tp = match_detections(dets, gts, iou_thresh);
    let n_gt = gts.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}
