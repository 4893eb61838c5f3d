use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::iou;
use crate::task_stream::{decode_deltas, encode_deltas, BoundingBox};

/// A scored region emitted by the proposal stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Sigmoid of the objectness logit, in [0, 1].
    pub objectness: f64,
    pub anchor_index: usize,
}

/// Per-anchor outputs of the proposal stage, indexed by anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnRaw {
    pub objectness_logits: Vec<f64>,
    /// Row-major `[num_anchors, 4]`.
    pub deltas: Vec<f64>,
}

/// Sampled anchor for the proposal-stage loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorTarget {
    pub index: usize,
    pub positive: bool,
    /// Regression target; zeros for negatives.
    pub target: [f64; 4],
}

/// Anchor boxes for an `fh × fw` feature map, index `(y * fw + x) * A + a`.
pub fn generate_anchors(
    fh: usize,
    fw: usize,
    stride: usize,
    sizes: &[f64],
    image_width: f64,
    image_height: f64,
) -> Vec<BoundingBox> {
    let mut anchors = Vec::with_capacity(fh * fw * sizes.len());
    let s = stride as f64;
    for y in 0..fh {
        for x in 0..fw {
            let cx = (x as f64 + 0.5) * s;
            let cy = (y as f64 + 0.5) * s;
            for &size in sizes {
                let half = size / 2.0;
                anchors
                    .push(BoundingBox::new(cx - half, cy - half, cx + half, cy + half).clip(image_width, image_height));
            }
        }
    }
    anchors
}

/// Greedy NMS over `order` (already ranked); keeps at most `limit` indices.
/// A candidate is dropped when its IoU with a kept box exceeds `threshold`.
pub(crate) fn greedy_nms(boxes: &[BoundingBox], order: &[usize], threshold: f64, limit: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.len() >= limit {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Ranks anchors by objectness (ties by anchor index), decodes, clips,
/// drops sub-pixel boxes and applies NMS, returning at most `top_n`.
pub fn select_proposals(
    raw: &RpnRaw,
    anchors: &[BoundingBox],
    top_n: usize,
    nms_threshold: f64,
    image_width: f64,
    image_height: f64,
) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| raw.objectness_logits[b].total_cmp(&raw.objectness_logits[a]).then(a.cmp(&b)));
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut valid = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let b = decode_deltas(anchor, &raw.deltas[i * 4..i * 4 + 4]).clip(image_width, image_height);
        valid.push(b.width() >= 1.0 && b.height() >= 1.0);
        boxes.push(b);
    }
    order.retain(|&i| valid[i]);
    greedy_nms(&boxes, &order, nms_threshold, top_n)
        .into_iter()
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: crate::tensor::sigmoid(raw.objectness_logits[i]),
            anchor_index: i,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSampling {
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

/// Labels anchors against ground truth and samples a mini-batch.
///
/// Positive: IoU ≥ `positive_iou` with some GT, or the best anchor for a GT.
/// Negative: max IoU ≤ `negative_iou`. Everything else is ignored.
pub fn sample_anchor_targets<R: Rng + ?Sized>(
    anchors: &[BoundingBox],
    gts: &[BoundingBox],
    cfg: &AnchorSampling,
    rng: &mut R,
) -> Vec<AnchorTarget> {
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![usize::MAX; anchors.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    for (i, row) in ious.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best_iou[i] || best_gt[i] == usize::MAX {
                best_iou[i] = v;
                best_gt[i] = j;
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    // 1 positive, 0 negative, -1 ignored
    let mut label: Vec<i8> = best_iou
        .iter()
        .map(|&v| {
            if v >= cfg.positive_iou {
                1
            } else if v <= cfg.negative_iou {
                0
            } else {
                -1
            }
        })
        .collect();
    for (i, row) in ious.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if gt_best[j] > 0.0 && v == gt_best[j] {
                label[i] = 1;
                best_gt[i] = j;
            }
        }
    }
    let mut pos: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == 1).collect();
    let mut neg: Vec<usize> = (0..anchors.len()).filter(|&i| label[i] == 0).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let max_pos = (cfg.batch_size as f64 * cfg.positive_fraction).round() as usize;
    pos.truncate(max_pos);
    neg.truncate(cfg.batch_size - pos.len());
    let mut out: Vec<AnchorTarget> = pos
        .into_iter()
        .map(|i| AnchorTarget { index: i, positive: true, target: encode_deltas(&anchors[i], &gts[best_gt[i]]) })
        .chain(neg.into_iter().map(|i| AnchorTarget { index: i, positive: false, target: [0.0; 4] }))
        .collect();
    out.sort_by_key(|t| t.index);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> AnchorSampling {
        AnchorSampling { batch_size: 8, positive_fraction: 0.5, positive_iou: 0.7, negative_iou: 0.3 }
    }

    #[test]
    fn anchor_layout_is_position_major() {
        let a = generate_anchors(2, 3, 8, &[4.0, 8.0], 24.0, 16.0);
        assert_eq!(a.len(), 12);
        // (y=1, x=2, a=1)
        let b = a[(3 + 2) * 2 + 1];
        assert_eq!(b, BoundingBox::new(16.0, 8.0, 24.0, 16.0));
    }

    #[test]
    fn zero_logits_keep_anchor_order() {
        let anchors = generate_anchors(2, 2, 8, &[8.0], 16.0, 16.0);
        let raw = RpnRaw { objectness_logits: vec![0.0; 4], deltas: vec![0.0; 16] };
        let p = select_proposals(&raw, &anchors, 100, 0.7, 16.0, 16.0);
        assert_eq!(p.iter().map(|p| p.anchor_index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(p.iter().all(|p| p.objectness == 0.5));
        let two = select_proposals(&raw, &anchors, 2, 0.7, 16.0, 16.0);
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn every_gt_gets_a_positive_anchor() {
        let anchors = generate_anchors(4, 4, 8, &[12.0], 32.0, 32.0);
        let gts = [BoundingBox::new(3.0, 5.0, 14.0, 13.0), BoundingBox::new(18.0, 17.0, 30.0, 31.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_anchor_targets(&anchors, &gts, &cfg(), &mut rng);
        assert!(t.iter().filter(|t| t.positive).count() >= 2);
        assert!(t.len() <= 8);
        assert!(t.windows(2).all(|w| w[0].index < w[1].index));
        for t in t.iter().filter(|t| !t.positive) {
            assert!(gts.iter().all(|g| iou(&anchors[t.index], g) <= 0.3));
        }
    }

    #[test]
    fn no_gt_means_all_negative() {
        let anchors = generate_anchors(2, 2, 8, &[8.0], 16.0, 16.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_anchor_targets(&anchors, &[], &cfg(), &mut rng);
        assert_eq!(t.len(), 4);
        assert!(t.iter().all(|t| !t.positive));
    }
}
