use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::iou;
use crate::task_stream::{encode_deltas, Annotation, BoundingBox, ClassId};
use crate::tensor::Tensor;

/// Scale applied to encoded box deltas so all four regression targets have
/// comparable magnitude.
pub const BOX_TARGET_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

pub fn weighted_deltas(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let d = encode_deltas(reference, target);
    std::array::from_fn(|k| d[k] * BOX_TARGET_WEIGHTS[k])
}

pub fn unweighted_deltas(d: &[f64]) -> [f64; 4] {
    std::array::from_fn(|k| d[k] / BOX_TARGET_WEIGHTS[k])
}

/// Feature-map cell range `[lo, hi)` covered by `[a, b)` in image pixels,
/// at least one cell wide.
fn cell_span(a: f64, b: f64, stride: f64, cells: usize) -> (usize, usize) {
    let lo = ((a / stride).floor().max(0.0) as usize).min(cells - 1);
    let hi = ((b / stride).ceil().max(0.0) as usize).min(cells);
    (lo, hi.max(lo + 1))
}

/// Max-pools each box into a `pool × pool` grid over `features`
/// (`[C, 1, H, W]` or `[C, H, W]`).
///
/// Returns `[C, R, pool, pool]` and, per output element, the flat feature
/// index that produced it.
pub fn roi_pool(features: &Tensor, boxes: &[BoundingBox], stride: usize, pool: usize) -> (Tensor, Vec<usize>) {
    let s = features.shape();
    let (c, h, w) = match s.len() {
        4 => (s[0], s[2], s[3]),
        3 => (s[0], s[1], s[2]),
        _ => panic!("feature map must be [C, H, W] or [C, 1, H, W]"),
    };
    let r = boxes.len();
    let pp = pool * pool;
    let data = features.data();
    let mut out = vec![0.0; c * r * pp];
    let mut arg = vec![0usize; c * r * pp];
    let stride = stride as f64;
    for (ri, b) in boxes.iter().enumerate() {
        let (x0, x1) = cell_span(b.x1, b.x2, stride, w);
        let (y0, y1) = cell_span(b.y1, b.y2, stride, h);
        let (bw, bh) = (x1 - x0, y1 - y0);
        for py in 0..pool {
            let ys = y0 + py * bh / pool;
            let ye = (y0 + ((py + 1) * bh).div_ceil(pool)).max(ys + 1);
            for px in 0..pool {
                let xs = x0 + px * bw / pool;
                let xe = (x0 + ((px + 1) * bw).div_ceil(pool)).max(xs + 1);
                for ch in 0..c {
                    let plane = ch * h * w;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = plane + ys * w + xs;
                    for y in ys..ye {
                        for x in xs..xe {
                            let i = plane + y * w + x;
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ch * r + ri) * pp + py * pool + px;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (Tensor::from_vec(&[c, r, pool, pool], out), arg)
}

/// Scatter-adds pooled gradients back onto the feature map.
pub fn roi_pool_backward(grad_pooled: &[f64], argmax: &[usize], grad_features: &mut [f64]) {
    for (g, &i) in grad_pooled.iter().zip(argmax) {
        grad_features[i] += g;
    }
}

/// Copies RoI `index` out of a `[C, R, P, P]` batch as `[C, P, P]`.
pub fn extract_roi(pooled: &Tensor, index: usize) -> Tensor {
    let s = pooled.shape();
    let (c, r, pp) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(c * pp);
    for ch in 0..c {
        let start = (ch * r + index) * pp;
        out.extend_from_slice(&pooled.data()[start..start + pp]);
    }
    Tensor::from_vec(&[c, s[2], s[3]], out)
}

/// Packs `[C, P, P]` features into a `[C, R, P, P]` batch.
pub fn stack_rois<'a>(features: impl IntoIterator<Item = &'a Tensor>) -> Tensor {
    let feats: Vec<&Tensor> = features.into_iter().collect();
    assert!(!feats.is_empty(), "cannot stack zero RoI features");
    let s = feats[0].shape().to_vec();
    let (c, pp) = (s[0], s[1] * s[2]);
    let r = feats.len();
    let mut out = vec![0.0; c * r * pp];
    for (ri, f) in feats.iter().enumerate() {
        assert_eq!(f.shape(), &s[..], "RoI feature shapes differ");
        for ch in 0..c {
            let dst = (ch * r + ri) * pp;
            out[dst..dst + pp].copy_from_slice(&f.data()[ch * pp..(ch + 1) * pp]);
        }
    }
    Tensor::from_vec(&[c, r, s[1], s[2]], out)
}

/// A RoI chosen for the head loss, with its label and weighted target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiTarget {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub target: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSampling {
    pub batch_size: usize,
    pub foreground_fraction: f64,
    pub foreground_iou: f64,
}

/// Labels a candidate box against annotations: the best-overlapping GT's
/// class and target when IoU ≥ `foreground_iou`, background otherwise.
pub fn label_roi(bbox: &BoundingBox, annotations: &[Annotation], foreground_iou: f64) -> (ClassId, [f64; 4]) {
    let mut best: Option<(f64, &Annotation)> = None;
    for a in annotations {
        let v = iou(bbox, &a.bbox);
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, a));
        }
    }
    match best {
        Some((v, a)) if v >= foreground_iou => (a.class_id, weighted_deltas(bbox, &a.bbox)),
        _ => (ClassId::BACKGROUND, [0.0; 4]),
    }
}

/// Labels proposals plus the GT boxes themselves and samples a head
/// mini-batch, foreground first.
pub fn sample_roi_targets<R: Rng + ?Sized>(
    proposals: &[BoundingBox],
    annotations: &[Annotation],
    cfg: &RoiSampling,
    rng: &mut R,
) -> Vec<RoiTarget> {
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in proposals.iter().chain(annotations.iter().map(|a| &a.bbox)) {
        let (class_id, target) = label_roi(b, annotations, cfg.foreground_iou);
        let t = RoiTarget { bbox: *b, class_id, target };
        if class_id.is_background() {
            bg.push(t);
        } else {
            fg.push(t);
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate((cfg.batch_size as f64 * cfg.foreground_fraction).round() as usize);
    bg.truncate(cfg.batch_size - fg.len());
    fg.extend(bg);
    fg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|i| ((i * 7919) % 101) as f64 - 50.0).collect();
        Tensor::from_vec(&[c, h, w], data)
    }

    #[test]
    fn full_box_is_blockwise_max() {
        let f = ramp(2, 8, 8);
        let (p, _) = roi_pool(&f, &[BoundingBox::new(0.0, 0.0, 64.0, 64.0)], 8, 4);
        for ch in 0..2 {
            for by in 0..4 {
                for bx in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for y in by * 2..by * 2 + 2 {
                        for x in bx * 2..bx * 2 + 2 {
                            m = m.max(f.data()[ch * 64 + y * 8 + x]);
                        }
                    }
                    assert_eq!(p.data()[ch * 16 + by * 4 + bx], m);
                }
            }
        }
    }

    #[test]
    fn degenerate_box_pools_one_cell() {
        let f = ramp(3, 8, 8);
        let (p, arg) = roi_pool(&f, &[BoundingBox::new(20.0, 20.0, 20.5, 20.5)], 8, 4);
        assert!(p.all_finite());
        for ch in 0..3 {
            let cell = f.data()[ch * 64 + 2 * 8 + 2];
            assert!(p.data()[ch * 16..(ch + 1) * 16].iter().all(|&v| v == cell));
        }
        assert!(arg.iter().all(|&i| i % 64 == 18));
    }

    #[test]
    fn identical_boxes_pool_identically() {
        let f = ramp(2, 8, 8);
        let b = BoundingBox::new(5.0, 9.0, 40.0, 33.0);
        let (p, _) = roi_pool(&f, &[b, b], 8, 4);
        assert_eq!(extract_roi(&p, 0), extract_roi(&p, 1));
        assert_eq!(stack_rois([&extract_roi(&p, 0), &extract_roi(&p, 1)]), p);
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let f = ramp(2, 8, 8);
        let boxes = [BoundingBox::new(0.0, 0.0, 30.0, 20.0), BoundingBox::new(10.0, 10.0, 64.0, 50.0)];
        let (p, arg) = roi_pool(&f, &boxes, 8, 4);
        let g: Vec<f64> = (0..p.len()).map(|i| (i % 5) as f64 - 2.0).collect();
        let mut gf = vec![0.0; f.len()];
        roi_pool_backward(&g, &arg, &mut gf);
        let lhs: f64 = g.iter().zip(p.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = gf.iter().zip(f.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn roi_sampling_respects_ratio_and_labels() {
        let ann = vec![Annotation { bbox: BoundingBox::new(10.0, 10.0, 30.0, 30.0), class_id: ClassId(3) }];
        let mut props: Vec<BoundingBox> =
            (0..20).map(|i| BoundingBox::new(10.0 + i as f64 * 0.2, 10.0, 30.0, 30.0)).collect();
        props.extend((0..40).map(|i| BoundingBox::new(40.0, i as f64, 60.0, i as f64 + 10.0)));
        let cfg = RoiSampling { batch_size: 32, foreground_fraction: 0.25, foreground_iou: 0.5 };
        let t = sample_roi_targets(&props, &ann, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(t.len(), 32);
        assert_eq!(t.iter().filter(|t| t.class_id == ClassId(3)).count(), 8);
        assert!(t[..8].iter().all(|t| !t.class_id.is_background()));
        assert!(t[8..].iter().all(|t| t.class_id.is_background() && t.target == [0.0; 4]));
    }
}
