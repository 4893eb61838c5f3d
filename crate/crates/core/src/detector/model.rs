use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::rank_by_score;
use crate::task_stream::{decode_deltas, BoundingBox, ClassId};
use crate::tensor::{relu_backward_inplace, relu_inplace, softmax, Tensor};

use super::layers::{Conv2d, ConvCache, Linear};
use super::params::{Gradients, ParamRole, ParamSet};
use super::roi::{roi_pool, unweighted_deltas, RoiSampling};
use super::rpn::{generate_anchors, greedy_nms, select_proposals, AnchorSampling, Proposal, RpnRaw};

/// Logit assigned to classes the model has not been taught yet.
pub const MASK_SENTINEL: f64 = -1e10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Input images are `in_channels × image_size × image_size`.
    pub image_size: usize,
    pub in_channels: usize,
    /// Foreground class count K; the head emits K+1 logits.
    pub num_classes: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub rpn_channels: usize,
    /// Square anchor side lengths in pixels, one aspect ratio.
    pub anchor_sizes: Vec<f64>,
    pub proposals: usize,
    pub proposal_nms: f64,
    pub anchor_sampling: AnchorSampling,
    pub pool_size: usize,
    pub head_blocks: usize,
    pub head_bottleneck: usize,
    /// Residual blocks whose middle conv is a warp layer.
    pub warp_blocks: Vec<usize>,
    pub roi_sampling: RoiSampling,
    /// λ weighting the localisation terms.
    pub box_lambda: f64,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            num_classes: 20,
            backbone_channels: vec![16, 32, 32, 32],
            backbone_strides: vec![2, 2, 2, 1],
            rpn_channels: 32,
            anchor_sizes: vec![12.0, 18.0, 26.0],
            proposals: 64,
            proposal_nms: 0.7,
            anchor_sampling: AnchorSampling {
                batch_size: 32,
                positive_fraction: 0.5,
                positive_iou: 0.7,
                negative_iou: 0.3,
            },
            pool_size: 4,
            head_blocks: 3,
            head_bottleneck: 16,
            warp_blocks: vec![2],
            roi_sampling: RoiSampling { batch_size: 32, foreground_fraction: 0.25, foreground_iou: 0.5 },
            box_lambda: 1.0,
            init_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("rpn_channels", self.rpn_channels),
            ("proposals", self.proposals),
            ("pool_size", self.pool_size),
            ("head_bottleneck", self.head_bottleneck),
            ("anchor_sampling.batch_size", self.anchor_sampling.batch_size),
            ("roi_sampling.batch_size", self.roi_sampling.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.len() != self.backbone_strides.len() {
            return Err(Error::config("backbone_channels and backbone_strides must be non-empty and equal length"));
        }
        if self.backbone_channels.contains(&0) || self.backbone_strides.contains(&0) {
            return Err(Error::config("backbone channels and strides must be positive"));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("anchor_sizes must be non-empty and positive"));
        }
        let unique: BTreeSet<usize> = self.warp_blocks.iter().copied().collect();
        if unique.len() != self.warp_blocks.len() || unique.iter().any(|&b| b >= self.head_blocks) {
            return Err(Error::config(format!(
                "warp_blocks must be distinct indices below head_blocks ({})",
                self.head_blocks
            )));
        }
        for (name, v) in [
            ("proposal_nms", self.proposal_nms),
            ("anchor_sampling.positive_fraction", self.anchor_sampling.positive_fraction),
            ("anchor_sampling.positive_iou", self.anchor_sampling.positive_iou),
            ("anchor_sampling.negative_iou", self.anchor_sampling.negative_iou),
            ("roi_sampling.foreground_fraction", self.roi_sampling.foreground_fraction),
            ("roi_sampling.foreground_iou", self.roi_sampling.foreground_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.box_lambda < 0.0 || !self.box_lambda.is_finite() {
            return Err(Error::config("box_lambda must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }

    pub fn total_stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    /// Spatial side of the backbone output.
    pub fn feature_size(&self) -> usize {
        self.backbone_strides.iter().fold(self.image_size, |s, st| s.div_ceil(*st))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock {
    reduce: Conv2d,
    mid: Conv2d,
    expand: Conv2d,
}

/// Class logits (index 0 = background) and class-agnostic box deltas for one RoI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub class_logits: Vec<f64>,
    pub box_deltas: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: ClassId,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct BackboneTrace {
    layers: Vec<(ConvCache, Tensor)>,
}

impl BackboneTrace {
    /// `[C, 1, H, W]` feature map.
    pub fn output(&self) -> &Tensor {
        &self.layers.last().expect("backbone has layers").1
    }
}

#[derive(Clone, Debug)]
pub struct RpnTrace {
    conv: ConvCache,
    hidden: Tensor,
    objectness: ConvCache,
    deltas: ConvCache,
    pub raw: RpnRaw,
}

#[derive(Clone, Debug)]
struct BlockTrace {
    reduce: ConvCache,
    a1: Tensor,
    mid: ConvCache,
    a2: Tensor,
    expand: ConvCache,
    out: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadTrace {
    blocks: Vec<BlockTrace>,
    flat: Vec<f64>,
    pub rows: usize,
    /// Row-major `[R, K+1]`, unmasked.
    pub logits: Vec<f64>,
    /// Row-major `[R, 4]`.
    pub boxes: Vec<f64>,
}

/// Backbone and proposal-stage activations for one image.
#[derive(Clone, Debug)]
pub struct ImageForward {
    pub backbone: BackboneTrace,
    pub rpn: RpnTrace,
}

/// Backbone → proposal stage → RoI pooling → residual RoI head.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    config: DetectorConfig,
    params: ParamSet,
    backbone: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_objectness: Conv2d,
    rpn_deltas: Conv2d,
    blocks: Vec<ResidualBlock>,
    cls_head: Linear,
    box_head: Linear,
    anchors: Vec<BoundingBox>,
    seen_classes: BTreeSet<ClassId>,
}

impl DetectorModel {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamSet::new();
        let task = ParamRole::Task;
        let mut backbone = Vec::new();
        let mut in_ch = config.in_channels;
        for (i, (&out_ch, &stride)) in config.backbone_channels.iter().zip(&config.backbone_strides).enumerate() {
            backbone.push(Conv2d::new(
                &mut params,
                &format!("backbone.conv{i}"),
                task,
                in_ch,
                out_ch,
                3,
                stride,
                1.0,
                &mut rng,
            ));
            in_ch = out_ch;
        }
        let c = config.feature_channels();
        let a = config.anchor_sizes.len();
        let rpn_conv = Conv2d::new(&mut params, "rpn.conv", task, c, config.rpn_channels, 3, 1, 1.0, &mut rng);
        let rpn_objectness =
            Conv2d::new(&mut params, "rpn.objectness", task, config.rpn_channels, a, 1, 1, 0.1, &mut rng);
        let rpn_deltas = Conv2d::new(&mut params, "rpn.deltas", task, config.rpn_channels, 4 * a, 1, 1, 0.1, &mut rng);
        let mut blocks = Vec::new();
        for b in 0..config.head_blocks {
            let mid_role = if config.warp_blocks.contains(&b) { ParamRole::Warp } else { task };
            let m = config.head_bottleneck;
            blocks.push(ResidualBlock {
                reduce: Conv2d::new(&mut params, &format!("head.block{b}.reduce"), task, c, m, 1, 1, 1.0, &mut rng),
                mid: Conv2d::new(&mut params, &format!("head.block{b}.mid"), mid_role, m, m, 3, 1, 1.0, &mut rng),
                expand: Conv2d::new(&mut params, &format!("head.block{b}.expand"), task, m, c, 1, 1, 0.1, &mut rng),
            });
        }
        let flat = c * config.pool_size * config.pool_size;
        let cls_head = Linear::new(&mut params, "head.cls", task, flat, config.num_classes + 1, 0.01, &mut rng);
        let box_head = Linear::new(&mut params, "head.bbox", task, flat, 4, 0.001, &mut rng);
        let fs = config.feature_size();
        let side = config.image_size as f64;
        let anchors = generate_anchors(fs, fs, config.total_stride(), &config.anchor_sizes, side, side);
        Ok(Self {
            config,
            params,
            backbone,
            rpn_conv,
            rpn_objectness,
            rpn_deltas,
            blocks,
            cls_head,
            box_head,
            anchors,
            seen_classes: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn anchors(&self) -> &[BoundingBox] {
        &self.anchors
    }

    pub fn num_logits(&self) -> usize {
        self.config.num_classes + 1
    }

    pub fn seen_classes(&self) -> &BTreeSet<ClassId> {
        &self.seen_classes
    }

    /// Registers classes as seen; ids must be in `1..=K`.
    pub fn add_seen_classes(&mut self, classes: impl IntoIterator<Item = ClassId>) -> Result<()> {
        for c in classes {
            if c.is_background() || c.index() > self.config.num_classes {
                return Err(Error::invalid(format!("class id {c} outside 1..={}", self.config.num_classes)));
            }
            self.seen_classes.insert(c);
        }
        Ok(())
    }

    pub fn set_seen_classes(&mut self, classes: BTreeSet<ClassId>) -> Result<()> {
        self.seen_classes.clear();
        self.add_seen_classes(classes)
    }

    /// Names of all parameters living in the RoI head.
    pub fn head_param_names(&self) -> BTreeSet<String> {
        self.params.iter().filter(|p| p.name.starts_with("head.")).map(|p| p.name.clone()).collect()
    }

    /// Number of warp layers per residual block, in block order.
    pub fn warp_layers_per_block(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| {
                [&b.reduce, &b.mid, &b.expand]
                    .iter()
                    .filter(|conv| self.params.role(conv.weight) == ParamRole::Warp)
                    .count()
            })
            .collect()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [self.config.in_channels, self.config.image_size, self.config.image_size];
        if image.shape() != want {
            return Err(Error::Shape(format!("expected image {:?}, got {:?}", want, image.shape())));
        }
        Ok(())
    }

    pub fn backbone_trace(&self, image: &Tensor) -> Result<BackboneTrace> {
        self.check_image(image)?;
        let s = image.shape();
        let mut x = image.clone().reshape(&[s[0], 1, s[1], s[2]]);
        let mut layers = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let (mut y, cache) = conv.forward(&self.params, &x);
            relu_inplace(y.data_mut());
            layers.push((cache, y.clone()));
            x = y;
        }
        Ok(BackboneTrace { layers })
    }

    /// `[C, H/stride, W/stride]` feature map.
    pub fn backbone_forward(&self, image: &Tensor) -> Result<Tensor> {
        let out = self.backbone_trace(image)?.output().clone();
        let s = out.shape().to_vec();
        Ok(out.reshape(&[s[0], s[2], s[3]]))
    }

    fn as_batched(&self, features: &Tensor) -> Result<Tensor> {
        let fs = self.config.feature_size();
        let c = self.config.feature_channels();
        match features.shape() {
            [ch, h, w] if *ch == c && *h == fs && *w == fs => Ok(features.clone().reshape(&[c, 1, fs, fs])),
            [ch, 1, h, w] if *ch == c && *h == fs && *w == fs => Ok(features.clone()),
            s => Err(Error::Shape(format!("expected feature map [{c}, {fs}, {fs}], got {s:?}"))),
        }
    }

    pub fn rpn_trace(&self, features: &Tensor) -> Result<RpnTrace> {
        let x = self.as_batched(features)?;
        let (mut hidden, conv) = self.rpn_conv.forward(&self.params, &x);
        relu_inplace(hidden.data_mut());
        let (obj, objectness) = self.rpn_objectness.forward(&self.params, &hidden);
        let (del, deltas) = self.rpn_deltas.forward(&self.params, &hidden);
        let a = self.config.anchor_sizes.len();
        let hw = self.config.feature_size().pow(2);
        let mut logits = vec![0.0; hw * a];
        let mut d = vec![0.0; hw * a * 4];
        for pos in 0..hw {
            for ai in 0..a {
                let idx = pos * a + ai;
                logits[idx] = obj.data()[ai * hw + pos];
                for k in 0..4 {
                    d[idx * 4 + k] = del.data()[(ai * 4 + k) * hw + pos];
                }
            }
        }
        Ok(RpnTrace { conv, hidden, objectness, deltas, raw: RpnRaw { objectness_logits: logits, deltas: d } })
    }

    pub fn proposals(&self, raw: &RpnRaw) -> Vec<Proposal> {
        let side = self.config.image_size as f64;
        select_proposals(raw, &self.anchors, self.config.proposals, self.config.proposal_nms, side, side)
    }

    pub fn rpn_forward(&self, features: &Tensor) -> Result<(Vec<Proposal>, RpnRaw)> {
        let raw = self.rpn_trace(features)?.raw;
        Ok((self.proposals(&raw), raw))
    }

    pub fn forward_image(&self, image: &Tensor) -> Result<ImageForward> {
        let backbone = self.backbone_trace(image)?;
        let rpn = self.rpn_trace(backbone.output())?;
        Ok(ImageForward { backbone, rpn })
    }

    /// Pooled features `[C, R, P, P]` for `boxes`, plus argmax indices.
    pub fn pool_batch(&self, features: &Tensor, boxes: &[BoundingBox]) -> (Tensor, Vec<usize>) {
        roi_pool(features, boxes, self.config.total_stride(), self.config.pool_size)
    }

    /// `[C, P, P]` RoI feature for one box.
    pub fn roi_pool(&self, features: &Tensor, bbox: &BoundingBox) -> Result<Tensor> {
        let f = self.as_batched(features)?;
        let (p, _) = self.pool_batch(&f, std::slice::from_ref(bbox));
        let s = p.shape().to_vec();
        Ok(p.reshape(&[s[0], s[2], s[3]]))
    }

    pub fn head_trace(&self, pooled: &Tensor) -> Result<HeadTrace> {
        let c = self.config.feature_channels();
        let p = self.config.pool_size;
        let s = pooled.shape();
        if s.len() != 4 || s[0] != c || s[2] != p || s[3] != p {
            return Err(Error::Shape(format!("expected pooled [{c}, R, {p}, {p}], got {s:?}")));
        }
        let rows = s[1];
        let mut x = pooled.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (mut a1, reduce) = b.reduce.forward(&self.params, &x);
            relu_inplace(a1.data_mut());
            let (mut a2, mid) = b.mid.forward(&self.params, &a1);
            relu_inplace(a2.data_mut());
            let (mut out, expand) = b.expand.forward(&self.params, &a2);
            out.add_assign(&x);
            relu_inplace(out.data_mut());
            x = out.clone();
            blocks.push(BlockTrace { reduce, a1, mid, a2, expand, out });
        }
        let pp = p * p;
        let feat = c * pp;
        let mut flat = vec![0.0; rows * feat];
        for ch in 0..c {
            for r in 0..rows {
                let src = (ch * rows + r) * pp;
                flat[r * feat + ch * pp..r * feat + (ch + 1) * pp].copy_from_slice(&x.data()[src..src + pp]);
            }
        }
        let logits = self.cls_head.forward(&self.params, &flat, rows);
        let boxes = self.box_head.forward(&self.params, &flat, rows);
        Ok(HeadTrace { blocks, flat, rows, logits, boxes })
    }

    /// Backpropagates head-output gradients; returns the pooled-feature
    /// gradient when `need_input_grad`.
    pub fn head_backward(
        &self,
        trace: &HeadTrace,
        d_logits: &[f64],
        d_boxes: &[f64],
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let rows = trace.rows;
        let c = self.config.feature_channels();
        let p = self.config.pool_size;
        let pp = p * p;
        let feat = c * pp;
        let mut d_flat = self.cls_head.backward(&self.params, &trace.flat, d_logits, rows, grads);
        let d_flat_box = self.box_head.backward(&self.params, &trace.flat, d_boxes, rows, grads);
        d_flat.iter_mut().zip(&d_flat_box).for_each(|(a, b)| *a += b);
        let mut d = vec![0.0; rows * feat];
        for ch in 0..c {
            for r in 0..rows {
                let dst = (ch * rows + r) * pp;
                d[dst..dst + pp].copy_from_slice(&d_flat[r * feat + ch * pp..r * feat + (ch + 1) * pp]);
            }
        }
        let mut d = Tensor::from_vec(&[c, rows, p, p], d);
        for (bi, (b, t)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            relu_backward_inplace(d.data_mut(), t.out.data());
            let mut d_a2 = b.expand.backward(&self.params, &t.expand, &d, grads, true).expect("input grad");
            relu_backward_inplace(d_a2.data_mut(), t.a2.data());
            let mut d_a1 = b.mid.backward(&self.params, &t.mid, &d_a2, grads, true).expect("input grad");
            relu_backward_inplace(d_a1.data_mut(), t.a1.data());
            let need = need_input_grad || bi > 0;
            if let Some(dx) = b.reduce.backward(&self.params, &t.reduce, &d_a1, grads, need) {
                d.add_assign(&dx);
            }
        }
        need_input_grad.then_some(d)
    }

    /// Backpropagates per-anchor gradients through the proposal stage and
    /// returns the feature-map gradient.
    pub fn rpn_backward(&self, trace: &RpnTrace, d_logits: &[f64], d_deltas: &[f64], grads: &mut Gradients) -> Tensor {
        let a = self.config.anchor_sizes.len();
        let fs = self.config.feature_size();
        let hw = fs * fs;
        let mut d_obj = vec![0.0; a * hw];
        let mut d_del = vec![0.0; 4 * a * hw];
        for pos in 0..hw {
            for ai in 0..a {
                let idx = pos * a + ai;
                d_obj[ai * hw + pos] = d_logits[idx];
                for k in 0..4 {
                    d_del[(ai * 4 + k) * hw + pos] = d_deltas[idx * 4 + k];
                }
            }
        }
        let mut dh = self
            .rpn_objectness
            .backward(&self.params, &trace.objectness, &Tensor::from_vec(&[a, 1, fs, fs], d_obj), grads, true)
            .expect("input grad");
        let dh2 = self
            .rpn_deltas
            .backward(&self.params, &trace.deltas, &Tensor::from_vec(&[4 * a, 1, fs, fs], d_del), grads, true)
            .expect("input grad");
        dh.add_assign(&dh2);
        relu_backward_inplace(dh.data_mut(), trace.hidden.data());
        self.rpn_conv.backward(&self.params, &trace.conv, &dh, grads, true).expect("input grad")
    }

    pub fn backbone_backward(&self, trace: &BackboneTrace, d_features: Tensor, grads: &mut Gradients) {
        let mut d = d_features;
        for (i, (conv, (cache, act))) in self.backbone.iter().zip(&trace.layers).enumerate().rev() {
            relu_backward_inplace(d.data_mut(), act.data());
            match conv.backward(&self.params, cache, &d, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Head outputs for one `[C, P, P]` RoI feature.
    pub fn roi_head_forward(&self, roi_feature: &Tensor) -> Result<HeadOutput> {
        let s = roi_feature.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected RoI feature [C, P, P], got {s:?}")));
        }
        let t = self.head_trace(&roi_feature.clone().reshape(&[s[0], 1, s[1], s[2]]))?;
        Ok(HeadOutput { class_logits: t.logits, box_deltas: [t.boxes[0], t.boxes[1], t.boxes[2], t.boxes[3]] })
    }

    /// `true` for background and every seen class.
    pub fn logit_mask(&self) -> Result<Vec<bool>> {
        logit_mask(self.config.num_classes, &self.seen_classes)
    }

    pub fn mask_unseen_logits(&self, output: &HeadOutput) -> Result<HeadOutput> {
        mask_unseen_logits(output, &self.seen_classes)
    }

    /// Full inference: proposals, head, masking, softmax, per-class NMS and a
    /// global cap of `max_dets` by score.
    pub fn detect(
        &self,
        image: &Tensor,
        score_thresh: f64,
        nms_thresh: f64,
        max_dets: usize,
    ) -> Result<Vec<ScoredBox>> {
        for (name, v) in [("score_thresh", score_thresh), ("nms_thresh", nms_thresh)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let mask = self.logit_mask()?;
        let fwd = self.forward_image(image)?;
        let proposals = self.proposals(&fwd.rpn.raw);
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BoundingBox> = proposals.iter().map(|p| p.bbox).collect();
        let (pooled, _) = self.pool_batch(fwd.backbone.output(), &boxes);
        let head = self.head_trace(&pooled)?;
        let k1 = self.num_logits();
        let side = self.config.image_size as f64;
        let mut per_class: Vec<Vec<(BoundingBox, f64)>> = vec![Vec::new(); k1];
        for (r, proposal) in boxes.iter().enumerate() {
            let mut logits = head.logits[r * k1..(r + 1) * k1].to_vec();
            apply_mask(&mut logits, &mask);
            let probs = softmax(&logits);
            let refined = decode_deltas(proposal, &unweighted_deltas(&head.boxes[r * 4..r * 4 + 4])).clip(side, side);
            if !refined.is_valid() {
                continue;
            }
            for (c, &p) in probs.iter().enumerate().skip(1) {
                if mask[c] && p > score_thresh {
                    per_class[c].push((refined, p));
                }
            }
        }
        let mut out = Vec::new();
        for (c, cands) in per_class.into_iter().enumerate() {
            let bxs: Vec<BoundingBox> = cands.iter().map(|x| x.0).collect();
            let scores: Vec<f64> = cands.iter().map(|x| x.1).collect();
            for i in greedy_nms(&bxs, &rank_by_score(&scores), nms_thresh, usize::MAX) {
                out.push(ScoredBox { bbox: bxs[i], class_id: ClassId(c), score: scores[i] });
            }
        }
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        let order = rank_by_score(&scores);
        Ok(order.into_iter().take(max_dets).map(|i| out[i].clone()).collect())
    }
}

pub fn logit_mask(num_classes: usize, seen: &BTreeSet<ClassId>) -> Result<Vec<bool>> {
    if seen.is_empty() {
        return Err(Error::invalid("at least one class must be seen before masking"));
    }
    if let Some(c) = seen.iter().find(|c| c.is_background() || c.index() > num_classes) {
        return Err(Error::invalid(format!("seen class {c} outside 1..={num_classes}")));
    }
    Ok((0..=num_classes).map(|c| c == 0 || seen.contains(&ClassId(c))).collect())
}

pub fn apply_mask(logits: &mut [f64], mask: &[bool]) {
    for (l, &keep) in logits.iter_mut().zip(mask) {
        if !keep {
            *l = MASK_SENTINEL;
        }
    }
}

/// Sets foreground logits of unseen classes to [`MASK_SENTINEL`].
pub fn mask_unseen_logits(output: &HeadOutput, seen: &BTreeSet<ClassId>) -> Result<HeadOutput> {
    let k = output.class_logits.len().checked_sub(1).ok_or_else(|| Error::Shape("head output has no logits".into()))?;
    let mask = logit_mask(k, seen)?;
    let mut out = output.clone();
    apply_mask(&mut out.class_logits, &mask);
    Ok(out)
}
