use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    distill_loss_with_grad, l2_mean, l2_mean_grad, roi_head_loss_with_grad, rpn_loss_with_grad, task_loss,
    DistillInputs, KlDirection, LossBundle, LossDiagnostics,
};
use crate::task_stream::{Annotation, BoundingBox, ClassId};
use crate::tensor::Tensor;

use super::model::{apply_mask, DetectorModel, ImageForward};
use super::params::Gradients;
use super::roi::{roi_pool_backward, sample_roi_targets, RoiTarget};
use super::rpn::{sample_anchor_targets, AnchorTarget};

/// The sampled anchors and RoIs of one training step. Fixing the plan makes
/// the objective a smooth function of the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub anchors: Vec<AnchorTarget>,
    pub rois: Vec<RoiTarget>,
    /// Every proposal of the current model; the head distillation set.
    pub distill_rois: Vec<BoundingBox>,
}

/// Frozen (or EMA) teacher and the classes it is distilled on.
#[derive(Clone, Copy, Debug)]
pub struct Distillation<'a> {
    pub teacher: &'a DetectorModel,
    pub old_classes: &'a BTreeSet<ClassId>,
    pub direction: KlDirection,
    /// Unlabeled images whose backbone features are also distilled.
    pub aux_images: &'a [Tensor],
}

#[derive(Clone, Copy, Debug)]
pub struct TaskObjective<'a> {
    pub alpha: f64,
    pub distill: Option<Distillation<'a>>,
}

impl TaskObjective<'_> {
    /// Detection loss only.
    pub fn detection() -> Self {
        Self { alpha: 0.0, distill: None }
    }
}

impl DetectorModel {
    /// Samples anchor and RoI targets for one image from a forward pass.
    pub fn plan_step<R: Rng + ?Sized>(&self, fwd: &ImageForward, annotations: &[Annotation], rng: &mut R) -> StepPlan {
        let gts: Vec<BoundingBox> = annotations.iter().map(|a| a.bbox).collect();
        let anchors = sample_anchor_targets(self.anchors(), &gts, &self.config().anchor_sampling, rng);
        let proposals: Vec<BoundingBox> = self.proposals(&fwd.rpn.raw).into_iter().map(|p| p.bbox).collect();
        let rois = sample_roi_targets(&proposals, annotations, &self.config().roi_sampling, rng);
        StepPlan { anchors, rois, distill_rois: proposals }
    }
}

/// Per-image task loss under a fixed plan; accumulates gradients into the
/// active slots of `grads`.
///
/// Distillation is ignored when `objective.distill` is `None`, in which case
/// the loss is the plain detection loss regardless of `alpha`.
pub fn task_objective(
    model: &DetectorModel,
    image: &Tensor,
    plan: &StepPlan,
    objective: &TaskObjective<'_>,
    forward: Option<ImageForward>,
    grads: &mut Gradients,
    diag: &mut LossDiagnostics,
) -> Result<LossBundle> {
    if !(0.0..=1.0).contains(&objective.alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {}", objective.alpha)));
    }
    let alpha = if objective.distill.is_some() { objective.alpha } else { 0.0 };
    let w_det = 1.0 - alpha;
    let backward = grads.any_active();
    let mask = model.logit_mask()?;
    let lambda = model.config().box_lambda;
    let fwd = match forward {
        Some(f) => f,
        None => model.forward_image(image)?,
    };
    let features = fwd.backbone.output();
    let raw = &fwd.rpn.raw;

    // proposal stage
    let n_anchor = plan.anchors.len().max(1) as f64;
    let mut rpn = 0.0;
    let mut d_obj = vec![0.0; raw.objectness_logits.len()];
    let mut d_del = vec![0.0; raw.deltas.len()];
    for t in &plan.anchors {
        let target = if t.positive { 1.0 } else { 0.0 };
        let pred = &raw.deltas[t.index * 4..t.index * 4 + 4];
        let (v, dl, db) = rpn_loss_with_grad(raw.objectness_logits[t.index], target, pred, &t.target, lambda)?;
        rpn += v / n_anchor;
        d_obj[t.index] += w_det * dl / n_anchor;
        for k in 0..4 {
            d_del[t.index * 4 + k] += w_det * db[k] / n_anchor;
        }
    }

    // RoI head
    let k1 = model.num_logits();
    let boxes: Vec<BoundingBox> = plan.rois.iter().map(|r| r.bbox).collect();
    let rows = boxes.len();
    let mut roi = 0.0;
    let mut d_logits = vec![0.0; rows * k1];
    let mut d_boxes = vec![0.0; rows * 4];
    let head = if rows > 0 {
        let (pooled, argmax) = model.pool_batch(features, &boxes);
        let head = model.head_trace(&pooled)?;
        for (r, t) in plan.rois.iter().enumerate() {
            let mut logits = head.logits[r * k1..(r + 1) * k1].to_vec();
            apply_mask(&mut logits, &mask);
            let g =
                roi_head_loss_with_grad(&logits, t.class_id, &head.boxes[r * 4..r * 4 + 4], &t.target, lambda, diag)?;
            roi += g.value / rows as f64;
            for (d, gi) in d_logits[r * k1..(r + 1) * k1].iter_mut().zip(&g.d_logits) {
                *d = w_det * gi / rows as f64;
            }
            for k in 0..4 {
                d_boxes[r * 4 + k] = w_det * g.d_box[k] / rows as f64;
            }
        }
        Some((pooled, argmax, head))
    } else {
        None
    };

    // distillation
    let mut distill = 0.0;
    let mut d_features = vec![0.0; features.len()];
    let mut aux_traces = Vec::new();
    let mut distill_head = None;
    if let Some(d) = &objective.distill {
        let teacher_features = d.teacher.backbone_trace(image)?;
        // both heads see the student's pooled proposals
        let heads = if plan.distill_rois.is_empty() {
            None
        } else {
            let (pooled, argmax) = model.pool_batch(features, &plan.distill_rois);
            let h = model.head_trace(&pooled)?;
            let th = d.teacher.head_trace(&pooled)?;
            Some((argmax, h, th))
        };
        let (t_logits, t_boxes, s_logits, s_boxes) = match &heads {
            Some((_, h, th)) => (th.logits.as_slice(), th.boxes.as_slice(), h.logits.as_slice(), h.boxes.as_slice()),
            None => (&[][..], &[][..], &[][..], &[][..]),
        };
        let g = distill_loss_with_grad(
            &DistillInputs {
                features_current: features.data(),
                features_previous: teacher_features.output().data(),
                logits_current: s_logits,
                logits_previous: t_logits,
                boxes_current: s_boxes,
                boxes_previous: t_boxes,
                num_logits: k1,
            },
            d.old_classes,
            d.direction,
        )?;
        distill += g.terms.total();
        d_features.iter_mut().zip(&g.d_features).for_each(|(a, b)| *a += alpha * b);
        if let Some((argmax, h, th)) = heads {
            let scale = |v: &[f64]| v.iter().map(|x| alpha * x).collect::<Vec<_>>();
            distill_head = Some((
                d.teacher,
                argmax,
                h,
                th,
                [scale(&g.d_logits), scale(&g.d_boxes), scale(&g.d_logits_previous), scale(&g.d_boxes_previous)],
            ));
        }
        for aux in d.aux_images {
            let cur = model.backbone_trace(aux)?;
            let prev = d.teacher.backbone_trace(aux)?;
            distill += l2_mean(cur.output().data(), prev.output().data())?;
            if backward {
                let mut grad = l2_mean_grad(cur.output().data(), prev.output().data());
                grad.iter_mut().for_each(|v| *v *= alpha);
                aux_traces.push((cur, grad));
            }
        }
    }

    let task = task_loss(distill, rpn, roi, alpha)?;
    let bundle = LossBundle { rpn, roi_head: roi, distill, task, warp: None };
    if !backward {
        return Ok(bundle);
    }

    let mut d_f = Tensor::from_vec(features.shape(), d_features);
    if let Some((_, argmax, h)) = &head {
        let d_pooled = model.head_backward(h, &d_logits, &d_boxes, grads, true).expect("input grad");
        roi_pool_backward(d_pooled.data(), argmax, d_f.data_mut());
    }
    if let Some((teacher, argmax, h, th, [dl, db, dl_prev, db_prev])) = &distill_head {
        // the teacher head is frozen but its input is the student's pooled features
        let mut d_pooled = model.head_backward(h, dl, db, grads, true).expect("input grad");
        let mut frozen = Gradients::inactive(teacher.params());
        d_pooled.add_assign(&teacher.head_backward(th, dl_prev, db_prev, &mut frozen, true).expect("input grad"));
        roi_pool_backward(d_pooled.data(), argmax, d_f.data_mut());
    }
    d_f.add_assign(&model.rpn_backward(&fwd.rpn, &d_obj, &d_del, grads));
    model.backbone_backward(&fwd.backbone, d_f, grads);
    for (trace, grad) in aux_traces {
        let shape = trace.output().shape().to_vec();
        model.backbone_backward(&trace, Tensor::from_vec(&shape, grad), grads);
    }
    Ok(bundle)
}

/// Sum of per-RoI head losses over stored `[C, R, P, P]` features with their
/// labels; gradients stop at the features.
pub fn warp_objective(
    model: &DetectorModel,
    pooled: &Tensor,
    labels: &[(ClassId, [f64; 4])],
    grads: &mut Gradients,
    diag: &mut LossDiagnostics,
) -> Result<f64> {
    if pooled.shape().get(1) != Some(&labels.len()) {
        return Err(Error::Shape(format!("{} labels for pooled batch {:?}", labels.len(), pooled.shape())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mask = model.logit_mask()?;
    let k1 = model.num_logits();
    let head = model.head_trace(pooled)?;
    let mut total = 0.0;
    let mut d_logits = vec![0.0; labels.len() * k1];
    let mut d_boxes = vec![0.0; labels.len() * 4];
    for (r, (class_id, target)) in labels.iter().enumerate() {
        let mut logits = head.logits[r * k1..(r + 1) * k1].to_vec();
        apply_mask(&mut logits, &mask);
        let g = roi_head_loss_with_grad(&logits, *class_id, &head.boxes[r * 4..r * 4 + 4], target, 1.0, diag)?;
        total += g.value;
        d_logits[r * k1..(r + 1) * k1].copy_from_slice(&g.d_logits);
        d_boxes[r * 4..r * 4 + 4].copy_from_slice(&g.d_box);
    }
    if grads.any_active() {
        model.head_backward(&head, &d_logits, &d_boxes, grads, false);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorConfig, ParamRole};
    use crate::task_stream::ClassId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn mini_config() -> DetectorConfig {
        let mut c = DetectorConfig {
            image_size: 16,
            num_classes: 3,
            backbone_channels: vec![4, 6],
            backbone_strides: vec![2, 2],
            rpn_channels: 4,
            anchor_sizes: vec![6.0, 10.0],
            proposals: 8,
            pool_size: 2,
            head_blocks: 2,
            head_bottleneck: 3,
            warp_blocks: vec![1],
            ..Default::default()
        };
        c.anchor_sampling.batch_size = 8;
        c.roi_sampling.batch_size = 6;
        c.roi_sampling.foreground_fraction = 0.5;
        c
    }

    fn setup(seed: u64) -> (DetectorModel, Tensor, Vec<Annotation>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = mini_config();
        cfg.init_seed = seed;
        let mut m = DetectorModel::new(cfg).unwrap();
        // larger head weights so the check is not dominated by near-zero terms
        for p in m.params_mut().iter_mut() {
            if p.name.starts_with("head.cls") || p.name.starts_with("head.bbox") || p.name.contains("bias") {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        m.add_seen_classes([ClassId(1), ClassId(2)]).unwrap();
        let img = Tensor::from_vec(&[3, 16, 16], (0..768).map(|_| rng.random::<f64>()).collect());
        let ann = vec![
            Annotation { bbox: BoundingBox::new(1.0, 2.0, 9.0, 8.0), class_id: ClassId(1) },
            Annotation { bbox: BoundingBox::new(7.0, 6.0, 15.0, 15.0), class_id: ClassId(2) },
        ];
        (m, img, ann)
    }

    fn loss_at(m: &DetectorModel, img: &Tensor, plan: &StepPlan, obj: &TaskObjective<'_>) -> f64 {
        let mut g = Gradients::zeros_like(m.params(), |_| false);
        task_objective(m, img, plan, obj, None, &mut g, &mut LossDiagnostics::default()).unwrap().task
    }

    #[test]
    fn task_gradient_matches_finite_differences() {
        let (m, img, ann) = setup(11);
        let mut teacher = m.clone();
        for v in teacher.params_mut().values_mut() {
            v.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.05 * ((i % 7) as f64 - 3.0) / 3.0);
        }
        let old: BTreeSet<ClassId> = [ClassId(1)].into();
        let aux = [img.clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fwd = m.forward_image(&img).unwrap();
        let plan = m.plan_step(&fwd, &ann, &mut rng);
        assert!(plan.rois.iter().any(|r| !r.class_id.is_background()));

        let obj = TaskObjective {
            alpha: 0.3,
            distill: Some(Distillation {
                teacher: &teacher,
                old_classes: &old,
                direction: KlDirection::TeacherToStudent,
                aux_images: &aux,
            }),
        };
        let mut g = Gradients::for_role(m.params(), ParamRole::Task);
        task_objective(&m, &img, &plan, &obj, None, &mut g, &mut LossDiagnostics::default()).unwrap();
        let h = 1e-6;
        for (pi, p) in m.params().iter().enumerate() {
            let id = m.params().id_of(&p.name).unwrap();
            let mut num = Vec::new();
            let mut ana = Vec::new();
            for j in (0..p.value.len()).step_by(1 + p.value.len() / 6) {
                let mut plus = m.clone();
                plus.params_mut().get_mut(id).data_mut()[j] += h;
                let mut minus = m.clone();
                minus.params_mut().get_mut(id).data_mut()[j] -= h;
                num.push((loss_at(&plus, &img, &plan, &obj) - loss_at(&minus, &img, &plan, &obj)) / (2.0 * h));
                ana.push(g.get(id).data()[j]);
            }
            if p.role == ParamRole::Warp {
                assert!(ana.iter().all(|v| *v == 0.0), "warp grad leaked into {}", p.name);
                continue;
            }
            let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale =
                num.iter().map(|v| v * v).sum::<f64>().sqrt().max(ana.iter().map(|v| v * v).sum::<f64>().sqrt());
            assert!(diff <= 1e-4 * scale.max(1e-8), "{pi} {}: {ana:?} vs {num:?}", p.name);
        }
    }
}
