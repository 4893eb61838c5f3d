//! Training objectives.
//!
//! Scalar forms take probabilities as the reference definitions. The
//! `*_with_grad` forms take logits and also return the gradient with respect
//! to those logits; they are what the backward pass consumes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorModel, ParamSet};
use crate::error::{Error, Result};
use crate::task_stream::ClassId;
use crate::tensor::{softmax, Tensor};

/// Floor applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// Counters owned by the caller.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub clamped_logs: usize,
}

/// One iteration's loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rpn: f64,
    pub roi_head: f64,
    pub distill: f64,
    pub task: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warp: Option<f64>,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.rpn, self.roi_head, self.distill, self.task].iter().all(|v| v.is_finite())
            && self.warp.is_none_or(f64::is_finite)
    }
}

/// Direction of the classification distillation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(previous || current)`: the teacher is the reference distribution.
    #[default]
    TeacherToStudent,
    /// `KL(current || previous)`.
    StudentToTeacher,
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

fn clamped_neg_log(p: f64, diag: &mut LossDiagnostics) -> f64 {
    if p < LOG_EPS {
        diag.clamped_logs += 1;
        -LOG_EPS.ln()
    } else {
        -p.ln()
    }
}

/// Sum over coordinates of `0.5 d^2` if `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target, "smooth_l1")?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
        .sum())
}

/// d smooth_l1 / d pred.
pub fn smooth_l1_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                d
            } else {
                d.signum()
            }
        })
        .collect()
}

/// Log loss of the true class plus `lambda * smooth_l1` for foreground RoIs.
pub fn roi_head_loss(
    probs: &[f64],
    true_class: ClassId,
    box_pred: &[f64],
    box_target: &[f64],
    lambda: f64,
    diag: &mut LossDiagnostics,
) -> Result<f64> {
    let p = *probs
        .get(true_class.index())
        .ok_or_else(|| Error::Shape(format!("class {true_class} outside {} probabilities", probs.len())))?;
    let cls = clamped_neg_log(p, diag);
    if true_class.is_background() {
        return Ok(cls);
    }
    Ok(cls + lambda * smooth_l1(box_pred, box_target)?)
}

/// Per-RoI term of the warp loss: [`roi_head_loss`] with unit box weight.
pub fn warp_loss_per_roi(
    probs: &[f64],
    true_class: ClassId,
    box_pred: &[f64],
    box_target: &[f64],
    diag: &mut LossDiagnostics,
) -> Result<f64> {
    roi_head_loss(probs, true_class, box_pred, box_target, 1.0, diag)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiLossGrad {
    pub value: f64,
    pub d_logits: Vec<f64>,
    pub d_box: [f64; 4],
}

/// [`roi_head_loss`] on already-masked logits, with gradients.
pub fn roi_head_loss_with_grad(
    masked_logits: &[f64],
    true_class: ClassId,
    box_pred: &[f64],
    box_target: &[f64],
    lambda: f64,
    diag: &mut LossDiagnostics,
) -> Result<RoiLossGrad> {
    let probs = softmax(masked_logits);
    let value = roi_head_loss(&probs, true_class, box_pred, box_target, lambda, diag)?;
    let mut d_logits = vec![0.0; probs.len()];
    if probs[true_class.index()] >= LOG_EPS {
        d_logits.copy_from_slice(&probs);
        d_logits[true_class.index()] -= 1.0;
    }
    let mut d_box = [0.0; 4];
    if !true_class.is_background() {
        for (d, g) in d_box.iter_mut().zip(smooth_l1_grad(box_pred, box_target)) {
            *d = lambda * g;
        }
    }
    Ok(RoiLossGrad { value, d_logits, d_box })
}

/// Binary cross-entropy on objectness plus `lambda * o* * smooth_l1`.
pub fn rpn_loss(
    objectness: f64,
    target: f64,
    box_pred: &[f64],
    box_target: &[f64],
    lambda: f64,
    diag: &mut LossDiagnostics,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&objectness) || (target != 0.0 && target != 1.0) {
        return Err(Error::invalid(format!("rpn_loss needs o in [0,1] and o* in {{0,1}}, got {objectness}, {target}")));
    }
    let cls = target * clamped_neg_log(objectness, diag) + (1.0 - target) * clamped_neg_log(1.0 - objectness, diag);
    if target == 0.0 {
        return Ok(cls);
    }
    Ok(cls + lambda * target * smooth_l1(box_pred, box_target)?)
}

/// [`rpn_loss`] from the objectness logit, in the overflow-free softplus form.
/// Returns `(value, d_logit, d_box)`.
pub fn rpn_loss_with_grad(
    logit: f64,
    target: f64,
    box_pred: &[f64],
    box_target: &[f64],
    lambda: f64,
) -> Result<(f64, f64, [f64; 4])> {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    let mut value = softplus - target * logit;
    let d_logit = crate::tensor::sigmoid(logit) - target;
    let mut d_box = [0.0; 4];
    if target > 0.0 {
        value += lambda * target * smooth_l1(box_pred, box_target)?;
        for (d, g) in d_box.iter_mut().zip(smooth_l1_grad(box_pred, box_target)) {
            *d = lambda * target * g;
        }
    }
    Ok((value, d_logit, d_box))
}

/// Mean squared difference.
pub fn l2_mean(current: &[f64], previous: &[f64]) -> Result<f64> {
    check_len(current, previous, "l2 regression")?;
    if current.is_empty() {
        return Ok(0.0);
    }
    Ok(current.iter().zip(previous).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / current.len() as f64)
}

/// d [`l2_mean`] / d current.
pub fn l2_mean_grad(current: &[f64], previous: &[f64]) -> Vec<f64> {
    let n = current.len().max(1) as f64;
    current.iter().zip(previous).map(|(a, b)| 2.0 * (a - b) / n).collect()
}

/// Indices `{0} ∪ old_classes`, ascending.
pub fn distill_support(old_classes: &BTreeSet<ClassId>) -> Vec<usize> {
    std::iter::once(0).chain(old_classes.iter().map(|c| c.index())).collect()
}

fn renormalize(p: &[f64], support: &[usize]) -> Vec<f64> {
    let total: f64 = support.iter().map(|&i| p[i]).sum();
    support.iter().map(|&i| p[i] / total).collect()
}

fn kl(reference: &[f64], other: &[f64], diag: &mut LossDiagnostics) -> f64 {
    reference
        .iter()
        .zip(other)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, o)| {
            r * (r.ln()
                - if *o < LOG_EPS {
                    diag.clamped_logs += 1;
                    LOG_EPS.ln()
                } else {
                    o.ln()
                })
        })
        .sum::<f64>()
        .max(0.0)
}

/// KL divergence between the two distributions restricted to background plus
/// `old_classes`, each renormalized over that support.
pub fn kl_old_classes(
    p_previous: &[f64],
    p_current: &[f64],
    old_classes: &BTreeSet<ClassId>,
    direction: KlDirection,
    diag: &mut LossDiagnostics,
) -> Result<f64> {
    check_len(p_previous, p_current, "kl")?;
    if old_classes.is_empty() {
        return Err(Error::invalid("distillation needs at least one previously seen class"));
    }
    let support = distill_support(old_classes);
    if support.iter().any(|&i| i >= p_current.len()) {
        return Err(Error::Shape("old class outside probability vector".into()));
    }
    let q = renormalize(p_previous, &support);
    let p = renormalize(p_current, &support);
    Ok(match direction {
        KlDirection::TeacherToStudent => kl(&q, &p, diag),
        KlDirection::StudentToTeacher => kl(&p, &q, diag),
    })
}

/// [`kl_old_classes`] from logits. Returns the value and the gradients with
/// respect to the current and the previous logits.
pub fn kl_old_classes_with_grad(
    logits_previous: &[f64],
    logits_current: &[f64],
    support: &[usize],
    direction: KlDirection,
) -> (f64, Vec<f64>, Vec<f64>) {
    let prev: Vec<f64> = support.iter().map(|&i| logits_previous[i]).collect();
    let cur: Vec<f64> = support.iter().map(|&i| logits_current[i]).collect();
    let q = softmax(&prev);
    let p = softmax(&cur);
    let log_q = log_softmax(&prev);
    let log_p = log_softmax(&cur);
    let mut d_cur = vec![0.0; logits_current.len()];
    let mut d_prev = vec![0.0; logits_previous.len()];
    // KL(a || b) over logits: d/d(logit_a) = a (log a - log b - KL), d/d(logit_b) = b - a
    let (a, log_a, log_b, b) = match direction {
        KlDirection::TeacherToStudent => (&q, &log_q, &log_p, &p),
        KlDirection::StudentToTeacher => (&p, &log_p, &log_q, &q),
    };
    let value: f64 = a.iter().zip(log_a.iter().zip(log_b)).map(|(ai, (la, lb))| ai * (la - lb)).sum();
    let (d_a, d_b) = match direction {
        KlDirection::TeacherToStudent => (&mut d_prev, &mut d_cur),
        KlDirection::StudentToTeacher => (&mut d_cur, &mut d_prev),
    };
    for (k, &i) in support.iter().enumerate() {
        d_a[i] = a[k] * (log_a[k] - log_b[k] - value);
        d_b[i] = b[k] - a[k];
    }
    (value.max(0.0), d_cur, d_prev)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Outputs of the current and the previous model on the same image and the
/// same pooled RoI features. `logits_*` are row-major `[N, K+1]`, boxes `[N, 4]`.
#[derive(Clone, Copy, Debug)]
pub struct DistillInputs<'a> {
    pub features_current: &'a [f64],
    pub features_previous: &'a [f64],
    pub logits_current: &'a [f64],
    pub logits_previous: &'a [f64],
    pub boxes_current: &'a [f64],
    pub boxes_previous: &'a [f64],
    pub num_logits: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillTerms {
    pub features: f64,
    pub kl: f64,
    pub boxes: f64,
}

impl DistillTerms {
    pub fn total(&self) -> f64 {
        self.features + self.kl + self.boxes
    }
}

#[derive(Clone, Debug, Default)]
pub struct DistillGrad {
    pub terms: DistillTerms,
    pub d_features: Vec<f64>,
    pub d_logits: Vec<f64>,
    pub d_boxes: Vec<f64>,
    /// Gradients with respect to the previous-model outputs, for callers whose
    /// teacher outputs depend on current-model features.
    pub d_logits_previous: Vec<f64>,
    pub d_boxes_previous: Vec<f64>,
}

/// Feature L2 + per-RoI KL over old classes (averaged over RoIs) + box L2.
/// Only the current-model inputs receive gradient.
pub fn distill_loss_with_grad(
    inputs: &DistillInputs<'_>,
    old_classes: &BTreeSet<ClassId>,
    direction: KlDirection,
) -> Result<DistillGrad> {
    if old_classes.is_empty() {
        return Err(Error::invalid("distillation needs at least one previously seen class"));
    }
    check_len(inputs.features_current, inputs.features_previous, "feature distillation")?;
    check_len(inputs.logits_current, inputs.logits_previous, "logit distillation")?;
    check_len(inputs.boxes_current, inputs.boxes_previous, "box distillation")?;
    let k = inputs.num_logits;
    if k == 0 || !inputs.logits_current.len().is_multiple_of(k) {
        return Err(Error::Shape("logit buffer is not a whole number of rows".into()));
    }
    let support = distill_support(old_classes);
    if support.iter().any(|&i| i >= k) {
        return Err(Error::Shape("old class outside logit rows".into()));
    }

    let features = l2_mean(inputs.features_current, inputs.features_previous)?;
    let d_features = l2_mean_grad(inputs.features_current, inputs.features_previous);
    let boxes = l2_mean(inputs.boxes_current, inputs.boxes_previous)?;
    let d_boxes = l2_mean_grad(inputs.boxes_current, inputs.boxes_previous);

    let rows = inputs.logits_current.len() / k;
    let mut kl_total = 0.0;
    let mut d_logits = vec![0.0; inputs.logits_current.len()];
    let mut d_logits_previous = vec![0.0; inputs.logits_previous.len()];
    for r in 0..rows {
        let span = r * k..(r + 1) * k;
        let (v, g, g_prev) = kl_old_classes_with_grad(
            &inputs.logits_previous[span.clone()],
            &inputs.logits_current[span.clone()],
            &support,
            direction,
        );
        kl_total += v;
        for (d, gi) in d_logits[span.clone()].iter_mut().zip(g) {
            *d = gi / rows as f64;
        }
        for (d, gi) in d_logits_previous[span].iter_mut().zip(g_prev) {
            *d = gi / rows as f64;
        }
    }
    let kl = if rows > 0 { kl_total / rows as f64 } else { 0.0 };
    let d_boxes_previous = d_boxes.iter().map(|v| -v).collect();
    Ok(DistillGrad {
        terms: DistillTerms { features, kl, boxes },
        d_features,
        d_logits,
        d_boxes,
        d_logits_previous,
        d_boxes_previous,
    })
}

/// Scalar distillation loss.
pub fn distill_loss(
    inputs: &DistillInputs<'_>,
    old_classes: &BTreeSet<ClassId>,
    direction: KlDirection,
) -> Result<f64> {
    Ok(distill_loss_with_grad(inputs, old_classes, direction)?.terms.total())
}

/// Convex combination of distillation and detection losses.
pub fn task_loss(distill: f64, rpn: f64, roi_head: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(alpha * distill + (1.0 - alpha) * (rpn + roi_head))
}

/// `distill` plus backbone-feature L2 between the two models on each
/// unlabeled auxiliary image.
pub fn aux_distill_loss(
    distill: f64,
    aux_images: &[Tensor],
    current: &DetectorModel,
    previous: &DetectorModel,
) -> Result<f64> {
    let mut total = distill;
    for image in aux_images {
        let f_cur = current.backbone_forward(image)?;
        let f_prev = previous.backbone_forward(image)?;
        total += l2_mean(f_cur.data(), f_prev.data())?;
    }
    Ok(total)
}

/// `teacher <- nu * teacher + (1 - nu) * student`, element-wise.
pub fn ema_teacher_update(teacher: &mut ParamSet, student: &ParamSet, nu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&nu) {
        return Err(Error::config(format!("EMA decay must lie in [0, 1], got {nu}")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::invalid("teacher and student parameter sets differ"));
    }
    for (t, s) in teacher.values_mut().zip(student.values()) {
        if nu == 1.0 {
            continue;
        }
        if nu == 0.0 {
            t.data_mut().copy_from_slice(s.data());
            continue;
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = nu * *tv + (1.0 - nu) * sv;
        }
    }
    Ok(())
}
