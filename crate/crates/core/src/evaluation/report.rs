use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorModel;
use crate::error::Result;
use crate::task_stream::{ClassId, ClassRegistry, DetectionSample};

use super::metrics::{average_precision, Detection, GroundTruth};

/// IoU thresholds .50:.05:.95.
pub fn iou_sweep() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    pub iou_threshold: f64,
    /// Also report AP averaged over [`iou_sweep`].
    pub sweep: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_threshold: 0.4, max_detections: 100, iou_threshold: 0.5, sweep: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP at `iou_threshold` per evaluated class.
    pub per_class_ap: BTreeMap<ClassId, f64>,
    /// AP averaged over the .50:.95 sweep, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_ap_sweep: Option<BTreeMap<ClassId, f64>>,
    pub map_all: f64,
    /// Mean AP over evaluated classes introduced before the current task.
    pub map_old: Option<f64>,
    /// Mean AP over the remaining evaluated classes.
    pub map_new: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_sweep: Option<f64>,
    pub old_classes: BTreeSet<ClassId>,
    pub iou_threshold: f64,
    pub max_detections: usize,
    pub num_images: usize,
    pub notes: Vec<String>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// Mean AP over the evaluated members of `classes`.
    pub fn mean_ap_over(&self, classes: &BTreeSet<ClassId>) -> Option<f64> {
        mean(classes.iter().filter_map(|c| self.per_class_ap.get(c).copied()))
    }

    /// Markdown table: one column per class, then mAP-old and mAP.
    pub fn to_markdown(&self, registry: &ClassRegistry) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let names: Vec<String> =
            self.per_class_ap.keys().map(|c| registry.name(*c).unwrap_or("?").to_string()).collect();
        let mut s = String::new();
        let _ = writeln!(s, "| {} | mAP-old | mAP |", names.join(" | "));
        let _ = writeln!(s, "|{}---|---|", "---|".repeat(names.len()));
        let aps: Vec<String> = self.per_class_ap.values().map(|v| fmt(Some(*v))).collect();
        let _ = writeln!(s, "| {} | {} | {} |", aps.join(" | "), fmt(self.map_old), fmt(Some(self.map_all)));
        for note in &self.notes {
            let _ = writeln!(s, "\n_{note}_");
        }
        s
    }
}

/// Builds a report from per-class detections and ground truth.
pub fn score_detections(
    detections: &BTreeMap<ClassId, Vec<Detection>>,
    ground_truth: &BTreeMap<ClassId, Vec<GroundTruth>>,
    classes: &BTreeSet<ClassId>,
    old_classes: &BTreeSet<ClassId>,
    options: &EvalOptions,
    num_images: usize,
) -> EvalReport {
    let mut per_class_ap = BTreeMap::new();
    let mut sweep = BTreeMap::new();
    let mut notes = Vec::new();
    let empty_d = Vec::new();
    let empty_g = Vec::new();
    for c in classes {
        let dets = detections.get(c).unwrap_or(&empty_d);
        let gts = ground_truth.get(c).unwrap_or(&empty_g);
        match average_precision(dets, gts, options.iou_threshold) {
            Some(ap) => {
                per_class_ap.insert(*c, ap);
                if options.sweep {
                    let aps = iou_sweep().into_iter().map(|t| average_precision(dets, gts, t).expect("has gt"));
                    sweep.insert(*c, mean(aps).expect("ten thresholds"));
                }
            }
            None => notes.push(format!("class {c} has no test instances; excluded from mAP")),
        }
    }
    let map_all = mean(per_class_ap.values().copied()).unwrap_or(0.0);
    let map_old = mean(per_class_ap.iter().filter(|(c, _)| old_classes.contains(c)).map(|(_, v)| *v));
    let map_new = mean(per_class_ap.iter().filter(|(c, _)| !old_classes.contains(c)).map(|(_, v)| *v));
    let map_sweep = options.sweep.then(|| mean(sweep.values().copied()).unwrap_or(0.0));
    EvalReport {
        per_class_ap,
        per_class_ap_sweep: options.sweep.then_some(sweep),
        map_all,
        map_old,
        map_new,
        map_sweep,
        old_classes: old_classes.clone(),
        iou_threshold: options.iou_threshold,
        max_detections: options.max_detections,
        num_images,
        notes,
    }
}

/// Runs detection over `test_samples` and scores `classes`.
pub fn evaluate_model(
    model: &DetectorModel,
    test_samples: &[DetectionSample],
    classes: &BTreeSet<ClassId>,
    old_classes: &BTreeSet<ClassId>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let mut detections: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
    let mut ground_truth: BTreeMap<ClassId, Vec<GroundTruth>> = BTreeMap::new();
    for sample in test_samples {
        for a in &sample.annotations {
            ground_truth
                .entry(a.class_id)
                .or_default()
                .push(GroundTruth { bbox: a.bbox, image_id: sample.sample_id.clone() });
        }
        let dets =
            model.detect(&sample.image, options.score_threshold, options.nms_threshold, options.max_detections)?;
        for d in dets {
            detections.entry(d.class_id).or_default().push(Detection {
                bbox: d.bbox,
                class_id: d.class_id,
                score: d.score,
                image_id: sample.sample_id.clone(),
            });
        }
    }
    Ok(score_detections(&detections, &ground_truth, classes, old_classes, options, test_samples.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_stream::BoundingBox;

    fn d(x: f64, score: f64) -> Detection {
        Detection { bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0), class_id: ClassId(1), score, image_id: "i".into() }
    }

    fn g(x: f64) -> GroundTruth {
        GroundTruth { bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0), image_id: "i".into() }
    }

    #[test]
    fn report_splits_old_and_new() {
        let dets = BTreeMap::from([(ClassId(1), vec![d(0.0, 0.9)]), (ClassId(2), vec![])]);
        let gts = BTreeMap::from([(ClassId(1), vec![g(0.0)]), (ClassId(2), vec![g(5.0)])]);
        let classes = BTreeSet::from([ClassId(1), ClassId(2), ClassId(3)]);
        let old = BTreeSet::from([ClassId(1)]);
        let opts = EvalOptions { sweep: true, ..Default::default() };
        let r = score_detections(&dets, &gts, &classes, &old, &opts, 1);
        assert_eq!(r.per_class_ap.len(), 2);
        assert_eq!(r.map_all, 0.5);
        assert_eq!(r.map_old, Some(1.0));
        assert_eq!(r.map_new, Some(0.0));
        assert_eq!(r.notes.len(), 1);
        assert_eq!(r.map_sweep, Some(0.5));
        let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn sweep_is_mean_of_ten_thresholds() {
        // IoU of the single detection is 8/12
        let dets = BTreeMap::from([(ClassId(1), vec![d(2.0, 0.9)])]);
        let gts = BTreeMap::from([(ClassId(1), vec![g(0.0)])]);
        let classes = BTreeSet::from([ClassId(1)]);
        let opts = EvalOptions { sweep: true, ..Default::default() };
        let r = score_detections(&dets, &gts, &classes, &BTreeSet::new(), &opts, 1);
        let hits = iou_sweep().iter().filter(|t| 8.0 / 12.0 >= **t).count();
        assert_eq!(r.map_sweep, Some(hits as f64 / 10.0));
    }

    #[test]
    fn markdown_has_class_columns() {
        let reg = ClassRegistry::numbered(2);
        let dets = BTreeMap::new();
        let gts = BTreeMap::from([(ClassId(1), vec![g(0.0)]), (ClassId(2), vec![g(0.0)])]);
        let r = score_detections(
            &dets,
            &gts,
            &BTreeSet::from([ClassId(1), ClassId(2)]),
            &BTreeSet::new(),
            &EvalOptions::default(),
            1,
        );
        let md = r.to_markdown(&reg);
        assert!(md.starts_with("| class01 | class02 | mAP-old | mAP |"));
    }
}
