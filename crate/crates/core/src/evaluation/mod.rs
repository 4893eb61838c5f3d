//! Detection scoring: IoU, NMS, average precision and mAP reports.

mod metrics;
mod report;

pub use metrics::{average_precision, iou, match_detections, nms, rank_by_score, Detection, GroundTruth};
pub use report::{evaluate_model, iou_sweep, score_detections, EvalOptions, EvalReport};
