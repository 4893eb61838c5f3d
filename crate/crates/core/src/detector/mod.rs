//! The miniature two-stage detector, its parameter partition and updates.

mod checkpoint;
mod layers;
mod model;
mod objective;
mod optim;
mod params;
mod roi;
mod rpn;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use layers::{Conv2d, Linear};
pub use model::{
    apply_mask, logit_mask, mask_unseen_logits, BackboneTrace, DetectorConfig, DetectorModel, HeadOutput, HeadTrace,
    ImageForward, RpnTrace, ScoredBox, MASK_SENTINEL,
};
pub use objective::{task_objective, warp_objective, Distillation, StepPlan, TaskObjective};
pub use optim::{apply_task_update, apply_warp_update, SgdMomentum};
pub use params::{Gradients, Param, ParamId, ParamPartition, ParamRole, ParamSet};
pub use roi::{
    extract_roi, label_roi, roi_pool, roi_pool_backward, sample_roi_targets, stack_rois, unweighted_deltas,
    weighted_deltas, RoiSampling, RoiTarget, BOX_TARGET_WEIGHTS,
};
pub use rpn::{
    generate_anchors, sample_anchor_targets, select_proposals, AnchorSampling, AnchorTarget, Proposal, RpnRaw,
};
