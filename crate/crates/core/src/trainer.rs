//! Task learning with interleaved task and warp updates, warp-loss
//! computation over the rehearsal stores, and inference-time fine-tuning.

use std::collections::BTreeSet;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    apply_task_update, apply_warp_update, stack_rois, task_objective, warp_objective, DetectorConfig, DetectorModel,
    Distillation, Gradients, ParamRole, SgdMomentum, TaskObjective,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalOptions, EvalReport};
use crate::losses::{ema_teacher_update, KlDirection, LossBundle, LossDiagnostics};
use crate::stores::{feature_store_fill, image_store_add, FeatureStore, FillOptions, ImageStore};
use crate::task_stream::{ClassId, DetectionSample, TaskDataset};
use crate::tensor::Tensor;

/// Linear warm-up to `base`, then a single step down to `final_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub final_lr: f64,
    pub warmup_iterations: usize,
    /// Learning rate at iteration 0 as a fraction of `base`.
    pub warmup_factor: f64,
    /// Fraction of the task's iterations after which `final_lr` applies.
    pub decay_at: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 0.02, final_lr: 0.0002, warmup_iterations: 100, warmup_factor: 1.0 / 3.0, decay_at: 2.0 / 3.0 }
    }
}

impl LrSchedule {
    pub fn at(&self, iteration: usize, total: usize) -> f64 {
        if (iteration as f64) >= self.decay_at * total as f64 {
            return self.final_lr;
        }
        if iteration < self.warmup_iterations {
            let t = iteration as f64 / self.warmup_iterations as f64;
            return self.base * (self.warmup_factor + (1.0 - self.warmup_factor) * t);
        }
        self.base
    }
}

/// Which method components are active (distillation, warp learning,
/// inference-time fine-tuning).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub distill: bool,
    pub warp: bool,
    pub finetune: bool,
}

impl AblationFlags {
    pub const ALL: Self = Self { distill: true, warp: true, finetune: true };
    pub const NONE: Self = Self { distill: false, warp: false, finetune: false };

    /// Short label such as `D+G+F`, or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.distill, "D"), (self.warp, "G"), (self.finetune, "F")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, s)| *s)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: LrSchedule,
    pub momentum: f64,
    /// Warp step length as a multiple of the current task step length.
    pub warp_lr_scale: f64,
    /// Image-steps between warp updates (γ).
    pub warp_interval: usize,
    pub alpha: f64,
    /// Image-steps per task.
    pub iterations: usize,
    /// Image-steps for the first task, when it should differ from later ones.
    pub first_task_iterations: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub flags: AblationFlags,
    pub ema: Option<EmaConfig>,
    pub kl_direction: KlDirection,
    pub image_store_capacity: usize,
    pub feature_store_capacity: usize,
    pub feature_store: FillOptions,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Random horizontal flips during task training.
    pub hflip: bool,
    /// Use the first stored images as unlabeled auxiliary data for
    /// distillation; 0 disables.
    pub aux_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: LrSchedule::default(),
            momentum: SgdMomentum::DEFAULT_MOMENTUM,
            warp_lr_scale: 0.002,
            warp_interval: 20,
            alpha: 0.2,
            iterations: 600,
            first_task_iterations: None,
            batch_size: 4,
            seed: 0,
            flags: AblationFlags { distill: true, warp: true, finetune: true },
            ema: None,
            kl_direction: KlDirection::default(),
            image_store_capacity: 10,
            feature_store_capacity: 10,
            feature_store: FillOptions::default(),
            finetune_steps: 300,
            finetune_lr: 0.002,
            hflip: true,
            aux_images: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warp_interval == 0 {
            return Err(Error::config("warp_interval must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.iterations == 0 || self.first_task_iterations == Some(0) {
            return Err(Error::config("iterations must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.image_store_capacity == 0 || self.feature_store_capacity == 0 {
            return Err(Error::config("store capacities must be positive"));
        }
        if let Some(ema) = self.ema {
            if !(0.0..=1.0).contains(&ema.nu) {
                return Err(Error::config(format!("ema.nu must lie in [0, 1], got {}", ema.nu)));
            }
        }
        for (name, v) in [
            ("lr.base", self.lr.base),
            ("lr.final_lr", self.lr.final_lr),
            ("finetune_lr", self.finetune_lr),
            ("warp_lr_scale", self.warp_lr_scale),
            ("momentum", self.momentum),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Image-steps for the task at zero-based position `tasks_completed`.
    pub fn iterations_for(&self, tasks_completed: usize) -> usize {
        match (tasks_completed, self.first_task_iterations) {
            (0, Some(n)) => n,
            _ => self.iterations,
        }
    }

    /// Warp step length for a given task step length.
    pub fn upsilon(&self, mu: f64) -> f64 {
        self.warp_lr_scale * mu
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: usize,
    pub iter: usize,
    pub sample_id: String,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub warp_update: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_index: usize,
    pub records: Vec<StepRecord>,
    pub warp_updates: Vec<usize>,
    pub clamped_logs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Task,
    Warp,
}

/// Parameter checksums around one update, recorded when auditing is on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateAudit {
    pub task_index: usize,
    pub iteration: usize,
    pub kind: UpdateKind,
    /// Names of the parameters whose values changed.
    pub changed: BTreeSet<String>,
    pub task_before: String,
    pub task_after: String,
    pub warp_before: String,
    pub warp_after: String,
    /// Teacher checksum at the time of the update.
    pub teacher: Option<String>,
}

struct AuditPoint {
    values: Vec<Tensor>,
    task: String,
    warp: String,
}

impl AuditPoint {
    fn capture(model: &DetectorModel) -> Self {
        let p = model.params();
        Self {
            values: p.values().cloned().collect(),
            task: p.checksum_role(ParamRole::Task),
            warp: p.checksum_role(ParamRole::Warp),
        }
    }

    fn finish(self, state: &TrainState, task_index: usize, iteration: usize, kind: UpdateKind) -> UpdateAudit {
        let p = state.model.params();
        let changed = p
            .iter()
            .zip(&self.values)
            .filter(|(now, before)| now.value.data().iter().zip(before.data()).any(|(a, b)| a.to_bits() != b.to_bits()))
            .map(|(now, _)| now.name.clone())
            .collect();
        UpdateAudit {
            task_index,
            iteration,
            kind,
            changed,
            task_before: self.task,
            task_after: p.checksum_role(ParamRole::Task),
            warp_before: self.warp,
            warp_after: p.checksum_role(ParamRole::Warp),
            teacher: state.prev_model.as_ref().map(|t| t.params().checksum_all()),
        }
    }
}

/// Everything that evolves while learning a sequence of tasks.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DetectorModel,
    /// Teacher for distillation; absent during the first task.
    pub prev_model: Option<DetectorModel>,
    pub optimizer: SgdMomentum,
    pub image_store: ImageStore,
    /// Classes of all completed tasks.
    pub old_classes: BTreeSet<ClassId>,
    pub tasks_completed: usize,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    /// Per-update checksum log; off unless set to `Some`.
    pub audit: Option<Vec<UpdateAudit>>,
}

impl TrainState {
    pub fn new(detector: DetectorConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DetectorModel::new(detector)?;
        let optimizer = SgdMomentum::new(model.params(), config.momentum);
        Ok(Self {
            model,
            prev_model: None,
            optimizer,
            image_store: ImageStore::new(config.image_store_capacity)?,
            old_classes: BTreeSet::new(),
            tasks_completed: 0,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            audit: None,
        })
    }

    /// Freezes the current model as the distillation teacher.
    pub fn freeze_teacher(&mut self) {
        self.prev_model = Some(self.model.clone());
    }
}

/// Fills a fresh feature store from `image_store` and sums the per-RoI head
/// losses over it, accumulating gradients into the active slots of `grads`.
pub fn get_warp_loss(
    model: &DetectorModel,
    image_store: &ImageStore,
    feature_store_capacity: usize,
    options: &FillOptions,
    grads: &mut Gradients,
    diag: &mut LossDiagnostics,
) -> Result<f64> {
    if image_store.is_empty() {
        warn!("image store is empty; warp loss is 0");
        return Ok(0.0);
    }
    let mut store = FeatureStore::new(feature_store_capacity)?;
    feature_store_fill(&mut store, model, image_store, options)?;
    if store.is_empty() {
        return Ok(0.0);
    }
    let entries: Vec<_> = store.iter().map(|(_, e)| e).collect();
    let pooled = stack_rois(entries.iter().map(|e| &e.feature));
    let labels: Vec<_> = entries.iter().map(|e| (e.true_class, e.box_target)).collect();
    warp_objective(model, &pooled, &labels, grads, diag)
}

fn non_finite(iteration: usize, sample: &DetectionSample, losses: &LossBundle) -> Error {
    let boxes: Vec<String> = sample
        .annotations
        .iter()
        .map(|a| format!("{}@[{:.1},{:.1},{:.1},{:.1}]", a.class_id, a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2))
        .collect();
    Error::NonFiniteLoss {
        iteration,
        sample_id: sample.sample_id.clone(),
        detail: format!("losses {losses:?}; annotations {}", boxes.join(" ")),
    }
}

/// Learns one task: per image, store it, take a task step on ψ, and every
/// `warp_interval` image-steps take a warp step on φ.
pub fn learn_task(state: &mut TrainState, dataset: &TaskDataset, config: &TrainConfig) -> Result<TaskSummary> {
    config.validate()?;
    let task_index = dataset.spec.task_index;
    if dataset.is_empty() {
        return Err(Error::invalid(format!("task {task_index} has no training samples")));
    }
    let use_distill = config.flags.distill && !state.old_classes.is_empty();
    if use_distill && state.prev_model.is_none() {
        return Err(Error::invalid(format!("task {task_index} needs a previous model for distillation")));
    }
    state.model.add_seen_classes(dataset.spec.class_ids.iter().copied())?;
    state.optimizer = SgdMomentum::new(state.model.params(), config.momentum);
    if let Some(t) = state.prev_model.as_mut() {
        // the teacher scores only the classes it was trained on
        t.set_seen_classes(state.old_classes.clone())?;
    }

    let iterations = config.iterations_for(state.tasks_completed);
    let mut diag = LossDiagnostics::default();
    let mut records = Vec::with_capacity(iterations);
    let mut warp_updates = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let aux: Vec<_> = if use_distill {
        state.image_store.iter().take(config.aux_images).map(|(_, e)| (*e.sample.image).clone()).collect()
    } else {
        Vec::new()
    };
    for i in 0..iterations {
        if i % config.batch_size == 0 {
            // draw the next mini-batch, reshuffling per epoch
            if cursor + config.batch_size > order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut state.rng);
                cursor = 0;
            }
        }
        let idx = order[cursor % order.len()];
        cursor += 1;
        let original = &dataset.samples[idx];
        image_store_add(&mut state.image_store, original, &mut state.rng)?;
        let sample = if config.hflip && state.rng.random_bool(0.5) { original.hflip() } else { original.clone() };

        let mu = config.lr.at(i, iterations);
        let fwd = state.model.forward_image(&sample.image)?;
        let plan = state.model.plan_step(&fwd, &sample.annotations, &mut state.rng);
        let objective = TaskObjective {
            alpha: config.alpha,
            distill: if use_distill {
                Some(Distillation {
                    teacher: state.prev_model.as_ref().expect("checked above"),
                    old_classes: &state.old_classes,
                    direction: config.kl_direction,
                    aux_images: &aux,
                })
            } else {
                None
            },
        };
        let mut grads = Gradients::for_role(state.model.params(), ParamRole::Task);
        let mut losses =
            task_objective(&state.model, &sample.image, &plan, &objective, Some(fwd), &mut grads, &mut diag)?;
        if !losses.is_finite() {
            return Err(non_finite(i, &sample, &losses));
        }
        let point = state.audit.is_some().then(|| AuditPoint::capture(&state.model));
        apply_task_update(&mut state.model, &mut state.optimizer, &grads, mu)?;
        if let Some(p) = point {
            let a = p.finish(state, task_index, i, UpdateKind::Task);
            state.audit.as_mut().expect("auditing").push(a);
        }
        if let (Some(ema), Some(teacher)) = (config.ema, state.prev_model.as_mut()) {
            if use_distill {
                ema_teacher_update(teacher.params_mut(), state.model.params(), ema.nu)?;
            }
        }

        let warp_step = config.flags.warp && (i + 1) % config.warp_interval == 0;
        if warp_step {
            let mut wg = Gradients::for_role(state.model.params(), ParamRole::Warp);
            let w = get_warp_loss(
                &state.model,
                &state.image_store,
                config.feature_store_capacity,
                &config.feature_store,
                &mut wg,
                &mut diag,
            )?;
            if !w.is_finite() {
                losses.warp = Some(w);
                return Err(non_finite(i, &sample, &losses));
            }
            let point = state.audit.is_some().then(|| AuditPoint::capture(&state.model));
            apply_warp_update(&mut state.model, &wg, config.upsilon(mu))?;
            if let Some(p) = point {
                let a = p.finish(state, task_index, i, UpdateKind::Warp);
                state.audit.as_mut().expect("auditing").push(a);
            }
            losses.warp = Some(w);
            warp_updates.push(i + 1);
        }
        if i % 100 == 0 {
            debug!("task {task_index} iter {i} lr {mu:.5} loss {:.4}", losses.task);
        }
        records.push(StepRecord {
            task: task_index,
            iter: i,
            sample_id: sample.sample_id.clone(),
            lr: mu,
            losses,
            warp_update: warp_step,
        });
        state.iteration += 1;
    }
    state.old_classes.extend(dataset.spec.class_ids.iter().copied());
    state.tasks_completed += 1;
    Ok(TaskSummary { task_index, records, warp_updates, clamped_logs: diag.clamped_logs })
}

/// Fine-tunes a copy of the model's task parameters on the image store with
/// the detection loss only; the training model is left untouched.
pub fn finetune_for_inference(state: &TrainState, config: &TrainConfig, steps: usize) -> Result<DetectorModel> {
    let mut model = state.model.clone();
    if steps == 0 {
        return Ok(model);
    }
    let entries: Vec<_> = state.image_store.iter().map(|(_, e)| e.sample.clone()).collect();
    if entries.is_empty() {
        return Err(Error::invalid("cannot fine-tune with an empty image store"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f17e ^ state.tasks_completed as u64);
    let mut optimizer = SgdMomentum::new(model.params(), config.momentum);
    let mut diag = LossDiagnostics::default();
    for i in 0..steps {
        let original = &entries[rng.random_range(0..entries.len())];
        let sample = if config.hflip && rng.random_bool(0.5) { original.hflip() } else { original.clone() };
        let fwd = model.forward_image(&sample.image)?;
        let plan = model.plan_step(&fwd, &sample.annotations, &mut rng);
        let mut grads = Gradients::for_role(model.params(), ParamRole::Task);
        let losses = task_objective(
            &model,
            &sample.image,
            &plan,
            &TaskObjective::detection(),
            Some(fwd),
            &mut grads,
            &mut diag,
        )?;
        if !losses.is_finite() {
            return Err(non_finite(i, &sample, &losses));
        }
        apply_task_update(&mut model, &mut optimizer, &grads, config.finetune_lr)?;
    }
    Ok(model)
}

/// Result of one task within a sequence.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    pub summary: TaskSummary,
    /// The trained model.
    pub model: DetectorModel,
    /// The model used for evaluation: fine-tuned when the flag is on.
    pub deployed: DetectorModel,
    pub report: EvalReport,
    /// Report of the trained model before fine-tuning, when fine-tuning ran.
    pub report_before_finetune: Option<EvalReport>,
}

/// Evaluates after a task on every class seen so far.
pub fn evaluate_after_task(
    state: &TrainState,
    config: &TrainConfig,
    test: &[DetectionSample],
    task_classes: &BTreeSet<ClassId>,
    eval: &EvalOptions,
) -> Result<(DetectorModel, EvalReport, Option<EvalReport>)> {
    let seen = state.model.seen_classes().clone();
    let old: BTreeSet<ClassId> = seen.difference(task_classes).copied().collect();
    let trained = evaluate_model(&state.model, test, &seen, &old, eval)?;
    if config.flags.finetune && config.finetune_steps > 0 && !state.image_store.is_empty() {
        let tuned = finetune_for_inference(state, config, config.finetune_steps)?;
        let report = evaluate_model(&tuned, test, &seen, &old, eval)?;
        Ok((tuned, report, Some(trained)))
    } else {
        Ok((state.model.clone(), trained, None))
    }
}

/// Trains each task in order (freezing a teacher before every task after the
/// first), fine-tunes if enabled and evaluates on `test`.
pub fn run_sequence(
    state: &mut TrainState,
    datasets: &[TaskDataset],
    test: &[DetectionSample],
    config: &TrainConfig,
    eval: &EvalOptions,
) -> Result<Vec<TaskOutcome>> {
    run_sequence_with(state, datasets, test, config, eval, |_, _| Ok(()))
}

/// [`run_sequence`] with a hook called after each task is evaluated.
pub fn run_sequence_with(
    state: &mut TrainState,
    datasets: &[TaskDataset],
    test: &[DetectionSample],
    config: &TrainConfig,
    eval: &EvalOptions,
    mut on_task: impl FnMut(&TrainState, &TaskOutcome) -> Result<()>,
) -> Result<Vec<TaskOutcome>> {
    let mut out = Vec::with_capacity(datasets.len());
    for ds in datasets {
        if state.tasks_completed > 0 {
            state.freeze_teacher();
        }
        let summary = learn_task(state, ds, config)?;
        let task_classes: BTreeSet<ClassId> = ds.spec.class_ids.iter().copied().collect();
        let (deployed, report, before) = evaluate_after_task(state, config, test, &task_classes, eval)?;
        let outcome =
            TaskOutcome { summary, model: state.model.clone(), deployed, report, report_before_finetune: before };
        on_task(state, &outcome)?;
        out.push(outcome);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_steps_down() {
        let s = LrSchedule::default();
        assert!((s.at(0, 3000) - 0.02 / 3.0).abs() < 1e-15);
        assert!(s.at(50, 3000) < s.at(99, 3000));
        assert_eq!(s.at(100, 3000), 0.02);
        assert_eq!(s.at(1999, 3000), 0.02);
        assert_eq!(s.at(2000, 3000), 0.0002);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warp_interval: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { iterations: 0, ..Default::default() }.validate().is_err());
        let toml_src = "alpha = 0.4\nwarp_interval = 10\n[flags]\ndistill = true\n";
        let c: TrainConfig = toml::from_str(toml_src).unwrap();
        assert_eq!(c.alpha, 0.4);
        assert!(c.flags.distill && !c.flags.warp);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn flag_labels() {
        assert_eq!(AblationFlags::ALL.label(), "D+G+F");
        assert_eq!(AblationFlags::NONE.label(), "none");
        assert_eq!(AblationFlags { warp: true, finetune: true, ..Default::default() }.label(), "G+F");
    }
}
