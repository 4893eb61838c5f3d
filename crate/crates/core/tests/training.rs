mod common;

use std::collections::BTreeSet;

use warpdet::detector::{checkpoint_bytes, checkpoint_from_bytes, Gradients, ParamRole};
use warpdet::evaluation::EvalOptions;
use warpdet::experiment::ExperimentData;
use warpdet::losses::{warp_loss_per_roi, LossDiagnostics};
use warpdet::stores::{feature_store_fill, FeatureStore, FillOptions, ImageStore, ImageStoreManifest};
use warpdet::task_stream::{build_incremental_splits, ClassId, TaskDataset};
use warpdet::trainer::{
    finetune_for_inference, get_warp_loss, learn_task, run_sequence, AblationFlags, TrainConfig, TrainState, UpdateKind,
};
use warpdet::Error;

fn setup() -> (TrainConfig, TrainState, Vec<TaskDataset>, ExperimentData) {
    let cfg = common::tiny_experiment();
    let data = cfg.load_data().unwrap();
    let datasets = build_incremental_splits(&data.train, &cfg.task_specs().unwrap(), &data.registry).unwrap();
    let (detector, train) = cfg.for_seed(0);
    let state = TrainState::new(detector, &train).unwrap();
    (train, state, datasets, data)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[test]
fn warp_updates_land_on_interval_multiples() {
    let (train, mut state, datasets, _) = setup();
    let summary = learn_task(&mut state, &datasets[0], &train).unwrap();
    assert_eq!(summary.warp_updates, [10, 20, 30, 40]);
    let marked: Vec<usize> = summary.records.iter().filter(|r| r.warp_update).map(|r| r.iter + 1).collect();
    assert_eq!(marked, summary.warp_updates);
    assert!(summary.records.iter().filter(|r| r.warp_update).all(|r| r.losses.warp.is_some()));
    assert!(summary.records.iter().all(|r| r.losses.distill == 0.0), "no distillation in the first task");
    assert_eq!(state.model.seen_classes(), &BTreeSet::from([ClassId(1), ClassId(2)]));
}

#[test]
fn interval_beyond_the_task_means_no_warp_update() {
    let (mut train, mut state, datasets, _) = setup();
    train.warp_interval = train.iterations + 1;
    let before = state.model.params().checksum_role(ParamRole::Warp);
    let summary = learn_task(&mut state, &datasets[0], &train).unwrap();
    assert!(summary.warp_updates.is_empty());
    assert_eq!(state.model.params().checksum_role(ParamRole::Warp), before);
}

#[test]
fn warp_flag_off_leaves_warp_params_alone() {
    let (mut train, mut state, datasets, _) = setup();
    train.flags = AblationFlags { distill: true, warp: false, finetune: false };
    let before = state.model.params().checksum_role(ParamRole::Warp);
    learn_task(&mut state, &datasets[0], &train).unwrap();
    state.freeze_teacher();
    let summary = learn_task(&mut state, &datasets[1], &train).unwrap();
    assert_eq!(state.model.params().checksum_role(ParamRole::Warp), before);
    assert!(summary.records.iter().any(|r| r.losses.distill > 0.0));
}

#[test]
fn audited_updates_stay_inside_their_partition() {
    let (mut train, mut state, datasets, _) = setup();
    train.iterations = 10;
    train.warp_interval = 5;
    state.audit = Some(Vec::new());
    learn_task(&mut state, &datasets[0], &train).unwrap();
    let audit = state.audit.take().unwrap();
    let partition = state.model.params().partition();
    assert_eq!(audit.iter().filter(|a| a.kind == UpdateKind::Task).count(), 10);
    assert_eq!(audit.iter().filter(|a| a.kind == UpdateKind::Warp).count(), 2);
    for a in &audit {
        let (own, other) = match a.kind {
            UpdateKind::Task => (&partition.task, (&a.warp_before, &a.warp_after)),
            UpdateKind::Warp => (&partition.warp, (&a.task_before, &a.task_after)),
        };
        assert!(!a.changed.is_empty());
        assert!(a.changed.is_subset(own), "{:?} touched {:?}", a.kind, a.changed);
        assert_eq!(other.0, other.1);
    }
}

#[test]
fn warp_loss_is_the_sum_of_per_roi_losses() {
    let (train, mut state, datasets, _) = setup();
    learn_task(&mut state, &datasets[0], &train).unwrap();
    let model = &state.model;
    let mut grads = Gradients::for_role(model.params(), ParamRole::Warp);
    let mut diag = LossDiagnostics::default();
    let total = get_warp_loss(model, &state.image_store, 10, &FillOptions::default(), &mut grads, &mut diag).unwrap();

    let mut store = FeatureStore::new(10).unwrap();
    feature_store_fill(&mut store, model, &state.image_store, &FillOptions::default()).unwrap();
    assert!(!store.is_empty());
    let oracle: f64 = store
        .iter()
        .map(|(_, e)| {
            let out = model.mask_unseen_logits(&model.roi_head_forward(&e.feature).unwrap()).unwrap();
            warp_loss_per_roi(&softmax(&out.class_logits), e.true_class, &out.box_deltas, &e.box_target, &mut diag)
                .unwrap()
        })
        .sum();
    assert!((total - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), "{total} vs {oracle}");
    assert!(grads.any_active() && !grads.is_zero());
}

#[test]
fn empty_image_store_gives_zero_warp_loss() {
    let (_, state, _, _) = setup();
    let mut grads = Gradients::for_role(state.model.params(), ParamRole::Warp);
    let empty = ImageStore::new(10).unwrap();
    let v =
        get_warp_loss(&state.model, &empty, 10, &FillOptions::default(), &mut grads, &mut LossDiagnostics::default());
    assert_eq!(v.unwrap(), 0.0);
    assert!(grads.is_zero());
}

#[test]
fn finetuning_returns_a_copy_and_keeps_warp_params() {
    let (train, mut state, datasets, _) = setup();
    learn_task(&mut state, &datasets[0], &train).unwrap();
    let before = state.model.params().checksum_all();
    let tuned = finetune_for_inference(&state, &train, 10).unwrap();
    assert_eq!(state.model.params().checksum_all(), before);
    assert_eq!(tuned.params().checksum_role(ParamRole::Warp), state.model.params().checksum_role(ParamRole::Warp));
    assert_ne!(tuned.params().checksum_role(ParamRole::Task), state.model.params().checksum_role(ParamRole::Task));
}

#[test]
fn non_finite_loss_aborts_with_the_sample() {
    let (train, mut state, datasets, _) = setup();
    for v in state.model.params_mut().values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x = f64::NAN);
    }
    match learn_task(&mut state, &datasets[0], &train) {
        Err(Error::NonFiniteLoss { iteration, sample_id, detail }) => {
            assert_eq!(iteration, 0);
            assert!(!sample_id.is_empty());
            assert!(detail.contains("annotations"));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn sequence_state_survives_a_checkpoint_and_store_round_trip() {
    let (train, mut state, datasets, data) = setup();
    let outcomes = run_sequence(&mut state, &datasets, &data.test, &train, &EvalOptions::default()).unwrap();
    assert_eq!(outcomes.len(), 2);
    assert_eq!(outcomes[1].report.old_classes, BTreeSet::from([ClassId(1), ClassId(2)]));
    assert!(outcomes[1].report_before_finetune.is_some());

    let bytes = checkpoint_bytes(&state.model, Some(&state.optimizer)).unwrap();
    let (model, opt) = checkpoint_from_bytes(&bytes, "mem".as_ref()).unwrap();
    assert_eq!(model.params().checksum_all(), state.model.params().checksum_all());
    assert_eq!(model.seen_classes(), state.model.seen_classes());
    assert_eq!(opt.unwrap().velocity(), state.optimizer.velocity());

    let manifest = ImageStoreManifest::from_store(&state.image_store);
    let restored = manifest.restore(&data.train).unwrap();
    assert_eq!(restored, state.image_store);
}
