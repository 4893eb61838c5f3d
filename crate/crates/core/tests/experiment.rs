mod common;

use std::fs;

use warpdet::experiment::{
    emit_report, run_ablation_matrix, run_alpha_sweep, run_experiment, run_gamma_alpha_grid, ExperimentConfig,
    RunResults, ERROR_FILE, MANIFEST_FILE, RESULTS_FILE,
};
use warpdet::task_stream::save_dataset;

#[test]
fn sequence_run_writes_replayable_artifacts() {
    let cfg = common::tiny_experiment();
    let dir = tempfile::tempdir().unwrap();
    let results = run_experiment(&cfg, Some(dir.path())).unwrap();
    let RunResults::Sequence { seeds } = &results else { panic!("wrong result kind") };
    assert_eq!(seeds[0].tasks.len(), 2);

    for f in [MANIFEST_FILE, RESULTS_FILE, "summary.md", "forgetting.csv", "forgetting.svg"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let task_dir = dir.path().join("seed_0/task_2");
    for f in ["train_log.jsonl", "report.json", "report_before_finetune.json", "image_store.json", "checkpoint.bin"] {
        assert!(task_dir.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(task_dir.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), cfg.train.iterations);
    for key in ["iter", "lr", "rpn", "roi_head", "distill", "task", "warp_update"] {
        assert!(lines[0].get(key).is_some(), "log lacks {key}");
    }
    assert!(lines[9].get("warp").is_some() && lines[8].get("warp").is_none());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash());
    let replay: ExperimentConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(replay, cfg);

    // reports are a pure function of the persisted artifacts
    let summary = fs::read_to_string(dir.path().join("summary.md")).unwrap();
    let csv = fs::read_to_string(dir.path().join("forgetting.csv")).unwrap();
    fs::remove_file(dir.path().join("summary.md")).unwrap();
    emit_report(dir.path()).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("summary.md")).unwrap(), summary);
    assert_eq!(fs::read_to_string(dir.path().join("forgetting.csv")).unwrap(), csv);
    assert!(summary.contains("| task | mAP | mAP-old | mAP-new |"));
}

#[test]
fn saved_dataset_reproduces_the_synthesized_run() {
    let cfg = ExperimentConfig { save_checkpoints: false, ..common::tiny_experiment() };
    let data = cfg.load_data().unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&dir.path().join("train"), &data.train, &data.registry).unwrap();
    save_dataset(&dir.path().join("test"), &data.test, &data.registry).unwrap();
    let from_disk = ExperimentConfig { data_dir: Some(dir.path().to_path_buf()), ..cfg.clone() };
    assert_eq!(run_experiment(&from_disk, None).unwrap(), run_experiment(&cfg, None).unwrap());
}

#[test]
fn ablation_table_has_six_rows_in_order() {
    let cfg = common::tiny_experiment();
    let dir = tempfile::tempdir().unwrap();
    let RunResults::Ablation { rows } = run_ablation_matrix(&cfg, Some(dir.path())).unwrap() else { panic!() };
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["D", "D+F", "G", "G+F", "D+G", "D+G+F"]);
    let md = fs::read_to_string(dir.path().join("ablation.md")).unwrap();
    assert!(md.contains("| setting | T1 | T2 | All |\n|---|---|---|---|\n| D |"));
    assert!(dir.path().join("ablation.csv").is_file());
}

#[test]
fn sweeps_produce_one_row_per_setting() {
    let cfg = common::tiny_experiment();
    let dir = tempfile::tempdir().unwrap();
    let RunResults::AlphaSweep { rows, .. } = run_alpha_sweep(&cfg, &[0.3], Some(dir.path())).unwrap() else {
        panic!()
    };
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].label, "alpha=0.3");
    assert!(dir.path().join("alpha_sweep.svg").is_file());

    let RunResults::GammaAlphaGrid { rows, .. } = run_gamma_alpha_grid(&cfg, &[5, 41], &[0.1, 0.5], None).unwrap()
    else {
        panic!()
    };
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["gamma=5 alpha=0.1", "gamma=5 alpha=0.5", "gamma=41 alpha=0.1", "gamma=41 alpha=0.5"]);
    assert!(run_alpha_sweep(&cfg, &[1.5], None).is_err());
}

#[test]
fn two_task_commands_reject_other_settings() {
    let cfg = ExperimentConfig { tasks: Some(vec![vec![1, 2, 3, 4]]), ..common::tiny_experiment() };
    let err = run_ablation_matrix(&cfg, None).unwrap_err();
    assert!(err.to_string().contains("two-task"), "{err}");
}

#[test]
fn failures_leave_an_error_manifest() {
    let missing = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { data_dir: Some(missing.path().join("nope")), ..common::tiny_experiment() };
    let out = tempfile::tempdir().unwrap();
    assert!(run_experiment(&cfg, Some(out.path())).is_err());
    assert!(out.path().join(MANIFEST_FILE).is_file());
    assert!(out.path().join(ERROR_FILE).is_file());
}

#[test]
fn unknown_preset_lists_the_valid_ones() {
    let cfg = ExperimentConfig { preset: "7+3".into(), ..ExperimentConfig::default() };
    let err = cfg.validate().unwrap_err().to_string();
    for p in ["10+10", "15+5", "19+1", "15+1x5"] {
        assert!(err.contains(p), "{err}");
    }
}
