#![allow(dead_code)]

use warpdet::detector::DetectorConfig;
use warpdet::experiment::ExperimentConfig;
use warpdet::task_stream::SceneConfig;
use warpdet::trainer::{AblationFlags, TrainConfig};

/// Four classes on 32px images split 2+2; trains in well under a second.
pub fn tiny_experiment() -> ExperimentConfig {
    let scene = SceneConfig {
        image_size: 32,
        num_classes: 4,
        min_object_size: 8,
        max_object_size: 12,
        max_objects: 2,
        clutter: 1,
        train_count: 24,
        test_count: 8,
        ..SceneConfig::default()
    };
    let detector = DetectorConfig {
        image_size: 32,
        num_classes: 4,
        anchor_sizes: vec![8.0, 12.0],
        proposals: 16,
        ..DetectorConfig::default()
    };
    let mut train = TrainConfig {
        iterations: 40,
        warp_interval: 10,
        finetune_steps: 10,
        flags: AblationFlags::ALL,
        ..TrainConfig::default()
    };
    train.lr.warmup_iterations = 10;
    ExperimentConfig {
        name: "tiny".into(),
        tasks: Some(vec![vec![1, 2], vec![3, 4]]),
        scene,
        detector,
        train,
        seeds: vec![0],
        ..ExperimentConfig::default()
    }
}
