use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::task_stream::{
    generate_dataset, load_dataset, sequential_specs, validate_disjoint, ClassId, ClassRegistry, DetectionSample,
    SceneConfig, TaskSpec,
};
use crate::trainer::{AblationFlags, TrainConfig};

/// Named class groupings over the 20-class registry. `20` is joint training
/// on every class in a single task.
pub const PRESETS: [&str; 5] = ["10+10", "15+5", "19+1", "15+1x5", "20"];

pub fn preset_specs(name: &str, num_classes: usize) -> Result<Vec<TaskSpec>> {
    let (first, step) = match name {
        "10+10" => (10, 10),
        "15+5" => (15, 5),
        "19+1" => (19, 1),
        "15+1x5" => (15, 1),
        "20" => (20, 0),
        other => {
            return Err(Error::config(format!("unknown preset `{other}`; valid presets: {}", PRESETS.join(", "))));
        }
    };
    if num_classes != 20 {
        return Err(Error::config(format!("preset `{name}` needs 20 classes, registry has {num_classes}")));
    }
    sequential_specs(20, first, step)
}

/// Train and test images with their class registry.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub registry: ClassRegistry,
    pub train: Vec<DetectionSample>,
    pub test: Vec<DetectionSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub preset: String,
    /// Explicit class-id groups; overrides `preset` when set.
    pub tasks: Option<Vec<Vec<usize>>>,
    /// Directory written by `generate-data` (`train/` and `test/`); the
    /// dataset is synthesized from `scene` when absent.
    pub data_dir: Option<PathBuf>,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub seeds: Vec<u64>,
    pub save_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            preset: "10+10".into(),
            tasks: None,
            data_dir: None,
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig {
                flags: AblationFlags::ALL,
                first_task_iterations: Some(3000),
                ..TrainConfig::default()
            },
            eval: EvalOptions::default(),
            seeds: vec![0, 1, 2],
            save_checkpoints: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        self.detector.validate()?;
        self.train.validate()?;
        if self.data_dir.is_none() {
            self.scene.validate()?;
            if self.scene.num_classes != self.detector.num_classes {
                return Err(Error::config(format!(
                    "scene has {} classes but the detector has {}",
                    self.scene.num_classes, self.detector.num_classes
                )));
            }
            if self.scene.image_size != self.detector.image_size {
                return Err(Error::config("scene and detector image sizes differ"));
            }
        }
        self.task_specs()?;
        Ok(())
    }

    pub fn registry(&self) -> ClassRegistry {
        ClassRegistry::numbered(self.detector.num_classes)
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        let specs = match &self.tasks {
            Some(groups) => groups
                .iter()
                .enumerate()
                .map(|(i, g)| TaskSpec::new(i + 1, g.iter().copied().map(ClassId).collect()))
                .collect::<Result<Vec<_>>>()?,
            None => preset_specs(&self.preset, self.detector.num_classes)?,
        };
        validate_disjoint(&specs)?;
        if let Some(c) = specs.iter().flat_map(|s| &s.class_ids).find(|c| c.0 == 0 || c.0 > self.detector.num_classes) {
            return Err(Error::config(format!("task class {c} is outside 1..={}", self.detector.num_classes)));
        }
        Ok(specs)
    }

    pub fn load_data(&self) -> Result<ExperimentData> {
        let registry = self.registry();
        match &self.data_dir {
            Some(dir) => Ok(ExperimentData {
                train: load_dataset(&dir.join("train"), &registry)?,
                test: load_dataset(&dir.join("test"), &registry)?,
                registry,
            }),
            None => {
                let d = generate_dataset(&self.scene)?;
                Ok(ExperimentData { registry: d.registry, train: d.train, test: d.test })
            }
        }
    }

    /// Detector and training configs for one seed.
    pub fn for_seed(&self, seed: u64) -> (DetectorConfig, TrainConfig) {
        let detector = DetectorConfig { init_seed: seed, ..self.detector.clone() };
        let train = TrainConfig { seed, ..self.train.clone() };
        (detector, train)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_expand() {
        let s = preset_specs("10+10", 20).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].class_ids, (11..=20).map(ClassId).collect::<Vec<_>>());
        let s = preset_specs("15+1x5", 20).unwrap();
        assert_eq!(s.iter().map(|t| t.class_ids.len()).collect::<Vec<_>>(), [15, 1, 1, 1, 1, 1]);
        assert_eq!(preset_specs("19+1", 20).unwrap()[1].class_ids, [ClassId(20)]);
        assert_eq!(preset_specs("20", 20).unwrap().len(), 1);
        let err = preset_specs("5+5", 20).unwrap_err().to_string();
        assert!(err.contains("10+10") && err.contains("15+1x5"), "{err}");
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = ExperimentConfig { seeds: vec![4], ..c.clone() };
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn explicit_tasks_are_checked() {
        let c = ExperimentConfig { tasks: Some(vec![vec![1, 2], vec![2, 3]]), ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { tasks: Some(vec![vec![1, 2], vec![21]]), ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { tasks: Some(vec![vec![1, 2], vec![3]]), ..Default::default() };
        assert_eq!(c.task_specs().unwrap().len(), 2);
        assert!(ExperimentConfig { seeds: vec![], ..Default::default() }.validate().is_err());
    }
}
