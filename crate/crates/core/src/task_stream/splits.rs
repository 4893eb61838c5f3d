use crate::error::{Error, Result};

use super::types::{validate_disjoint, ClassId, ClassRegistry, DetectionSample, TaskDataset, TaskSpec};

/// Builds one dataset per task. A sample joins every task for which it holds
/// at least one instance; annotations of other classes are dropped from that
/// task's copy, never relabeled.
pub fn build_incremental_splits(
    full_dataset: &[DetectionSample],
    specs: &[TaskSpec],
    registry: &ClassRegistry,
) -> Result<Vec<TaskDataset>> {
    validate_disjoint(specs)?;
    let unknown: Vec<String> = specs
        .iter()
        .flat_map(|s| s.class_ids.iter())
        .chain(full_dataset.iter().flat_map(|s| s.annotations.iter().map(|a| &a.class_id)))
        .filter(|c| !registry.contains(**c))
        .map(|c| c.to_string())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownClass(unknown));
    }

    specs
        .iter()
        .map(|spec| {
            let samples: Vec<DetectionSample> =
                full_dataset.iter().filter_map(|sample| visible_view(sample, spec)).collect();
            let missing: Vec<String> = spec
                .class_ids
                .iter()
                .filter(|c| !samples.iter().any(|s| s.annotations.iter().any(|a| a.class_id == **c)))
                .map(|c| registry.name(*c).unwrap_or("?").to_string())
                .collect();
            if !missing.is_empty() {
                return Err(Error::config(format!(
                    "task {} has no training instances for class(es): {}",
                    spec.task_index,
                    missing.join(", ")
                )));
            }
            TaskDataset::new(spec.clone(), samples)
        })
        .collect()
}

/// The sample as seen by `spec`, or `None` when it holds no in-task instance.
pub fn visible_view(sample: &DetectionSample, spec: &TaskSpec) -> Option<DetectionSample> {
    let annotations: Vec<_> = sample.annotations.iter().filter(|a| spec.contains(a.class_id)).cloned().collect();
    if annotations.is_empty() {
        return None;
    }
    Some(DetectionSample { sample_id: sample.sample_id.clone(), image: sample.image.clone(), annotations })
}

/// Specs `(1..=first)`, then groups of `step` classes until `total` is covered.
pub fn sequential_specs(total: usize, first: usize, step: usize) -> Result<Vec<TaskSpec>> {
    if first == 0 || first > total || (first < total && step == 0) {
        return Err(Error::config(format!("cannot split {total} classes as {first}+{step}s")));
    }
    let mut specs = vec![TaskSpec::new(1, (1..=first).map(ClassId).collect())?];
    let mut next = first + 1;
    while next <= total {
        let end = (next + step - 1).min(total);
        specs.push(TaskSpec::new(specs.len() + 1, (next..=end).map(ClassId).collect())?);
        next = end + 1;
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_stream::types::{Annotation, BoundingBox};
    use crate::tensor::Tensor;

    fn sample(id: &str, classes: &[usize]) -> DetectionSample {
        let annotations = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Annotation {
                bbox: BoundingBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 8.0, 8.0),
                class_id: ClassId(c),
            })
            .collect();
        DetectionSample::new(id, Tensor::zeros(&[3, 16, 64]), annotations).unwrap()
    }

    #[test]
    fn co_occurring_sample_lands_in_both_tasks_with_hidden_labels() {
        let reg = ClassRegistry::new(["cat", "dog"]).unwrap();
        let specs = vec![TaskSpec::new(1, vec![ClassId(1)]).unwrap(), TaskSpec::new(2, vec![ClassId(2)]).unwrap()];
        let data = vec![sample("a", &[1, 2])];
        let splits = build_incremental_splits(&data, &specs, &reg).unwrap();
        assert_eq!(splits[0].samples.len(), 1);
        assert_eq!(splits[1].samples.len(), 1);
        assert_eq!(splits[0].samples[0].classes(), vec![ClassId(1)]);
        assert_eq!(splits[1].samples[0].classes(), vec![ClassId(2)]);
        assert_eq!(splits[0].samples[0].annotations[0].bbox, data[0].annotations[0].bbox);
    }

    #[test]
    fn class_absent_from_data_is_a_config_error() {
        let reg = ClassRegistry::new(["cat", "dog"]).unwrap();
        let specs = vec![TaskSpec::new(1, vec![ClassId(2)]).unwrap()];
        let err = build_incremental_splits(&[sample("a", &[1])], &specs, &reg).unwrap_err();
        assert!(err.to_string().contains("dog"), "{err}");
    }

    #[test]
    fn overlapping_specs_are_rejected() {
        let reg = ClassRegistry::new(["cat", "dog"]).unwrap();
        let specs =
            vec![TaskSpec::new(1, vec![ClassId(1)]).unwrap(), TaskSpec::new(2, vec![ClassId(1), ClassId(2)]).unwrap()];
        assert!(matches!(build_incremental_splits(&[sample("a", &[1, 2])], &specs, &reg), Err(Error::Config(_))));
    }

    #[test]
    fn fifteen_plus_one_by_one_gives_six_tasks() {
        let specs = sequential_specs(20, 15, 1).unwrap();
        assert_eq!(specs.len(), 6);
        assert_eq!(specs[0].class_ids.len(), 15);
        assert!(specs[1..].iter().all(|s| s.class_ids.len() == 1));
        assert_eq!(specs[5].class_ids, vec![ClassId(20)]);
    }
}
