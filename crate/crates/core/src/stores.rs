//! Per-class bounded FIFO rehearsal stores: exemplar images and RoI features.

use std::collections::{BTreeMap, HashMap, VecDeque};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{extract_roi, label_roi, DetectorModel};
use crate::error::{Error, Result};
use crate::task_stream::{Annotation, ClassId, DetectionSample};
use crate::tensor::Tensor;

/// One FIFO queue per class, each holding at most `capacity` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassQueueStore<T> {
    capacity: usize,
    queues: BTreeMap<ClassId, VecDeque<T>>,
}

impl<T> ClassQueueStore<T> {
    pub fn new(capacity_per_class: usize) -> Result<Self> {
        if capacity_per_class == 0 {
            return Err(Error::config("store capacity per class must be positive"));
        }
        Ok(Self { capacity: capacity_per_class, queues: BTreeMap::new() })
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity
    }

    /// Enqueues under `class`, returning the evicted oldest entry if the
    /// queue was full.
    pub fn push(&mut self, class: ClassId, item: T) -> Option<T> {
        let q = self.queues.entry(class).or_default();
        q.push_back(item);
        if q.len() > self.capacity {
            q.pop_front()
        } else {
            None
        }
    }

    pub fn queue(&self, class: ClassId) -> Option<&VecDeque<T>> {
        self.queues.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.queues.keys().copied()
    }

    /// Total number of stored entries.
    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.queues.clear();
    }

    /// Entries by ascending class, oldest first within each class.
    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &T)> {
        self.queues.iter().flat_map(|(c, q)| q.iter().map(move |e| (*c, e)))
    }
}

impl<T: Clone> ClassQueueStore<T> {
    /// Owned copy in [`ClassQueueStore::iter`] order.
    pub fn snapshot(&self) -> Vec<(ClassId, T)> {
        self.iter().map(|(c, e)| (c, e.clone())).collect()
    }
}

pub fn store_snapshot<T: Clone>(store: &ClassQueueStore<T>) -> Vec<(ClassId, T)> {
    store.snapshot()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageStoreEntry {
    pub sample: DetectionSample,
    pub assigned_class: ClassId,
}

pub type ImageStore = ClassQueueStore<ImageStoreEntry>;

/// Enqueues `sample` under one of its annotated classes, chosen uniformly.
pub fn image_store_add<R: Rng + ?Sized>(
    store: &mut ImageStore,
    sample: &DetectionSample,
    rng: &mut R,
) -> Result<ClassId> {
    let classes = sample.classes();
    if classes.is_empty() {
        return Err(Error::invalid(format!("sample `{}` has no annotations to store", sample.sample_id)));
    }
    let class = classes[rng.random_range(0..classes.len())];
    store.push(class, ImageStoreEntry { sample: sample.clone(), assigned_class: class });
    Ok(class)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStoreEntry {
    /// `[C, P, P]` pooled feature.
    pub feature: Tensor,
    /// Background (`ClassId(0)`) or a foreground class.
    pub true_class: ClassId,
    pub box_target: [f64; 4],
}

pub type FeatureStore = ClassQueueStore<FeatureStoreEntry>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FillOptions {
    /// IoU at which a proposal takes a ground-truth label.
    pub label_iou: f64,
    /// Keep background RoIs in their own queue.
    pub include_background: bool,
}

impl Default for FillOptions {
    fn default() -> Self {
        Self { label_iou: 0.5, include_background: true }
    }
}

/// Runs the current backbone and proposal stage over every stored image and
/// enqueues each pooled proposal under its label.
pub fn feature_store_fill(
    store: &mut FeatureStore,
    model: &DetectorModel,
    image_store: &ImageStore,
    options: &FillOptions,
) -> Result<()> {
    for (_, entry) in image_store.iter() {
        let fwd = model.forward_image(&entry.sample.image)?;
        let proposals = model.proposals(&fwd.rpn.raw);
        if proposals.is_empty() {
            warn!("no proposals for stored image `{}`; skipped", entry.sample.sample_id);
            continue;
        }
        let boxes: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
        let (pooled, _) = model.pool_batch(fwd.backbone.output(), &boxes);
        for (r, b) in boxes.iter().enumerate() {
            let (true_class, box_target) = label_roi(b, &entry.sample.annotations, options.label_iou);
            if true_class.is_background() && !options.include_background {
                continue;
            }
            store.push(true_class, FeatureStoreEntry { feature: extract_roi(&pooled, r), true_class, box_target });
        }
    }
    Ok(())
}

/// Serializable form of an image store: which sample sits in which queue,
/// with the annotations that were visible when it was stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStoreManifest {
    pub capacity_per_class: usize,
    pub entries: Vec<StoredImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredImage {
    pub sample_id: String,
    pub assigned_class: ClassId,
    pub annotations: Vec<Annotation>,
}

impl ImageStoreManifest {
    pub fn from_store(store: &ImageStore) -> Self {
        Self {
            capacity_per_class: store.capacity_per_class(),
            entries: store
                .iter()
                .map(|(_, e)| StoredImage {
                    sample_id: e.sample.sample_id.clone(),
                    assigned_class: e.assigned_class,
                    annotations: e.sample.annotations.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the store, resolving images by sample id.
    pub fn restore(&self, images: &[DetectionSample]) -> Result<ImageStore> {
        let by_id: HashMap<&str, &DetectionSample> = images.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        let mut store = ImageStore::new(self.capacity_per_class)?;
        for e in &self.entries {
            let src = by_id
                .get(e.sample_id.as_str())
                .ok_or_else(|| Error::invalid(format!("stored sample `{}` not found", e.sample_id)))?;
            if !e.annotations.iter().any(|a| a.class_id == e.assigned_class) {
                return Err(Error::invalid(format!("stored sample `{}` lacks its assigned class", e.sample_id)));
            }
            let sample = DetectionSample::new(e.sample_id.clone(), (*src.image).clone(), e.annotations.clone())?;
            store.push(e.assigned_class, ImageStoreEntry { sample, assigned_class: e.assigned_class });
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_stream::BoundingBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, classes: &[usize]) -> DetectionSample {
        let annotations = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| Annotation {
                bbox: BoundingBox::new(i as f64 * 10.0, 0.0, i as f64 * 10.0 + 8.0, 8.0),
                class_id: ClassId(c),
            })
            .collect();
        DetectionSample::new(id, Tensor::zeros(&[3, 64, 64]), annotations).unwrap()
    }

    #[test]
    fn single_class_goes_to_its_queue() {
        let mut store = ImageStore::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..12 {
            assert_eq!(image_store_add(&mut store, &sample(&format!("s{i}"), &[3]), &mut rng).unwrap(), ClassId(3));
        }
        let ids: Vec<_> = store.queue(ClassId(3)).unwrap().iter().map(|e| e.sample.sample_id.clone()).collect();
        assert_eq!(ids, (2..12).map(|i| format!("s{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn assignment_is_seeded() {
        let s = sample("x", &[1, 2, 2, 5]);
        let run = |seed| {
            let mut store = ImageStore::new(10).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| image_store_add(&mut store, &s, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert!(run(7).iter().all(|c| [1, 2, 5].contains(&c.0)));
    }

    #[test]
    fn annotation_free_sample_is_rejected() {
        let mut store = ImageStore::new(10).unwrap();
        let s = DetectionSample::new("e", Tensor::zeros(&[3, 8, 8]), vec![]).unwrap();
        assert!(image_store_add(&mut store, &s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(ImageStore::new(0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut store = ImageStore::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..5).map(|i| sample(&format!("s{i}"), &[1 + i % 2])).collect();
        for s in &samples {
            image_store_add(&mut store, s, &mut rng).unwrap();
        }
        let manifest = ImageStoreManifest::from_store(&store);
        let json = serde_json::to_string(&manifest).unwrap();
        let back: ImageStoreManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.restore(&samples).unwrap(), store);
        assert!(back.restore(&samples[..1]).is_err());
    }
}
