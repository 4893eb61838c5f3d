use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index into a [`ClassRegistry`]. Id 0 is the background slot of the head
/// outputs and never names a foreground class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ClassId(pub usize);

// JSON map keys arrive as strings, so accept both forms.
impl<'de> Deserialize<'de> for ClassId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(usize),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Number(n) => Ok(ClassId(n)),
            Repr::Text(s) => s.parse().map(ClassId).map_err(serde::de::Error::custom),
        }
    }
}

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);

    pub fn is_background(self) -> bool {
        self.0 == 0
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense class table. Slot 0 is background, foreground classes are `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    names: Vec<String>,
}

impl ClassRegistry {
    pub const BACKGROUND_NAME: &'static str = "__background__";

    pub fn new<S: Into<String>>(foreground: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut names = vec![Self::BACKGROUND_NAME.to_string()];
        let mut seen = BTreeSet::new();
        for name in foreground {
            let name = name.into();
            if name == Self::BACKGROUND_NAME || !seen.insert(name.clone()) {
                return Err(Error::config(format!("duplicate or reserved class name `{name}`")));
            }
            names.push(name);
        }
        if names.len() == 1 {
            return Err(Error::config("class registry needs at least one foreground class"));
        }
        Ok(Self { names })
    }

    /// Registry named `class01 .. classNN`.
    pub fn numbered(count: usize) -> Self {
        Self::new((1..=count).map(|i| format!("class{i:02}"))).expect("numbered names are unique")
    }

    /// Number of foreground classes (K).
    pub fn num_classes(&self) -> usize {
        self.names.len() - 1
    }

    pub fn foreground(&self) -> impl Iterator<Item = ClassId> + '_ {
        (1..self.names.len()).map(ClassId)
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(id.0).map(String::as_str)
    }

    pub fn lookup(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name).filter(|&i| i > 0).map(ClassId)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        id.0 >= 1 && id.0 < self.names.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    pub class_ids: Vec<ClassId>,
}

impl TaskSpec {
    pub fn new(task_index: usize, class_ids: Vec<ClassId>) -> Result<Self> {
        if task_index == 0 {
            return Err(Error::config("task indices start at 1"));
        }
        if class_ids.is_empty() {
            return Err(Error::config(format!("task {task_index} has no classes")));
        }
        if class_ids.iter().any(|c| c.is_background()) {
            return Err(Error::config(format!("task {task_index} lists the background class")));
        }
        Ok(Self { task_index, class_ids })
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.class_ids.contains(&id)
    }
}

/// Checks that no class appears in two specs (or twice in one).
pub fn validate_disjoint(specs: &[TaskSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for spec in specs {
        if spec.class_ids.is_empty() {
            return Err(Error::config(format!("task {} has no classes", spec.task_index)));
        }
        for &c in &spec.class_ids {
            if !seen.insert(c) {
                return Err(Error::config(format!(
                    "class {c} appears in more than one task (task {})",
                    spec.task_index
                )));
            }
        }
    }
    Ok(())
}

/// Axis-aligned box in pixel coordinates, corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Center-size form `(cx, cy, w, h)`.
    pub fn to_center(&self) -> [f64; 4] {
        [0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2), self.width(), self.height()]
    }

    pub fn from_center(c: [f64; 4]) -> Self {
        Self::new(c[0] - 0.5 * c[2], c[1] - 0.5 * c[3], c[0] + 0.5 * c[2], c[1] + 0.5 * c[3])
    }

    pub fn hflip(&self, image_width: f64) -> Self {
        Self::new(image_width - self.x2, self.y1, image_width - self.x1, self.y2)
    }
}

/// Upper bound on `dw`/`dh` before exponentiation when decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Regression target of `target` relative to `reference`:
/// `((gx-ax)/aw, (gy-ay)/ah, ln(gw/aw), ln(gh/ah))`.
pub fn encode_deltas(reference: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let [ax, ay, aw, ah] = reference.to_center();
    let [gx, gy, gw, gh] = target.to_center();
    [(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

pub fn decode_deltas(reference: &BoundingBox, deltas: &[f64]) -> BoundingBox {
    let [ax, ay, aw, ah] = reference.to_center();
    let dw = deltas[2].min(MAX_LOG_SCALE);
    let dh = deltas[3].min(MAX_LOG_SCALE);
    BoundingBox::from_center([ax + deltas[0] * aw, ay + deltas[1] * ah, aw * dw.exp(), ah * dh.exp()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: ClassId,
}

/// An image (`[3, H, W]`, values in `[0, 1]`) with possibly partial labels.
///
/// The pixel buffer is shared, so cloning a sample to hide annotations for a
/// task split does not copy the image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub sample_id: String,
    pub image: Arc<Tensor>,
    pub annotations: Vec<Annotation>,
}

impl DetectionSample {
    pub fn new(sample_id: impl Into<String>, image: Tensor, annotations: Vec<Annotation>) -> Result<Self> {
        let sample = Self { sample_id: sample_id.into(), image: Arc::new(image), annotations };
        sample.validate()?;
        Ok(sample)
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Shape(format!("sample `{}` has image shape {shape:?}", self.sample_id)));
        }
        let (w, h) = (shape[2] as f64, shape[1] as f64);
        for a in &self.annotations {
            let b = &a.bbox;
            if !b.is_valid() || b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::invalid(format!(
                    "sample `{}` has box {:?} outside its {}x{} image",
                    self.sample_id, b, shape[2], shape[1]
                )));
            }
            if a.class_id.is_background() {
                return Err(Error::invalid(format!("sample `{}` annotates the background class", self.sample_id)));
            }
        }
        Ok(())
    }

    /// Distinct annotated classes, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.annotations.iter().map(|a| a.class_id).collect();
        set.into_iter().collect()
    }

    pub fn hflip(&self) -> Self {
        let [c, h, w] = [self.channels(), self.height(), self.width()];
        let src = self.image.data();
        let mut flipped = vec![0.0; src.len()];
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * h + y) * w;
                for x in 0..w {
                    flipped[row + x] = src[row + w - 1 - x];
                }
            }
        }
        Self {
            sample_id: self.sample_id.clone(),
            image: Arc::new(Tensor::from_vec(&[c, h, w], flipped)),
            annotations: self
                .annotations
                .iter()
                .map(|a| Annotation { bbox: a.bbox.hflip(w as f64), class_id: a.class_id })
                .collect(),
        }
    }
}

/// Per-task view of a dataset: only in-task annotations are visible.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub samples: Vec<DetectionSample>,
}

impl TaskDataset {
    pub fn new(spec: TaskSpec, samples: Vec<DetectionSample>) -> Result<Self> {
        for s in &samples {
            if s.annotations.is_empty() {
                return Err(Error::invalid(format!(
                    "sample `{}` has no annotations for task {}",
                    s.sample_id, spec.task_index
                )));
            }
            if let Some(a) = s.annotations.iter().find(|a| !spec.contains(a.class_id)) {
                return Err(Error::invalid(format!(
                    "sample `{}` annotates class {} outside task {}",
                    s.sample_id, a.class_id, spec.task_index
                )));
            }
        }
        Ok(Self { spec, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
