//! Procedural multi-object scenes: colored glyphs on a noisy, cluttered
//! background. Each class is one (shape, color) pair, so classes are visually
//! distinct while still sharing low-level features with each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::types::{Annotation, BoundingBox, ClassId, ClassRegistry, DetectionSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Square,
    Disk,
    Triangle,
    Plus,
    Ring,
}

impl Glyph {
    pub const ALL: [Glyph; 5] = [Glyph::Square, Glyph::Disk, Glyph::Triangle, Glyph::Plus, Glyph::Ring];

    /// Whether pixel `(i, j)` of a `w x h` glyph cell is painted.
    pub fn covers(self, i: usize, j: usize, w: usize, h: usize) -> bool {
        let (fw, fh) = (w as f64, h as f64);
        match self {
            Glyph::Square => true,
            Glyph::Disk => {
                let x = (i as f64 + 0.5) / fw * 2.0 - 1.0;
                let y = (j as f64 + 0.5) / fh * 2.0 - 1.0;
                x * x + y * y <= 1.0
            }
            Glyph::Triangle => {
                let half = (j as f64 + 1.0) / fh * fw / 2.0;
                ((i as f64 + 0.5) - fw / 2.0).abs() <= half
            }
            Glyph::Plus => {
                let tw = (w / 3).max(3);
                let th = (h / 3).max(3);
                let in_col = i >= (w - tw) / 2 && i < (w - tw) / 2 + tw;
                let in_row = j >= (h - th) / 2 && j < (h - th) / 2 + th;
                in_col || in_row
            }
            Glyph::Ring => {
                let t = (w.min(h) / 5).max(2);
                i < t || j < t || i + t >= w || j + t >= h
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub glyphs: Vec<Glyph>,
    /// RGB in `[0, 1]`; class `c` uses `palette[(c - 1) / glyphs.len()]`.
    pub palette: Vec<[f64; 3]>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: usize,
    pub max_object_size: usize,
    /// Gray distractor strokes per image.
    pub clutter: usize,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 20,
            glyphs: Glyph::ALL.to_vec(),
            palette: vec![[0.90, 0.15, 0.15], [0.15, 0.80, 0.20], [0.20, 0.30, 0.95], [0.95, 0.85, 0.10]],
            min_objects: 1,
            max_objects: 4,
            min_object_size: 12,
            max_object_size: 24,
            clutter: 4,
            noise: 0.06,
            train_count: 200,
            test_count: 100,
            seed: 0,
        }
    }
}

/// Offset separating test-image seeds from training-image seeds.
pub const TEST_SEED_OFFSET: u64 = 1 << 40;

/// Fraction of the image area objects may cover in the worst case.
const MAX_FILL: f64 = 0.75;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config("image_size must be at least 8"));
        }
        if self.glyphs.is_empty() || self.palette.is_empty() {
            return Err(Error::config("glyphs and palette must be non-empty"));
        }
        if self.num_classes == 0 || self.num_classes > self.glyphs.len() * self.palette.len() {
            return Err(Error::config(format!(
                "{} classes cannot be drawn with {} glyphs x {} colors",
                self.num_classes,
                self.glyphs.len(),
                self.palette.len()
            )));
        }
        if self.min_object_size < 4
            || self.min_object_size > self.max_object_size
            || self.max_object_size > self.image_size
        {
            return Err(Error::config("object size range must satisfy 4 <= min <= max <= image_size"));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("min_objects exceeds max_objects"));
        }
        let cell = (self.max_object_size + 1) as f64;
        let capacity = (MAX_FILL * (self.image_size * self.image_size) as f64 / (cell * cell)).floor() as usize;
        if self.max_objects > capacity {
            return Err(Error::config(format!(
                "max_objects {} exceeds placement capacity {capacity} for {}px images with {}px objects",
                self.max_objects, self.image_size, self.max_object_size
            )));
        }
        Ok(())
    }

    pub fn registry(&self) -> ClassRegistry {
        ClassRegistry::numbered(self.num_classes)
    }

    fn class_style(&self, class: ClassId) -> (Glyph, [f64; 3]) {
        let k = class.0 - 1;
        (self.glyphs[k % self.glyphs.len()], self.palette[k / self.glyphs.len()])
    }
}

/// Renders one scene. Identical `(config, seed)` give identical samples; pixel
/// values are multiples of 1/255 so they survive an 8-bit PNG round trip.
pub fn generate_synthetic_scene(config: &SceneConfig, seed: u64) -> Result<DetectionSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.image_size;
    let mut pixels = vec![0u8; 3 * s * s];

    let base: f64 = rng.random_range(0.35..0.55);
    for y in 0..s {
        for x in 0..s {
            let v = base + rng.random_range(-config.noise..=config.noise);
            for c in 0..3 {
                pixels[(c * s + y) * s + x] = to_u8(v + rng.random_range(-0.01..=0.01));
            }
        }
    }
    for _ in 0..config.clutter {
        draw_stroke(&mut pixels, s, &mut rng);
    }

    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut annotations = Vec::with_capacity(count);
    let mut placed: Vec<BoundingBox> = Vec::new();
    for _ in 0..count {
        let class = ClassId(rng.random_range(1..=config.num_classes));
        let Some(bbox) = place(config, &placed, &mut rng) else { break };
        placed.push(bbox);
        let (glyph, color) = config.class_style(class);
        let shade: f64 = rng.random_range(-0.05..=0.05);
        let (x0, y0) = (bbox.x1 as usize, bbox.y1 as usize);
        let (w, h) = (bbox.width() as usize, bbox.height() as usize);
        for j in 0..h {
            for i in 0..w {
                if glyph.covers(i, j, w, h) {
                    for (c, channel) in color.iter().enumerate() {
                        pixels[(c * s + y0 + j) * s + x0 + i] = to_u8(channel + shade);
                    }
                }
            }
        }
        annotations.push(Annotation { bbox, class_id: class });
    }

    let image = Tensor::from_vec(&[3, s, s], pixels.iter().map(|&p| p as f64 / 255.0).collect());
    DetectionSample::new(format!("syn-{seed}"), image, annotations)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn place(config: &SceneConfig, placed: &[BoundingBox], rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let s = config.image_size;
    for _ in 0..200 {
        let w = rng.random_range(config.min_object_size..=config.max_object_size);
        let h = rng.random_range(config.min_object_size..=config.max_object_size);
        let x = rng.random_range(0..=s - w);
        let y = rng.random_range(0..=s - h);
        let b = BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
        // one-pixel gap keeps rendered extents separable
        let clear = placed.iter().all(|p| b.x1 > p.x2 || p.x1 > b.x2 || b.y1 > p.y2 || p.y1 > b.y2);
        if clear {
            return Some(b);
        }
    }
    None
}

fn draw_stroke(pixels: &mut [u8], s: usize, rng: &mut ChaCha8Rng) {
    let gray = to_u8(rng.random_range(0.2..0.8));
    let (x0, y0) = (rng.random_range(0..s) as f64, rng.random_range(0..s) as f64);
    let (x1, y1) = (rng.random_range(0..s) as f64, rng.random_range(0..s) as f64);
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
    for t in 0..=steps {
        let f = t as f64 / steps as f64;
        let x = (x0 + f * (x1 - x0)).round() as usize;
        let y = (y0 + f * (y1 - y0)).round() as usize;
        if x < s && y < s {
            for c in 0..3 {
                pixels[(c * s + y) * s + x] = gray;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub registry: ClassRegistry,
    pub train: Vec<DetectionSample>,
    pub test: Vec<DetectionSample>,
}

/// Train and test splits from disjoint seed ranges; all annotations complete.
pub fn generate_dataset(config: &SceneConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let base = config.seed.wrapping_mul(1_000_003);
    let train = (0..config.train_count as u64)
        .map(|i| generate_synthetic_scene(config, base + i))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..config.test_count as u64)
        .map(|i| generate_synthetic_scene(config, base + TEST_SEED_OFFSET + i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset { registry: config.registry(), train, test })
}
