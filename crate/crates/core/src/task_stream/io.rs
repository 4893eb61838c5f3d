//! Dataset persistence and external annotation ingestion.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! <dir>/index.jsonl        one JSON object per sample
//! <dir>/images/<id>.png    8-bit RGB
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::types::{Annotation, BoundingBox, ClassRegistry, DetectionSample};

pub const INDEX_FILE: &str = "index.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    sample_id: String,
    image: String,
    width: usize,
    height: usize,
    annotations: Vec<IndexAnnotation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexAnnotation {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: String,
}

/// Supported annotation schemas for [`load_external_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// This crate's own `index.jsonl` + PNG layout.
    JsonLines,
    /// PASCAL VOC style: `Annotations/*.xml` next to `JPEGImages/`.
    VocXml,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" | "json_lines" => Ok(Self::JsonLines),
            "voc" | "voc_xml" => Ok(Self::VocXml),
            other => Err(Error::config(format!("unsupported annotation format `{other}` (expected jsonl or voc)"))),
        }
    }
}

fn safe_file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn to_rgb(image: &Tensor) -> Result<RgbImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected a [3, H, W] image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (data[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn save_dataset(dir: &Path, samples: &[DetectionSample], registry: &ClassRegistry) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut index = BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
    for sample in samples {
        let rel = format!("{IMAGE_DIR}/{}.png", safe_file_stem(&sample.sample_id));
        to_rgb(&sample.image)?.save(dir.join(&rel))?;
        let record = IndexRecord {
            sample_id: sample.sample_id.clone(),
            image: rel,
            width: sample.width(),
            height: sample.height(),
            annotations: sample
                .annotations
                .iter()
                .map(|a| IndexAnnotation {
                    bbox: [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2],
                    class: registry.name(a.class_id).unwrap_or("?").to_string(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut index, &record)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path, registry: &ClassRegistry) -> Result<Vec<DetectionSample>> {
    let index_path = dir.join(INDEX_FILE);
    let reader = BufReader::new(fs::File::open(&index_path)?);
    let mut samples = Vec::new();
    let mut unknown = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: IndexRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { path: index_path.clone(), message: format!("line {}: {e}", lineno + 1) })?;
        let image = image::open(dir.join(&record.image))?.to_rgb8();
        let mut annotations = Vec::new();
        for a in record.annotations {
            match registry.lookup(&a.class) {
                Some(class_id) => annotations
                    .push(Annotation { bbox: BoundingBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]), class_id }),
                None => unknown.push(a.class),
            }
        }
        samples.push(DetectionSample::new(record.sample_id, from_rgb(&image), annotations)?);
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownClass(unknown));
    }
    Ok(samples)
}

/// Loads annotations in `format` from `path`, resizing every image to
/// `image_size x image_size` and scaling boxes accordingly.
pub fn load_external_dataset(
    path: &Path,
    format: AnnotationFormat,
    registry: &ClassRegistry,
    image_size: usize,
) -> Result<Vec<DetectionSample>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    match format {
        AnnotationFormat::JsonLines => load_dataset(path, registry),
        AnnotationFormat::VocXml => load_voc(path, registry, image_size),
    }
}

#[derive(Debug)]
struct VocObject {
    name: String,
    bbox: [f64; 4],
}

#[derive(Debug)]
struct VocRecord {
    filename: String,
    width: f64,
    height: f64,
    objects: Vec<VocObject>,
}

fn parse_voc_xml(path: &Path, text: &str) -> Result<VocRecord> {
    let err = |message: String| Error::Parse { path: path.to_path_buf(), message };
    let doc = roxmltree::Document::parse(text).map_err(|e| err(e.to_string()))?;
    let root = doc.root_element();
    let child_text = |node: roxmltree::Node, tag: &str| -> Result<String> {
        node.children()
            .find(|c| c.has_tag_name(tag))
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
            .ok_or_else(|| err(format!("missing <{tag}>")))
    };
    let number = |node: roxmltree::Node, tag: &str| -> Result<f64> {
        let raw = child_text(node, tag)?;
        raw.parse::<f64>().map_err(|_| err(format!("<{tag}> is not a number: `{raw}`")))
    };
    let size = root.children().find(|c| c.has_tag_name("size")).ok_or_else(|| err("missing <size>".into()))?;
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let bnd =
            obj.children().find(|c| c.has_tag_name("bndbox")).ok_or_else(|| err("object without <bndbox>".into()))?;
        // VOC boxes are 1-based and inclusive
        objects.push(VocObject {
            name: child_text(obj, "name")?,
            bbox: [number(bnd, "xmin")? - 1.0, number(bnd, "ymin")? - 1.0, number(bnd, "xmax")?, number(bnd, "ymax")?],
        });
    }
    Ok(VocRecord {
        filename: child_text(root, "filename")?,
        width: number(size, "width")?,
        height: number(size, "height")?,
        objects,
    })
}

fn load_voc(path: &Path, registry: &ClassRegistry, image_size: usize) -> Result<Vec<DetectionSample>> {
    let ann_dir = if path.join("Annotations").is_dir() { path.join("Annotations") } else { path.to_path_buf() };
    let image_dirs: Vec<PathBuf> = [path.join("JPEGImages"), ann_dir.join("../JPEGImages"), ann_dir.clone()]
        .into_iter()
        .filter(|d| d.is_dir())
        .collect();
    let mut xml_files: Vec<PathBuf> = fs::read_dir(&ann_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xml"))
        .collect();
    xml_files.sort();

    let mut records = Vec::new();
    let mut unknown = Vec::new();
    for file in &xml_files {
        let record = parse_voc_xml(file, &fs::read_to_string(file)?)?;
        for o in &record.objects {
            if registry.lookup(&o.name).is_none() {
                unknown.push(o.name.clone());
            }
        }
        records.push((file.clone(), record));
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::UnknownClass(unknown));
    }

    let mut samples = Vec::new();
    for (file, record) in records {
        let img_path = image_dirs.iter().map(|d| d.join(&record.filename)).find(|p| p.exists()).ok_or_else(|| {
            Error::Parse { path: file.clone(), message: format!("image `{}` not found", record.filename) }
        })?;
        let img = image::open(&img_path)?.to_rgb8();
        let resized = image::imageops::resize(&img, image_size as u32, image_size as u32, FilterType::Triangle);
        let (sx, sy) = (image_size as f64 / record.width, image_size as f64 / record.height);
        let size = image_size as f64;
        let annotations = record
            .objects
            .iter()
            .map(|o| Annotation {
                bbox: BoundingBox::new(o.bbox[0] * sx, o.bbox[1] * sy, o.bbox[2] * sx, o.bbox[3] * sy).clip(size, size),
                class_id: registry.lookup(&o.name).expect("checked above"),
            })
            .filter(|a| a.bbox.is_valid())
            .collect();
        let id = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        samples.push(DetectionSample::new(id, from_rgb(&resized), annotations)?);
    }
    Ok(samples)
}
