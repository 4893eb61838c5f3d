//! Incremental class groupings, annotation hiding and synthetic scenes.

mod io;
mod splits;
mod synthetic;
mod types;

pub use io::{load_dataset, load_external_dataset, save_dataset, AnnotationFormat, IMAGE_DIR, INDEX_FILE};
pub use splits::{build_incremental_splits, sequential_specs, visible_view};
pub use synthetic::{
    generate_dataset, generate_synthetic_scene, Glyph, SceneConfig, SyntheticDataset, TEST_SEED_OFFSET,
};
pub use types::{
    decode_deltas, encode_deltas, validate_disjoint, Annotation, BoundingBox, ClassId, ClassRegistry, DetectionSample,
    TaskDataset, TaskSpec,
};
