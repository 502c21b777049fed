//! Dataset file formats: COCO/LVIS datasets, COCO detection results, the
//! training manifest, and dataset validation.

mod coco;
mod detections;
mod manifest;
mod validate;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub(crate) use coco::write_text;
pub use coco::{
    emit_coco, load_coco_unchecked, parse_coco, parse_coco_str, to_coco_string, CocoAnnotation, CocoCategory,
    CocoDataset, CocoImage, Provenance,
};
pub use detections::{parse_detections, parse_detections_str, DetectionRow};
pub use manifest::{
    emit_manifest, manifest_to_string, Loss, ManifestConfig, Schedule, Stage, TrainingManifest, TrainingMode,
};
pub use validate::{validate_dataset, Finding, Severity, ValidationReport};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate id {id} in {collection} at position {index}")]
    DuplicateId { collection: &'static str, id: u64, index: usize },
    #[error("annotation {annotation_id} references missing {field} {target}")]
    DanglingReference { annotation_id: u64, field: &'static str, target: u64 },
    #[error("annotation {annotation_id}: {message}")]
    InvalidAnnotation { annotation_id: u64, message: String },
    #[error("detection row {row}: {message}")]
    InvalidDetection { row: usize, message: String },
    #[error("detection row {row} duplicates image {image_id}, category {category_id} on the same box")]
    DuplicateDetection { row: usize, image_id: u64, category_id: u64 },
    #[error("invalid manifest setting {field}: {message}")]
    InvalidOverride { field: &'static str, message: String },
    #[error("{}: {inner}", path.display())]
    At {
        path: PathBuf,
        #[source]
        inner: Box<DatasetError>,
    },
}

impl DatasetError {
    /// Attach the file the error came from.
    pub fn at(self, path: &Path) -> Self {
        match self {
            e @ (DatasetError::Io { .. } | DatasetError::Json { .. } | DatasetError::At { .. }) => e,
            e => DatasetError::At { path: path.to_path_buf(), inner: Box::new(e) },
        }
    }

    /// The underlying error without file context.
    pub fn root(&self) -> &DatasetError {
        match self {
            DatasetError::At { inner, .. } => inner.root(),
            e => e,
        }
    }
}
