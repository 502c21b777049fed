//! COCO / LVIS dataset files.
//!
//! Known fields are typed; everything else is kept in `extra` maps so a
//! parse/emit cycle does not drop LVIS-specific keys such as `frequency` or
//! `not_exhaustive_category_ids`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::DatasetError;
use crate::geometry::BBox;
use crate::pseudolabel::{PseudoAnnotation, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    /// Image-level class label of an object-centric image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_label: Option<u64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CocoImage {
    pub fn new(id: u64, file_name: impl Into<String>, width: u32, height: u32) -> Self {
        Self { id, file_name: file_name.into(), width, height, image_label: None, extra: Map::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Raw `[x, y, w, h]`; kept unvalidated so `validate` can report bad boxes.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_score: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CocoAnnotation {
    pub fn from_pseudo(id: u64, p: &PseudoAnnotation) -> Self {
        Self {
            id,
            image_id: p.image_id,
            category_id: p.class_id,
            bbox: p.bbox.to_array(),
            area: p.bbox.area(),
            iscrowd: Some(0),
            strategy: Some(p.strategy),
            source_score: p.source_score,
            extra: Map::new(),
        }
    }

    pub fn to_pseudo(&self) -> Result<PseudoAnnotation, DatasetError> {
        let bbox = BBox::from_array(self.bbox)
            .map_err(|e| DatasetError::InvalidAnnotation { annotation_id: self.id, message: e.to_string() })?;
        Ok(PseudoAnnotation {
            image_id: self.image_id,
            bbox,
            class_id: self.category_id,
            strategy: self.strategy.unwrap_or(Strategy::Fixed),
            source_score: self.source_score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_count: Option<u64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CocoCategory {
    pub fn new(id: u64, name: impl Into<String>) -> Self {
        Self { id, name: name.into(), synset: None, image_count: None, instance_count: None, extra: Map::new() }
    }
}

/// Reproducibility header carried by every dataset this tool writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_size: Option<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resampler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<String>,
    #[serde(default)]
    pub sources: Vec<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Provenance {
    pub fn new() -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CocoDataset {
    pub fn image_map(&self) -> BTreeMap<u64, &CocoImage> {
        self.images.iter().map(|i| (i.id, i)).collect()
    }

    pub fn category_map(&self) -> BTreeMap<u64, &CocoCategory> {
        self.categories.iter().map(|c| (c.id, c)).collect()
    }

    /// Sort every collection by id; the emitted order.
    pub fn sort_by_id(&mut self) {
        self.images.sort_by_key(|i| i.id);
        self.annotations.sort_by_key(|a| a.id);
        self.categories.sort_by_key(|c| c.id);
    }

    /// Duplicate ids and dangling references, first problem wins.
    pub fn check_integrity(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for (index, img) in self.images.iter().enumerate() {
            if !seen.insert(img.id) {
                return Err(DatasetError::DuplicateId { collection: "images", id: img.id, index });
            }
        }
        let mut cats = HashSet::new();
        for (index, cat) in self.categories.iter().enumerate() {
            if !cats.insert(cat.id) {
                return Err(DatasetError::DuplicateId { collection: "categories", id: cat.id, index });
            }
        }
        let mut anns = HashSet::new();
        for (index, ann) in self.annotations.iter().enumerate() {
            if !anns.insert(ann.id) {
                return Err(DatasetError::DuplicateId { collection: "annotations", id: ann.id, index });
            }
            if !seen.contains(&ann.image_id) {
                return Err(DatasetError::DanglingReference {
                    annotation_id: ann.id,
                    field: "image_id",
                    target: ann.image_id,
                });
            }
            if !cats.contains(&ann.category_id) {
                return Err(DatasetError::DanglingReference {
                    annotation_id: ann.id,
                    field: "category_id",
                    target: ann.category_id,
                });
            }
        }
        Ok(())
    }
}

/// Read a dataset without integrity checks. `validate` builds on this.
pub fn load_coco_unchecked(path: &Path) -> Result<CocoDataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })
}

pub fn parse_coco(path: &Path) -> Result<CocoDataset, DatasetError> {
    let dataset = load_coco_unchecked(path)?;
    dataset.check_integrity().map_err(|e| e.at(path))?;
    Ok(dataset)
}

pub fn parse_coco_str(text: &str) -> Result<CocoDataset, DatasetError> {
    let dataset: CocoDataset =
        serde_json::from_str(text).map_err(|source| DatasetError::Json { path: "<memory>".into(), source })?;
    dataset.check_integrity()?;
    Ok(dataset)
}

/// Serialize with collections ordered by id. Output is byte-stable.
pub fn to_coco_string(dataset: &CocoDataset) -> String {
    let mut sorted = dataset.clone();
    sorted.sort_by_id();
    let mut s = serde_json::to_string_pretty(&sorted).expect("dataset serializes");
    s.push('\n');
    s
}

pub fn emit_coco(dataset: &CocoDataset, path: &Path) -> Result<(), DatasetError> {
    write_text(path, &to_coco_string(dataset))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(text.as_bytes()).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "file_name": "a.jpg", "width": 10, "height": 10}],
        "categories": [{"id": 1, "name": "cat"}],
        "annotations": []
    }"#;

    #[test]
    fn minimal_file_parses() {
        let d = parse_coco_str(MINIMAL).unwrap();
        assert_eq!(d.images.len(), 1);
        assert!(d.annotations.is_empty());
    }

    #[test]
    fn dangling_image_reference_names_annotation() {
        let text = r#"{
            "images": [{"id": 1, "file_name": "a.jpg", "width": 10, "height": 10}],
            "categories": [{"id": 1, "name": "cat"}],
            "annotations": [{"id": 7, "image_id": 999, "category_id": 1, "bbox": [0,0,1,1], "area": 1}]
        }"#;
        let err = parse_coco_str(text).unwrap_err();
        match err {
            DatasetError::DanglingReference { annotation_id, target, .. } => {
                assert_eq!(annotation_id, 7);
                assert_eq!(target, 999);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"{
            "images": [{"id": 1, "file_name": "a.jpg", "width": 10, "height": 10},
                       {"id": 1, "file_name": "b.jpg", "width": 10, "height": 10}],
            "categories": [], "annotations": []
        }"#;
        assert!(matches!(
            parse_coco_str(text),
            Err(DatasetError::DuplicateId { collection: "images", id: 1, index: 1 })
        ));
    }

    #[test]
    fn malformed_json_is_error() {
        assert!(matches!(parse_coco_str("{\"images\": ["), Err(DatasetError::Json { .. })));
    }

    #[test]
    fn unknown_fields_survive() {
        let text = r#"{
            "info": {"year": 2020},
            "images": [{"id": 1, "file_name": "a.jpg", "width": 10, "height": 10, "neg_category_ids": [3]}],
            "categories": [{"id": 1, "name": "cat", "frequency": "r", "synset": "cat.n.01"}],
            "annotations": []
        }"#;
        let d = parse_coco_str(text).unwrap();
        let again = parse_coco_str(&to_coco_string(&d)).unwrap();
        assert_eq!(d, again);
        assert_eq!(again.extra["info"]["year"], 2020);
        assert_eq!(again.categories[0].extra["frequency"], "r");
    }

    #[test]
    fn emission_is_byte_stable_and_sorted() {
        let mut d = parse_coco_str(MINIMAL).unwrap();
        d.categories.insert(0, CocoCategory::new(5, "zebra"));
        let a = to_coco_string(&d);
        let b = to_coco_string(&d);
        assert_eq!(a, b);
        assert!(a.find("\"cat\"").unwrap() < a.find("\"zebra\"").unwrap());
        assert!(a.contains("\"annotations\": []"));
    }
}
