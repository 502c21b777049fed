//! COCO results-format detections.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::geometry::BBox;
use crate::pseudolabel::DetectionRecord;

/// One row of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn parse_detections(path: &Path) -> Result<BTreeMap<u64, Vec<DetectionRecord>>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let rows: Vec<DetectionRow> =
        serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    group_rows(&rows).map_err(|e| e.at(path))
}

pub fn parse_detections_str(text: &str) -> Result<BTreeMap<u64, Vec<DetectionRecord>>, DatasetError> {
    let rows: Vec<DetectionRow> =
        serde_json::from_str(text).map_err(|source| DatasetError::Json { path: "<memory>".into(), source })?;
    group_rows(&rows)
}

/// Group rows per image. Rows sharing `(image_id, bbox)` become one record
/// whose score list follows row order; records keep first-appearance order.
fn group_rows(rows: &[DetectionRow]) -> Result<BTreeMap<u64, Vec<DetectionRecord>>, DatasetError> {
    let mut grouped: BTreeMap<u64, Vec<DetectionRecord>> = BTreeMap::new();
    let mut slot: HashMap<(u64, [u64; 4]), usize> = HashMap::new();

    for (row_index, row) in rows.iter().enumerate() {
        if !(0.0..=1.0).contains(&row.score) {
            return Err(DatasetError::InvalidDetection {
                row: row_index,
                message: format!("score {} outside [0, 1]", row.score),
            });
        }
        let bbox = BBox::from_array(row.bbox)
            .map_err(|e| DatasetError::InvalidDetection { row: row_index, message: e.to_string() })?;
        let key = (row.image_id, row.bbox.map(|v| (v + 0.0).to_bits()));
        let records = grouped.entry(row.image_id).or_default();
        match slot.get(&key) {
            Some(&i) => {
                let record = &mut records[i];
                if record.scores.iter().any(|&(c, _)| c == row.category_id) {
                    return Err(DatasetError::DuplicateDetection {
                        row: row_index,
                        image_id: row.image_id,
                        category_id: row.category_id,
                    });
                }
                record.scores.push((row.category_id, row.score));
            }
            None => {
                slot.insert(key, records.len());
                records.push(DetectionRecord {
                    image_id: row.image_id,
                    bbox,
                    scores: vec![(row.category_id, row.score)],
                });
            }
        }
    }
    Ok(grouped)
}
