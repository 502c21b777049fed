use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::CocoDataset;
use crate::catalog::{bucket_of, Bucket};

/// Ids listed per finding before the list is truncated.
const MAX_LISTED_IDS: usize = 50;
const BOUNDS_TOLERANCE: f64 = 1e-6;
const AREA_RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Fatal,
    Warning,
}

/// One kind of problem with every offending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub code: String,
    pub message: String,
    pub count: usize,
    /// Offending ids (annotation ids unless the code says otherwise), truncated.
    pub ids: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub rare: usize,
    pub common: usize,
    pub frequent: usize,
    /// Categories with no annotated image; counted as rare too.
    pub without_images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub image_count: usize,
    pub annotation_count: usize,
    pub category_count: usize,
    pub images_without_annotations: usize,
    pub buckets: BucketSummary,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn fatal_count(&self) -> usize {
        self.findings.iter().filter(|f| f.severity == Severity::Fatal).map(|f| f.count).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

#[derive(Default)]
struct Collector {
    by_code: BTreeMap<&'static str, (Severity, &'static str, usize, Vec<u64>)>,
}

impl Collector {
    fn add(&mut self, severity: Severity, code: &'static str, message: &'static str, id: u64) {
        let entry = self.by_code.entry(code).or_insert_with(|| (severity, message, 0, Vec::new()));
        entry.2 += 1;
        if entry.3.len() < MAX_LISTED_IDS {
            entry.3.push(id);
        }
    }

    fn finish(self) -> Vec<Finding> {
        let mut out: Vec<Finding> = self
            .by_code
            .into_iter()
            .map(|(code, (severity, message, count, ids))| Finding {
                severity,
                code: code.to_string(),
                message: message.to_string(),
                count,
                ids,
            })
            .collect();
        out.sort_by(|a, b| a.severity.cmp(&b.severity).then(a.code.cmp(&b.code)));
        out
    }
}

/// Check referential integrity, box sanity and area consistency.
///
/// Works on unchecked input so every problem is reported instead of only
/// the first one.
pub fn validate_dataset(dataset: &CocoDataset) -> ValidationReport {
    use Severity::*;
    let mut c = Collector::default();

    let mut images = BTreeMap::new();
    for img in &dataset.images {
        if images.insert(img.id, img).is_some() {
            c.add(Fatal, "duplicate_image_id", "image id used more than once (ids are image ids)", img.id);
        }
        if img.width == 0 || img.height == 0 {
            c.add(Fatal, "empty_image", "image has zero width or height (ids are image ids)", img.id);
        }
    }
    let mut categories = HashSet::new();
    for cat in &dataset.categories {
        if !categories.insert(cat.id) {
            c.add(Fatal, "duplicate_category_id", "category id used more than once (ids are category ids)", cat.id);
        }
    }

    let mut ann_ids = HashSet::new();
    let mut annotated_images = BTreeSet::new();
    let mut images_per_category: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for ann in &dataset.annotations {
        if !ann_ids.insert(ann.id) {
            c.add(Fatal, "duplicate_annotation_id", "annotation id used more than once", ann.id);
        }
        let image = images.get(&ann.image_id);
        if image.is_none() {
            c.add(Fatal, "dangling_image_id", "annotation references a missing image", ann.id);
        }
        if !categories.contains(&ann.category_id) {
            c.add(Fatal, "dangling_category_id", "annotation references a missing category", ann.id);
        } else if image.is_some() {
            images_per_category.entry(ann.category_id).or_default().insert(ann.image_id);
        }
        annotated_images.insert(ann.image_id);

        let [x, y, w, h] = ann.bbox;
        if !ann.bbox.iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
            c.add(Fatal, "invalid_bbox", "bbox has non-finite or non-positive extent", ann.id);
            continue;
        }
        if let Some(img) = image {
            let (iw, ih) = (f64::from(img.width), f64::from(img.height));
            if x < -BOUNDS_TOLERANCE
                || y < -BOUNDS_TOLERANCE
                || x + w > iw + BOUNDS_TOLERANCE
                || y + h > ih + BOUNDS_TOLERANCE
            {
                c.add(Fatal, "bbox_out_of_bounds", "bbox extends past the image", ann.id);
            }
        }
        let expected = w * h;
        if (ann.area - expected).abs() > AREA_RELATIVE_TOLERANCE * expected {
            c.add(Warning, "area_mismatch", "area differs from bbox width * height", ann.id);
        }
    }

    let mut buckets = BucketSummary::default();
    for cat in &dataset.categories {
        let n = images_per_category.get(&cat.id).map_or(0, BTreeSet::len) as u64;
        if n == 0 {
            buckets.without_images += 1;
        }
        match bucket_of(n) {
            Bucket::Rare => buckets.rare += 1,
            Bucket::Common => buckets.common += 1,
            Bucket::Frequent => buckets.frequent += 1,
        }
    }

    ValidationReport {
        image_count: dataset.images.len(),
        annotation_count: dataset.annotations.len(),
        category_count: dataset.categories.len(),
        images_without_annotations: images.keys().filter(|id| !annotated_images.contains(id)).count(),
        buckets,
        findings: c.finish(),
    }
}
