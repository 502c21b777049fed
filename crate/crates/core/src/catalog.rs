//! Class registry and frequency analytics.
//!
//! Joins a scene-centric gold taxonomy with an object-centric image catalog,
//! buckets classes by gold image count, and derives the per-class numbers
//! that drive sampling and calibrated pseudo-labeling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::CocoDataset;

/// Repeat-factor threshold used when none is given.
pub const DEFAULT_RFS_THRESHOLD: f64 = 0.001;
pub const DEFAULT_CALIBRATION_BASE: f64 = 0.5;
pub const DEFAULT_CALIBRATION_GAMMA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("{side} class {class_id} has malformed synset id {synset:?}")]
    MalformedSynset { side: &'static str, class_id: u64, synset: String },
    #[error("{side} synset {synset:?} is used by classes {first} and {second}")]
    DuplicateSynset { side: &'static str, synset: String, first: u64, second: u64 },
    #[error("catalog lists class {0} more than once")]
    DuplicateClass(u64),
    #[error("annotation {annotation_id} references unknown {what} {target}")]
    UnknownReference { annotation_id: u64, what: &'static str, target: u64 },
    #[error("class {0} has no gold images; exclude it or floor its count before calibrating")]
    ZeroCount(u64),
    #[error("invalid parameter {name}: {message}")]
    InvalidParameter { name: &'static str, message: String },
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed catalog JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("CSV export failed: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Rare,
    Common,
    Frequent,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Rare => "rare",
            Bucket::Common => "common",
            Bucket::Frequent => "frequent",
        })
    }
}

/// LVIS frequency group for a class seen in `gold_image_count` training images.
/// Zero counts fall into `Rare`; reports list those classes separately.
pub fn bucket_of(gold_image_count: u64) -> Bucket {
    match gold_image_count {
        0..=10 => Bucket::Rare,
        11..=100 => Bucket::Common,
        _ => Bucket::Frequent,
    }
}

/// True for ImageNet-style ids (`n01234567`) and WordNet sense keys (`acorn.n.01`).
pub fn is_well_formed_synset(s: &str) -> bool {
    let b = s.as_bytes();
    let wnid = b.len() == 9 && b[0].is_ascii_lowercase() && b[1..].iter().all(u8::is_ascii_digit);
    if wnid {
        return true;
    }
    let mut parts = s.rsplitn(3, '.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(sense), Some(pos), Some(lemma)) => {
            !lemma.is_empty()
                && matches!(pos, "n" | "v" | "a" | "s" | "r")
                && sense.len() == 2
                && sense.bytes().all(|c| c.is_ascii_digit())
        }
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class_id: u64,
    pub name: String,
    pub synset_id: Option<String>,
    pub gold_image_count: u64,
    pub gold_instance_count: u64,
    pub oci_image_count: u64,
    pub bucket: Bucket,
}

impl ClassRecord {
    pub fn new(class_id: u64, name: impl Into<String>, synset_id: Option<String>) -> Self {
        Self {
            class_id,
            name: name.into(),
            synset_id,
            gold_image_count: 0,
            gold_instance_count: 0,
            oci_image_count: 0,
            bucket: Bucket::Rare,
        }
    }

    pub fn with_gold_counts(mut self, images: u64, instances: u64) -> Self {
        self.gold_image_count = images;
        self.gold_instance_count = instances;
        self.bucket = bucket_of(images);
        self
    }
}

/// One class entry of an object-centric image catalog file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OciClass {
    pub class_id: u64,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synset_id: Option<String>,
    pub image_paths: Vec<String>,
}

impl OciClass {
    pub fn record(&self) -> ClassRecord {
        let mut r = ClassRecord::new(self.class_id, self.name.clone(), self.synset_id.clone());
        r.oci_image_count = self.image_paths.len() as u64;
        r
    }
}

pub fn load_oci_catalog(path: &Path) -> Result<Vec<OciClass>, CatalogError> {
    let text = fs::read_to_string(path).map_err(|source| CatalogError::Io { path: path.to_path_buf(), source })?;
    let classes: Vec<OciClass> =
        serde_json::from_str(&text).map_err(|source| CatalogError::Json { path: path.to_path_buf(), source })?;
    let mut seen = BTreeSet::new();
    for c in &classes {
        if !seen.insert(c.class_id) {
            return Err(CatalogError::DuplicateClass(c.class_id));
        }
    }
    Ok(classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Synset,
    Name,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gold_class_id: u64,
    pub oci_class_id: u64,
    pub kind: MatchKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynsetMatch {
    /// Sorted by gold class id.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gold: Vec<u64>,
    pub unmatched_oci: Vec<u64>,
}

fn synset_index<'a>(side: &'static str, classes: &'a [ClassRecord]) -> Result<BTreeMap<&'a str, u64>, CatalogError> {
    let mut index = BTreeMap::new();
    for c in classes {
        let Some(s) = c.synset_id.as_deref() else { continue };
        if !is_well_formed_synset(s) {
            return Err(CatalogError::MalformedSynset { side, class_id: c.class_id, synset: s.to_string() });
        }
        if let Some(first) = index.insert(s, c.class_id) {
            return Err(CatalogError::DuplicateSynset { side, synset: s.to_string(), first, second: c.class_id });
        }
    }
    Ok(index)
}

/// Join two taxonomies.
///
/// Classes are paired by exact synset id. Leftover classes where at least
/// one side has no synset id are then paired by case-insensitive exact name,
/// but only where that name is unique among each side's leftovers.
pub fn match_synsets(gold: &[ClassRecord], oci: &[ClassRecord]) -> Result<SynsetMatch, CatalogError> {
    let gold_syn = synset_index("gold", gold)?;
    let oci_syn = synset_index("oci", oci)?;

    let mut pairs = Vec::new();
    let mut used_gold = BTreeSet::new();
    let mut used_oci = BTreeSet::new();
    for (synset, &g) in &gold_syn {
        if let Some(&o) = oci_syn.get(synset) {
            pairs.push(MatchedPair { gold_class_id: g, oci_class_id: o, kind: MatchKind::Synset });
            used_gold.insert(g);
            used_oci.insert(o);
        }
    }

    // leftover classes keyed by lowercase name; None marks an ambiguous name
    fn leftovers<'a>(classes: &'a [ClassRecord], used: &BTreeSet<u64>) -> HashMap<String, Option<&'a ClassRecord>> {
        let mut by_name: HashMap<String, Option<&ClassRecord>> = HashMap::new();
        for c in classes.iter().filter(|c| !used.contains(&c.class_id)) {
            by_name.entry(c.name.to_lowercase()).and_modify(|slot| *slot = None).or_insert(Some(c));
        }
        by_name
    }
    let gold_left = leftovers(gold, &used_gold);
    let oci_left = leftovers(oci, &used_oci);
    for (name, g) in &gold_left {
        let (Some(g), Some(Some(o))) = (g, oci_left.get(name)) else { continue };
        if g.synset_id.is_some() && o.synset_id.is_some() {
            continue;
        }
        pairs.push(MatchedPair { gold_class_id: g.class_id, oci_class_id: o.class_id, kind: MatchKind::Name });
        used_gold.insert(g.class_id);
        used_oci.insert(o.class_id);
    }

    pairs.sort_by_key(|p| (p.gold_class_id, p.oci_class_id));
    let residual = |classes: &[ClassRecord], used: &BTreeSet<u64>| {
        let mut ids: Vec<u64> = classes.iter().map(|c| c.class_id).filter(|id| !used.contains(id)).collect();
        ids.sort_unstable();
        ids
    };
    Ok(SynsetMatch { unmatched_gold: residual(gold, &used_gold), unmatched_oci: residual(oci, &used_oci), pairs })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketTotals {
    pub rare: usize,
    pub common: usize,
    pub frequent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub rows: Vec<ClassRecord>,
    pub bucket_totals: BucketTotals,
    /// Classes bucketed as rare only because they have no gold images.
    pub zero_gold_class_ids: Vec<u64>,
    pub matched_class_count: usize,
    pub synset_match: SynsetMatch,
    pub image_count: usize,
    pub annotation_count: usize,
    pub mean_instances_per_image: f64,
    pub median_instances_per_image: f64,
}

/// Gold-side class records: per-category image and instance counts.
pub fn gold_class_records(gold: &CocoDataset) -> Result<Vec<ClassRecord>, CatalogError> {
    let images: BTreeSet<u64> = gold.images.iter().map(|i| i.id).collect();
    let mut instances: BTreeMap<u64, u64> = gold.categories.iter().map(|c| (c.id, 0)).collect();
    let mut image_sets: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for ann in &gold.annotations {
        if !images.contains(&ann.image_id) {
            return Err(CatalogError::UnknownReference { annotation_id: ann.id, what: "image", target: ann.image_id });
        }
        let Some(n) = instances.get_mut(&ann.category_id) else {
            return Err(CatalogError::UnknownReference {
                annotation_id: ann.id,
                what: "category",
                target: ann.category_id,
            });
        };
        *n += 1;
        image_sets.entry(ann.category_id).or_default().insert(ann.image_id);
    }
    let mut rows: Vec<ClassRecord> = gold
        .categories
        .iter()
        .map(|c| {
            let imgs = image_sets.get(&c.id).map_or(0, |s| s.len() as u64);
            ClassRecord::new(c.id, c.name.clone(), c.synset.clone()).with_gold_counts(imgs, instances[&c.id])
        })
        .collect();
    rows.sort_by_key(|r| r.class_id);
    Ok(rows)
}

fn median(sorted: &[u64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
    }
}

pub fn frequency_report(gold: &CocoDataset, oci_catalog: &[ClassRecord]) -> Result<FrequencyReport, CatalogError> {
    let mut rows = gold_class_records(gold)?;
    let matching = match_synsets(&rows, oci_catalog)?;

    let oci_counts: HashMap<u64, u64> = oci_catalog.iter().map(|c| (c.class_id, c.oci_image_count)).collect();
    let gold_to_oci: HashMap<u64, u64> = matching.pairs.iter().map(|p| (p.gold_class_id, p.oci_class_id)).collect();
    let mut totals = BucketTotals::default();
    let mut zero = Vec::new();
    for row in &mut rows {
        row.oci_image_count = gold_to_oci.get(&row.class_id).map_or(0, |o| oci_counts[o]);
        match row.bucket {
            Bucket::Rare => totals.rare += 1,
            Bucket::Common => totals.common += 1,
            Bucket::Frequent => totals.frequent += 1,
        }
        if row.gold_image_count == 0 {
            zero.push(row.class_id);
        }
    }

    let mut per_image: BTreeMap<u64, u64> = gold.images.iter().map(|i| (i.id, 0)).collect();
    for ann in &gold.annotations {
        *per_image.get_mut(&ann.image_id).expect("checked above") += 1;
    }
    let mut counts: Vec<u64> = per_image.into_values().collect();
    counts.sort_unstable();
    let mean = if counts.is_empty() { 0.0 } else { gold.annotations.len() as f64 / counts.len() as f64 };

    Ok(FrequencyReport {
        matched_class_count: matching.pairs.len(),
        rows,
        bucket_totals: totals,
        zero_gold_class_ids: zero,
        synset_match: matching,
        image_count: gold.images.len(),
        annotation_count: gold.annotations.len(),
        mean_instances_per_image: mean,
        median_instances_per_image: median(&counts),
    })
}

impl FrequencyReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per class, fixed column order.
    pub fn to_csv(&self) -> Result<String, CatalogError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "class_id",
            "name",
            "synset_id",
            "gold_image_count",
            "gold_instance_count",
            "oci_image_count",
            "bucket",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.class_id.to_string(),
                r.name.clone(),
                r.synset_id.clone().unwrap_or_default(),
                r.gold_image_count.to_string(),
                r.gold_instance_count.to_string(),
                r.oci_image_count.to_string(),
                r.bucket.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatFactorTable {
    pub threshold: f64,
    /// r(c) for every class present in at least one image.
    pub class_factors: BTreeMap<u64, f64>,
    /// Max r(c) over the classes in each image; 1 for unannotated images.
    pub image_factors: BTreeMap<u64, f64>,
}

/// Repeat factor for a class present in a fraction `freq` of images.
pub fn repeat_factor(freq: f64, threshold: f64) -> f64 {
    if freq >= threshold {
        1.0
    } else {
        (threshold / freq).sqrt().max(1.0)
    }
}

/// Repeat-factor sampling weights: `r(c) = max(1, sqrt(t / f(c)))` where
/// `f(c)` is the fraction of images containing class `c`.
pub fn rfs_weights(gold: &CocoDataset, threshold: f64) -> Result<RepeatFactorTable, CatalogError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CatalogError::InvalidParameter { name: "t", message: format!("{threshold} not in (0, 1]") });
    }
    if gold.images.is_empty() {
        return Err(CatalogError::EmptyDataset);
    }
    let mut classes_in_image: BTreeMap<u64, BTreeSet<u64>> =
        gold.images.iter().map(|i| (i.id, BTreeSet::new())).collect();
    for ann in &gold.annotations {
        let Some(set) = classes_in_image.get_mut(&ann.image_id) else {
            return Err(CatalogError::UnknownReference { annotation_id: ann.id, what: "image", target: ann.image_id });
        };
        set.insert(ann.category_id);
    }
    let mut image_counts: BTreeMap<u64, u64> = BTreeMap::new();
    for set in classes_in_image.values() {
        for &c in set {
            *image_counts.entry(c).or_default() += 1;
        }
    }
    let total = gold.images.len() as f64;
    let class_factors: BTreeMap<u64, f64> =
        image_counts.iter().map(|(&c, &n)| (c, repeat_factor(n as f64 / total, threshold))).collect();
    let image_factors = classes_in_image
        .iter()
        .map(|(&img, set)| {
            let r = set.iter().map(|c| class_factors[c]).fold(1.0, f64::max);
            (img, r)
        })
        .collect();
    Ok(RepeatFactorTable { threshold, class_factors, image_factors })
}

/// Per-class detection thresholds `base * (N_c / N_max)^gamma`.
///
/// Every class passed in must have at least one image.
pub fn calibrated_thresholds(
    class_counts: &BTreeMap<u64, u64>,
    gamma: f64,
    base: f64,
) -> Result<BTreeMap<u64, f64>, CatalogError> {
    if !(base > 0.0 && base <= 1.0) {
        return Err(CatalogError::InvalidParameter { name: "base", message: format!("{base} not in (0, 1]") });
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(CatalogError::InvalidParameter {
            name: "gamma",
            message: format!("{gamma} must be finite and non-negative"),
        });
    }
    if let Some((&c, _)) = class_counts.iter().find(|(_, &n)| n == 0) {
        return Err(CatalogError::ZeroCount(c));
    }
    let Some(&n_max) = class_counts.values().max() else {
        return Ok(BTreeMap::new());
    };
    Ok(class_counts.iter().map(|(&c, &n)| (c, base * (n as f64 / n_max as f64).powf(gamma))).collect())
}
