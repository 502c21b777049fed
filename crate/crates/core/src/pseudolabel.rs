//! Pseudo ground-truth boxes for object-centric images.
//!
//! Six strategies:
//!
//! | tag    | boxes                                   | labels            |
//! |--------|-----------------------------------------|-------------------|
//! | `F`    | whole image, center and corner crops    | image label       |
//! | `S`    | whole image                             | image label       |
//! | `D`    | detector output above a fixed threshold | detected classes  |
//! | `Dt`   | as `D`                                  | image label       |
//! | `Dc`   | detector output above per-class cutoffs | image label       |
//! | `LORE` | detector boxes confirmed by removal     | image label       |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, per_class_nms, score_order, BBox, GeometryError, ScoredBox};
use crate::oracle::{ConfidenceOracle, OracleError, OracleQuery};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("detection scored for class {class_id} but no calibrated threshold exists for it")]
    MissingThreshold { class_id: u64 },
    #[error("LORE {stage} failed on image {image_id}: {source}")]
    Oracle {
        stage: &'static str,
        image_id: u64,
        #[source]
        source: OracleError,
    },
    #[error("invalid LORE parameter {name}: {value}")]
    InvalidParams { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "F")]
    Fixed,
    #[serde(rename = "S")]
    Single,
    #[serde(rename = "D")]
    Detector,
    #[serde(rename = "Dt")]
    DetectorRelabel,
    #[serde(rename = "Dc")]
    CalibratedRelabel,
    #[serde(rename = "LORE")]
    Lore,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Fixed,
        Strategy::Single,
        Strategy::Detector,
        Strategy::DetectorRelabel,
        Strategy::CalibratedRelabel,
        Strategy::Lore,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Fixed => "F",
            Strategy::Single => "S",
            Strategy::Detector => "D",
            Strategy::DetectorRelabel => "Dt",
            Strategy::CalibratedRelabel => "Dc",
            Strategy::Lore => "LORE",
        }
    }

    /// Whether every output box carries the host image's label.
    pub fn uses_image_label(self) -> bool {
        self != Strategy::Detector
    }

    pub fn needs_detections(self) -> bool {
        matches!(self, Strategy::Detector | Strategy::DetectorRelabel | Strategy::CalibratedRelabel | Strategy::Lore)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy {s:?}, expected one of f, s, d, dt, dc, lore"))
    }
}

/// One detected box with its per-class scores. A single entry is a top-1
/// detection; longer lists carry a score vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub bbox: BBox,
    pub scores: Vec<(u64, f64)>,
}

impl DetectionRecord {
    pub fn top1(image_id: u64, bbox: BBox, class_id: u64, score: f64) -> Self {
        Self { image_id, bbox, scores: vec![(class_id, score)] }
    }

    /// Highest score in the record, ties to the first listed class.
    pub fn top_score(&self) -> f64 {
        self.scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Clip the box to the image; `None` if nothing is left.
    pub fn clamped(&self, width: u32, height: u32) -> Option<Self> {
        let bbox = self.bbox.clamp_to(f64::from(width), f64::from(height))?;
        Some(Self { bbox, ..self.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAnnotation {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: u64,
    pub strategy: Strategy,
    pub source_score: Option<f64>,
}

pub fn strategy_fixed(
    image_id: u64,
    width: u32,
    height: u32,
    image_label: u64,
) -> Result<Vec<PseudoAnnotation>, PseudoLabelError> {
    Ok(geometry::fixed_location_boxes(width, height)?
        .into_iter()
        .map(|bbox| PseudoAnnotation {
            image_id,
            bbox,
            class_id: image_label,
            strategy: Strategy::Fixed,
            source_score: None,
        })
        .collect())
}

pub fn strategy_single(
    image_id: u64,
    width: u32,
    height: u32,
    image_label: u64,
) -> Result<Vec<PseudoAnnotation>, PseudoLabelError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::DegenerateDimensions { width, height }.into());
    }
    let bbox = BBox::new(0.0, 0.0, f64::from(width), f64::from(height))?;
    Ok(vec![PseudoAnnotation { image_id, bbox, class_id: image_label, strategy: Strategy::Single, source_score: None }])
}

/// (box, class, score) triples that beat their class threshold, strictly.
fn threshold_triples(
    detections: &[DetectionRecord],
    threshold: impl Fn(u64) -> Result<f64, PseudoLabelError>,
) -> Result<Vec<(u64, ScoredBox)>, PseudoLabelError> {
    let mut out = Vec::new();
    for det in detections {
        for &(class_id, score) in &det.scores {
            if score > threshold(class_id)? {
                out.push((det.image_id, ScoredBox::new(det.bbox, score, class_id)));
            }
        }
    }
    Ok(out)
}

fn detector_core(triples: Vec<(u64, ScoredBox)>, nms_iou: f64, strategy: Strategy) -> Vec<PseudoAnnotation> {
    let boxes: Vec<ScoredBox> = triples.iter().map(|(_, b)| *b).collect();
    per_class_nms(&boxes, nms_iou)
        .into_iter()
        .map(|i| {
            let (image_id, b) = triples[i];
            PseudoAnnotation { image_id, bbox: b.bbox, class_id: b.class_id, strategy, source_score: Some(b.score) }
        })
        .collect()
}

fn relabel(
    mut kept: Vec<PseudoAnnotation>,
    image_label: u64,
    nms_iou: f64,
    dedup: bool,
    strategy: Strategy,
) -> Vec<PseudoAnnotation> {
    for a in &mut kept {
        a.class_id = image_label;
        a.strategy = strategy;
    }
    if !dedup {
        return kept;
    }
    let boxes: Vec<ScoredBox> =
        kept.iter().map(|a| ScoredBox::new(a.bbox, a.source_score.unwrap_or(0.0), image_label)).collect();
    geometry::nms(&boxes, nms_iou).into_iter().map(|i| kept[i].clone()).collect()
}

/// Trust the detector: boxes and classes of every score above
/// `conf_threshold`, then per-class NMS.
pub fn strategy_detector(detections: &[DetectionRecord], conf_threshold: f64, nms_iou: f64) -> Vec<PseudoAnnotation> {
    let triples = threshold_triples(detections, |_| Ok(conf_threshold)).expect("constant threshold");
    detector_core(triples, nms_iou, Strategy::Detector)
}

/// Detector boxes relabeled with the image label. With `dedup`, a final
/// class-agnostic NMS merges boxes that only differed by class.
pub fn strategy_detector_relabel(
    detections: &[DetectionRecord],
    conf_threshold: f64,
    nms_iou: f64,
    image_label: u64,
    dedup: bool,
) -> Vec<PseudoAnnotation> {
    let kept = strategy_detector(detections, conf_threshold, nms_iou);
    relabel(kept, image_label, nms_iou, dedup, Strategy::DetectorRelabel)
}

/// Like [`strategy_detector_relabel`] with one threshold per detected class.
pub fn strategy_calibrated_relabel(
    detections: &[DetectionRecord],
    thresholds: &BTreeMap<u64, f64>,
    nms_iou: f64,
    image_label: u64,
    dedup: bool,
) -> Result<Vec<PseudoAnnotation>, PseudoLabelError> {
    let triples = threshold_triples(detections, |class_id| {
        thresholds.get(&class_id).copied().ok_or(PseudoLabelError::MissingThreshold { class_id })
    })?;
    let kept = detector_core(triples, nms_iou, Strategy::CalibratedRelabel);
    Ok(relabel(kept, image_label, nms_iou, dedup, Strategy::CalibratedRelabel))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoreParams {
    pub prefilter_top_k: usize,
    pub prefilter_nms_iou: f64,
    /// Candidate collection stops once the target confidence falls below this.
    pub prefilter_stop_confidence: f64,
    /// Localization stops once `1 - conf / baseline` reaches this.
    pub reduce_ratio_threshold: f64,
}

impl LoreParams {
    pub const SUGGESTED_STOP_CONFIDENCE: f64 = 0.1;
    pub const SUGGESTED_REDUCE_RATIO: f64 = 0.9;

    pub fn new(prefilter_stop_confidence: f64, reduce_ratio_threshold: f64) -> Result<Self, PseudoLabelError> {
        let p =
            Self { prefilter_top_k: 300, prefilter_nms_iou: 0.5, prefilter_stop_confidence, reduce_ratio_threshold };
        p.validate()?;
        Ok(p)
    }

    pub fn suggested() -> Self {
        Self::new(Self::SUGGESTED_STOP_CONFIDENCE, Self::SUGGESTED_REDUCE_RATIO).expect("valid defaults")
    }

    pub fn validate(&self) -> Result<(), PseudoLabelError> {
        if self.prefilter_top_k == 0 {
            return Err(PseudoLabelError::InvalidParams { name: "prefilter_top_k", value: 0.0 });
        }
        for (name, value) in [
            ("prefilter_nms_iou", self.prefilter_nms_iou),
            ("prefilter_stop_confidence", self.prefilter_stop_confidence),
            ("reduce_ratio_threshold", self.reduce_ratio_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PseudoLabelError::InvalidParams { name, value });
            }
        }
        Ok(())
    }
}

fn ask(
    oracle: &dyn ConfidenceOracle,
    stage: &'static str,
    query: &OracleQuery,
) -> Result<crate::oracle::OracleAnswer, PseudoLabelError> {
    oracle.confidence(query).map_err(|source| PseudoLabelError::Oracle { stage, image_id: query.image_id, source })
}

/// Candidate pool for LORE.
///
/// The top-k detections by top score lose their labels and go through NMS.
/// Survivors are removed cumulatively in score order, querying the oracle
/// after each removal, until the target confidence drops below the stop
/// threshold. Everything removed up to and including that point is returned.
pub fn lore_prefilter(
    detections: &[DetectionRecord],
    oracle: &dyn ConfidenceOracle,
    image_id: u64,
    image_label: u64,
    params: &LoreParams,
) -> Result<Vec<BBox>, PseudoLabelError> {
    params.validate()?;
    let scored: Vec<ScoredBox> = detections.iter().map(|d| ScoredBox::new(d.bbox, d.top_score(), 0)).collect();
    let top: Vec<ScoredBox> =
        score_order(&scored).into_iter().take(params.prefilter_top_k).map(|i| scored[i]).collect();
    let survivors = geometry::nms(&top, params.prefilter_nms_iou);

    let mut pool = Vec::new();
    for i in survivors {
        pool.push(top[i].bbox);
        let answer = ask(oracle, "prefilter", &OracleQuery::new(image_id, pool.iter().copied(), image_label))?;
        if answer.target_confidence < params.prefilter_stop_confidence {
            break;
        }
    }
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoreStatus {
    /// The classifier stopped predicting the image label.
    ClassifierFlipped,
    /// The confidence-reducing ratio reached its threshold.
    RatioReached,
    /// Every candidate was removed without a stop condition firing.
    Exhausted,
    /// No candidates; nothing emitted.
    EmptyPool,
    /// The classifier already misses the label on the untouched image; nothing emitted.
    BaselineMismatch,
}

impl LoreStatus {
    pub fn is_warning(self) -> bool {
        matches!(self, LoreStatus::EmptyPool | LoreStatus::BaselineMismatch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoreOutcome {
    pub annotations: Vec<PseudoAnnotation>,
    pub status: LoreStatus,
    /// Candidate indices in removal-rank order.
    pub ranking: Vec<usize>,
}

/// Localization by region removal.
///
/// Candidates are ranked by how much removing each one alone lowers the
/// target confidence (ties to the lower index), then removed cumulatively in
/// that order until the top class changes or the reducing ratio reaches
/// `params.reduce_ratio_threshold`. The removed boxes become the output.
pub fn lore_localize(
    candidates: &[BBox],
    oracle: &dyn ConfidenceOracle,
    image_id: u64,
    image_label: u64,
    params: &LoreParams,
) -> Result<LoreOutcome, PseudoLabelError> {
    params.validate()?;
    let empty = |status| LoreOutcome { annotations: Vec::new(), status, ranking: Vec::new() };
    if candidates.is_empty() {
        warn!("event=lore_empty_pool image_id={image_id}");
        return Ok(empty(LoreStatus::EmptyPool));
    }
    let baseline = ask(oracle, "baseline", &OracleQuery::new(image_id, [], image_label))?;
    if baseline.top_class != image_label || baseline.target_confidence <= 0.0 {
        warn!("event=lore_baseline_mismatch image_id={image_id} label={image_label} top_class={}", baseline.top_class);
        return Ok(empty(LoreStatus::BaselineMismatch));
    }

    let mut drops = Vec::with_capacity(candidates.len());
    for &b in candidates {
        let a = ask(oracle, "ranking", &OracleQuery::new(image_id, [b], image_label))?;
        drops.push(baseline.target_confidence - a.target_confidence);
    }
    let mut ranking: Vec<usize> = (0..candidates.len()).collect();
    ranking.sort_by(|&i, &j| drops[j].total_cmp(&drops[i]).then(i.cmp(&j)));

    let mut removed: Vec<usize> = Vec::new();
    let mut status = LoreStatus::Exhausted;
    for &i in &ranking {
        removed.push(i);
        let q = OracleQuery::new(image_id, removed.iter().map(|&k| candidates[k]), image_label);
        let a = ask(oracle, "removal", &q)?;
        if a.top_class != image_label {
            status = LoreStatus::ClassifierFlipped;
            break;
        }
        if 1.0 - a.target_confidence / baseline.target_confidence >= params.reduce_ratio_threshold {
            status = LoreStatus::RatioReached;
            break;
        }
    }

    let annotations = removed
        .iter()
        .map(|&i| PseudoAnnotation {
            image_id,
            bbox: candidates[i],
            class_id: image_label,
            strategy: Strategy::Lore,
            source_score: None,
        })
        .collect();
    Ok(LoreOutcome { annotations, status, ranking })
}
