//! Machine-readable plan for the four-stage training procedure.
//!
//! The manifest only describes training; nothing here runs it.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::DatasetError;

pub const BACKBONE: &str = "backbone";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    #[default]
    Detection,
    Segmentation,
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainingMode::Detection => f.write_str("detection"),
            TrainingMode::Segmentation => f.write_str("segmentation"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Rpn,
    Cls,
    Reg,
    Mask,
}

/// Base detector schedule for stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_schedule: String,
    pub extra_iterations: u64,
    pub sampler: String,
    pub rfs_threshold: f64,
    pub checkpoint_selection: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub index: u8,
    pub name: String,
    pub dataset_path: String,
    pub produces: String,
    pub losses: Vec<Loss>,
    pub iterations: Option<u64>,
    pub batch_size: Option<u32>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub learning_rate: Option<f64>,
    pub init_from: String,
    pub frozen: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub mode: TrainingMode,
    pub stages: Vec<Stage>,
}

/// Hyperparameter overrides. `Default` gives the reference configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestConfig {
    pub gold_dataset: String,
    pub pseudo_dataset: String,
    pub batch_size: u32,
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub iterations: u64,
    pub extra_iterations: u64,
    pub rfs_threshold: f64,
    /// Fine-tune on pseudo data with the classification loss only.
    pub cls_only: bool,
}

impl Default for ManifestConfig {
    fn default() -> Self {
        Self {
            gold_dataset: "gold/train.json".into(),
            pseudo_dataset: "pseudo/annotations.json".into(),
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            learning_rate: 2e-4,
            iterations: 90_000,
            extra_iterations: 90_000,
            rfs_threshold: 0.001,
            cls_only: false,
        }
    }
}

impl ManifestConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |field: &'static str, message: String| Err(DatasetError::InvalidOverride { field, message });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate", format!("{} not in (0, 1]", self.learning_rate));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad("momentum", format!("{} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("{} must be non-negative", self.weight_decay));
        }
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1".into());
        }
        if !(self.rfs_threshold > 0.0 && self.rfs_threshold <= 1.0) {
            return bad("rfs_threshold", format!("{} not in (0, 1]", self.rfs_threshold));
        }
        if self.gold_dataset.is_empty() || self.pseudo_dataset.is_empty() {
            return bad("dataset_path", "dataset paths must be non-empty".into());
        }
        Ok(())
    }
}

pub const STAGE_NAMES: [&str; 4] =
    ["Detector Pretraining", "Pseudo-labeling", "First-stage Fine-tuning", "Second-stage Fine-tuning"];

pub fn emit_manifest(config: &ManifestConfig, mode: TrainingMode) -> Result<TrainingManifest, DatasetError> {
    config.validate()?;
    let seg = mode == TrainingMode::Segmentation;
    let with_mask = |mut l: Vec<Loss>| {
        if seg {
            l.push(Loss::Mask);
        }
        l
    };
    let full = vec![Loss::Rpn, Loss::Cls, Loss::Reg];
    let pseudo_losses = if config.cls_only { vec![Loss::Cls] } else { full.clone() };
    let batch_norm = vec!["batch_norm".to_string()];

    let fine_tune = |index: u8, dataset: &str, losses: Vec<Loss>, init: &str, notes: Vec<String>| Stage {
        index,
        name: STAGE_NAMES[usize::from(index) - 1].into(),
        dataset_path: dataset.into(),
        produces: "weights".into(),
        losses,
        iterations: Some(config.iterations),
        batch_size: Some(config.batch_size),
        momentum: Some(config.momentum),
        weight_decay: Some(config.weight_decay),
        learning_rate: Some(config.learning_rate),
        init_from: init.into(),
        frozen: batch_norm.clone(),
        schedule: None,
        notes,
    };

    let mut stage4_notes = Vec::new();
    if seg {
        stage4_notes.push("mask head initialized from the stage 1 model".to_string());
    }

    let stages = vec![
        Stage {
            index: 1,
            name: STAGE_NAMES[0].into(),
            dataset_path: config.gold_dataset.clone(),
            produces: "weights".into(),
            losses: with_mask(full.clone()),
            iterations: None,
            batch_size: None,
            momentum: None,
            weight_decay: None,
            learning_rate: None,
            init_from: BACKBONE.into(),
            frozen: batch_norm.clone(),
            schedule: Some(Schedule {
                base_schedule: "1x".into(),
                extra_iterations: config.extra_iterations,
                sampler: "repeat_factor".into(),
                rfs_threshold: config.rfs_threshold,
                checkpoint_selection: "advisory: keep the checkpoint with the best box AP".into(),
            }),
            notes: Vec::new(),
        },
        Stage {
            index: 2,
            name: STAGE_NAMES[1].into(),
            dataset_path: config.pseudo_dataset.clone(),
            produces: "data".into(),
            losses: Vec::new(),
            iterations: None,
            batch_size: None,
            momentum: None,
            weight_decay: None,
            learning_rate: None,
            init_from: STAGE_NAMES[0].into(),
            frozen: Vec::new(),
            schedule: None,
            notes: vec!["pseudo-labels and mosaics; uses the stage 1 detector when the strategy needs one".into()],
        },
        fine_tune(3, &config.pseudo_dataset, pseudo_losses, STAGE_NAMES[0], Vec::new()),
        fine_tune(4, &config.gold_dataset, with_mask(full), STAGE_NAMES[2], stage4_notes),
    ];
    Ok(TrainingManifest { mode, stages })
}

pub fn manifest_to_string(manifest: &TrainingManifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}
