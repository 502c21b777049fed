//! The `scenesynth` command line.
//!
//! Exit codes: 0 success, 1 data or validation failure, 2 usage or
//! configuration error. Logs go to stderr as `key=value` lines; data goes to
//! files or stdout.

mod commands;
mod config;
pub mod draw;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{CatalogError, DEFAULT_CALIBRATION_BASE, DEFAULT_CALIBRATION_GAMMA, DEFAULT_RFS_THRESHOLD};
use crate::dataset_io::DatasetError;
use crate::mosaic::{MosaicError, DEFAULT_CELL};
use crate::oracle::OracleError;
use crate::pseudolabel::{LoreParams, PseudoLabelError, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};

pub const ORACLE_URL_ENV: &str = "SCENESYNTH_ORACLE_URL";
pub const ORACLE_TOKEN_ENV: &str = "SCENESYNTH_ORACLE_TOKEN";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or missing inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Inputs were readable but wrong, or processing failed. Exit code 1.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e.root() {
            DatasetError::InvalidOverride { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CatalogError> for CliError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::InvalidParameter { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PseudoLabelError> for CliError {
    fn from(e: PseudoLabelError) -> Self {
        match e {
            PseudoLabelError::InvalidParams { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MosaicError> for CliError {
    fn from(e: MosaicError) -> Self {
        match e {
            MosaicError::CellTooSmall { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "scenesynth",
    version,
    about = "Pseudo-label object-centric images and stitch them into scene-like training mosaics"
)]
pub struct Cli {
    /// More log output (repeat for trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class-frequency report, repeat factors and calibrated thresholds.
    Analyze(AnalyzeArgs),
    /// Impute boxes on catalog images with one strategy.
    Pseudolabel(PseudolabelArgs),
    /// Plan, compose and annotate mosaics from a pseudo-labeled dataset.
    Mosaic(MosaicArgs),
    /// Write the four-stage training manifest.
    Manifest(ManifestArgs),
    /// Draw annotation boxes onto copies of dataset images.
    Preview(PreviewArgs),
    /// Check a dataset's integrity and print a report.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    /// Gold scene-centric dataset (COCO/LVIS JSON).
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Object-centric image catalog (JSON).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Output directory for the reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Repeat-factor sampling threshold t.
    #[arg(long, default_value_t = DEFAULT_RFS_THRESHOLD)]
    pub rfs_threshold: f64,
    /// Exponent of the calibrated thresholds.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_GAMMA)]
    pub gamma: f64,
    /// Threshold of the most frequent class.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_BASE)]
    pub base: f64,
    /// JSON file with defaults for any of these settings.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PseudolabelArgs {
    /// Object-centric image catalog (JSON).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// One of f, s, d, dt, dc, lore.
    #[arg(long, default_value = "f")]
    pub strategy: String,
    /// Output annotation file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Detector output in COCO results format, keyed by catalog image id.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Gold dataset; supplies categories and, for dc, class image counts.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Per-class thresholds for dc as a JSON object; overrides --gold counts.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Confidence oracle for lore: `file:<table.json>` or an http(s) URL.
    #[arg(long, env = ORACLE_URL_ENV)]
    pub oracle: Option<String>,
    /// Bearer token sent to an HTTP oracle.
    #[arg(long, env = ORACLE_TOKEN_ENV, hide_env_values = true)]
    #[serde(skip)]
    pub oracle_token: Option<String>,
    /// HTTP oracle timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub oracle_timeout: f64,
    /// Fill color of removed regions, `r,g,b`.
    #[arg(long, default_value = "128,128,128")]
    pub patch_color: String,
    /// Score threshold for d and dt.
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    pub conf: f64,
    /// IoU threshold of the suppression steps.
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_BASE)]
    pub base: f64,
    /// Detections kept before the lore candidate search.
    #[arg(long, default_value_t = 300)]
    pub lore_top_k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lore_nms_iou: f64,
    /// Candidate search stops below this target confidence.
    #[arg(long, default_value_t = LoreParams::SUGGESTED_STOP_CONFIDENCE)]
    pub lore_stop_confidence: f64,
    /// Removal stops once the confidence-reducing ratio reaches this.
    #[arg(long, default_value_t = LoreParams::SUGGESTED_REDUCE_RATIO)]
    pub lore_ratio: f64,
    /// Keep relabeled boxes that overlap after relabeling.
    #[arg(long)]
    pub no_dedup: bool,
    /// Use the fixed six boxes for images that end up with none.
    #[arg(long)]
    pub fallback_fixed: bool,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct MosaicArgs {
    /// Pseudo-labeled dataset written by `pseudolabel`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sampling seed (required).
    #[arg(long)]
    pub seed: Option<u64>,
    /// 2x2 or 3x3.
    #[arg(long, default_value = "2x2")]
    pub grid: String,
    /// same-class or hybrid.
    #[arg(long, default_value = "hybrid")]
    pub sampling: String,
    /// Number of mosaics.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Square cell size in pixels.
    #[arg(long, default_value_t = DEFAULT_CELL)]
    pub cell_size: u32,
    /// Cell width; overrides --cell-size.
    #[arg(long)]
    pub cell_w: Option<u32>,
    /// Cell height; overrides --cell-size.
    #[arg(long)]
    pub cell_h: Option<u32>,
    /// png or jpeg.
    #[arg(long, default_value = "png")]
    pub format: String,
    /// Directory the dataset's file names are relative to.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ManifestArgs {
    /// Output file; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// detection or segmentation.
    #[arg(long, default_value = "detection")]
    pub mode: String,
    /// Fine-tune on pseudo data with the classification loss only.
    #[arg(long)]
    pub cls_only: bool,
    #[arg(long)]
    pub gold_dataset: Option<String>,
    #[arg(long)]
    pub pseudo_dataset: Option<String>,
    #[arg(long)]
    pub batch_size: Option<u32>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    /// Iterations of each fine-tuning stage.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Iterations added to the base detector schedule.
    #[arg(long)]
    pub extra_iterations: Option<u64>,
    #[arg(long)]
    pub rfs_threshold: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PreviewArgs {
    /// Dataset whose boxes are drawn.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Only these image ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub image_ids: Vec<u64>,
    /// At most this many images, lowest ids first.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ValidateArgs {
    /// Dataset to check.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .filter_module("ureq", log::LevelFilter::Warn)
        .filter_module("rustls", log::LevelFilter::Warn)
        .format(|buf, record| writeln!(buf, "level={} {}", record.level().as_str().to_ascii_lowercase(), record.args()))
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn dispatch(command: Command, m: &ArgMatches) -> Result<(), CliError> {
    match command {
        Command::Analyze(a) => commands::analyze(&config::merge(&a, a.config.as_deref(), m)?),
        Command::Pseudolabel(a) => {
            let mut merged = config::merge(&a, a.config.as_deref(), m)?;
            merged.oracle_token = a.oracle_token;
            commands::pseudolabel(&merged)
        }
        Command::Mosaic(a) => commands::mosaic(&config::merge(&a, a.config.as_deref(), m)?),
        Command::Manifest(a) => commands::manifest(&config::merge(&a, a.config.as_deref(), m)?),
        Command::Preview(a) => commands::preview(&config::merge(&a, a.config.as_deref(), m)?),
        Command::Validate(a) => commands::validate(&config::merge(&a, a.config.as_deref(), m)?),
    }
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    init_logging(cli.verbose, cli.quiet);
    let sub = matches.subcommand().map(|(_, m)| m).expect("a subcommand is required");
    match dispatch(cli.command, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn main_entry() -> ExitCode {
    run(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        std::fs::write(&cfg, r#"{"conf": 0.3, "nms_iou": 0.7, "strategy": "dt"}"#).unwrap();
        let argv = ["scenesynth", "pseudolabel", "--conf", "0.9", "--config", cfg.to_str().unwrap()];
        let matches = Cli::command().try_get_matches_from(argv).unwrap();
        let Command::Pseudolabel(a) = Cli::from_arg_matches(&matches).unwrap().command else {
            panic!("wrong subcommand")
        };
        let sub = matches.subcommand().unwrap().1;
        let merged = config::merge(&a, a.config.as_deref(), sub).unwrap();
        assert_eq!(merged.conf, 0.9);
        assert_eq!(merged.nms_iou, 0.7);
        assert_eq!(merged.strategy, "dt");
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        std::fs::write(&cfg, r#"{"colour": 1}"#).unwrap();
        let argv = ["scenesynth", "manifest", "--config", cfg.to_str().unwrap()];
        let matches = Cli::command().try_get_matches_from(argv).unwrap();
        let Command::Manifest(a) = Cli::from_arg_matches(&matches).unwrap().command else { panic!("wrong subcommand") };
        let err = config::merge(&a, a.config.as_deref(), matches.subcommand().unwrap().1).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
