//! Pseudo-labeling and mosaic composition for turning object-centric image
//! collections into detector training data.
//!
//! - [`geometry`]: boxes, IoU, NMS, fixed-location boxes, cell transforms.
//! - [`catalog`]: class catalogs, synset matching, frequency buckets,
//!   repeat-factor weights and calibrated thresholds.
//! - [`pseudolabel`]: the box-labeling strategies, including the
//!   removal-based localization search.
//! - [`oracle`]: classifier confidence oracles (file table and HTTP).
//! - [`mosaic`]: seeded mosaic planning, composition and box remapping.
//! - [`dataset_io`]: COCO-style reading, writing, validation and the
//!   training manifest.
//! - [`cli`]: the `scenesynth` command line.

pub mod catalog;
pub mod cli;
pub mod dataset_io;
pub mod geometry;
pub mod mosaic;
pub mod oracle;
pub mod pseudolabel;

pub use geometry::{BBox, ScoredBox};
pub use pseudolabel::{PseudoAnnotation, Strategy};
