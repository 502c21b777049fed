//! Pseudo scene-centric mosaics.
//!
//! A plan picks `side * side` source images; composition resizes each one to
//! the cell size and concatenates them row-major with no blending or padding.
//!
//! # Sampling stream
//!
//! Plans are drawn with ChaCha8. Mosaic `i` of a run with seed `s` uses
//! `ChaCha8Rng::seed_from_u64(s)` switched to stream `i` (`set_stream(i)`),
//! so every mosaic has its own independent stream and any single plan can be
//! regenerated without the others. Indices in `[0, n)` are drawn from
//! `next_u64` by rejection sampling, which makes the draws identical on
//! every platform.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{transform_to_cell, GeometryError};
use crate::pseudolabel::PseudoAnnotation;

pub const MIN_CELL: u32 = 32;
pub const DEFAULT_CELL: u32 = 512;
pub const RESAMPLER: &str = "bilinear";

#[derive(Debug, Error)]
pub enum MosaicError {
    #[error("image pool is empty")]
    EmptyPool,
    #[error("cell size {cell_w}x{cell_h} is below the {MIN_CELL} pixel minimum")]
    CellTooSmall { cell_w: u32, cell_h: u32 },
    #[error("plan {mosaic_id}: cell {cell} (image {image_id}) could not be loaded: {message}")]
    Load { mosaic_id: String, cell: usize, image_id: u64, message: String },
    #[error("plan {mosaic_id}: composite of {side}x{side} cells of {cell_w}x{cell_h} overflows")]
    DimensionOverflow { mosaic_id: String, side: u32, cell_w: u32, cell_h: u32 },
    #[error("plan {mosaic_id}: has {got} cells, grid needs {want}")]
    CellCount { mosaic_id: String, got: usize, want: usize },
    #[error("plan {mosaic_id}: no dimensions known for source image {image_id}")]
    UnknownSource { mosaic_id: String, image_id: u64 },
    #[error("plan {mosaic_id}: annotation on image {image_id} cannot be remapped: {source}")]
    Remap {
        mosaic_id: String,
        image_id: u64,
        #[source]
        source: GeometryError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grid {
    #[serde(rename = "2x2")]
    TwoByTwo,
    #[serde(rename = "3x3")]
    ThreeByThree,
}

impl Grid {
    pub fn side(self) -> u32 {
        match self {
            Grid::TwoByTwo => 2,
            Grid::ThreeByThree => 3,
        }
    }

    pub fn cells(self) -> usize {
        (self.side() * self.side()) as usize
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.side();
        write!(f, "{s}x{s}")
    }
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2x2" | "2" => Ok(Grid::TwoByTwo),
            "3x3" | "3" => Ok(Grid::ThreeByThree),
            other => Err(format!("unknown grid {other:?}, expected 2x2 or 3x3")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// All cells from one class drawn uniformly over classes.
    SameClass,
    /// Cells drawn uniformly from the whole pool.
    Hybrid,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::SameClass => "same_class",
            SamplingMode::Hybrid => "hybrid",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "same_class" | "same" => Ok(SamplingMode::SameClass),
            "hybrid" => Ok(SamplingMode::Hybrid),
            other => Err(format!("unknown sampling mode {other:?}, expected same-class or hybrid")),
        }
    }
}

/// A source image and its image-level class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolImage {
    pub image_id: u64,
    pub class_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MosaicPlan {
    pub mosaic_id: String,
    pub grid: Grid,
    pub cell_w: u32,
    pub cell_h: u32,
    /// Source image ids, row-major.
    pub cells: Vec<u64>,
    pub sampling_mode: SamplingMode,
    pub seed: u64,
    /// ChaCha8 stream number this plan was drawn from.
    pub stream: u64,
    /// Class shared by all cells of a same-class plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u64>,
}

impl MosaicPlan {
    pub fn width(&self) -> u32 {
        self.grid.side() * self.cell_w
    }

    pub fn height(&self) -> u32 {
        self.grid.side() * self.cell_h
    }

    /// (row, col) of cell `index`.
    pub fn cell_position(&self, index: usize) -> (u32, u32) {
        let side = self.grid.side() as usize;
        ((index / side) as u32, (index % side) as u32)
    }
}

pub fn mosaic_name(index: usize) -> String {
    format!("mosaic_{:06}", index + 1)
}

/// Uniform draw in `[0, n)` by rejection on 64-bit outputs.
fn draw_below(rng: &mut ChaCha8Rng, n: u64) -> u64 {
    debug_assert!(n > 0);
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % n;
        }
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw `count` mosaic plans, with replacement.
pub fn plan_mosaics(
    pool: &[PoolImage],
    grid: Grid,
    mode: SamplingMode,
    count: usize,
    seed: u64,
    cell_w: u32,
    cell_h: u32,
) -> Result<Vec<MosaicPlan>, MosaicError> {
    if pool.is_empty() {
        return Err(MosaicError::EmptyPool);
    }
    if cell_w < MIN_CELL || cell_h < MIN_CELL {
        return Err(MosaicError::CellTooSmall { cell_w, cell_h });
    }
    let mut by_class: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for p in pool {
        by_class.entry(p.class_id).or_default().push(p.image_id);
    }
    let classes: Vec<(&u64, &Vec<u64>)> = by_class.iter().collect();

    let plans = (0..count)
        .map(|index| {
            let stream = index as u64;
            let mut rng = stream_rng(seed, stream);
            let (cells, class_id) = match mode {
                SamplingMode::Hybrid => {
                    let cells = (0..grid.cells())
                        .map(|_| pool[draw_below(&mut rng, pool.len() as u64) as usize].image_id)
                        .collect();
                    (cells, None)
                }
                SamplingMode::SameClass => {
                    let (&class_id, members) = classes[draw_below(&mut rng, classes.len() as u64) as usize];
                    let cells = (0..grid.cells())
                        .map(|_| members[draw_below(&mut rng, members.len() as u64) as usize])
                        .collect();
                    (cells, Some(class_id))
                }
            };
            MosaicPlan {
                mosaic_id: mosaic_name(index),
                grid,
                cell_w,
                cell_h,
                cells,
                sampling_mode: mode,
                seed,
                stream,
                class_id,
            }
        })
        .collect();
    Ok(plans)
}

pub trait ImageSource: Sync {
    fn load(&self, image_id: u64) -> Result<RgbImage, String>;
}

impl<F> ImageSource for F
where
    F: Fn(u64) -> Result<RgbImage, String> + Sync,
{
    fn load(&self, image_id: u64) -> Result<RgbImage, String> {
        self(image_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeImage {
    pub mosaic_id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: RgbImage,
    pub resampler: &'static str,
}

/// Resize with bilinear interpolation, pixel centers at half-integers,
/// edge samples clamped. Same-size input is copied untouched.
pub fn resize_bilinear(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    if src.dimensions() == (width, height) {
        return src.clone();
    }
    let (sw, sh) = src.dimensions();
    let taps = |dst: u32, src_len: u32| -> Vec<(u32, u32, f64)> {
        let scale = f64::from(src_len) / f64::from(dst);
        (0..dst)
            .map(|d| {
                let pos = ((f64::from(d) + 0.5) * scale - 0.5).clamp(0.0, f64::from(src_len - 1));
                let lo = pos.floor() as u32;
                let hi = (lo + 1).min(src_len - 1);
                (lo, hi, pos - f64::from(lo))
            })
            .collect()
    };
    let xs = taps(width, sw);
    let ys = taps(height, sh);
    let mut out = RgbImage::new(width, height);
    for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = src.get_pixel(x0, y0).0;
            let p10 = src.get_pixel(x1, y0).0;
            let p01 = src.get_pixel(x0, y1).0;
            let p11 = src.get_pixel(x1, y1).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
                let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                px[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(dx as u32, dy as u32, Rgb(px));
        }
    }
    out
}

pub fn compose(plan: &MosaicPlan, loader: &dyn ImageSource) -> Result<CompositeImage, MosaicError> {
    let side = plan.grid.side();
    if plan.cells.len() != plan.grid.cells() {
        return Err(MosaicError::CellCount {
            mosaic_id: plan.mosaic_id.clone(),
            got: plan.cells.len(),
            want: plan.grid.cells(),
        });
    }
    let overflow = || MosaicError::DimensionOverflow {
        mosaic_id: plan.mosaic_id.clone(),
        side,
        cell_w: plan.cell_w,
        cell_h: plan.cell_h,
    };
    let width = side.checked_mul(plan.cell_w).ok_or_else(overflow)?;
    let height = side.checked_mul(plan.cell_h).ok_or_else(overflow)?;
    (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(3))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or_else(overflow)?;

    let mut canvas = RgbImage::new(width, height);
    for (cell, &image_id) in plan.cells.iter().enumerate() {
        let src = loader.load(image_id).map_err(|message| MosaicError::Load {
            mosaic_id: plan.mosaic_id.clone(),
            cell,
            image_id,
            message,
        })?;
        if src.width() == 0 || src.height() == 0 {
            return Err(MosaicError::Load {
                mosaic_id: plan.mosaic_id.clone(),
                cell,
                image_id,
                message: "image is empty".into(),
            });
        }
        let tile = resize_bilinear(&src, plan.cell_w, plan.cell_h);
        let (row, col) = plan.cell_position(cell);
        image::imageops::replace(&mut canvas, &tile, i64::from(col * plan.cell_w), i64::from(row * plan.cell_h));
    }
    Ok(CompositeImage { mosaic_id: plan.mosaic_id.clone(), width, height, pixels: canvas, resampler: RESAMPLER })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemapOutcome {
    pub annotations: Vec<PseudoAnnotation>,
    /// Annotations skipped because their image is not in the plan.
    pub ignored: usize,
}

/// Move per-image annotations into the composite frame. Each cell gets its
/// own copy, so a source used twice contributes its boxes twice.
pub fn remap_annotations(
    plan: &MosaicPlan,
    per_image: &BTreeMap<u64, Vec<PseudoAnnotation>>,
    source_dims: &BTreeMap<u64, (u32, u32)>,
    composite_image_id: u64,
) -> Result<RemapOutcome, MosaicError> {
    let mut annotations = Vec::new();
    for (cell, image_id) in plan.cells.iter().enumerate() {
        let Some(anns) = per_image.get(image_id) else { continue };
        let &(src_w, src_h) = source_dims
            .get(image_id)
            .ok_or_else(|| MosaicError::UnknownSource { mosaic_id: plan.mosaic_id.clone(), image_id: *image_id })?;
        let (row, col) = plan.cell_position(cell);
        for a in anns {
            let bbox =
                transform_to_cell(&a.bbox, row, col, plan.cell_w, plan.cell_h, src_w, src_h).map_err(|source| {
                    MosaicError::Remap { mosaic_id: plan.mosaic_id.clone(), image_id: *image_id, source }
                })?;
            annotations.push(PseudoAnnotation { image_id: composite_image_id, bbox, ..a.clone() });
        }
    }
    let ignored = per_image.iter().filter(|(id, _)| !plan.cells.contains(id)).map(|(_, v)| v.len()).sum();
    if ignored > 0 {
        log::debug!("event=remap_ignored mosaic_id={} annotations={ignored}", plan.mosaic_id);
    }
    Ok(RemapOutcome { annotations, ignored })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::strategy_fixed;

    fn pool3() -> Vec<PoolImage> {
        (0..9).map(|i| PoolImage { image_id: i + 1, class_id: i % 3 }).collect()
    }

    #[test]
    fn single_image_pool_repeats() {
        let pool = [PoolImage { image_id: 4, class_id: 1 }];
        let plans = plan_mosaics(&pool, Grid::TwoByTwo, SamplingMode::SameClass, 1, 9, 64, 64).unwrap();
        assert_eq!(plans[0].cells, vec![4, 4, 4, 4]);
        assert_eq!(plans[0].class_id, Some(1));
    }

    #[test]
    fn same_seed_same_plans() {
        let a = plan_mosaics(&pool3(), Grid::ThreeByThree, SamplingMode::Hybrid, 20, 42, 64, 64).unwrap();
        let b = plan_mosaics(&pool3(), Grid::ThreeByThree, SamplingMode::Hybrid, 20, 42, 64, 64).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = plan_mosaics(&pool3(), Grid::ThreeByThree, SamplingMode::Hybrid, 20, 43, 64, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn plans_are_prefix_stable() {
        let short = plan_mosaics(&pool3(), Grid::TwoByTwo, SamplingMode::Hybrid, 3, 7, 64, 64).unwrap();
        let long = plan_mosaics(&pool3(), Grid::TwoByTwo, SamplingMode::Hybrid, 10, 7, 64, 64).unwrap();
        assert_eq!(short[..], long[..3]);
    }

    #[test]
    fn same_class_plans_share_class() {
        let pool = pool3();
        let class_of: BTreeMap<u64, u64> = pool.iter().map(|p| (p.image_id, p.class_id)).collect();
        for p in plan_mosaics(&pool, Grid::TwoByTwo, SamplingMode::SameClass, 50, 1, 64, 64).unwrap() {
            assert!(p.cells.iter().all(|c| Some(class_of[c]) == p.class_id));
        }
    }

    #[test]
    fn planning_errors() {
        assert!(matches!(
            plan_mosaics(&[], Grid::TwoByTwo, SamplingMode::Hybrid, 1, 0, 64, 64),
            Err(MosaicError::EmptyPool)
        ));
        assert!(matches!(
            plan_mosaics(&pool3(), Grid::TwoByTwo, SamplingMode::Hybrid, 1, 0, 31, 64),
            Err(MosaicError::CellTooSmall { .. })
        ));
    }

    #[test]
    fn plan_json_shape() {
        let plans = plan_mosaics(&pool3(), Grid::TwoByTwo, SamplingMode::Hybrid, 1, 0, 64, 32).unwrap();
        let v = serde_json::to_value(&plans[0]).unwrap();
        assert_eq!(v["grid"], "2x2");
        assert_eq!(v["sampling_mode"], "hybrid");
        assert_eq!(v["mosaic_id"], "mosaic_000001");
    }

    fn solid(w: u32, h: u32, c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb(c))
    }

    #[test]
    fn compose_three_by_three_dims() {
        let plans = plan_mosaics(&pool3(), Grid::ThreeByThree, SamplingMode::Hybrid, 1, 0, 64, 64).unwrap();
        let loader = |_id: u64| Ok(solid(10, 20, [1, 2, 3]));
        let c = compose(&plans[0], &loader).unwrap();
        assert_eq!((c.width, c.height), (192, 192));
        assert_eq!(c.resampler, "bilinear");
        assert_eq!(c.pixels.get_pixel(191, 191).0, [1, 2, 3]);
    }

    #[test]
    fn compose_names_failing_cell() {
        let plan = MosaicPlan {
            mosaic_id: "m".into(),
            grid: Grid::TwoByTwo,
            cell_w: 32,
            cell_h: 32,
            cells: vec![1, 2, 3, 4],
            sampling_mode: SamplingMode::Hybrid,
            seed: 0,
            stream: 0,
            class_id: None,
        };
        let loader = |id: u64| if id == 3 { Err("corrupt".to_string()) } else { Ok(solid(4, 4, [0, 0, 0])) };
        match compose(&plan, &loader) {
            Err(MosaicError::Load { cell, image_id, .. }) => assert_eq!((cell, image_id), (2, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn compose_overflow() {
        let plan = MosaicPlan {
            mosaic_id: "m".into(),
            grid: Grid::ThreeByThree,
            cell_w: u32::MAX / 2,
            cell_h: 32,
            cells: vec![1; 9],
            sampling_mode: SamplingMode::Hybrid,
            seed: 0,
            stream: 0,
            class_id: None,
        };
        let loader = |_id: u64| Ok(solid(4, 4, [0, 0, 0]));
        assert!(matches!(compose(&plan, &loader), Err(MosaicError::DimensionOverflow { .. })));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let r = resize_bilinear(&solid(100, 80, [7, 200, 33]), 50, 50);
        assert!(r.pixels().all(|p| p.0 == [7, 200, 33]));
    }

    #[test]
    fn remap_identity_cell_and_count() {
        let plan = MosaicPlan {
            mosaic_id: "m".into(),
            grid: Grid::TwoByTwo,
            cell_w: 100,
            cell_h: 100,
            cells: vec![1, 2, 1, 3],
            sampling_mode: SamplingMode::Hybrid,
            seed: 0,
            stream: 0,
            class_id: None,
        };
        let mut per_image = BTreeMap::new();
        let mut dims = BTreeMap::new();
        for id in [1, 2, 3, 9] {
            per_image.insert(id, strategy_fixed(id, 100, 100, 5).unwrap());
            dims.insert(id, (100, 100));
        }
        let out = remap_annotations(&plan, &per_image, &dims, 77).unwrap();
        assert_eq!(out.annotations.len(), 24);
        assert_eq!(out.ignored, 6);
        assert_eq!(out.annotations[1].bbox, per_image[&1][1].bbox);
        assert!(out.annotations.iter().all(|a| a.image_id == 77));
    }
}
