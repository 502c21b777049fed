//! Bounding-box arithmetic shared by every pipeline stage.
//!
//! Boxes are stored as XYWH in pixel space, the same layout as the COCO
//! `bbox` field. Corner form only appears inside [`iou`].

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest image side for which 80% crops keep a positive integer size.
pub const MIN_FIXED_DIM: u32 = 5;

/// Tolerance for "inside the image" checks on real-valued boxes.
pub const BOUNDS_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{x}, {y}, {w}, {h}]: width and height must be finite and positive")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("image dimensions {width}x{height} are too small, both sides must be at least {MIN_FIXED_DIM}")]
    DegenerateDimensions { width: u32, height: u32 },
    #[error("box {bbox:?} lies outside the {width}x{height} source image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("cell size {cell_w}x{cell_h} is invalid")]
    InvalidCell { cell_w: u32, cell_h: u32 },
}

/// Axis-aligned box, XYWH, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let finite = x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite();
        if !finite || w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::InvalidBox { x, y, w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= -BOUNDS_EPS
            && self.y >= -BOUNDS_EPS
            && self.right() <= width + BOUNDS_EPS
            && self.bottom() <= height + BOUNDS_EPS
    }

    /// Intersect with the image rectangle. `None` when nothing positive remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width);
        let y1 = self.bottom().min(height);
        BBox::new(x0, y0, x1 - x0, y1 - y0).ok()
    }

    /// Lexicographic order on (x, y, w, h); used for canonical box sets.
    pub fn canonical_cmp(&self, other: &BBox) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::from_array(v)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// A box with a detection confidence and the class it was scored for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u64,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, class_id: u64) -> Self {
        Self { bbox, score, class_id }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Candidate indices ordered by descending score, ties by lower index.
pub fn score_order(candidates: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| candidates[j].score.total_cmp(&candidates[i].score).then(i.cmp(&j)));
    order
}

/// Greedy class-agnostic non-maximum suppression.
///
/// A candidate is kept iff its IoU with every already-kept box is at most
/// `iou_threshold`. Returns kept indices in score order.
pub fn nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for idx in score_order(candidates) {
        let candidate = &candidates[idx].bbox;
        if kept.iter().all(|&k| iou(&candidates[k].bbox, candidate) <= iou_threshold) {
            kept.push(idx);
        }
    }
    kept
}

/// NMS run independently inside each `class_id` partition.
///
/// The union of the kept sets is returned in global score order (ties by
/// lower index), so boxes of different classes never suppress each other.
pub fn per_class_nms(candidates: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut partitions: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        partitions.entry(c.class_id).or_default().push(i);
    }
    let mut kept = Vec::new();
    for members in partitions.values() {
        let subset: Vec<ScoredBox> = members.iter().map(|&i| candidates[i]).collect();
        kept.extend(nms(&subset, iou_threshold).into_iter().map(|j| members[j]));
    }
    kept.sort_by(|&i, &j| candidates[j].score.total_cmp(&candidates[i].score).then(i.cmp(&j)));
    kept
}

// round(4n/5) with halves going up, in exact integer arithmetic
fn eighty_percent(n: u32) -> u32 {
    ((8 * u64::from(n) + 5) / 10) as u32
}

/// The six fixed pseudo-label locations for a `width` x `height` image.
///
/// Order: whole image, center crop, then the top-left, top-right,
/// bottom-left and bottom-right corner crops. Crops are 80% of each side,
/// rounded half-up to whole pixels.
pub fn fixed_location_boxes(width: u32, height: u32) -> Result<[BBox; 6], GeometryError> {
    if width < MIN_FIXED_DIM || height < MIN_FIXED_DIM {
        return Err(GeometryError::DegenerateDimensions { width, height });
    }
    let cw = eighty_percent(width);
    let ch = eighty_percent(height);
    let (dx, dy) = (width - cw, height - ch);
    let b =
        |x: u32, y: u32, w: u32, h: u32| BBox { x: f64::from(x), y: f64::from(y), w: f64::from(w), h: f64::from(h) };
    Ok([
        b(0, 0, width, height),
        b(dx / 2, dy / 2, cw, ch),
        b(0, 0, cw, ch),
        b(dx, 0, cw, ch),
        b(0, dy, cw, ch),
        b(dx, dy, cw, ch),
    ])
}

/// Map a box from a `src_w` x `src_h` image into grid cell (`cell_row`, `cell_col`).
pub fn transform_to_cell(
    bbox: &BBox,
    cell_row: u32,
    cell_col: u32,
    cell_w: u32,
    cell_h: u32,
    src_w: u32,
    src_h: u32,
) -> Result<BBox, GeometryError> {
    if cell_w == 0 || cell_h == 0 {
        return Err(GeometryError::InvalidCell { cell_w, cell_h });
    }
    if src_w == 0 || src_h == 0 || !bbox.within(f64::from(src_w), f64::from(src_h)) {
        return Err(GeometryError::OutOfBounds { bbox: *bbox, width: src_w, height: src_h });
    }
    let sx = f64::from(cell_w) / f64::from(src_w);
    let sy = f64::from(cell_h) / f64::from(src_h);
    let ox = f64::from(cell_col) * f64::from(cell_w);
    let oy = f64::from(cell_row) * f64::from(cell_h);
    // Clamp against tolerance slop so the result never leaves its cell.
    let x = (bbox.x.max(0.0) * sx).min(f64::from(cell_w));
    let y = (bbox.y.max(0.0) * sy).min(f64::from(cell_h));
    let w = (bbox.w * sx).min(f64::from(cell_w) - x);
    let h = (bbox.h * sy).min(f64::from(cell_h) - y);
    BBox::new(ox + x, oy + y, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 5.0, 5.0)), 0.0);
        let half = iou(&a, &bb(5.0, 0.0, 10.0, 10.0));
        assert!((half - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        assert_eq!(iou(&bb(0.0, 0.0, 10.0, 10.0), &bb(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn nms_duplicate_suppressed() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let c = [ScoredBox::new(a, 0.8, 1), ScoredBox::new(a, 0.9, 1)];
        assert_eq!(nms(&c, 0.5), vec![1]);
    }

    #[test]
    fn nms_disjoint_kept_and_empty() {
        let c = [ScoredBox::new(bb(0.0, 0.0, 10.0, 10.0), 0.1, 1), ScoredBox::new(bb(50.0, 50.0, 10.0, 10.0), 0.7, 1)];
        assert_eq!(nms(&c, 0.5), vec![1, 0]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let c = [ScoredBox::new(a, 0.5, 1), ScoredBox::new(a, 0.5, 1)];
        assert_eq!(nms(&c, 0.5), vec![0]);
    }

    #[test]
    fn per_class_cross_class_immunity() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let c = [ScoredBox::new(a, 0.6, 1), ScoredBox::new(a, 0.9, 2)];
        assert_eq!(per_class_nms(&c, 0.5), vec![1, 0]);
        let same = [ScoredBox::new(a, 0.6, 1), ScoredBox::new(a, 0.9, 1)];
        assert_eq!(per_class_nms(&same, 0.5), vec![1]);
    }

    #[test]
    fn fixed_boxes_100() {
        let got: Vec<[f64; 4]> = fixed_location_boxes(100, 100).unwrap().iter().map(|b| b.to_array()).collect();
        assert_eq!(
            got,
            vec![
                [0.0, 0.0, 100.0, 100.0],
                [10.0, 10.0, 80.0, 80.0],
                [0.0, 0.0, 80.0, 80.0],
                [20.0, 0.0, 80.0, 80.0],
                [0.0, 20.0, 80.0, 80.0],
                [20.0, 20.0, 80.0, 80.0],
            ]
        );
    }

    #[test]
    fn fixed_boxes_10() {
        let b = fixed_location_boxes(10, 10).unwrap();
        assert_eq!(b[0].to_array(), [0.0, 0.0, 10.0, 10.0]);
        assert_eq!(b[1].to_array(), [1.0, 1.0, 8.0, 8.0]);
        for corner in &b[2..] {
            assert!(corner.x == 0.0 || corner.x == 2.0);
            assert!(corner.y == 0.0 || corner.y == 2.0);
        }
    }

    #[test]
    fn fixed_boxes_rounding_half_up() {
        // 0.8 * 15 = 12 exactly, 0.8 * 13 = 10.4, 0.8 * 7 = 5.6
        assert_eq!(eighty_percent(15), 12);
        assert_eq!(eighty_percent(13), 10);
        assert_eq!(eighty_percent(7), 6);
        assert_eq!(eighty_percent(5), 4);
    }

    #[test]
    fn fixed_boxes_degenerate() {
        assert!(matches!(fixed_location_boxes(4, 100), Err(GeometryError::DegenerateDimensions { .. })));
    }

    #[test]
    fn transform_examples() {
        let b = bb(10.0, 10.0, 40.0, 40.0);
        assert_eq!(transform_to_cell(&b, 0, 0, 200, 200, 200, 200).unwrap().to_array(), [10.0, 10.0, 40.0, 40.0]);
        assert_eq!(transform_to_cell(&b, 0, 1, 200, 200, 200, 200).unwrap().to_array(), [210.0, 10.0, 40.0, 40.0]);
        let whole = bb(0.0, 0.0, 100.0, 100.0);
        assert_eq!(transform_to_cell(&whole, 1, 1, 50, 50, 100, 100).unwrap().to_array(), [50.0, 50.0, 50.0, 50.0]);
    }

    #[test]
    fn transform_rejects_out_of_bounds() {
        let b = bb(90.0, 0.0, 20.0, 10.0);
        assert!(matches!(transform_to_cell(&b, 0, 0, 50, 50, 100, 100), Err(GeometryError::OutOfBounds { .. })));
    }

    #[test]
    fn bbox_serializes_as_array() {
        let b = bb(1.0, 2.5, 3.0, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.5,3.0,4.0]");
        let back: BBox = serde_json::from_str("[1,2.5,3,4]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[0,0,-1,4]").is_err());
    }
}
