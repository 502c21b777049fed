//! C ABI over the `scenesynth` library.
//!
//! Every fallible function returns an [`SsStatus`]. On failure a message is
//! kept per thread and can be read with [`ss_last_error`] until the next
//! failing call on that thread. Handles are opaque and must be released with
//! their matching `_free` function. Strings returned to the caller are freed
//! with [`ss_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use scenesynth::catalog::{calibrated_thresholds, repeat_factor};
use scenesynth::dataset_io::{parse_coco, validate_dataset, CocoDataset, DatasetError, Severity};
use scenesynth::geometry::{self, BBox, ScoredBox};
use scenesynth::mosaic::{plan_mosaics, Grid, MosaicPlan, PoolImage, SamplingMode};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Parse = 5,
    InvalidData = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsScoredBox {
    pub bbox: SsBox,
    pub score: f64,
    pub class_id: u64,
}

/// A parsed, integrity-checked dataset.
pub struct SsDataset {
    inner: CocoDataset,
}

/// A list of mosaic plans.
pub struct SsPlanSet {
    plans: Vec<MosaicPlan>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: SsStatus, message: impl Into<String>) -> SsStatus {
    set_error(message);
    status
}

/// Run `f`, turning a panic into [`SsStatus::Panic`].
fn guard(f: impl FnOnce() -> SsStatus) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(SsStatus::Panic, "internal panic"),
    }
}

fn to_bbox(b: &SsBox) -> Result<BBox, SsStatus> {
    BBox::new(b.x, b.y, b.w, b.h).map_err(|e| fail(SsStatus::InvalidArgument, e.to_string()))
}

fn from_bbox(b: BBox) -> SsBox {
    SsBox { x: b.x, y: b.y, w: b.w, h: b.h }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(SsStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

macro_rules! attempt {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ss_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `a`, `b` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ss_iou(a: *const SsBox, b: *const SsBox, out: *mut f64) -> SsStatus {
    guard(|| {
        non_null!(a, b, out);
        let a = attempt!(to_bbox(&*a));
        let b = attempt!(to_bbox(&*b));
        *out = geometry::iou(&a, &b);
        SsStatus::Ok
    })
}

/// Greedy NMS. Writes kept indices, highest score first, into `out_indices`
/// (capacity `n`) and their number into `out_len`. With `per_class` set,
/// boxes only suppress boxes of their own class.
///
/// # Safety
/// `boxes` must point to `n` readable elements and `out_indices` to `n`
/// writable ones; `out_len` must be valid. `boxes` may be null when `n` is 0.
#[no_mangle]
pub unsafe extern "C" fn ss_nms(
    boxes: *const SsScoredBox,
    n: usize,
    iou_threshold: f64,
    per_class: bool,
    out_indices: *mut usize,
    out_len: *mut usize,
) -> SsStatus {
    guard(|| {
        non_null!(out_len);
        if n > 0 {
            non_null!(boxes, out_indices);
        }
        if !(0.0..=1.0).contains(&iou_threshold) {
            return fail(SsStatus::InvalidArgument, format!("iou_threshold {iou_threshold} not in [0, 1]"));
        }
        let input = if n == 0 { &[][..] } else { std::slice::from_raw_parts(boxes, n) };
        let mut candidates = Vec::with_capacity(n);
        for b in input {
            if !b.score.is_finite() {
                return fail(SsStatus::InvalidArgument, "score is not finite");
            }
            candidates.push(ScoredBox::new(attempt!(to_bbox(&b.bbox)), b.score, b.class_id));
        }
        let kept = if per_class {
            geometry::per_class_nms(&candidates, iou_threshold)
        } else {
            geometry::nms(&candidates, iou_threshold)
        };
        for (slot, &i) in kept.iter().enumerate() {
            *out_indices.add(slot) = i;
        }
        *out_len = kept.len();
        SsStatus::Ok
    })
}

/// The six fixed-location boxes of a `width` x `height` image.
///
/// # Safety
/// `out` must point to 6 writable boxes.
#[no_mangle]
pub unsafe extern "C" fn ss_fixed_boxes(width: u32, height: u32, out: *mut SsBox) -> SsStatus {
    guard(|| {
        non_null!(out);
        let boxes = match geometry::fixed_location_boxes(width, height) {
            Ok(b) => b,
            Err(e) => return fail(SsStatus::InvalidArgument, e.to_string()),
        };
        for (i, b) in boxes.into_iter().enumerate() {
            *out.add(i) = from_bbox(b);
        }
        SsStatus::Ok
    })
}

/// Calibrated detection threshold of a class with `count` gold images when
/// the most frequent class has `max_count`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_calibrated_threshold(
    count: u64,
    max_count: u64,
    gamma: f64,
    base: f64,
    out: *mut f64,
) -> SsStatus {
    guard(|| {
        non_null!(out);
        if count > max_count {
            return fail(SsStatus::InvalidArgument, format!("count {count} exceeds max_count {max_count}"));
        }
        let counts = BTreeMap::from([(0, count), (1, max_count)]);
        match calibrated_thresholds(&counts, gamma, base) {
            Ok(t) => {
                *out = t[&0];
                SsStatus::Ok
            }
            Err(e) => fail(SsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Repeat factor of a class present in a fraction `freq` of images.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_repeat_factor(freq: f64, threshold: f64, out: *mut f64) -> SsStatus {
    guard(|| {
        non_null!(out);
        if !(freq > 0.0 && freq <= 1.0) || !(threshold > 0.0 && threshold <= 1.0) {
            return fail(SsStatus::InvalidArgument, "freq and threshold must be in (0, 1]");
        }
        *out = repeat_factor(freq, threshold);
        SsStatus::Ok
    })
}

fn dataset_status(e: &DatasetError) -> SsStatus {
    match e.root() {
        DatasetError::Io { .. } => SsStatus::Io,
        DatasetError::Json { .. } => SsStatus::Parse,
        _ => SsStatus::InvalidData,
    }
}

/// Parse a COCO/LVIS dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_open(path: *const c_char, out: *mut *mut SsDataset) -> SsStatus {
    guard(|| {
        non_null!(path, out);
        *out = ptr::null_mut();
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(SsStatus::InvalidArgument, "path is not UTF-8");
        };
        match parse_coco(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SsDataset { inner }));
                SsStatus::Ok
            }
            Err(e) => fail(dataset_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `dataset` must be null or a handle from [`ss_dataset_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_free(dataset: *mut SsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of images, annotations and categories.
///
/// # Safety
/// `dataset` must be a live handle; each output pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_counts(
    dataset: *const SsDataset,
    images: *mut usize,
    annotations: *mut usize,
    categories: *mut usize,
) -> SsStatus {
    guard(|| {
        non_null!(dataset);
        let d = &(*dataset).inner;
        for (p, v) in [(images, d.images.len()), (annotations, d.annotations.len()), (categories, d.categories.len())] {
            if !p.is_null() {
                *p = v;
            }
        }
        SsStatus::Ok
    })
}

/// Run dataset validation; report totals of fatal and warning findings.
///
/// # Safety
/// `dataset` must be a live handle; `fatal` and `warnings` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ss_dataset_validate(
    dataset: *const SsDataset,
    fatal: *mut usize,
    warnings: *mut usize,
) -> SsStatus {
    guard(|| {
        non_null!(dataset, fatal, warnings);
        let report = validate_dataset(&(*dataset).inner);
        *fatal = report.fatal_count();
        *warnings = report.findings.iter().filter(|f| f.severity == Severity::Warning).map(|f| f.count).sum();
        SsStatus::Ok
    })
}

/// Draw `count` mosaic plans from a pool of `(image_id, class_id)` pairs.
/// `grid_side` is 2 or 3.
///
/// # Safety
/// `image_ids` and `class_ids` must point to `n` readable values and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_mosaic_plan(
    image_ids: *const u64,
    class_ids: *const u64,
    n: usize,
    grid_side: u32,
    same_class: bool,
    count: usize,
    seed: u64,
    cell_w: u32,
    cell_h: u32,
    out: *mut *mut SsPlanSet,
) -> SsStatus {
    guard(|| {
        non_null!(out);
        *out = ptr::null_mut();
        if n > 0 {
            non_null!(image_ids, class_ids);
        }
        let grid = match grid_side {
            2 => Grid::TwoByTwo,
            3 => Grid::ThreeByThree,
            other => return fail(SsStatus::InvalidArgument, format!("grid_side {other} is not 2 or 3")),
        };
        let mode = if same_class { SamplingMode::SameClass } else { SamplingMode::Hybrid };
        let pool: Vec<PoolImage> = if n == 0 {
            Vec::new()
        } else {
            let ids = std::slice::from_raw_parts(image_ids, n);
            let classes = std::slice::from_raw_parts(class_ids, n);
            ids.iter().zip(classes).map(|(&image_id, &class_id)| PoolImage { image_id, class_id }).collect()
        };
        match plan_mosaics(&pool, grid, mode, count, seed, cell_w, cell_h) {
            Ok(plans) => {
                *out = Box::into_raw(Box::new(SsPlanSet { plans }));
                SsStatus::Ok
            }
            Err(e) => fail(SsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `plans` must be null or a handle from [`ss_mosaic_plan`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_plan_set_free(plans: *mut SsPlanSet) {
    if !plans.is_null() {
        drop(Box::from_raw(plans));
    }
}

/// # Safety
/// `plans` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_plan_set_len(plans: *const SsPlanSet, out: *mut usize) -> SsStatus {
    guard(|| {
        non_null!(plans, out);
        let set = &*plans;
        *out = set.plans.len();
        SsStatus::Ok
    })
}

/// Copy the row-major cell image ids of plan `index` into `cells`.
/// `written` receives the cell count; with a short buffer the call fails with
/// [`SsStatus::BufferTooSmall`] and `written` holds the size needed.
///
/// # Safety
/// `plans` must be a live handle, `cells` must hold `capacity` values and
/// `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ss_plan_set_cells(
    plans: *const SsPlanSet,
    index: usize,
    cells: *mut u64,
    capacity: usize,
    written: *mut usize,
) -> SsStatus {
    guard(|| {
        non_null!(plans, written);
        let set = &*plans;
        let Some(plan) = set.plans.get(index) else {
            return fail(SsStatus::InvalidArgument, format!("plan index {index} out of range"));
        };
        *written = plan.cells.len();
        if capacity < plan.cells.len() {
            return fail(SsStatus::BufferTooSmall, format!("need room for {} cells", plan.cells.len()));
        }
        non_null!(cells);
        ptr::copy_nonoverlapping(plan.cells.as_ptr(), cells, plan.cells.len());
        SsStatus::Ok
    })
}

/// The plan list as a JSON array, the same document `mosaic` writes to
/// `plans.json`. Free the result with [`ss_string_free`].
///
/// # Safety
/// `plans` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_plan_set_to_json(plans: *const SsPlanSet, out: *mut *mut c_char) -> SsStatus {
    guard(|| {
        non_null!(plans, out);
        let mut text = serde_json::to_string_pretty(&(*plans).plans).expect("plans serialize");
        text.push('\n');
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        SsStatus::Ok
    })
}
