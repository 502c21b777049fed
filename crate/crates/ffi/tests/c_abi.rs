use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use scenesynth_ffi::*;

fn last_error() -> String {
    let p = ss_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn sbox(x: f64, y: f64, w: f64, h: f64) -> SsBox {
    SsBox { x, y, w, h }
}

#[test]
fn iou_and_errors() {
    let mut out = 0.0;
    let a = sbox(0.0, 0.0, 10.0, 10.0);
    let b = sbox(5.0, 0.0, 10.0, 10.0);
    assert_eq!(unsafe { ss_iou(&a, &b, &mut out) }, SsStatus::Ok);
    assert!((out - 50.0 / 150.0).abs() < 1e-12);

    let bad = sbox(0.0, 0.0, -1.0, 1.0);
    assert_eq!(unsafe { ss_iou(&a, &bad, &mut out) }, SsStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { ss_iou(ptr::null(), &b, &mut out) }, SsStatus::NullPointer);
    assert!(last_error().contains("null"));
}

#[test]
fn nms_through_abi() {
    let boxes = [
        SsScoredBox { bbox: sbox(0.0, 0.0, 10.0, 10.0), score: 0.9, class_id: 1 },
        SsScoredBox { bbox: sbox(1.0, 0.0, 10.0, 10.0), score: 0.8, class_id: 2 },
        SsScoredBox { bbox: sbox(50.0, 50.0, 10.0, 10.0), score: 0.7, class_id: 1 },
    ];
    let mut idx = [usize::MAX; 3];
    let mut len = 0;
    let st = unsafe { ss_nms(boxes.as_ptr(), 3, 0.5, false, idx.as_mut_ptr(), &mut len) };
    assert_eq!(st, SsStatus::Ok);
    assert_eq!(&idx[..len], &[0, 2]);
    let st = unsafe { ss_nms(boxes.as_ptr(), 3, 0.5, true, idx.as_mut_ptr(), &mut len) };
    assert_eq!(st, SsStatus::Ok);
    assert_eq!(&idx[..len], &[0, 1, 2]);
    let st = unsafe { ss_nms(ptr::null(), 0, 0.5, false, ptr::null_mut(), &mut len) };
    assert_eq!((st, len), (SsStatus::Ok, 0));
}

#[test]
fn fixed_boxes_and_calibration() {
    let mut out = [sbox(0.0, 0.0, 0.0, 0.0); 6];
    assert_eq!(unsafe { ss_fixed_boxes(100, 100, out.as_mut_ptr()) }, SsStatus::Ok);
    assert_eq!(out[0], sbox(0.0, 0.0, 100.0, 100.0));
    assert_eq!(out[1], sbox(10.0, 10.0, 80.0, 80.0));
    assert_eq!(out[5], sbox(20.0, 20.0, 80.0, 80.0));
    assert_eq!(unsafe { ss_fixed_boxes(4, 100, out.as_mut_ptr()) }, SsStatus::InvalidArgument);

    let mut t = 0.0;
    assert_eq!(unsafe { ss_calibrated_threshold(25, 100, 0.5, 0.5, &mut t) }, SsStatus::Ok);
    assert!((t - 0.25).abs() < 1e-12);
    assert_eq!(unsafe { ss_calibrated_threshold(0, 100, 0.5, 0.5, &mut t) }, SsStatus::InvalidArgument);

    let mut r = 0.0;
    assert_eq!(unsafe { ss_repeat_factor(0.00025, 0.001, &mut r) }, SsStatus::Ok);
    assert!((r - 2.0).abs() < 1e-12);
}

const MINI: &str = r#"{"images":[{"id":1,"file_name":"a.png","width":10,"height":10}],
"annotations":[{"id":1,"image_id":1,"category_id":3,"bbox":[0,0,5,5],"area":24}],
"categories":[{"id":3,"name":"cup"}]}"#;

#[test]
fn dataset_handle_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    std::fs::write(&path, MINI).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { ss_dataset_open(c_path.as_ptr(), &mut handle) }, SsStatus::Ok);
    let (mut i, mut a, mut c) = (0, 0, 0);
    assert_eq!(unsafe { ss_dataset_counts(handle, &mut i, &mut a, &mut c) }, SsStatus::Ok);
    assert_eq!((i, a, c), (1, 1, 1));
    let (mut fatal, mut warn) = (9, 9);
    assert_eq!(unsafe { ss_dataset_validate(handle, &mut fatal, &mut warn) }, SsStatus::Ok);
    assert_eq!((fatal, warn), (0, 1));
    unsafe { ss_dataset_free(handle) };

    let missing = CString::new(dir.path().join("nope.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ss_dataset_open(missing.as_ptr(), &mut handle) }, SsStatus::Io);
    assert!(handle.is_null());
    std::fs::write(&path, "{not json").unwrap();
    assert_eq!(unsafe { ss_dataset_open(c_path.as_ptr(), &mut handle) }, SsStatus::Parse);
}

#[test]
fn plan_set_handle() {
    let ids = [10u64, 11, 12];
    let classes = [1u64, 1, 2];
    let mut set = ptr::null_mut();
    let st = unsafe { ss_mosaic_plan(ids.as_ptr(), classes.as_ptr(), 3, 2, true, 4, 7, 64, 64, &mut set) };
    assert_eq!(st, SsStatus::Ok);
    let mut n = 0;
    assert_eq!(unsafe { ss_plan_set_len(set, &mut n) }, SsStatus::Ok);
    assert_eq!(n, 4);

    let mut small = [0u64; 2];
    let mut written = 0;
    let st = unsafe { ss_plan_set_cells(set, 0, small.as_mut_ptr(), 2, &mut written) };
    assert_eq!((st, written), (SsStatus::BufferTooSmall, 4));
    let mut cells = [0u64; 4];
    assert_eq!(unsafe { ss_plan_set_cells(set, 0, cells.as_mut_ptr(), 4, &mut written) }, SsStatus::Ok);
    assert!(cells.iter().all(|c| ids.contains(c)));

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ss_plan_set_to_json(set, &mut json) }, SsStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { ss_string_free(json) };
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 4);
    assert_eq!(parsed[0]["cells"].as_array().unwrap().len(), 4);
    unsafe { ss_plan_set_free(set) };

    let st = unsafe { ss_mosaic_plan(ids.as_ptr(), classes.as_ptr(), 3, 4, false, 1, 7, 64, 64, &mut set) };
    assert_eq!(st, SsStatus::InvalidArgument);
    assert!(set.is_null());
}

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps/<test-binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_is_generated() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/scenesynth.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ss_iou",
        "ss_nms",
        "ss_fixed_boxes",
        "ss_calibrated_threshold",
        "ss_dataset_open",
        "ss_dataset_free",
        "ss_mosaic_plan",
        "ss_last_error",
        "typedef struct SsDataset SsDataset;",
        "SS_STATUS_BUFFER_TOO_SMALL = 3",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <math.h>
#include "scenesynth.h"

int main(void) {
    SsBox a = {0, 0, 10, 10}, b = {5, 0, 10, 10};
    double v = 0;
    if (ss_iou(&a, &b, &v) != SS_STATUS_OK || fabs(v - 50.0 / 150.0) > 1e-12) return 1;
    SsBox six[6];
    if (ss_fixed_boxes(100, 100, six) != SS_STATUS_OK || six[1].w != 80.0) return 2;
    if (ss_fixed_boxes(1, 1, six) != SS_STATUS_INVALID_ARGUMENT || ss_last_error() == NULL) return 3;
    double t = 0;
    if (ss_calibrated_threshold(100, 100, 0.5, 0.5, &t) != SS_STATUS_OK || t != 0.5) return 4;
    printf("ok %s\n", ss_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_staticlib() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler on PATH; C link check not run");
        return;
    }
    let lib = target_dir().join("libscenesynth_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
