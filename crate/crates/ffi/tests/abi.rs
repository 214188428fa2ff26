use std::ffi::{CStr, CString};
use std::ptr;

use bwnkt_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(bwnkt_last_error()) }.to_string_lossy().into_owned()
}

fn new_model(seed: u64) -> *mut BwnktModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bwnkt_model_new(3, seed, &mut m) }, BwnktStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn binarize_known_filter() {
    let w = [0.5f32, -1.5, 0.0, 2.0, -0.25, 0.75, -0.5, 1.0, 3.0];
    let mut alpha = 0.0f32;
    let mut bits = [0u8; 2];
    assert_eq!(bwnkt_packed_len(9), 2);
    let st = unsafe { bwnkt_binarize_filter(w.as_ptr(), w.len(), &mut alpha, bits.as_mut_ptr(), bits.len()) };
    assert_eq!(st, BwnktStatus::Ok);
    assert_eq!(alpha, 9.5 / 9.0);
    // signs + - + + - + - + | + ; zero maps to +
    assert_eq!(bits, [0b1011_0101, 0b1000_0000]);
    assert_eq!(last_error(), "");
}

#[test]
fn binarize_errors() {
    let w = [1.0f32; 9];
    let mut alpha = 0.0f32;
    let mut bits = [0u8; 1];
    let st = unsafe { bwnkt_binarize_filter(w.as_ptr(), 9, &mut alpha, bits.as_mut_ptr(), 1) };
    assert_eq!(st, BwnktStatus::BufferTooSmall);
    assert!(last_error().contains("2 bytes needed"));
    let st = unsafe { bwnkt_binarize_filter(ptr::null(), 9, &mut alpha, bits.as_mut_ptr(), 1) };
    assert_eq!(st, BwnktStatus::NullPointer);
    let st = unsafe { bwnkt_binarize_filter(w.as_ptr(), 0, &mut alpha, bits.as_mut_ptr(), 1) };
    assert_eq!(st, BwnktStatus::InvalidArgument);
    let nan = [f32::NAN; 4];
    let st = unsafe { bwnkt_binarize_filter(nan.as_ptr(), 4, &mut alpha, bits.as_mut_ptr(), 1) };
    assert_ne!(st, BwnktStatus::Ok);
}

#[test]
fn forward_and_detect() {
    let m = new_model(1);
    let (mut c, mut h, mut w, mut head) = (0u32, 0u32, 0u32, 0usize);
    assert_eq!(unsafe { bwnkt_model_shape(m, &mut c, &mut h, &mut w, &mut head) }, BwnktStatus::Ok);
    assert_eq!((c, h, w, head), (3, 96, 96, 40 * 36));
    let n = (c * h * w) as usize;
    let input: Vec<f32> = (0..2 * n).map(|i| (i % 97) as f32 / 97.0).collect();
    let mut out = vec![0.0f32; 2 * head];
    assert_eq!(unsafe { bwnkt_model_forward(m, input.as_ptr(), 2, out.as_mut_ptr(), out.len()) }, BwnktStatus::Ok);
    assert!(out.iter().all(|v| v.is_finite()));
    assert_eq!(
        unsafe { bwnkt_model_forward(m, input.as_ptr(), 2, out.as_mut_ptr(), head) },
        BwnktStatus::BufferTooSmall
    );

    let mut count = 0usize;
    assert_eq!(
        unsafe { bwnkt_model_detect(m, input.as_ptr(), 0.0, 0.45, ptr::null_mut(), 0, &mut count) },
        BwnktStatus::Ok
    );
    assert!(count > 0);
    let mut dets = vec![BwnktDetection::default(); count];
    let mut again = 0usize;
    let st = unsafe { bwnkt_model_detect(m, input.as_ptr(), 0.0, 0.45, dets.as_mut_ptr(), dets.len(), &mut again) };
    assert_eq!(st, BwnktStatus::Ok);
    assert_eq!(again, count);
    assert!(dets.windows(2).all(|p| p[0].score >= p[1].score));
    assert!(dets.iter().all(|d| d.class_id < 3 && d.w > 0.0 && d.h > 0.0));
    unsafe { bwnkt_model_free(m) };
}

#[test]
fn stage_size_and_round_trip() {
    let m = new_model(2);
    let mut fp = BwnktSize::default();
    assert_eq!(unsafe { bwnkt_model_size(m, &mut fp) }, BwnktStatus::Ok);
    assert_eq!(fp.ratio, 1.0);
    assert_eq!(fp.binarized_layers, 0);
    for stage in 0..3 {
        assert_eq!(unsafe { bwnkt_model_apply_stage(m, stage) }, BwnktStatus::Ok);
    }
    assert_eq!(unsafe { bwnkt_model_apply_stage(m, 1) }, BwnktStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    let mut m2 = BwnktSize::default();
    assert_eq!(unsafe { bwnkt_model_size(m, &mut m2) }, BwnktStatus::Ok);
    assert_eq!(m2.binarized_layers, 7);
    assert!((20.0..=32.0).contains(&m2.ratio), "{}", m2.ratio);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m2.bwnm");
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bwnkt_model_save(m, cpath.as_ptr()) }, BwnktStatus::Ok);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), m2.file_bytes);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { bwnkt_model_load(cpath.as_ptr(), &mut loaded) }, BwnktStatus::Ok);
    let mut l = BwnktSize::default();
    assert_eq!(unsafe { bwnkt_model_size(loaded, &mut l) }, BwnktStatus::Ok);
    assert_eq!(l, m2);

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { bwnkt_model_load(cpath.as_ptr(), &mut bad) }, BwnktStatus::Checksum);
    assert!(bad.is_null());
    let missing = CString::new(dir.path().join("none.bwnm").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bwnkt_model_load(missing.as_ptr(), &mut bad) }, BwnktStatus::Io);
    unsafe {
        bwnkt_model_free(m);
        bwnkt_model_free(loaded);
        bwnkt_model_free(ptr::null_mut());
    }
}

#[test]
fn null_handles_rejected() {
    let mut s = BwnktSize::default();
    assert_eq!(unsafe { bwnkt_model_size(ptr::null(), &mut s) }, BwnktStatus::NullPointer);
    assert_eq!(unsafe { bwnkt_model_apply_stage(ptr::null_mut(), 0) }, BwnktStatus::NullPointer);
    assert_eq!(last_error(), "model is null");
}

#[test]
fn header_declares_entry_points() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/bwnkt.h")).unwrap();
    for name in [
        "bwnkt_last_error",
        "bwnkt_binarize_filter",
        "bwnkt_model_new",
        "bwnkt_model_load",
        "bwnkt_model_save",
        "bwnkt_model_free",
        "bwnkt_model_apply_stage",
        "bwnkt_model_forward",
        "bwnkt_model_detect",
        "bwnkt_model_size",
        "BWNKT_STATUS_CHECKSUM",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
