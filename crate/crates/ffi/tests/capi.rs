use std::ffi::{CStr, CString};
use std::ptr;

use framesel_ffi::*;

fn last_error() -> String {
    let p = fs_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn probabilities_match_the_two_frame_case() {
    let scores = [2.0, 0.0];
    let mut out = [0.0; 2];
    let st = unsafe { fs_selection_probabilities(scores.as_ptr(), 2, 1.0, out.as_mut_ptr()) };
    assert_eq!(st, FsStatus::Ok);
    assert!((out[0] - 0.8807970779778823).abs() < 1e-12);
    assert!((out[1] - 0.11920292202211755).abs() < 1e-12);
    assert!(fs_last_error_message().is_null());
}

#[test]
fn bad_tau_is_a_domain_error_with_message() {
    let scores = [1.0, 0.0];
    let mut out = [0.0; 2];
    let st = unsafe { fs_selection_probabilities(scores.as_ptr(), 2, 0.0, out.as_mut_ptr()) };
    assert_eq!(st, FsStatus::Domain);
    assert!(last_error().contains("temperature"));
}

#[test]
fn hard_topk_and_oversized_k() {
    let scores = [0.1, 0.9, 0.5, 0.7];
    let mut idx = [0usize; 2];
    assert_eq!(unsafe { fs_hard_topk(scores.as_ptr(), 4, 2, idx.as_mut_ptr()) }, FsStatus::Ok);
    assert_eq!(idx, [1, 3]);
    let mut big = [0usize; 5];
    assert_eq!(unsafe { fs_hard_topk(scores.as_ptr(), 4, 5, big.as_mut_ptr()) }, FsStatus::Contract);
}

#[test]
fn null_buffers_are_rejected() {
    let mut idx = [0usize; 1];
    let st = unsafe { fs_hard_topk(ptr::null(), 3, 1, idx.as_mut_ptr()) };
    assert_eq!(st, FsStatus::NullPointer);
    assert!(last_error().contains("scores"));
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fs_model_load(ptr::null(), &mut h) }, FsStatus::NullPointer);
    assert!(h.is_null());
}

#[test]
fn wrs_is_seeded_and_distinct() {
    let scores = [0.3, -1.0, 2.0, 0.0, 0.5, 1.5];
    let (mut a, mut b) = ([0usize; 3], [0usize; 3]);
    unsafe {
        assert_eq!(fs_wrs_indices(scores.as_ptr(), 6, 3, 0.5, 11, a.as_mut_ptr()), FsStatus::Ok);
        assert_eq!(fs_wrs_indices(scores.as_ptr(), 6, 3, 0.5, 11, b.as_mut_ptr()), FsStatus::Ok);
    }
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn model_lifecycle_through_a_snapshot() {
    let dims = FsDims { d_v: 6, d_t: 3, d_h: 5, d_p: 4 };
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fs_model_new(dims, 7, &mut h) }, FsStatus::Ok);
    let mut got = FsDims { d_v: 0, d_t: 0, d_h: 0, d_p: 0 };
    assert_eq!(unsafe { fs_model_dims(h, &mut got) }, FsStatus::Ok);
    assert_eq!(got, dims);

    let m = 5;
    let frames: Vec<f64> = (0..m * 6).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let question = [0.4, -0.2, 0.9];
    let mut idx = [0usize; 2];
    let mut scores = [0.0; 5];
    let st = unsafe { fs_model_select(h, frames.as_ptr(), m, question.as_ptr(), 2, idx.as_mut_ptr(), scores.as_mut_ptr()) };
    assert_eq!(st, FsStatus::Ok);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut top = order[..2].to_vec();
    top.sort_unstable();
    assert_eq!(idx.to_vec(), top);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fs_model_save(h, path.as_ptr()) }, FsStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { fs_model_load(path.as_ptr(), &mut loaded) }, FsStatus::Ok);
    let mut idx2 = [0usize; 2];
    let st = unsafe { fs_model_select(loaded, frames.as_ptr(), m, question.as_ptr(), 2, idx2.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, FsStatus::Ok);
    assert_eq!(idx, idx2);

    let ablate = CString::new("qfs,bogus").unwrap();
    assert_ne!(unsafe { fs_model_set_ablation(loaded, ablate.as_ptr()) }, FsStatus::Ok);
    let ablate = CString::new("qfs,qfm").unwrap();
    assert_eq!(unsafe { fs_model_set_ablation(loaded, ablate.as_ptr()) }, FsStatus::Ok);

    unsafe {
        fs_model_free(h);
        fs_model_free(loaded);
        fs_model_free(ptr::null_mut());
    }
}

#[test]
fn missing_snapshot_is_an_io_error() {
    let path = CString::new("/no/such/snapshot").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { fs_model_load(path.as_ptr(), &mut h) }, FsStatus::Io);
    assert!(h.is_null());
}

#[test]
fn header_declares_the_api() {
    let header = include_str!("../include/framesel.h");
    for sym in [
        "fs_selection_probabilities",
        "fs_hard_topk",
        "fs_wrs_indices",
        "fs_model_new",
        "fs_model_load",
        "fs_model_select",
        "fs_model_free",
        "fs_last_error_message",
        "FS_STATUS_NULL_POINTER",
        "typedef struct FsModel FsModel",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
}
