use std::ffi::{CStr, CString};
use std::ptr;

use kernel_tree::tree::{EvaluationOutcome, NodeId, SearchTree};
use kernel_tree_ffi::*;

fn example_json() -> CString {
    let mut t = SearchTree::new("ref", EvaluationOutcome::success(100.0).unwrap()).unwrap();
    let ok = |rt| EvaluationOutcome::success(rt).unwrap();
    t.add_child(NodeId(0), "k1", "", "", ok(90.0)).unwrap();
    t.add_child(
        NodeId(0),
        "k2",
        "",
        "",
        EvaluationOutcome::compile_failure("err"),
    )
    .unwrap();
    t.add_child(NodeId(1), "k3", "", "", ok(80.0)).unwrap();
    CString::new(t.to_json()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(kt_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn tree_handle_lifecycle() {
    let json = example_json();
    let mut tree = ptr::null_mut();
    unsafe {
        assert_eq!(kt_tree_from_json(json.as_ptr(), &mut tree), KtStatus::Ok);
        let mut n = 0usize;
        assert_eq!(kt_tree_len(tree, &mut n), KtStatus::Ok);
        assert_eq!(n, 4);
        let mut best = 0usize;
        assert_eq!(kt_tree_best(tree, &mut best), KtStatus::Ok);
        assert_eq!(best, 3);
        let mut score = 0.0;
        assert_eq!(kt_tree_score(tree, 2, &mut score), KtStatus::Ok);
        assert!(score.is_infinite());
        assert_eq!(kt_tree_score(tree, 9, &mut score), KtStatus::NotFound);
        assert!(!last_error().is_empty());

        let mut out = ptr::null_mut();
        assert_eq!(kt_tree_to_json(tree, &mut out), KtStatus::Ok);
        assert_eq!(
            CStr::from_ptr(out).to_str().unwrap(),
            json.to_str().unwrap()
        );
        kt_string_free(out);
        kt_tree_free(tree);
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut tree = ptr::null_mut();
    let garbage = CString::new("{not json").unwrap();
    unsafe {
        assert_eq!(
            kt_tree_from_json(garbage.as_ptr(), &mut tree),
            KtStatus::InvalidInput
        );
        assert!(tree.is_null());
        assert_eq!(
            kt_tree_from_json(ptr::null(), &mut tree),
            KtStatus::NullPointer
        );
        let mut n = 0usize;
        assert_eq!(kt_tree_len(ptr::null(), &mut n), KtStatus::NullPointer);
        assert_eq!(last_error(), "null tree handle");
        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            kt_count_regions(bad_utf8.as_ptr().cast(), &mut n),
            KtStatus::InvalidUtf8
        );
        kt_tree_free(ptr::null_mut());
        kt_string_free(ptr::null_mut());
    }
}

#[test]
fn simulator_through_the_abi() {
    let src = CString::new("// OPT:tile\n// OPT:vectorize\n// OPT:fuse\n// OPT:unroll\n").unwrap();
    let (mut compiled, mut correct, mut rt) = (false, false, 0.0);
    unsafe {
        assert_eq!(
            kt_simulate_evaluate(src.as_ptr(), &mut compiled, &mut correct, &mut rt),
            KtStatus::Ok
        );
    }
    assert!(compiled && correct);
    assert!((rt - 30.24).abs() < 1e-9);
    let bug = CString::new("BUG").unwrap();
    unsafe {
        assert_eq!(
            kt_simulate_evaluate(bug.as_ptr(), &mut compiled, &mut correct, &mut rt),
            KtStatus::Ok
        );
    }
    assert!(!compiled && rt.is_nan());
}

#[test]
fn markers_through_the_abi() {
    let text = CString::new("a\n// <<<IMPROVE BEGIN>>>\nb\n// <<<IMPROVE END>>>\nc\n").unwrap();
    let mut n = 0usize;
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(kt_count_regions(text.as_ptr(), &mut n), KtStatus::Ok);
        assert_eq!(n, 1);
        assert_eq!(kt_strip_markers(text.as_ptr(), &mut out), KtStatus::Ok);
        assert_eq!(CStr::from_ptr(out).to_str().unwrap(), "a\nb\nc\n");
        kt_string_free(out);
        let unbalanced = CString::new("// <<<IMPROVE BEGIN>>>\nx\n").unwrap();
        assert_eq!(
            kt_count_regions(unbalanced.as_ptr(), &mut n),
            KtStatus::InvalidInput
        );
    }
}

#[test]
fn policy_select_through_the_abi() {
    let json = example_json();
    let mut tree = ptr::null_mut();
    let (mut node, mut explored) = (0usize, false);
    unsafe {
        assert_eq!(kt_tree_from_json(json.as_ptr(), &mut tree), KtStatus::Ok);
        // greedy: lowest score among eligible nodes
        assert_eq!(
            kt_policy_select(tree, 0.0, 5, 3, 1, &mut node, &mut explored),
            KtStatus::Ok
        );
        assert_eq!((node, explored), (3, false));
        // pure exploration draws a leaf
        assert_eq!(
            kt_policy_select(tree, 1.0, 5, 3, 1, &mut node, &mut explored),
            KtStatus::Ok
        );
        assert!(explored && [2, 3].contains(&node));
        assert_eq!(
            kt_policy_select(tree, 2.0, 5, 3, 1, &mut node, &mut explored),
            KtStatus::InvalidInput
        );
        kt_tree_free(tree);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/include/kernel_tree.h"
    ))
    .unwrap();
    for sym in [
        "kt_last_error_message",
        "kt_string_free",
        "kt_tree_from_json",
        "kt_tree_free",
        "kt_tree_len",
        "kt_tree_best",
        "kt_tree_score",
        "kt_tree_to_json",
        "kt_simulate_evaluate",
        "kt_strip_markers",
        "kt_count_regions",
        "kt_policy_select",
        "typedef struct KtTree KtTree",
        "KT_STATUS_OK = 0",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}
