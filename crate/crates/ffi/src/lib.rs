//! C ABI over the kernel-tree core.
//!
//! Trees cross the boundary as opaque handles. Every fallible function
//! returns a [`KtStatus`]; on failure [`kt_last_error_message`] describes the
//! most recent error on the calling thread. Strings returned through out
//! parameters are owned by the caller and released with [`kt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use kernel_tree::anchors;
use kernel_tree::eval::{simulate_evaluate, SimLandscapeSpec};
use kernel_tree::policy::{self, Branch, PolicyParams};
use kernel_tree::rng::SearchRng;
use kernel_tree::tree::{NodeId, SearchTree};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    NotFound = 4,
    Exhausted = 5,
    Panic = 6,
}

/// Opaque search tree handle.
pub struct KtTree {
    inner: SearchTree,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: KtStatus, msg: impl Into<String>) -> KtStatus {
    set_error(msg);
    status
}

/// Run `f`, converting a panic into [`KtStatus::Panic`].
fn guard(f: impl FnOnce() -> KtStatus) -> KtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(KtStatus::Panic, "internal panic"),
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, KtStatus> {
    if p.is_null() {
        return Err(fail(KtStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KtStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message for the last failure on this thread. Valid until the next call
/// into this library from the same thread. Never null.
#[no_mangle]
pub extern "C" fn kt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a tree document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn kt_tree_from_json(json: *const c_char, out: *mut *mut KtTree) -> KtStatus {
    guard(|| {
        if out.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match SearchTree::from_json(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(KtTree { inner }));
                KtStatus::Ok
            }
            Err(e) => fail(KtStatus::InvalidInput, e.to_string()),
        }
    })
}

/// Release a tree handle. Null is ignored.
///
/// # Safety
/// `tree` must be null or a handle from [`kt_tree_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kt_tree_free(tree: *mut KtTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// # Safety
/// `tree` must be null or a live handle.
unsafe fn tree_ref<'a>(tree: *const KtTree) -> Result<&'a SearchTree, KtStatus> {
    tree.as_ref()
        .map(|t| &t.inner)
        .ok_or_else(|| fail(KtStatus::NullPointer, "null tree handle"))
}

/// Number of nodes, root included.
///
/// # Safety
/// `tree` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kt_tree_len(tree: *const KtTree, out: *mut usize) -> KtStatus {
    guard(|| {
        let t = match tree_ref(tree) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        *out = t.len();
        KtStatus::Ok
    })
}

/// Id of the best node (the root when no attempt beats it).
///
/// # Safety
/// `tree` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kt_tree_best(tree: *const KtTree, out: *mut usize) -> KtStatus {
    guard(|| {
        let t = match tree_ref(tree) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        *out = t.best().index();
        KtStatus::Ok
    })
}

/// Score of a node: runtime in ms, or infinity when it failed.
///
/// # Safety
/// `tree` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kt_tree_score(tree: *const KtTree, id: usize, out: *mut f64) -> KtStatus {
    guard(|| {
        let t = match tree_ref(tree) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        match t.get(NodeId(id)) {
            Ok(n) => {
                *out = n.score();
                KtStatus::Ok
            }
            Err(e) => fail(KtStatus::NotFound, e.to_string()),
        }
    })
}

/// Serialize a tree. Free the result with [`kt_string_free`].
///
/// # Safety
/// `tree` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kt_tree_to_json(tree: *const KtTree, out: *mut *mut c_char) -> KtStatus {
    guard(|| {
        let t = match tree_ref(tree) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        *out = to_c_string(t.to_json());
        KtStatus::Ok
    })
}

/// Evaluate a candidate on the default simulated landscape. `runtime_ms`
/// receives NaN unless the candidate is correct.
///
/// # Safety
/// `source` must be a NUL-terminated string; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_simulate_evaluate(
    source: *const c_char,
    compiled: *mut bool,
    correct: *mut bool,
    runtime_ms: *mut f64,
) -> KtStatus {
    guard(|| {
        let src = match read_str(source) {
            Ok(s) => s,
            Err(s) => return s,
        };
        if compiled.is_null() || correct.is_null() || runtime_ms.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        let o = simulate_evaluate(src, &SimLandscapeSpec::default());
        *compiled = o.compiled();
        *correct = o.correct();
        *runtime_ms = o.runtime_ms().unwrap_or(f64::NAN);
        KtStatus::Ok
    })
}

/// Remove improve-region marker lines. Free the result with
/// [`kt_string_free`].
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kt_strip_markers(text: *const c_char, out: *mut *mut c_char) -> KtStatus {
    guard(|| {
        let t = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        *out = to_c_string(anchors::strip_markers(t));
        KtStatus::Ok
    })
}

/// Number of balanced improve regions in a scaffold.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kt_count_regions(text: *const c_char, out: *mut usize) -> KtStatus {
    guard(|| {
        let t = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        match anchors::parse_scaffold(t) {
            Ok(regions) => {
                *out = regions.len();
                KtStatus::Ok
            }
            Err(e) => fail(KtStatus::InvalidInput, e.to_string()),
        }
    })
}

/// One selection step on a fresh stream seeded with `seed`.
///
/// # Safety
/// `tree` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn kt_policy_select(
    tree: *const KtTree,
    epsilon: f64,
    n_root: usize,
    n_child: usize,
    seed: u64,
    out_node: *mut usize,
    out_explored: *mut bool,
) -> KtStatus {
    guard(|| {
        let t = match tree_ref(tree) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out_node.is_null() || out_explored.is_null() {
            return fail(KtStatus::NullPointer, "null out pointer");
        }
        let params = PolicyParams {
            epsilon,
            n_root,
            n_child,
            seed,
        };
        if let Err(e) = params.validate() {
            return fail(KtStatus::InvalidInput, e);
        }
        let mut rng = SearchRng::seed_from_u64(seed);
        match policy::select(t, &params, &mut rng) {
            Ok(sel) => {
                *out_node = sel.node.index();
                *out_explored = sel.branch == Branch::Explore;
                KtStatus::Ok
            }
            Err(e) => fail(KtStatus::Exhausted, e.to_string()),
        }
    })
}
