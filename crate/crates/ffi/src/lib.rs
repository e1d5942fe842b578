//! C ABI over the `bookindex` engine.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every entry point returns a [`BkStatus`];
//! on failure [`bk_last_error`] describes what went wrong on this thread.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bookindex::config::Config;
use bookindex::gateway::ModelGateway;
use bookindex::index::{build_index, BookIndex};
use bookindex::ingest::load_blocks;
use bookindex::operators::execute;
use bookindex::planner::plan_query;
use bookindex::{Error, ErrorClass};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BkStatus {
    Ok = 0,
    /// Bad configuration or argument values.
    Usage = 1,
    /// Unreadable, malformed or inconsistent input data.
    Data = 2,
    /// A model backend failed after retries.
    Gateway = 3,
    /// A required pointer argument was null.
    NullPointer = 4,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 5,
    /// The engine panicked; the handle involved should be freed.
    Panic = 6,
}

/// A loaded index together with the model gateway used to query it.
pub struct BkIndex {
    index: BookIndex,
    config: Config,
    gateway: ModelGateway,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(e: &Error) -> BkStatus {
    set_error(e.to_string());
    match e.class() {
        ErrorClass::Usage => BkStatus::Usage,
        ErrorClass::Data => BkStatus::Data,
        ErrorClass::Gateway => BkStatus::Gateway,
    }
}

struct Abort(BkStatus);

fn guard(f: impl FnOnce() -> Result<(), Abort>) -> BkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BkStatus::Ok,
        Ok(Err(Abort(s))) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BkStatus::Panic
        }
    }
}

fn check<T>(r: bookindex::Result<T>) -> Result<T, Abort> {
    r.map_err(|e| Abort(fail(&e)))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Abort> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(Abort(BkStatus::NullPointer));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        Abort(BkStatus::InvalidUtf8)
    })
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn opt_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Abort> {
    if p.is_null() {
        Ok(None)
    } else {
        arg(p, name).map(Some)
    }
}

fn out_ptr<T>(p: *mut T) -> Result<(), Abort> {
    if p.is_null() {
        set_error("output pointer is null");
        return Err(Abort(BkStatus::NullPointer));
    }
    Ok(())
}

fn handle<'a>(h: *const BkIndex) -> Result<&'a BkIndex, Abort> {
    if h.is_null() {
        set_error("index handle is null");
        return Err(Abort(BkStatus::NullPointer));
    }
    // SAFETY: non-null handles come from Box::into_raw in this crate.
    Ok(unsafe { &*h })
}

fn load_config(path: Option<&str>) -> Result<(Config, ModelGateway), Abort> {
    let config = check(Config::load(path.map(Path::new)))?;
    check(config.validate())?;
    let gateway = check(config.gateway())?;
    Ok((config, gateway))
}

/// Build an index from a block-list file and save it to `out_dir`.
/// `config_path` may be null, in which case defaults and `BOOKRAG_*`
/// environment variables apply. On success `*out` receives a new handle.
/// When some nodes fail extraction the index is still saved and returned
/// in `*out`, and the status is [`BkStatus::Data`].
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bk_index_build(
    doc_path: *const c_char,
    out_dir: *const c_char,
    config_path: *const c_char,
    out: *mut *mut BkIndex,
) -> BkStatus {
    guard(|| {
        out_ptr(out)?;
        let doc = Path::new(arg(doc_path, "doc_path")?);
        let dir = Path::new(arg(out_dir, "out_dir")?);
        let (config, gateway) = load_config(opt_arg(config_path, "config_path")?)?;
        let src = check(load_blocks(doc))?;
        let (index, report) = check(build_index(&src, &gateway, &config.build_config(doc.parent())))?;
        check(index.save(dir))?;
        *out = Box::into_raw(Box::new(BkIndex { index, config, gateway }));
        if report.failed_nodes > 0 {
            set_error(format!("extraction failed for {} node(s)", report.failed_nodes));
            return Err(Abort(BkStatus::Data));
        }
        Ok(())
    })
}

/// Load a saved index directory.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bk_index_load(
    index_dir: *const c_char,
    config_path: *const c_char,
    out: *mut *mut BkIndex,
) -> BkStatus {
    guard(|| {
        out_ptr(out)?;
        let dir = Path::new(arg(index_dir, "index_dir")?);
        let (config, gateway) = load_config(opt_arg(config_path, "config_path")?)?;
        let index = check(BookIndex::load(dir))?;
        *out = Box::into_raw(Box::new(BkIndex { index, config, gateway }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `h` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bk_index_free(h: *mut BkIndex) {
    if !h.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(h))));
    }
}

/// Entities in the knowledge graph, or 0 for a null handle.
///
/// # Safety
/// `h` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bk_index_entity_count(h: *const BkIndex) -> usize {
    handle(h).map_or(0, |h| h.index.graph.len())
}

/// Nodes in the document tree, or 0 for a null handle.
///
/// # Safety
/// `h` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bk_index_node_count(h: *const BkIndex) -> usize {
    handle(h).map_or(0, |h| h.index.tree.len())
}

/// Plan and answer `question`. On success `*answer` receives a string the
/// caller releases with [`bk_string_free`].
///
/// # Safety
/// `h` is a live handle, `question` NUL-terminated, `answer` writable.
#[no_mangle]
pub unsafe extern "C" fn bk_query(h: *const BkIndex, question: *const c_char, answer: *mut *mut c_char) -> BkStatus {
    guard(|| {
        out_ptr(answer)?;
        let h = handle(h)?;
        let q = arg(question, "question")?;
        let plan = check(plan_query(q, &h.gateway, &h.config.planner_config()))?;
        let run = check(execute(&plan, &h.index, &h.gateway, &h.config.reasoner))?;
        let s = CString::new(run.answer.replace('\0', " ")).expect("NULs replaced");
        *answer = s.into_raw();
        Ok(())
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` is null or came from this library and was not freed.
#[no_mangle]
pub unsafe extern "C" fn bk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn bk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Token-level F1 between a gold and a predicted answer.
///
/// # Safety
/// String arguments are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bk_token_f1(gold: *const c_char, predicted: *const c_char, out: *mut f64) -> BkStatus {
    guard(|| {
        out_ptr(out)?;
        *out = bookindex::eval::token_f1(arg(gold, "gold")?, arg(predicted, "predicted")?);
        Ok(())
    })
}

/// 1.0 when the normalized answers are equal, else 0.0.
///
/// # Safety
/// String arguments are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bk_exact_match(gold: *const c_char, predicted: *const c_char, out: *mut f64) -> BkStatus {
    guard(|| {
        out_ptr(out)?;
        *out = bookindex::eval::exact_match(arg(gold, "gold")?, arg(predicted, "predicted")?);
        Ok(())
    })
}
