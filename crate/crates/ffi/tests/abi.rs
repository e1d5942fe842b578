//! The C ABI exercised from Rust and from a compiled C program.

use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bookindex::config::Config;
use bookindex::index::BookIndex;
use bookindex_ffi::*;

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn c(s: &Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = bk_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn query(h: *const BkIndex, q: &str) -> (BkStatus, Option<String>) {
    let q = CString::new(q).unwrap();
    let mut out: *mut c_char = ptr::null_mut();
    let s = unsafe { bk_query(h, q.as_ptr(), &mut out) };
    if out.is_null() {
        return (s, None);
    }
    let a = unsafe { CStr::from_ptr(out) }.to_string_lossy().into_owned();
    unsafe { bk_string_free(out) };
    (s, Some(a))
}

#[test]
fn build_load_and_query() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ix");
    let (doc, out, cfg) = (c(&core_fixture("synthetic.jsonl")), c(&dir), c(&core_fixture("mock.toml")));

    let mut built: *mut BkIndex = ptr::null_mut();
    let s = unsafe { bk_index_build(doc.as_ptr(), out.as_ptr(), cfg.as_ptr(), &mut built) };
    assert_eq!(s, BkStatus::Ok);
    assert!(bk_last_error().is_null());

    let saved = BookIndex::load(&dir).unwrap();
    assert_eq!(unsafe { bk_index_node_count(built) }, saved.tree.len());
    assert_eq!(unsafe { bk_index_entity_count(built) }, saved.graph.len());

    let mut loaded: *mut BkIndex = ptr::null_mut();
    assert_eq!(unsafe { bk_index_load(out.as_ptr(), cfg.as_ptr(), &mut loaded) }, BkStatus::Ok);
    for q in ["Who proposed Policy Gradient methods?", "How many figures are there from page 3 to page 10?"] {
        let a = query(built, q);
        assert_eq!(a.0, BkStatus::Ok);
        assert_eq!(a, query(loaded, q), "{q}");
    }
    assert_eq!(query(loaded, "How many figures are there from page 3 to page 10?").1.unwrap(), "I found 5 items.");
    unsafe {
        bk_index_free(built);
        bk_index_free(loaded);
        bk_index_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = c(&core_fixture("mock.toml"));
    let mut h: *mut BkIndex = ptr::null_mut();

    let missing = c(&tmp.path().join("nope"));
    assert_eq!(unsafe { bk_index_load(missing.as_ptr(), cfg.as_ptr(), &mut h) }, BkStatus::Data);
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[resolution]\ng = 3.0\n").unwrap();
    let bad_cfg = c(&bad_cfg);
    let doc = c(&core_fixture("synthetic.jsonl"));
    let out = c(&tmp.path().join("ix"));
    assert_eq!(unsafe { bk_index_build(doc.as_ptr(), out.as_ptr(), bad_cfg.as_ptr(), &mut h) }, BkStatus::Usage);

    assert_eq!(unsafe { bk_index_build(ptr::null(), out.as_ptr(), cfg.as_ptr(), &mut h) }, BkStatus::NullPointer);
    assert!(last_error().contains("doc_path"));
    assert_eq!(query(ptr::null(), "anything").0, BkStatus::NullPointer);
}

#[test]
fn metrics_agree_with_the_library() {
    for (g, p) in [("The Cat sat.", "the cat"), ("0.95", "0.95"), ("Bob Jones", "Alice")] {
        let (gc, pc) = (CString::new(g).unwrap(), CString::new(p).unwrap());
        let (mut f1, mut em) = (0.0, 0.0);
        assert_eq!(unsafe { bk_token_f1(gc.as_ptr(), pc.as_ptr(), &mut f1) }, BkStatus::Ok);
        assert_eq!(unsafe { bk_exact_match(gc.as_ptr(), pc.as_ptr(), &mut em) }, BkStatus::Ok);
        assert_eq!(f1.to_bits(), bookindex::eval::token_f1(g, p).to_bits());
        assert_eq!(em.to_bits(), bookindex::eval::exact_match(g, p).to_bits());
    }
    // the mock config used above really is the mock backend
    let cfg = Config::from_file(&core_fixture("mock.toml")).unwrap();
    assert_eq!(cfg.gateway().unwrap().backend_name(), "mock");
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/abi-xxxx -> target/<profile>
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let lib_dir = target_dir();
    assert!(lib_dir.join("libbookindex_ffi.a").exists(), "static library missing in {}", lib_dir.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(root.join("include"))
        .arg(root.join("tests/c/smoke.c"))
        .arg(lib_dir.join("libbookindex_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(status.success());

    let out = Command::new(&exe)
        .arg(core_fixture("synthetic.jsonl"))
        .arg(tmp.path().join("ix"))
        .arg(core_fixture("mock.toml"))
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    let f1 = bookindex::eval::token_f1("the cat sat", "cat sat down");
    assert!(stdout.starts_with(&format!("f1={f1:.4} em=1.0 nodes=")), "{stdout}");
    assert!(stdout.contains("I found 5 items."));
}
