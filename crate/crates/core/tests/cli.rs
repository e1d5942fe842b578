//! The `bookindex` binary, driven as a subprocess.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use bookindex::eval::EvalReport;
use common::fixture;

fn bookindex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bookindex"))
        .args(args)
        .env_remove("BOOKRAG_BACKEND")
        .env_remove("BOOKRAG_CONFIG")
        .output()
        .unwrap()
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn build(out: &Path, extra: &[&str]) -> Output {
    let cfg = fixture("mock.toml");
    let doc = fixture("synthetic.jsonl");
    let mut args = vec!["--config", p(&cfg)];
    args.extend_from_slice(extra);
    args.extend(["index", "build", p(&doc), p(out)]);
    bookindex(&args)
}

#[test]
fn build_then_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ix");
    let o = build(&dir, &[]);
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{out}{err}");
    assert!(out.contains("entities:") && out.contains("merges"));
    assert!(dir.join("build_report.json").exists());

    let o = bookindex(&["index", "stats", p(&dir)]);
    let (out, _) = text(&o);
    assert_eq!(o.status.code(), Some(0));
    let keys: Vec<&str> = out.lines().map(|l| l.split(':').next().unwrap()).collect();
    assert_eq!(keys, ["# Entity", "Density", "Diameter", "# CC"]);
}

#[test]
fn malformed_document_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = tmp.path().join("bad.jsonl");
    std::fs::write(&doc, "{\"format_version\": \"1\"}\n{\"id\": \"a\", \"type\": \"Text\"\n").unwrap();
    let o = bookindex(&["--mock", "index", "build", p(&doc), p(&tmp.path().join("out"))]);
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(2));
    assert!(err.to_lowercase().contains("line 2"), "{err}");
}

#[test]
fn unknown_index_and_bad_flags() {
    let o = bookindex(&["--mock", "query", "/nonexistent/index", "anything"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bookindex(&["--mock", "frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = bookindex(&["--mock", "--g", "1.5", "index", "stats", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1), "g outside (0, 1] is a usage error");
    let o = bookindex(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn query_plan_only_and_scripted_answer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ix");
    assert_eq!(build(&dir, &[]).status.code(), Some(0));
    let cfg = fixture("mock.toml");
    let script = fixture("scripted.json");

    let o = bookindex(&["--config", p(&cfg), "query", p(&dir), "How many figures are there from page 3 to page 10?", "--plan-only"]);
    let (out, _) = text(&o);
    let plan: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(plan["category"], "Global");
    assert_eq!(plan["steps"][0]["operator"], "FilterRange");

    let q = "Who proposed Policy Gradient methods?";
    let o = bookindex(&["--config", p(&cfg), "--mock-script", p(&script), "query", p(&dir), q]);
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{err}");
    assert_eq!(out.trim(), "Bob Jones proposed Policy Gradient methods in 2019.");

    let o = bookindex(&["--config", p(&cfg), "query", p(&dir), q, "--trace"]);
    let (out, _) = text(&o);
    for op in ["Extract", "Select_by_Entity", "Graph_Reasoning", "Text_Reasoning", "Skyline_Ranker", "Reduce"] {
        assert!(out.contains(op), "trace lacks {op}:\n{out}");
    }
    assert!(out.contains("|N_R|="));
}

#[test]
fn unreachable_backend_is_a_gateway_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ix");
    assert_eq!(build(&dir, &[]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_bookindex"))
        .args(["query", p(&dir), "Who proposed Policy Gradient methods?"])
        .env_remove("BOOKRAG_BACKEND")
        .env("BOOKRAG_LLM_URL", "http://127.0.0.1:9")
        .env("BOOKRAG_RETRY_ATTEMPTS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", text(&o).1);
}

#[test]
fn eval_writes_a_report_that_reparses() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ix");
    assert_eq!(build(&dir, &[]).status.code(), Some(0));
    let cfg = fixture("mock.toml");
    let data = fixture("dataset.jsonl");
    let report = tmp.path().join("report.json");
    let o = bookindex(&["--config", p(&cfg), "eval", p(&dir), p(&data), "--out", p(&report), "--workers", "2"]);
    let (out, err) = text(&o);
    assert_eq!(o.status.code(), Some(0), "{err}");
    assert!(out.contains("mean  acc 0.750"), "{out}");
    let parsed: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.records.len(), 4);
    assert_eq!(parsed.aggregates.accuracy, 0.75);

    // corpus manifest naming the same index
    let manifest = tmp.path().join("corpus.json");
    std::fs::write(&manifest, r#"{"synthetic": "ix"}"#).unwrap();
    let o = bookindex(&["--config", p(&cfg), "eval", p(&manifest), p(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o).1);

    let o = bookindex(&["--config", p(&cfg), "eval", p(&dir), "/nonexistent/data.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    let empty = tmp.path().join("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    let o = bookindex(&["--config", p(&cfg), "eval", p(&dir), p(&empty)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mock_builds_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(build(&a, &[]).status.code(), Some(0));
    assert_eq!(build(&b, &[]).status.code(), Some(0));
    for f in ["manifest.json", "tree.json", "graph.json", "vectors.bin", "build_report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn example_config_lists_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../bookindex.example.toml");
    let cfg = bookindex::config::Config::from_file(&path).unwrap();
    assert_eq!(cfg, bookindex::config::Config::default());
}
