//! QA metrics, dataset loading and evaluation runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::prompts::ANSWER_EXTRACT;
use crate::gateway::ModelGateway;
use crate::index::BookIndex;
use crate::operators::{execute, ReasonerConfig};
use crate::planner::{plan_query, PlannerConfig, QueryCategory};

/// Lowercase, punctuation to spaces, whitespace collapsed.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 when the normalized gold answer occurs in the normalized raw response.
pub fn accuracy_inclusion(gold: &str, raw: &str) -> f64 {
    let g = normalize(gold);
    if g.is_empty() {
        log::warn!("empty gold answer counts as included");
    }
    f64::from(u8::from(normalize(raw).contains(&g)))
}

pub fn exact_match(gold: &str, extracted: &str) -> f64 {
    f64::from(u8::from(normalize(gold) == normalize(extracted)))
}

/// Bag-of-tokens F1 over whitespace tokens of the normalized strings.
pub fn token_f1(gold: &str, extracted: &str) -> f64 {
    let g = normalize(gold);
    let p = normalize(extracted);
    let gt: Vec<&str> = g.split_whitespace().collect();
    let pt: Vec<&str> = p.split_whitespace().collect();
    match (gt.is_empty(), pt.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0i64;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Share of unique gold blocks that were retrieved; 0 under a parsing error.
pub fn retrieval_recall(gold: &[String], retrieved: &[String], parsing_error: bool) -> Result<f64> {
    if parsing_error {
        return Ok(0.0);
    }
    let gold: BTreeSet<&str> = gold.iter().map(String::as_str).collect();
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let got: BTreeSet<&str> = retrieved.iter().map(String::as_str).collect();
    Ok(gold.intersection(&got).count() as f64 / gold.len() as f64)
}

/// Ask the model for the short answer inside `raw`.
pub fn extract_answer(question: &str, raw: &str, gateway: &ModelGateway) -> Result<String> {
    if raw.trim().is_empty() {
        return Ok(String::new());
    }
    let prompt = ANSWER_EXTRACT.render(&[("question", question), ("raw", raw)])?;
    Ok(gateway.complete(&prompt)?.trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<String>>,
    #[serde(default)]
    pub doc_id: String,
    /// Set when the layout parser mangled the gold blocks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub parsing_error: bool,
}

/// One JSON object per line; blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<QaExample>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&raw)
}

pub fn parse_dataset(raw: &str) -> Result<Vec<QaExample>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: QaExample = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        if ex.question.trim().is_empty() {
            return Err(Error::MissingField {
                line: i + 1,
                field: "question",
            });
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub question: String,
    pub doc_id: String,
    pub gold: String,
    pub category: Option<QueryCategory>,
    pub raw_answer: String,
    pub extracted: String,
    pub accuracy: f64,
    pub em: f64,
    pub f1: f64,
    pub recall: Option<f64>,
    pub retrieved: Vec<String>,
    pub tokens: u64,
    pub latency_ms: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub examples: usize,
    pub failures: usize,
    pub accuracy: f64,
    pub em: f64,
    pub f1: f64,
    /// Mean over examples that carry gold evidence.
    pub recall: Option<f64>,
    pub mean_tokens: f64,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<ExampleRecord>,
    pub aggregates: Aggregates,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(records: &[ExampleRecord]) -> Aggregates {
    Aggregates {
        examples: records.len(),
        failures: records.iter().filter(|r| r.error.is_some()).count(),
        accuracy: mean(records.iter().map(|r| r.accuracy)).unwrap_or(0.0),
        em: mean(records.iter().map(|r| r.em)).unwrap_or(0.0),
        f1: mean(records.iter().map(|r| r.f1)).unwrap_or(0.0),
        recall: mean(records.iter().filter_map(|r| r.recall)),
        mean_tokens: mean(records.iter().map(|r| r.tokens as f64)).unwrap_or(0.0),
        mean_latency_ms: mean(records.iter().map(|r| r.latency_ms)).unwrap_or(0.0),
    }
}

impl EvalReport {
    /// Plain-text table: one row per example, then the means.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>4}  {:>4}  {:>4}  {:>6}  {:>6}  {:>7}  question", "#", "acc", "em", "f1", "recall", "tokens");
        for (i, r) in self.records.iter().enumerate() {
            let recall = r.recall.map_or("-".to_string(), |x| format!("{x:.3}"));
            let mut q = crate::text::truncate_chars(&r.question, 60).to_string();
            if r.error.is_some() {
                q.push_str("  [failed]");
            }
            let _ = writeln!(
                s,
                "{:>4}  {:>4.0}  {:>4.0}  {:>6.3}  {:>6}  {:>7}  {q}",
                i + 1,
                r.accuracy,
                r.em,
                r.f1,
                recall,
                r.tokens
            );
        }
        let a = &self.aggregates;
        let _ = writeln!(
            s,
            "mean  acc {:.3}  em {:.3}  f1 {:.3}  recall {}  tokens {:.1}  latency {:.1} ms  ({} examples, {} failed)",
            a.accuracy,
            a.em,
            a.f1,
            a.recall.map_or("-".to_string(), |x| format!("{x:.3}")),
            a.mean_tokens,
            a.mean_latency_ms,
            a.examples,
            a.failures
        );
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub planner: PlannerConfig,
    pub reasoner: ReasonerConfig,
    /// Worker threads; 0 picks rayon's default.
    pub workers: usize,
}

fn run_one(
    ex: &QaExample,
    indexes: &BTreeMap<String, BookIndex>,
    gateway: &ModelGateway,
    cfg: &EvalConfig,
) -> ExampleRecord {
    let gw = gateway.detached();
    let t0 = Instant::now();
    let mut rec = ExampleRecord {
        question: ex.question.clone(),
        doc_id: ex.doc_id.clone(),
        gold: ex.answer.clone(),
        category: None,
        raw_answer: String::new(),
        extracted: String::new(),
        accuracy: 0.0,
        em: 0.0,
        f1: 0.0,
        recall: None,
        retrieved: Vec::new(),
        tokens: 0,
        latency_ms: 0.0,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let index = resolve_index(indexes, &ex.doc_id)?;
        let plan = plan_query(&ex.question, &gw, &cfg.planner)?;
        rec.category = Some(plan.category);
        let run = execute(&plan, index, &gw, &cfg.reasoner)?;
        rec.raw_answer = run.answer;
        rec.retrieved = run.retrieval.node_ids();
        rec.extracted = extract_answer(&ex.question, &rec.raw_answer, &gw)?;
        if let Some(gold) = ex.evidence.as_ref().filter(|g| !g.is_empty()) {
            let missing = gold.iter().any(|b| !index.tree.nodes.contains_key(b));
            rec.recall = Some(retrieval_recall(gold, &rec.retrieved, ex.parsing_error || missing)?);
        }
        Ok(())
    })();
    rec.accuracy = accuracy_inclusion(&ex.answer, &rec.raw_answer);
    rec.em = exact_match(&ex.answer, &rec.extracted);
    rec.f1 = token_f1(&ex.answer, &rec.extracted);
    if let Err(e) = outcome {
        rec.error = Some(e.to_string());
        rec.accuracy = 0.0;
        rec.em = 0.0;
        rec.f1 = 0.0;
        if ex.evidence.as_ref().is_some_and(|g| !g.is_empty()) {
            rec.recall = Some(0.0);
        }
    }
    rec.tokens = gw.usage().tokens();
    rec.latency_ms = t0.elapsed().as_secs_f64() * 1e3;
    rec
}

fn resolve_index<'a>(indexes: &'a BTreeMap<String, BookIndex>, doc_id: &str) -> Result<&'a BookIndex> {
    if let Some(i) = indexes.get(doc_id) {
        return Ok(i);
    }
    if doc_id.is_empty() && indexes.len() == 1 {
        return Ok(indexes.values().next().expect("one index"));
    }
    Err(Error::InvalidInput(format!("no index for doc_id {doc_id:?}")))
}

/// Answer and score every example. Per-example failures are recorded and
/// the run continues; records keep dataset order.
pub fn run_eval(
    dataset: &[QaExample],
    indexes: &BTreeMap<String, BookIndex>,
    gateway: &ModelGateway,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let records: Vec<ExampleRecord> =
        pool.install(|| dataset.par_iter().map(|ex| run_one(ex, indexes, gateway, cfg)).collect());
    let aggregates = aggregate(&records);
    Ok(EvalReport { records, aggregates })
}
