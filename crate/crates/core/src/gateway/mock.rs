//! Deterministic offline backend.
//!
//! Completions are looked up in a script table keyed by
//! `(template name, salient slot value)`. Unscripted prompts fall back to a
//! rule-based responder for the template (unless the mock is `strict`), so a
//! whole pipeline can run offline. The embedder is feature-hashed
//! bag-of-words; the default reranker is token Jaccard overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use regex::Regex;
use serde_json::{json, Value};

use super::{BackendError, Completion, ModelBackend, Prompt};
use crate::error::{Error, Result};
use crate::text::{name_key, truncate_chars, word_tokens};

pub const MOCK_DIMENSION: usize = 64;

pub type RerankFn = Arc<dyn Fn(&str, &str) -> f64 + Send + Sync>;

pub struct MockBackend {
    dimension: usize,
    script: BTreeMap<(String, String), String>,
    fallback: bool,
    reranker: RerankFn,
    log: Mutex<Vec<Prompt>>,
}

impl fmt::Debug for MockBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockBackend")
            .field("dimension", &self.dimension)
            .field("scripted", &self.script.len())
            .field("fallback", &self.fallback)
            .finish()
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

/// `|q ∩ c| / |q ∪ c|` over lowercase word tokens.
pub fn jaccard(query: &str, candidate: &str) -> f64 {
    let q: BTreeSet<String> = word_tokens(query).into_iter().collect();
    let c: BTreeSet<String> = word_tokens(candidate).into_iter().collect();
    let union = q.union(&c).count();
    if union == 0 {
        return 0.0;
    }
    q.intersection(&c).count() as f64 / union as f64
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn count_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend {
            dimension: MOCK_DIMENSION,
            script: BTreeMap::new(),
            fallback: true,
            reranker: Arc::new(jaccard),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_dimension(mut self, dimension: usize) -> Self {
        assert!(dimension > 0);
        self.dimension = dimension;
        self
    }

    /// Script the completion for `(template, key)`.
    pub fn with_response(
        mut self,
        template: impl Into<String>,
        key: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        self.script
            .insert((template.into(), key.into()), response.into());
        self
    }

    /// Unscripted prompts become errors instead of using the rule-based responders.
    pub fn strict(mut self) -> Self {
        self.fallback = false;
        self
    }

    pub fn with_reranker(mut self, f: RerankFn) -> Self {
        self.reranker = f;
        self
    }

    /// Load a script file: `{"dimension": 64, "llm": {"<template>": {"<key>": <response>}}}`.
    /// Non-string responses are stored as their JSON text.
    pub fn from_script_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&raw)?;
        let mut mock = MockBackend::new();
        if let Some(d) = v.get("dimension").and_then(Value::as_u64) {
            if d == 0 {
                return Err(Error::InvalidConfig("mock dimension must be positive".into()));
            }
            mock.dimension = d as usize;
        }
        if let Some(llm) = v.get("llm").and_then(Value::as_object) {
            for (template, entries) in llm {
                let entries = entries.as_object().ok_or_else(|| {
                    Error::InvalidConfig(format!("script entries for `{template}` must be an object"))
                })?;
                for (key, resp) in entries {
                    let text = match resp {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    mock.script.insert((template.clone(), key.clone()), text);
                }
            }
        }
        Ok(mock)
    }

    /// Prompts seen so far, in call order.
    pub fn recorded_prompts(&self) -> Vec<Prompt> {
        self.log.lock().expect("prompt log poisoned").clone()
    }

    fn respond(&self, prompt: &Prompt) -> Result<Completion, BackendError> {
        self.log
            .lock()
            .expect("prompt log poisoned")
            .push(prompt.clone());
        let scripted = self
            .script
            .get(&(prompt.template.clone(), prompt.key.clone()))
            .cloned();
        let text = match scripted {
            Some(t) => t,
            None if self.fallback => fallback::respond(prompt),
            None => {
                return Err(BackendError::fatal(format!(
                    "no scripted response for ({}, {:?})",
                    prompt.template, prompt.key
                )))
            }
        };
        Ok(Completion {
            prompt_tokens: count_tokens(&prompt.text),
            completion_tokens: count_tokens(&text),
            text,
        })
    }

    fn hash_embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dimension];
        for tok in word_tokens(text) {
            let h = fnv1a(tok.as_bytes());
            let idx = (h % self.dimension as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm == 0.0 {
            // every token cancelled out; keep the vector well-defined
            let idx = (fnv1a(text.as_bytes()) % self.dimension as u64) as usize;
            v[idx] = 1.0;
            return v;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

impl ModelBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn complete(&self, prompt: &Prompt) -> Result<Completion, BackendError> {
        self.respond(prompt)
    }

    fn complete_vision(&self, prompt: &Prompt, _image: &[u8]) -> Result<Completion, BackendError> {
        self.respond(prompt)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        if word_tokens(text).is_empty() {
            return Err(BackendError::fatal("nothing to embed"));
        }
        Ok(self.hash_embed(text))
    }

    fn rerank(&self, query: &str, candidates: &[String]) -> Result<Vec<f64>, BackendError> {
        Ok(candidates
            .iter()
            .map(|c| (self.reranker)(query, c))
            .collect())
    }
}

/// Rule-based responders for unscripted prompts, one per template.
mod fallback {
    use super::*;

    const STOPWORDS: &[&str] = &[
        "a", "an", "the", "this", "that", "these", "those", "in", "on", "of", "for", "to", "and",
        "or", "is", "are", "was", "were", "it", "its", "as", "at", "by", "with", "from", "we",
        "our", "what", "which", "who", "how", "why", "when", "where", "does", "do", "did", "be",
        "there", "their", "they", "than", "then", "into", "each", "both", "about", "according",
        "many", "much", "much", "can", "also", "all", "any", "some",
    ];

    fn is_stopword(w: &str) -> bool {
        STOPWORDS.contains(&w.to_lowercase().as_str())
    }

    pub(super) fn respond(p: &Prompt) -> String {
        let slot = |name: &str| p.slots.get(name).map(String::as_str).unwrap_or("");
        match p.template.as_str() {
            "classify" => classify(slot("query")),
            "decompose" => decompose(slot("query")),
            "filter_spec" => filter_spec(slot("query")),
            "section_filter" => section_filter(slot("candidates")),
            "extract_text" => extract_text(slot("content")),
            "extract_table" => extract_table(slot("content"), slot("caption")),
            "extract_formula" => json!({"label": Value::Null, "entities": [], "relations": []}).to_string(),
            "extract_vision" => extract_text(slot("caption")),
            "extract_query_entities" => query_entities(slot("query")),
            "select_sections" => select_sections(slot("query"), slot("sections")),
            "er_adjudicate" => adjudicate(slot("new_entity"), slot("candidates")),
            "map" => best_sentence(slot("question"), &strip_evidence_tags(slot("evidence"))),
            "reduce" => reduce(slot("query"), slot("parts")),
            "answer_extract" => answer_extract(slot("raw")),
            other => format!("(mock) no responder for template {other}"),
        }
    }

    fn classify(q: &str) -> String {
        let l = q.to_lowercase();
        let global = Regex::new(r"\b(how many|number of|count|list all|list the|summari[sz]e)\b")
            .unwrap()
            .is_match(&l);
        let complex = l.contains(" and ")
            && ["compare", "differ", "difference", "greater", "larger", "smaller", "which of", "both", "between"]
                .iter()
                .any(|k| l.contains(k));
        let cat = if global {
            "global"
        } else if complex {
            "complex"
        } else {
            "simple"
        };
        json!({ "category": cat }).to_string()
    }

    fn decompose(q: &str) -> String {
        let body = q.trim().trim_end_matches('?');
        let parts: Vec<&str> = body
            .split(" and ")
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        let mut subs: Vec<Value> = parts
            .iter()
            .map(|s| json!({"question": format!("{s}?"), "type": "retrieval"}))
            .collect();
        if parts.len() > 1 {
            subs.push(json!({"question": q.trim(), "type": "synthesis"}));
        }
        json!({ "sub_questions": subs }).to_string()
    }

    fn filter_spec(q: &str) -> String {
        let l = q.to_lowercase();
        let mut filters = Vec::new();
        let range = Regex::new(r"pages?\s+(\d+)\s*(?:-|to|through|and)\s*(?:page\s+)?(\d+)").unwrap();
        let single = Regex::new(r"(?:on|in)\s+page\s+(\d+)").unwrap();
        if let Some(c) = range.captures(&l) {
            filters.push(json!({"filter_type": "page", "filter_value": format!("{}-{}", &c[1], &c[2])}));
        } else if let Some(c) = single.captures(&l) {
            filters.push(json!({"filter_type": "page", "filter_value": &c[1]}));
        }
        let quoted = Regex::new(r#"['"]([^'"]+)['"]\s+section"#).unwrap();
        let named = Regex::new(r"\bsection\s+([a-z0-9][a-z0-9 .\-]*)").unwrap();
        if let Some(c) = quoted.captures(q) {
            filters.push(json!({"filter_type": "section", "filter_value": &c[1]}));
        } else if let Some(c) = named.captures(&l) {
            filters.push(json!({"filter_type": "section", "filter_value": c[1].trim().trim_end_matches('?')}));
        }
        if ["figure", "image", "picture", "plot", "chart", "diagram"].iter().any(|k| l.contains(k)) {
            filters.push(json!({"filter_type": "image"}));
        } else if l.contains("table") {
            filters.push(json!({"filter_type": "table"}));
        } else if filters.is_empty() {
            filters.push(json!({"filter_type": "section"}));
        }
        let op = if Regex::new(r"\b(how many|number of|count)\b").unwrap().is_match(&l) {
            "COUNT"
        } else if l.contains("summar") {
            "SUMMARIZE"
        } else if l.starts_with("list") || l.contains("which") || l.contains("what are") {
            "LIST"
        } else {
            "ANALYZE"
        };
        json!({ "filters": filters, "operation": op }).to_string()
    }

    fn section_filter(candidates: &str) -> String {
        let cands: Vec<Value> = serde_json::from_str(candidates).unwrap_or_default();
        let numbered = Regex::new(r"^(\d+(?:\.\d+)*)\.?\s+\S").unwrap();
        let verdicts: Vec<Value> = cands
            .iter()
            .map(|c| {
                let id = c.get("block_id").cloned().unwrap_or(Value::Null);
                let text = c.get("text").and_then(Value::as_str).unwrap_or("").trim();
                let words = text.split_whitespace().count();
                let level = if text.is_empty() || words > 14 || text.ends_with('.') && words > 6 {
                    None
                } else if let Some(m) = numbered.captures(text) {
                    Some(m[1].split('.').count() as u64 + 1)
                } else {
                    match c.get("font_size").and_then(Value::as_f64) {
                        Some(fs) if fs >= 18.0 => Some(1),
                        Some(fs) if fs >= 13.0 => Some(2),
                        Some(_) => Some(3),
                        None => Some(2),
                    }
                };
                match level {
                    Some(l) => json!({"block_id": id, "level": l, "type": "Section"}),
                    None => json!({"block_id": id, "level": Value::Null, "type": "Text"}),
                }
            })
            .collect();
        Value::Array(verdicts).to_string()
    }

    /// Split on terminal punctuation followed by whitespace, so decimals stay whole.
    fn sentences(text: &str) -> Vec<&str> {
        let re = Regex::new(r"[.;!?](?:\s+|$)|\n").unwrap();
        re.split(text)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Runs of capitalised words, acronyms and 4-digit numbers.
    fn mentions(sentence: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut run: Vec<&str> = Vec::new();
        let words: Vec<&str> = sentence.split_whitespace().collect();
        for (i, raw) in words.iter().enumerate() {
            let w = raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '-');
            let starts_upper = w.chars().next().is_some_and(char::is_uppercase);
            let year = w.len() == 4 && w.chars().all(|c| c.is_ascii_digit());
            let keep = !w.is_empty()
                && (year || (starts_upper && !(i == 0 && is_stopword(w)) && !is_stopword(w)));
            let breaks = raw.ends_with(',') || raw.ends_with(':') || raw.ends_with(')');
            if keep {
                run.push(w);
            }
            if (!keep || breaks) && !run.is_empty() {
                out.push(run.join(" "));
                run.clear();
            }
        }
        if !run.is_empty() {
            out.push(run.join(" "));
        }
        out
    }

    fn extract_text(content: &str) -> String {
        let mut entities: Vec<Value> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut relations = Vec::new();
        for s in sentences(content) {
            let ms = mentions(s);
            for m in &ms {
                if seen.insert(name_key(m)) {
                    let ty = if m.chars().all(|c| c.is_ascii_digit()) {
                        "DATE"
                    } else {
                        "CONCEPT"
                    };
                    entities.push(json!({
                        "name": m,
                        "type": ty,
                        "description": m,
                    }));
                }
            }
            for pair in ms.windows(2) {
                if name_key(&pair[0]) != name_key(&pair[1]) {
                    relations.push(json!({
                        "source": pair[0],
                        "target": pair[1],
                        "description": truncate_chars(s, 240),
                    }));
                }
            }
        }
        json!({ "entities": entities, "relations": relations }).to_string()
    }

    fn split_row(line: &str) -> Vec<String> {
        let sep = if line.contains('|') {
            '|'
        } else if line.contains('\t') {
            '\t'
        } else {
            ','
        };
        line.split(sep)
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty() && !c.chars().all(|ch| ch == '-' || ch == ':'))
            .collect()
    }

    fn extract_table(content: &str, caption: &str) -> String {
        let mut rows = content.lines().map(split_row).filter(|r| !r.is_empty());
        let headers = rows.next().unwrap_or_default();
        let mut row_headers = Vec::new();
        for r in rows {
            if let Some(first) = r.first() {
                if first.chars().any(char::is_alphabetic) && !row_headers.contains(first) {
                    row_headers.push(first.clone());
                }
            }
        }
        let mut all = headers;
        all.extend(row_headers);
        let caption = if caption.trim().is_empty() {
            Value::Null
        } else {
            Value::String(caption.trim().to_string())
        };
        json!({ "caption": caption, "headers": all, "entities": [], "relations": [] }).to_string()
    }

    fn query_entities(q: &str) -> String {
        let mut names: Vec<String> = Vec::new();
        let quoted = Regex::new(r#"["']([^"']{2,})["']"#).unwrap();
        for c in quoted.captures_iter(q) {
            names.push(c[1].to_string());
        }
        names.extend(mentions(q));
        if names.is_empty() {
            names = word_tokens(q)
                .into_iter()
                .filter(|w| w.len() > 3 && !is_stopword(w))
                .collect();
        }
        let mut seen = BTreeSet::new();
        names.retain(|n| seen.insert(name_key(n)));
        let list: Vec<Value> = names.iter().map(|n| json!({ "entity_name": n })).collect();
        json!({ "entities": list }).to_string()
    }

    fn select_sections(q: &str, sections: &str) -> String {
        let titles: Vec<String> = serde_json::from_str(sections).unwrap_or_default();
        let qtok: BTreeSet<String> = word_tokens(q)
            .into_iter()
            .filter(|w| !is_stopword(w))
            .collect();
        let scored: Vec<(usize, &String)> = titles
            .iter()
            .map(|t| {
                let overlap = word_tokens(t).iter().filter(|w| qtok.contains(*w)).count();
                (overlap, t)
            })
            .collect();
        let best = scored.iter().map(|(s, _)| *s).max().unwrap_or(0);
        let picked: Vec<&String> = if best == 0 {
            titles.iter().take(1).collect()
        } else {
            scored.iter().filter(|(s, _)| *s == best).map(|(_, t)| *t).collect()
        };
        json!({ "sections": picked }).to_string()
    }

    fn initials(s: &str) -> String {
        s.split_whitespace()
            .filter_map(|w| w.chars().next())
            .collect::<String>()
            .to_lowercase()
    }

    fn adjudicate(new_entity: &str, candidates: &str) -> String {
        let new: Value = serde_json::from_str(new_entity).unwrap_or(Value::Null);
        let new_name = new.get("name").and_then(Value::as_str).unwrap_or("");
        let nk = name_key(new_name);
        let cands: Vec<Value> = serde_json::from_str(candidates).unwrap_or_default();
        for c in &cands {
            let name = c.get("name").and_then(Value::as_str).unwrap_or("");
            let ck = name_key(name);
            let abbrev = (!nk.contains(' ') && nk == initials(&ck))
                || (!ck.contains(' ') && ck == initials(&nk));
            if ck == nk || abbrev {
                let id = c.get("id").cloned().unwrap_or(json!(-1));
                return json!({"select_id": id, "explanation": "names match"}).to_string();
            }
        }
        json!({"select_id": -1, "explanation": "no candidate shares the name"}).to_string()
    }

    fn best_sentence(question: &str, evidence: &str) -> String {
        let qtok: BTreeSet<String> = word_tokens(question)
            .into_iter()
            .filter(|w| !is_stopword(w))
            .collect();
        let mut best: Option<(usize, &str)> = None;
        for s in sentences(evidence) {
            let overlap = word_tokens(s).iter().filter(|w| qtok.contains(*w)).count();
            if best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, s));
            }
        }
        match best {
            Some((_, s)) => format!("{}.", truncate_chars(s, 300)),
            None => "Not answerable.".to_string(),
        }
    }

    /// Drop the `[id] (Type, page n)` prefix evidence lines carry.
    fn strip_evidence_tags(evidence: &str) -> String {
        let tag = Regex::new(r"^\[[^\]]*\]\s*(?:\([^)]*\)\s*)?").unwrap();
        evidence
            .lines()
            .map(|l| tag.replace(l.trim(), "").into_owned())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Joins the partial answers; falls back to the best-matching sentence.
    fn reduce(query: &str, parts: &str) -> String {
        let answer = Regex::new(r"^\s*A:\s*(.+)$").unwrap();
        let tag = Regex::new(r"^\[[^\]]*\]").unwrap();
        let raw: Vec<&str> = parts
            .lines()
            .filter_map(|l| answer.captures(l).map(|c| c.get(1).unwrap().as_str().trim()))
            .filter(|a| !a.is_empty())
            .collect();
        if raw.is_empty() {
            return best_sentence(query, parts);
        }
        if raw.iter().all(|a| tag.is_match(a)) {
            // raw evidence rather than partial answers
            return best_sentence(query, &strip_evidence_tags(&raw.join("\n")));
        }
        let mut seen = BTreeSet::new();
        let answers: Vec<&str> = raw
            .into_iter()
            .map(|a| a.trim_end_matches('.'))
            .filter(|a| seen.insert(a.to_string()))
            .collect();
        format!("{}.", answers.join("; "))
    }

    fn answer_extract(raw: &str) -> String {
        let mut s = raw.trim();
        for prefix in ["the answer is", "answer:", "final answer:"] {
            if s.to_lowercase().starts_with(prefix) {
                s = s[prefix.len()..].trim();
            }
        }
        s.trim_end_matches('.').trim().to_string()
    }
}
