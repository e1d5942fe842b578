//! Incremental gradient-based entity resolution.
//!
//! Each new entity is compared with its exact nearest neighbours, the
//! neighbours are reranked, and the length of the leading run of gently
//! decreasing scores decides between adding, merging and asking the model.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gateway::prompts::ER_ADJUDICATE;
use crate::gateway::ModelGateway;
use crate::graph::{embed_entity, join_descriptions, Entity, EntityId, KnowledgeGraph};
use crate::text::extract_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStore {
    pub dimension: usize,
    pub entries: BTreeMap<EntityId, Vec<f32>>,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

impl VectorStore {
    pub fn new(dimension: usize) -> Self {
        VectorStore {
            dimension,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// Insert or replace.
    pub fn upsert(&mut self, id: EntityId, v: Vec<f32>) -> Result<()> {
        self.check(&v)?;
        self.entries.insert(id, v);
        Ok(())
    }

    pub fn remove(&mut self, id: EntityId) -> Option<Vec<f32>> {
        self.entries.remove(&id)
    }

    /// Exact top-`k` by cosine similarity; ties go to the smaller id.
    pub fn nearest(&self, query: &[f32], k: usize) -> Result<Vec<(EntityId, f64)>> {
        self.check(query)?;
        let mut scored: Vec<(EntityId, f64)> = self
            .entries
            .iter()
            .map(|(id, v)| (*id, cosine(query, v)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResolutionConfig {
    pub top_k: usize,
    pub g: f64,
    /// Absolute rerank floor; when the best score is below it the entity is
    /// added as new. 0 disables the check.
    pub tau_min: f64,
    /// Send a one-candidate pool to adjudication instead of adding the
    /// entity as new outright.
    pub adjudicate_singleton: bool,
    /// Character budget of the embedding input.
    pub embed_budget: usize,
}

impl Default for ResolutionConfig {
    fn default() -> Self {
        ResolutionConfig {
            top_k: 10,
            g: 0.6,
            tau_min: 0.0,
            adjudicate_singleton: true,
            embed_budget: crate::graph::DEFAULT_EMBED_BUDGET,
        }
    }
}

impl ResolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(self.g > 0.0 && self.g <= 1.0) {
            return Err(Error::InvalidConfig(format!("g must lie in (0, 1], got {}", self.g)));
        }
        if self.tau_min.is_nan() || self.tau_min < 0.0 {
            return Err(Error::InvalidConfig("tau_min must be >= 0".into()));
        }
        if self.embed_budget == 0 {
            return Err(Error::InvalidConfig("embed_budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    AddedNew,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionOutcome {
    pub decision: Decision,
    pub canonical: EntityId,
    /// Candidates with rerank scores, best first.
    pub candidates_considered: Vec<(EntityId, f64)>,
    pub selected_set: Vec<EntityId>,
    pub adjudicated: bool,
}

/// Length of the leading run of `sorted` (descending) where every score
/// exceeds `g` times its predecessor.
pub fn gradient_prefix(sorted: &[f64], g: f64) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    let mut n = 1;
    while n < sorted.len() && sorted[n] > sorted[n - 1] * g {
        n += 1;
    }
    n
}

/// Resolve `v_n` against the store, updating graph and store in place.
///
/// `v_n` must carry its embedding and an id not yet used in the graph.
pub fn resolve(
    v_n: Entity,
    store: &mut VectorStore,
    graph: &mut KnowledgeGraph,
    gateway: &ModelGateway,
    cfg: &ResolutionConfig,
) -> Result<ResolutionOutcome> {
    cfg.validate()?;
    if graph.entities.contains_key(&v_n.id) {
        return Err(Error::InvalidInput(format!("entity id {} already in use", v_n.id)));
    }
    let neighbours = store.nearest(&v_n.embedding, cfg.top_k)?;

    let mut scored: Vec<(EntityId, f64)> = Vec::new();
    if !neighbours.is_empty() {
        let query = v_n.render();
        let docs: Vec<String> = neighbours
            .iter()
            .map(|(id, _)| graph.entity(*id).map(Entity::render))
            .collect::<Result<_>>()?;
        let scores = gateway.rerank(&query, &docs)?;
        scored = neighbours.iter().map(|(id, _)| *id).zip(scores).collect();
        // stable: equal scores keep vector-similarity order
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
    }

    let sorted: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let n_sel = gradient_prefix(&sorted, cfg.g);
    let selected: Vec<EntityId> = scored.iter().take(n_sel).map(|(id, _)| *id).collect();
    let below_floor = cfg.tau_min > 0.0 && sorted.first().is_some_and(|s| *s < cfg.tau_min);

    let mut adjudicated = false;
    let target = if scored.is_empty() || below_floor {
        None
    } else if n_sel == scored.len() {
        if scored.len() == 1 && cfg.adjudicate_singleton {
            adjudicated = true;
            adjudicate(&v_n, &selected, graph, gateway)?
        } else {
            None
        }
    } else if n_sel == 1 {
        Some(selected[0])
    } else {
        adjudicated = true;
        adjudicate(&v_n, &selected, graph, gateway)?
    };

    let outcome = |decision, canonical| ResolutionOutcome {
        decision,
        canonical,
        candidates_considered: scored.clone(),
        selected_set: selected.clone(),
        adjudicated,
    };
    match target {
        None => {
            let id = v_n.id;
            store.upsert(id, v_n.embedding.clone())?;
            graph.insert(v_n);
            Ok(outcome(Decision::AddedNew, id))
        }
        Some(canonical) => {
            let absorbed = v_n.id;
            graph.insert(v_n);
            merge_entities(graph, absorbed, canonical)?;
            let refreshed = embed_entity(graph.entity(canonical)?.clone(), gateway, cfg.embed_budget)?;
            store.upsert(canonical, refreshed.embedding.clone())?;
            graph.insert(refreshed);
            Ok(outcome(Decision::Merged, canonical))
        }
    }
}

fn adjudicate(
    v_n: &Entity,
    selected: &[EntityId],
    graph: &KnowledgeGraph,
    gateway: &ModelGateway,
) -> Result<Option<EntityId>> {
    let describe = |e: &Entity| {
        json!({"name": e.name, "type": e.entity_type, "description": e.description})
    };
    let candidates: Vec<Value> = selected
        .iter()
        .map(|id| {
            let e = graph.entity(*id)?;
            let mut v = describe(e);
            v["id"] = json!(id.0);
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let prompt = ER_ADJUDICATE.render(&[
        ("entity_name", &v_n.name),
        ("new_entity", &describe(v_n).to_string()),
        ("candidates", &Value::Array(candidates).to_string()),
    ])?;
    let reply = gateway.complete(&prompt)?;
    let pick = extract_json(&reply).and_then(|v| match v.get("select_id")? {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    });
    match pick {
        Some(id) if id >= 0 && selected.contains(&EntityId(id as u64)) => Ok(Some(EntityId(id as u64))),
        Some(_) => Ok(None),
        None => {
            log::warn!("unparsable adjudication for `{}`; treating as no match", v_n.name);
            Ok(None)
        }
    }
}

/// Fold `absorbed` into `canonical`: union origins, join descriptions,
/// re-point relations and drop the self-loops this creates.
pub fn merge_entities(graph: &mut KnowledgeGraph, absorbed: EntityId, canonical: EntityId) -> Result<()> {
    graph.entity(canonical)?;
    graph.entity(absorbed)?;
    if absorbed == canonical {
        return Err(Error::InvalidInput("cannot merge an entity into itself".into()));
    }
    let gone = graph.entities.remove(&absorbed).expect("checked above");
    let keep = graph.entities.get_mut(&canonical).expect("checked above");
    keep.origins.extend(gone.origins);
    keep.description = join_descriptions(&keep.description, &gone.description);
    for r in &mut graph.relations {
        if r.source == absorbed {
            r.source = canonical;
        }
        if r.target == absorbed {
            r.target = canonical;
        }
    }
    graph.relations.retain(|r| r.source != r.target);
    Ok(())
}
