//! Knowledge graph types and per-node subgraph extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::prompts::{EXTRACT_FORMULA, EXTRACT_TABLE, EXTRACT_TEXT, EXTRACT_VISION};
use crate::gateway::ModelGateway;
use crate::ingest::BlockContent;
use crate::text::{collapse_whitespace, extract_json, name_key, truncate_chars};
use crate::tree::{NodeType, TreeNode};

pub const CONTAINED_IN: &str = "ContainedIn";
pub const RELATED: &str = "Related";
pub const DEFAULT_EMBED_BUDGET: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u64);

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    /// Display form: trimmed, internal whitespace collapsed, casing kept.
    pub name: String,
    pub entity_type: String,
    pub description: String,
    pub origins: BTreeSet<String>,
    /// Kept in the vector file, not in the graph file.
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

impl Entity {
    pub fn new(id: EntityId, name: &str, entity_type: &str, description: &str, origin: &str) -> Self {
        Entity {
            id,
            name: collapse_whitespace(name),
            entity_type: collapse_whitespace(entity_type).to_uppercase(),
            description: description.trim().to_string(),
            origins: BTreeSet::from([origin.to_string()]),
            embedding: Vec::new(),
        }
    }

    /// `name (entity_type): description`; the text that is embedded and
    /// shown to the reranker.
    pub fn render(&self) -> String {
        format!("{} ({}): {}", self.name, self.entity_type, self.description)
    }

    pub fn key(&self) -> String {
        name_key(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub source: EntityId,
    pub target: EntityId,
    pub description: String,
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub entities: BTreeMap<EntityId, Entity>,
    pub relations: Vec<Relation>,
}

impl KnowledgeGraph {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities.get(&id).ok_or(Error::UnknownEntity(id.0))
    }

    pub fn insert(&mut self, e: Entity) {
        self.entities.insert(e.id, e);
    }

    /// Adds a relation unless it would be a self-loop. Endpoints must exist.
    pub fn add_relation(&mut self, r: Relation) -> Result<()> {
        for id in [r.source, r.target] {
            self.entity(id)?;
        }
        if r.source != r.target {
            self.relations.push(r);
        }
        Ok(())
    }

    pub fn next_id(&self) -> EntityId {
        EntityId(self.entities.keys().next_back().map_or(0, |id| id.0 + 1))
    }

    /// Relations with a missing endpoint or equal endpoints.
    pub fn integrity_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.relations {
            if !self.entities.contains_key(&r.source) || !self.entities.contains_key(&r.target) {
                out.push(format!("dangling relation {} -> {}", r.source, r.target));
            }
            if r.source == r.target {
                out.push(format!("self-loop on {}", r.source));
            }
        }
        for e in self.entities.values() {
            if e.name.is_empty() {
                out.push(format!("entity {} has an empty name", e.id));
            }
            if e.origins.is_empty() {
                out.push(format!("entity {} has no origins", e.id));
            }
        }
        out
    }
}

/// Entities and relations pulled from one tree node. Entity ids are local
/// (0..n) until the index builder assigns global ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeSubgraph {
    pub node_id: String,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

struct Collector {
    node_id: String,
    entities: Vec<Entity>,
    by_key: HashMap<String, usize>,
    relations: Vec<Relation>,
}

impl Collector {
    fn new(node_id: &str) -> Self {
        Collector {
            node_id: node_id.to_string(),
            entities: Vec::new(),
            by_key: HashMap::new(),
            relations: Vec::new(),
        }
    }

    /// Returns the local id, reusing an existing entry with the same name.
    fn entity(&mut self, name: &str, ty: &str, description: &str) -> Option<EntityId> {
        let key = name_key(name);
        if key.is_empty() {
            return None;
        }
        if let Some(&i) = self.by_key.get(&key) {
            let e = &mut self.entities[i];
            e.description = join_descriptions(&e.description, description);
            return Some(e.id);
        }
        let id = EntityId(self.entities.len() as u64);
        let ty = if ty.trim().is_empty() { "CONCEPT" } else { ty };
        self.entities
            .push(Entity::new(id, name, ty, description, &self.node_id));
        self.by_key.insert(key, id.0 as usize);
        Some(id)
    }

    fn relate(&mut self, source: EntityId, target: EntityId, description: &str, kind: &str) {
        if source == target {
            return;
        }
        let exists = self
            .relations
            .iter()
            .any(|r| r.source == source && r.target == target && r.kind == kind);
        if !exists {
            self.relations.push(Relation {
                source,
                target,
                description: description.trim().to_string(),
                kind: kind.to_string(),
            });
        }
    }

    fn lookup(&self, name: &str) -> Option<EntityId> {
        self.by_key
            .get(&name_key(name))
            .map(|&i| self.entities[i].id)
    }

    fn finish(self) -> NodeSubgraph {
        NodeSubgraph {
            node_id: self.node_id,
            entities: self.entities,
            relations: self.relations,
        }
    }
}

/// Newline-joined union of description lines, first occurrence wins.
pub fn join_descriptions(a: &str, b: &str) -> String {
    let mut seen = BTreeSet::new();
    let mut out: Vec<&str> = Vec::new();
    for line in a.lines().chain(b.lines()) {
        let line = line.trim();
        if !line.is_empty() && seen.insert(line) {
            out.push(line);
        }
    }
    out.join("\n")
}

fn str_field<'a>(v: &'a Value, keys: &[&str]) -> &'a str {
    keys.iter()
        .find_map(|k| v.get(*k).and_then(Value::as_str))
        .unwrap_or("")
}

/// Adds the reply's `entities` and `relations` to the collector.
fn absorb_reply(c: &mut Collector, reply: &Value) {
    if let Some(list) = reply.get("entities").and_then(Value::as_array) {
        for e in list {
            let name = match e {
                Value::String(s) => s.as_str(),
                _ => str_field(e, &["name", "entity_name"]),
            };
            c.entity(
                name,
                str_field(e, &["type", "entity_type"]),
                str_field(e, &["description"]),
            );
        }
    }
    if let Some(list) = reply.get("relations").and_then(Value::as_array) {
        for r in list {
            let (s, t) = (str_field(r, &["source"]), str_field(r, &["target"]));
            match (c.lookup(s), c.lookup(t)) {
                (Some(s), Some(t)) => {
                    let kind = match str_field(r, &["kind"]) {
                        "" => RELATED,
                        k => k,
                    };
                    c.relate(s, t, str_field(r, &["description"]), kind);
                }
                _ => log::debug!(
                    "node `{}`: relation {s:?} -> {t:?} names an unknown entity; dropped",
                    c.node_id
                ),
            }
        }
    }
}

/// Extract `g_i` from one tree node.
///
/// Section headings become a single `SECTION` entity without a model call.
/// Tables and formulas get one primary entity that every other extracted
/// entity is attached to with a `ContainedIn` relation. Image nodes go to
/// the vision model with bytes read from `asset_root`.
pub fn extract_node_subgraph(
    node: &TreeNode,
    gateway: &ModelGateway,
    asset_root: &Path,
) -> Result<NodeSubgraph> {
    let mut c = Collector::new(&node.id);
    let empty = || Error::EmptyExtraction(node.id.clone());

    match node.node_type {
        NodeType::Section => {
            let title = collapse_whitespace(node.title());
            if title.is_empty() {
                return Err(empty());
            }
            c.entity(&title, "SECTION", &title);
            return Ok(c.finish());
        }
        NodeType::Text => {
            let text = node.content.as_text().unwrap_or("");
            if text.trim().is_empty() {
                return Err(empty());
            }
            let p = EXTRACT_TEXT.render(&[("node_id", &node.id), ("content", text)])?;
            absorb_reply(&mut c, &parse_reply(&gateway.complete(&p)?, &node.id)?);
        }
        NodeType::Table => {
            let text = node.content.as_text().unwrap_or("");
            if text.trim().is_empty() {
                return Err(empty());
            }
            let caption = node.caption.as_deref().unwrap_or("");
            let p = EXTRACT_TABLE.render(&[
                ("node_id", &node.id),
                ("caption", caption),
                ("content", text),
            ])?;
            let reply = parse_reply(&gateway.complete(&p)?, &node.id)?;
            let label = first_non_empty(&[
                caption,
                str_field(&reply, &["caption", "label"]),
            ])
            .unwrap_or_else(|| format!("Table {}", node.id));
            let desc = format!("Table: {}", truncate_chars(&collapse_whitespace(text), 240));
            let primary = c.entity(&label, "TABLE", &desc).ok_or_else(empty)?;
            if let Some(headers) = reply.get("headers").and_then(Value::as_array) {
                for h in headers.iter().filter_map(Value::as_str) {
                    if let Some(id) = c.entity(h, "TABLE_HEADER", &format!("Header of table {label}")) {
                        c.relate(id, primary, &format!("header of {label}"), CONTAINED_IN);
                    }
                }
            }
            absorb_reply(&mut c, &reply);
            attach_all(&mut c, primary, &label);
        }
        NodeType::Formula => {
            let text = node.content.as_text().unwrap_or("");
            if text.trim().is_empty() {
                return Err(empty());
            }
            let p = EXTRACT_FORMULA.render(&[("node_id", &node.id), ("content", text)])?;
            let reply = parse_reply(&gateway.complete(&p)?, &node.id)?;
            let label = first_non_empty(&[str_field(&reply, &["label", "name"])])
                .unwrap_or_else(|| format!("Formula {}", node.id));
            let desc = format!("Formula: {}", truncate_chars(&collapse_whitespace(text), 240));
            let primary = c.entity(&label, "FORMULA", &desc).ok_or_else(empty)?;
            absorb_reply(&mut c, &reply);
            attach_all(&mut c, primary, &label);
        }
        NodeType::Image => {
            let BlockContent::Image { path } = &node.content else {
                return Err(Error::InvalidInput(format!(
                    "image node `{}` carries text content",
                    node.id
                )));
            };
            let full = asset_root.join(path);
            let bytes = std::fs::read(&full).map_err(|_| Error::UnresolvableImage {
                block: node.id.clone(),
                path: full.clone(),
            })?;
            let caption = node.caption.as_deref().unwrap_or("");
            let p = EXTRACT_VISION.render(&[("node_id", &node.id), ("caption", caption)])?;
            absorb_reply(
                &mut c,
                &parse_reply(&gateway.complete_vision(&p, &bytes)?, &node.id)?,
            );
        }
    }

    if c.entities.is_empty() {
        return Err(empty());
    }
    Ok(c.finish())
}

fn first_non_empty(options: &[&str]) -> Option<String> {
    options
        .iter()
        .map(|s| collapse_whitespace(s))
        .find(|s| !s.is_empty())
}

/// Star every non-primary entity onto the primary one.
fn attach_all(c: &mut Collector, primary: EntityId, label: &str) {
    let others: Vec<EntityId> = c
        .entities
        .iter()
        .map(|e| e.id)
        .filter(|id| *id != primary)
        .collect();
    for id in others {
        c.relate(id, primary, &format!("part of {label}"), CONTAINED_IN);
    }
}

fn parse_reply(reply: &str, node_id: &str) -> Result<Value> {
    match extract_json(reply) {
        Some(v @ Value::Object(_)) => Ok(v),
        Some(Value::Array(items)) => Ok(serde_json::json!({ "entities": items })),
        _ => Err(Error::MalformedVerdict(format!(
            "extraction reply for node `{node_id}` is not a JSON object"
        ))),
    }
}

/// Embedding input: `name (type): description` cut to `budget` characters.
pub fn embedding_input(e: &Entity, budget: usize) -> String {
    truncate_chars(&e.render(), budget.max(1)).to_string()
}

pub fn embed_entity(mut e: Entity, gateway: &ModelGateway, budget: usize) -> Result<Entity> {
    if e.name.trim().is_empty() {
        return Err(Error::InvalidInput("cannot embed an entity with an empty name".into()));
    }
    e.embedding = gateway.embed(&embedding_input(&e, budget))?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockBackend;

    fn node(id: &str, ty: NodeType, text: &str) -> TreeNode {
        TreeNode {
            id: id.into(),
            node_type: ty,
            level: (ty == NodeType::Section).then_some(1),
            content: BlockContent::Text(text.into()),
            caption: None,
            page: 1,
            order: 0,
            parent: Some("ROOT".into()),
            children: vec![],
        }
    }

    #[test]
    fn scripted_text_extraction() {
        let gw = ModelGateway::new(MockBackend::new().strict().with_response(
            "extract_text",
            "n1",
            r#"{"entities":[{"name":"Alice","type":"person","description":"founder"},
                {"name":"Acme","type":"ORGANIZATION","description":"a company"},
                {"name":"2001 founding","type":"EVENT","description":"when Acme was founded"}],
               "relations":[{"source":"Alice","target":"Acme","description":"founded"},
                {"source":"Acme","target":"2001 founding","description":"founded in"},
                {"source":"Alice","target":"Nobody","description":"dropped"}]}"#,
        ));
        let g = extract_node_subgraph(
            &node("n1", NodeType::Text, "Alice founded Acme in 2001"),
            &gw,
            Path::new("."),
        )
        .unwrap();
        let names: Vec<&str> = g.entities.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["Alice", "Acme", "2001 founding"]);
        assert_eq!(g.entities[0].entity_type, "PERSON");
        assert_eq!(g.relations.len(), 2);
        assert!(g
            .entities
            .iter()
            .all(|e| e.origins == BTreeSet::from(["n1".to_string()])));
    }

    #[test]
    fn table_headers_form_a_star() {
        let gw = ModelGateway::new(MockBackend::new());
        let mut n = node("t1", NodeType::Table, "| Model | Accuracy |\n|---|---|\n| BERT | 0.9 |");
        n.caption = Some("Results".into());
        let g = extract_node_subgraph(&n, &gw, Path::new(".")).unwrap();
        let primary = g.entities.iter().find(|e| e.entity_type == "TABLE").unwrap();
        assert_eq!(primary.name, "Results");
        for name in ["Model", "Accuracy", "BERT"] {
            let e = g.entities.iter().find(|e| e.name == name).unwrap();
            assert!(g.relations.iter().any(|r| r.source == e.id
                && r.target == primary.id
                && r.kind == CONTAINED_IN));
        }
        assert_eq!(
            g.entities.iter().filter(|e| e.entity_type == "TABLE").count(),
            1
        );
        assert!(g.relations.iter().all(|r| r.target == primary.id));
    }

    #[test]
    fn formulas_get_a_synthesised_label() {
        let gw = ModelGateway::new(MockBackend::new());
        let g = extract_node_subgraph(&node("f1", NodeType::Formula, "E = mc^2"), &gw, Path::new("."))
            .unwrap();
        assert_eq!(g.entities.len(), 1);
        assert_eq!(g.entities[0].name, "Formula f1");
        assert_eq!(g.entities[0].entity_type, "FORMULA");
    }

    #[test]
    fn sections_and_empty_nodes() {
        let gw = ModelGateway::new(MockBackend::new().strict());
        let g = extract_node_subgraph(&node("s", NodeType::Section, " Method  "), &gw, Path::new("."))
            .unwrap();
        assert_eq!(g.entities[0].name, "Method");
        assert_eq!(g.entities[0].entity_type, "SECTION");
        assert!(matches!(
            extract_node_subgraph(&node("e", NodeType::Text, "  "), &gw, Path::new(".")),
            Err(Error::EmptyExtraction(_))
        ));
        assert_eq!(gw.usage().llm_calls, 0);
    }

    #[test]
    fn embedding_is_deterministic() {
        let gw = ModelGateway::new(MockBackend::new());
        let e = Entity::new(EntityId(0), "Acme", "ORG", "a company", "n");
        let a = embed_entity(e.clone(), &gw, 512).unwrap();
        let b = embed_entity(e.clone(), &gw, 512).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.embedding.len(), gw.dimension());
        let other = embed_entity(
            Entity::new(EntityId(1), "Globex", "ORG", "a company", "n"),
            &gw,
            512,
        )
        .unwrap();
        assert_ne!(a.embedding, other.embedding);
        let mut blank = e;
        blank.name = " ".into();
        assert!(embed_entity(blank, &gw, 512).is_err());
    }

    #[test]
    fn descriptions_join_without_repeats() {
        assert_eq!(join_descriptions("a\nb", "b\nc"), "a\nb\nc");
        assert_eq!(join_descriptions("", "x"), "x");
    }
}
