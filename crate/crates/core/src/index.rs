//! The assembled index: section tree, knowledge graph and the entity/node
//! link, plus its on-disk form.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gateway::{ModelGateway, Usage};
use crate::graph::{embed_entity, extract_node_subgraph, EntityId, KnowledgeGraph, NodeSubgraph, Relation};
use crate::ingest::{validate_source, DocumentSource};
use crate::resolution::{resolve, Decision, ResolutionConfig, VectorStore};
use crate::tree::{assemble_tree, filter_sections, DocTree, DEFAULT_BATCH_SIZE};

pub const INDEX_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const TREE_FILE: &str = "tree.json";
const GRAPH_FILE: &str = "graph.json";
const VECTORS_FILE: &str = "vectors.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct BookIndex {
    pub doc_id: String,
    pub tree: DocTree,
    pub graph: KnowledgeGraph,
    pub store: VectorStore,
}

/// Both directions of the entity/node link. Derived, never stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtLinkView {
    pub entity_to_nodes: BTreeMap<EntityId, BTreeSet<String>>,
    pub node_to_entities: BTreeMap<String, BTreeSet<EntityId>>,
}

impl GtLinkView {
    pub fn pair_count(&self) -> (usize, usize) {
        (
            self.entity_to_nodes.values().map(BTreeSet::len).sum(),
            self.node_to_entities.values().map(BTreeSet::len).sum(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub batch_size: usize,
    pub resolution: ResolutionConfig,
    /// Directory image paths are resolved against. Defaults to the current
    /// directory.
    pub asset_root: Option<PathBuf>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            resolution: ResolutionConfig::default(),
            asset_root: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub doc_id: String,
    pub nodes: usize,
    pub sections: usize,
    pub extracted_entities: usize,
    pub entities: usize,
    pub relations: usize,
    pub merges: usize,
    pub adjudications: usize,
    pub failed_nodes: usize,
    pub warnings: Vec<String>,
    pub usage: Usage,
}

pub fn build_index(
    src: &DocumentSource,
    gateway: &ModelGateway,
    cfg: &BuildConfig,
) -> Result<(BookIndex, BuildReport)> {
    if src.blocks.is_empty() {
        return Err(Error::EmptyDocument);
    }
    if let Some(v) = validate_source(src).into_iter().next() {
        return Err(Error::Format { line: 0, message: v });
    }
    cfg.resolution.validate()?;
    let start_usage = gateway.usage();
    let mut report = BuildReport {
        doc_id: src.doc_id.clone(),
        ..BuildReport::default()
    };

    let filtering = filter_sections(src, gateway, cfg.batch_size)?;
    report.warnings.extend(filtering.warnings);
    let (tree, tree_warnings) = assemble_tree(src, &filtering.verdicts)?;
    report.warnings.extend(tree_warnings);

    // extraction and embedding are per-node and run in parallel; resolution
    // below consumes the results in document order
    let asset_root = cfg.asset_root.clone().unwrap_or_else(|| PathBuf::from("."));
    let budget = cfg.resolution.embed_budget;
    let nodes: Vec<_> = tree
        .document_order()
        .into_iter()
        .filter(|n| n.id != tree.root)
        .collect();
    let extracted: Vec<(String, Result<NodeSubgraph>)> = nodes
        .par_iter()
        .map(|node| {
            let sub = extract_node_subgraph(node, gateway, &asset_root).and_then(|mut sub| {
                sub.entities = sub
                    .entities
                    .into_iter()
                    .map(|e| embed_entity(e, gateway, budget))
                    .collect::<Result<_>>()?;
                Ok(sub)
            });
            (node.id.clone(), sub)
        })
        .collect();

    let mut graph = KnowledgeGraph::default();
    let mut store = VectorStore::new(gateway.dimension());
    let mut next_id = 0u64;
    let mut first_gateway_error = None;
    for (node_id, sub) in extracted {
        let sub = match sub {
            Ok(sub) => sub,
            Err(e) => {
                report.failed_nodes += 1;
                report.warnings.push(format!("node `{node_id}`: {e}"));
                if matches!(e, Error::Gateway(_) | Error::Timeout(_)) && first_gateway_error.is_none() {
                    first_gateway_error = Some(e);
                }
                continue;
            }
        };
        let mut local_to_global: HashMap<EntityId, EntityId> = HashMap::new();
        for mut e in sub.entities {
            let local = e.id;
            e.id = EntityId(next_id);
            next_id += 1;
            report.extracted_entities += 1;
            let out = resolve(e, &mut store, &mut graph, gateway, &cfg.resolution)?;
            if out.decision == Decision::Merged {
                report.merges += 1;
            }
            if out.adjudicated {
                report.adjudications += 1;
            }
            local_to_global.insert(local, out.canonical);
        }
        for r in sub.relations {
            let (Some(&s), Some(&t)) = (local_to_global.get(&r.source), local_to_global.get(&r.target)) else {
                continue;
            };
            graph.add_relation(Relation {
                source: s,
                target: t,
                ..r
            })?;
        }
    }
    if let Some(e) = first_gateway_error {
        if report.failed_nodes == nodes.len() {
            return Err(e);
        }
    }

    report.nodes = tree.len();
    report.sections = tree.nodes.values().filter(|n| n.is_section()).count();
    report.entities = graph.len();
    report.relations = graph.relations.len();
    report.usage = gateway.usage().since(&start_usage);
    let index = BookIndex {
        doc_id: src.doc_id.clone(),
        tree,
        graph,
        store,
    };
    debug_assert!(index.validate().is_empty(), "{:?}", index.validate());
    Ok((index, report))
}

impl BookIndex {
    pub fn gt_link(&self) -> GtLinkView {
        let mut view = GtLinkView::default();
        for e in self.graph.entities.values() {
            view.entity_to_nodes.insert(e.id, e.origins.clone());
            for n in &e.origins {
                view.node_to_entities.entry(n.clone()).or_default().insert(e.id);
            }
        }
        view
    }

    /// Referential-closure violations; empty for a well-formed index.
    pub fn validate(&self) -> Vec<String> {
        let mut out = self.tree.validate();
        out.extend(self.graph.integrity_violations());
        for e in self.graph.entities.values() {
            for n in &e.origins {
                if !self.tree.nodes.contains_key(n) {
                    out.push(format!("entity {} links to unknown node `{n}`", e.id));
                }
            }
            if !self.store.entries.contains_key(&e.id) {
                out.push(format!("entity {} has no stored vector", e.id));
            }
        }
        if self.store.len() != self.graph.len() {
            out.push(format!(
                "store holds {} vectors for {} entities",
                self.store.len(),
                self.graph.len()
            ));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files: [(&str, Vec<u8>); 3] = [
            (TREE_FILE, serde_json::to_vec_pretty(&self.tree)?),
            (GRAPH_FILE, serde_json::to_vec_pretty(&self.graph)?),
            (VECTORS_FILE, encode_vectors(&self.store)),
        ];
        let mut checksums = BTreeMap::new();
        for (name, bytes) in &files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            checksums.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        }
        let manifest = Manifest {
            format_version: INDEX_FORMAT_VERSION,
            doc_id: self.doc_id.clone(),
            dimension: self.store.dimension,
            entities: self.graph.len(),
            nodes: self.tree.len(),
            checksums,
        };
        let path = dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<BookIndex> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "index directory not found"),
            ));
        }
        let manifest_bytes = read_part(dir, MANIFEST_FILE)?;
        let raw: serde_json::Value = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::CorruptIndex(format!("{MANIFEST_FILE}: {e}")))?;
        let version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptIndex(format!("{MANIFEST_FILE}: no format_version")))?;
        if version > u64::from(INDEX_FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: INDEX_FORMAT_VERSION,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw)
            .map_err(|e| Error::CorruptIndex(format!("{MANIFEST_FILE}: {e}")))?;

        let mut parts = HashMap::new();
        for name in [TREE_FILE, GRAPH_FILE, VECTORS_FILE] {
            let bytes = read_part(dir, name)?;
            let expected = manifest
                .checksums
                .get(name)
                .ok_or_else(|| Error::CorruptIndex(format!("manifest has no checksum for {name}")))?;
            if &hex::encode(Sha256::digest(&bytes)) != expected {
                return Err(Error::CorruptIndex(format!("checksum mismatch for {name}")));
            }
            parts.insert(name, bytes);
        }
        let corrupt = |name: &str, e: serde_json::Error| Error::CorruptIndex(format!("{name}: {e}"));
        let tree: DocTree = serde_json::from_slice(&parts[TREE_FILE]).map_err(|e| corrupt(TREE_FILE, e))?;
        let mut graph: KnowledgeGraph =
            serde_json::from_slice(&parts[GRAPH_FILE]).map_err(|e| corrupt(GRAPH_FILE, e))?;
        let store = decode_vectors(&parts[VECTORS_FILE])?;
        if store.dimension != manifest.dimension {
            return Err(Error::CorruptIndex("vector dimension disagrees with manifest".into()));
        }
        for e in graph.entities.values_mut() {
            e.embedding = store
                .entries
                .get(&e.id)
                .cloned()
                .ok_or_else(|| Error::CorruptIndex(format!("entity {} has no vector", e.id)))?;
        }
        let index = BookIndex {
            doc_id: manifest.doc_id,
            tree,
            graph,
            store,
        };
        if let Some(v) = index.validate().into_iter().next() {
            return Err(Error::CorruptIndex(v));
        }
        Ok(index)
    }
}

fn read_part(dir: &Path, name: &str) -> Result<Vec<u8>> {
    fs::read(dir.join(name)).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CorruptIndex(format!("missing {name}")),
        _ => Error::io(dir.join(name), e),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    doc_id: String,
    dimension: usize,
    entities: usize,
    nodes: usize,
    checksums: BTreeMap<String, String>,
}

/// Little-endian: `u32 dimension`, `u64 count`, then per entry `u64 id`
/// followed by `dimension` `f32` values.
fn encode_vectors(store: &VectorStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + store.len() * (8 + 4 * store.dimension));
    out.extend_from_slice(&(store.dimension as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (id, v) in &store.entries {
        out.extend_from_slice(&id.0.to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_vectors(bytes: &[u8]) -> Result<VectorStore> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let chunk = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::CorruptIndex(format!("{VECTORS_FILE} is truncated")))?;
        pos += n;
        Ok(chunk)
    };
    let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    if bytes.len() as u64 != 12 + count * (8 + 4 * dim as u64) {
        return Err(Error::CorruptIndex(format!("{VECTORS_FILE} has the wrong length")));
    }
    let mut store = VectorStore::new(dim);
    for _ in 0..count {
        let id = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let v: Vec<f32> = take(4 * dim)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if store.entries.insert(EntityId(id), v).is_some() {
            return Err(Error::CorruptIndex(format!("duplicate vector id {id}")));
        }
    }
    Ok(store)
}
