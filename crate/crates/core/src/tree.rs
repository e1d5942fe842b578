//! Section tree construction: model-assisted heading filtering over `Title`
//! blocks, then stack-based assembly from levels and document order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gateway::prompts::SECTION_FILTER;
use crate::gateway::ModelGateway;
use crate::ingest::{Block, BlockContent, DocumentSource, LayoutType, ROOT_ID};
use crate::text::extract_json;

pub const DEFAULT_BATCH_SIZE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeType {
    Section,
    Text,
    Table,
    Image,
    Formula,
}

impl NodeType {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "section" => Some(NodeType::Section),
            "text" => Some(NodeType::Text),
            "table" => Some(NodeType::Table),
            "image" | "figure" => Some(NodeType::Image),
            "formula" | "equation" => Some(NodeType::Formula),
            _ => None,
        }
    }

    fn from_layout(t: LayoutType) -> Self {
        match t {
            LayoutType::Title | LayoutType::Text => NodeType::Text,
            LayoutType::Table => NodeType::Table,
            LayoutType::Image => NodeType::Image,
            LayoutType::Formula => NodeType::Formula,
        }
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: String,
    pub node_type: NodeType,
    /// Present exactly on Sections; the synthetic root has level 0.
    pub level: Option<u32>,
    pub content: BlockContent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    pub page: u32,
    pub order: i64,
    pub parent: Option<String>,
    pub children: Vec<String>,
}

impl TreeNode {
    pub fn is_section(&self) -> bool {
        self.node_type == NodeType::Section
    }

    /// Text used when the node is shown to a model or reranker.
    pub fn render_text(&self) -> String {
        match &self.content {
            BlockContent::Text(t) => t.clone(),
            BlockContent::Image { path } => match &self.caption {
                Some(c) => c.clone(),
                None => format!("[image {path}]"),
            },
        }
    }

    /// Heading text for Sections.
    pub fn title(&self) -> &str {
        self.content.as_text().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTree {
    pub root: String,
    pub nodes: BTreeMap<String, TreeNode>,
}

/// Outcome of the heading filter for one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionVerdict {
    pub block_id: String,
    pub level: Option<u32>,
    pub node_type: NodeType,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SectionFiltering {
    pub verdicts: Vec<SectionVerdict>,
    pub warnings: Vec<String>,
}

/// Ask the model which `Title` blocks are real headings and at which level.
///
/// Candidates are sent in batches of `batch_size`; every batch carries the
/// level-1 and level-2 headings resolved so far as context. Non-title blocks
/// pass through with their layout type.
pub fn filter_sections(
    src: &DocumentSource,
    gateway: &ModelGateway,
    batch_size: usize,
) -> Result<SectionFiltering> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch_size must be at least 1".into()));
    }
    let titles: Vec<&Block> = src
        .blocks
        .iter()
        .filter(|b| b.layout_type == LayoutType::Title)
        .collect();

    let mut resolved: HashMap<&str, Option<u32>> = HashMap::new();
    let mut context: Vec<(String, u32)> = Vec::new();
    let mut warnings = Vec::new();

    for batch in titles.chunks(batch_size) {
        let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
        let candidates: Vec<Value> = batch
            .iter()
            .map(|b| {
                json!({
                    "block_id": b.id,
                    "text": b.content.as_text().unwrap_or(""),
                    "font_size": b.features.font_size,
                    "page": b.features.page,
                })
            })
            .collect();
        let ctx: Vec<Value> = context
            .iter()
            .map(|(t, l)| json!({"title": t, "level": l}))
            .collect();
        let prompt = SECTION_FILTER.render(&[
            ("batch", &ids.join(",")),
            ("context", &Value::Array(ctx).to_string()),
            ("candidates", &Value::Array(candidates).to_string()),
        ])?;
        let reply = gateway.complete(&prompt)?;
        let parsed = parse_verdicts(&reply);
        if parsed.is_none() {
            warnings.push(format!(
                "unparsable section verdicts for batch [{}]; defaulting to Text",
                ids.join(",")
            ));
        }
        let parsed = parsed.unwrap_or_default();

        for block in batch {
            let level = match parsed.get(block.id.as_str()) {
                Some(Ok(level)) => *level,
                Some(Err(msg)) => {
                    warnings.push(format!("block `{}`: {msg}; defaulting to Text", block.id));
                    None
                }
                None => {
                    warnings.push(format!("block `{}`: no verdict; defaulting to Text", block.id));
                    None
                }
            };
            if let Some(l) = level {
                if l <= 2 {
                    context.push((block.content.as_text().unwrap_or("").to_string(), l));
                }
            }
            resolved.insert(block.id.as_str(), level);
        }
    }

    let verdicts = src
        .blocks
        .iter()
        .map(|b| match resolved.get(b.id.as_str()) {
            Some(Some(level)) => SectionVerdict {
                block_id: b.id.clone(),
                level: Some(*level),
                node_type: NodeType::Section,
            },
            _ => SectionVerdict {
                block_id: b.id.clone(),
                level: None,
                node_type: NodeType::from_layout(b.layout_type),
            },
        })
        .collect();
    Ok(SectionFiltering { verdicts, warnings })
}

type ParsedVerdicts = HashMap<String, std::result::Result<Option<u32>, String>>;

/// Wire format: `[{"block_id": "...", "level": 2 | null, "type": "Section" | "Text"}]`.
fn parse_verdicts(reply: &str) -> Option<ParsedVerdicts> {
    let v = extract_json(reply)?;
    let items = match v {
        Value::Array(items) => items,
        Value::Object(mut o) => match o.remove("verdicts").or_else(|| o.remove("sections")) {
            Some(Value::Array(items)) => items,
            _ => return None,
        },
        _ => return None,
    };
    let mut out = HashMap::new();
    for item in items {
        let Some(id) = item.get("block_id").and_then(|v| match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        }) else {
            continue;
        };
        let ty = item.get("type").and_then(Value::as_str).map(NodeType::parse);
        let verdict = match item.get("level") {
            None | Some(Value::Null) => match ty {
                Some(Some(NodeType::Section)) => Err("Section verdict without a level".to_string()),
                _ => Ok(None),
            },
            Some(v) => match v.as_u64() {
                Some(l) if l >= 1 && l <= u64::from(u32::MAX) => Ok(Some(l as u32)),
                _ => Err(format!("invalid level {v}")),
            },
        };
        out.insert(id, verdict);
    }
    Some(out)
}

/// Build the tree from verdicts.
///
/// Sections attach to the nearest preceding Section of strictly smaller
/// level (else the root); every other node attaches to the most recent open
/// Section. Level jumps greater than one are kept and reported in the
/// returned warnings.
pub fn assemble_tree(
    src: &DocumentSource,
    verdicts: &[SectionVerdict],
) -> Result<(DocTree, Vec<String>)> {
    let by_id: HashMap<&str, &SectionVerdict> =
        verdicts.iter().map(|v| (v.block_id.as_str(), v)).collect();
    let mut nodes = BTreeMap::new();
    nodes.insert(
        ROOT_ID.to_string(),
        TreeNode {
            id: ROOT_ID.to_string(),
            node_type: NodeType::Section,
            level: Some(0),
            content: BlockContent::Text(src.doc_id.clone()),
            caption: None,
            page: 1,
            order: -1,
            parent: None,
            children: Vec::new(),
        },
    );

    let mut warnings = Vec::new();
    // (level, id) of currently open sections; root at the bottom
    let mut open: Vec<(u32, String)> = vec![(0, ROOT_ID.to_string())];
    let mut previous_level: Option<u32> = None;

    for block in &src.blocks {
        let verdict = by_id
            .get(block.id.as_str())
            .ok_or_else(|| Error::MissingVerdict(block.id.clone()))?;
        let level = match (verdict.node_type, verdict.level) {
            (NodeType::Section, Some(l)) if l >= 1 => Some(l),
            (NodeType::Section, _) => {
                return Err(Error::InvalidInput(format!(
                    "section verdict for `{}` needs a level >= 1",
                    block.id
                )))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidInput(format!(
                    "non-section verdict for `{}` carries a level",
                    block.id
                )))
            }
            (_, None) => None,
        };

        let parent = if let Some(l) = level {
            if let Some(prev) = previous_level {
                if l > prev + 1 {
                    warnings.push(format!(
                        "level jump {prev} -> {l} at section `{}`",
                        block.id
                    ));
                }
            }
            previous_level = Some(l);
            while open.last().is_some_and(|(ol, _)| *ol >= l) {
                open.pop();
            }
            let parent = open.last().expect("root never pops").1.clone();
            open.push((l, block.id.clone()));
            parent
        } else {
            open.last().expect("root never pops").1.clone()
        };

        nodes
            .get_mut(&parent)
            .expect("parent inserted earlier")
            .children
            .push(block.id.clone());
        nodes.insert(
            block.id.clone(),
            TreeNode {
                id: block.id.clone(),
                node_type: verdict.node_type,
                level,
                content: block.content.clone(),
                caption: block.caption().map(str::to_string),
                page: block.features.page,
                order: block.order,
                parent: Some(parent),
                children: Vec::new(),
            },
        );
    }

    Ok((
        DocTree {
            root: ROOT_ID.to_string(),
            nodes,
        },
        warnings,
    ))
}

impl DocTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    pub fn node(&self, id: &str) -> Result<&TreeNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn root_node(&self) -> &TreeNode {
        &self.nodes[&self.root]
    }

    /// `id` and all its descendants, in document order.
    pub fn subtree(&self, id: &str) -> Result<Vec<String>> {
        self.node(id)?;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            out.push(cur.to_string());
            let node = &self.nodes[cur];
            stack.extend(node.children.iter().rev().map(String::as_str));
        }
        Ok(out)
    }

    /// Every node in document order, root first.
    pub fn document_order(&self) -> Vec<&TreeNode> {
        let mut all: Vec<&TreeNode> = self.nodes.values().collect();
        all.sort_by_key(|n| n.order);
        all
    }

    /// Edges from the root down to `id` (root depth 0).
    pub fn depth(&self, id: &str) -> Result<usize> {
        Ok(self.ancestors(id)?.len())
    }

    /// Parent chain of `id`, nearest first, ending at the root.
    pub fn ancestors(&self, id: &str) -> Result<Vec<&TreeNode>> {
        let mut out = Vec::new();
        let mut cur = self.node(id)?;
        while let Some(p) = &cur.parent {
            cur = self.node(p)?;
            out.push(cur);
            if out.len() > self.nodes.len() {
                return Err(Error::CorruptIndex(format!("cycle above node `{id}`")));
            }
        }
        Ok(out)
    }

    /// Section on `id`'s root path (including `id` itself) with the greatest
    /// depth not exceeding `depth`.
    pub fn section_at_depth(&self, id: &str, depth: usize) -> Result<&TreeNode> {
        let mut path: Vec<&TreeNode> = self.ancestors(id)?;
        path.reverse();
        path.push(self.node(id)?);
        let best = path
            .iter()
            .enumerate()
            .filter(|(d, n)| *d <= depth && n.is_section())
            .map(|(_, n)| *n)
            .next_back();
        Ok(best.unwrap_or_else(|| self.root_node()))
    }

    /// Sections (excluding the root) at exactly `depth`, in document order.
    pub fn sections_at_depth(&self, depth: usize) -> Vec<&TreeNode> {
        self.document_order()
            .into_iter()
            .filter(|n| n.is_section() && n.id != self.root)
            .filter(|n| self.depth(&n.id).map(|d| d == depth).unwrap_or(false))
            .collect()
    }

    /// Structural invariant violations; empty when the tree is well-formed.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let Some(root) = self.nodes.get(&self.root) else {
            return vec![format!("root `{}` missing", self.root)];
        };
        if root.parent.is_some() || root.level != Some(0) {
            out.push("root must have level 0 and no parent".into());
        }
        for n in self.nodes.values() {
            if n.is_section() != n.level.is_some() {
                out.push(format!("node `{}`: level must be set exactly on sections", n.id));
            }
            if n.id != self.root {
                match n.parent.as_deref().and_then(|p| self.nodes.get(p)) {
                    None => out.push(format!("node `{}` has no valid parent", n.id)),
                    Some(p) => {
                        if !p.children.contains(&n.id) {
                            out.push(format!("node `{}` missing from its parent's children", n.id));
                        }
                        if let (Some(pl), Some(l)) = (p.level, n.level) {
                            if l <= pl {
                                out.push(format!("section `{}` not deeper than its parent", n.id));
                            }
                        }
                    }
                }
            }
            for pair in n.children.windows(2) {
                let a = self.nodes.get(&pair[0]).map(|c| c.order);
                let b = self.nodes.get(&pair[1]).map(|c| c.order);
                if a >= b {
                    out.push(format!("children of `{}` out of document order", n.id));
                }
            }
        }
        if let Ok(reach) = self.subtree(&self.root) {
            if reach.len() != self.nodes.len() {
                out.push("tree is not connected".into());
            }
        }
        out
    }
}
