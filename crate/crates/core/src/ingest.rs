//! Block-list loading.
//!
//! A document arrives as a line-delimited JSON file produced by a layout
//! parser. The first record is a header carrying `format_version` (must be
//! `"1"`) and optionally `doc_id` / `page_count`; every following record is
//! one block:
//!
//! ```text
//! {"format_version": "1", "doc_id": "report-17", "page_count": 12}
//! {"id": "b1", "type": "Title", "content": "Method", "page": 1, "order": 0, "font_size": 14}
//! {"id": "b2", "type": "Image", "image_path": "img/fig1.png", "page": 1, "order": 1, "caption": "Figure 1"}
//! ```
//!
//! Keys other than the known ones are carried through in [`Features::extra`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const BLOCK_FORMAT_VERSION: &str = "1";

/// Id reserved for the synthetic tree root; blocks may not use it.
pub const ROOT_ID: &str = "ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutType {
    Title,
    Text,
    Table,
    Image,
    Formula,
}

impl LayoutType {
    /// Parse a parser-emitted type tag. Unknown tags yield `None`.
    pub fn parse(tag: &str) -> Option<Self> {
        match tag.trim().to_ascii_lowercase().as_str() {
            "title" | "heading" => Some(LayoutType::Title),
            "text" | "paragraph" => Some(LayoutType::Text),
            "table" => Some(LayoutType::Table),
            "image" | "figure" | "picture" => Some(LayoutType::Image),
            "formula" | "equation" | "interline_equation" => Some(LayoutType::Formula),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutType::Title => "Title",
            LayoutType::Text => "Text",
            LayoutType::Table => "Table",
            LayoutType::Image => "Image",
            LayoutType::Formula => "Formula",
        }
    }
}

impl fmt::Display for LayoutType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Page-relative rectangle `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockContent {
    Text(String),
    /// Path relative to the block-list file.
    Image { path: String },
}

impl BlockContent {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            BlockContent::Text(t) => Some(t),
            BlockContent::Image { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Features {
    pub font_size: Option<f64>,
    pub bbox: Option<BBox>,
    pub page: u32,
    /// Parser keys we do not interpret.
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub content: BlockContent,
    pub layout_type: LayoutType,
    pub features: Features,
    pub order: i64,
}

impl Block {
    pub fn page(&self) -> u32 {
        self.features.page
    }

    /// Caption carried by the parser, if any.
    pub fn caption(&self) -> Option<&str> {
        self.features
            .extra
            .get("caption")
            .or_else(|| match self.content {
                BlockContent::Image { .. } => self.features.extra.get("content"),
                BlockContent::Text(_) => None,
            })
            .and_then(Value::as_str)
            .filter(|s| !s.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentSource {
    pub doc_id: String,
    pub page_count: u32,
    pub blocks: Vec<Block>,
}

/// Load and validate a block-list file. Blocks come back sorted by `order`.
pub fn load_blocks(path: &Path) -> Result<DocumentSource> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fallback_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "document".to_string());
    let src = parse_blocks(&raw, &fallback_id)?;

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for block in &src.blocks {
        if let BlockContent::Image { path: rel } = &block.content {
            let full = base.join(rel);
            if !full.is_file() {
                return Err(Error::UnresolvableImage {
                    block: block.id.clone(),
                    path: full,
                });
            }
        }
    }
    Ok(src)
}

/// Parse block-list text. Image references are not checked here.
pub fn parse_blocks(raw: &str, fallback_doc_id: &str) -> Result<DocumentSource> {
    let mut lines = raw
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header) = lines.next().ok_or(Error::Format {
        line: 1,
        message: "missing format_version header".into(),
    })?;
    let header = parse_object(header_line, header)?;
    match header.get("format_version") {
        Some(Value::String(v)) if v == BLOCK_FORMAT_VERSION => {}
        Some(Value::Number(n)) if n.to_string() == BLOCK_FORMAT_VERSION => {}
        Some(other) => {
            return Err(Error::Format {
                line: header_line,
                message: format!("unsupported format_version {other}"),
            })
        }
        None => {
            return Err(Error::MissingField {
                line: header_line,
                field: "format_version",
            })
        }
    }
    let doc_id = header
        .get("doc_id")
        .and_then(Value::as_str)
        .unwrap_or(fallback_doc_id)
        .to_string();
    let declared_pages = header
        .get("page_count")
        .map(|v| {
            v.as_u64().ok_or(Error::Format {
                line: header_line,
                message: "page_count must be a non-negative integer".into(),
            })
        })
        .transpose()?;

    let mut blocks = Vec::new();
    let mut seen_orders = HashSet::new();
    let mut seen_ids = HashSet::new();
    for (line, text) in lines {
        let block = parse_block(line, parse_object(line, text)?)?;
        if !seen_orders.insert(block.order) {
            return Err(Error::Format {
                line,
                message: format!("duplicate order value {}", block.order),
            });
        }
        if !seen_ids.insert(block.id.clone()) {
            return Err(Error::Format {
                line,
                message: format!("duplicate block id `{}`", block.id),
            });
        }
        blocks.push(block);
    }
    blocks.sort_by_key(|b| b.order);

    let max_page = blocks.iter().map(Block::page).max().unwrap_or(0);
    let page_count = match declared_pages {
        Some(p) => u32::try_from(p).map_err(|_| Error::Format {
            line: header_line,
            message: "page_count out of range".into(),
        })?,
        None => max_page,
    };
    let src = DocumentSource {
        doc_id,
        page_count,
        blocks,
    };
    if let Some(first) = validate_source(&src).into_iter().next() {
        return Err(Error::Format {
            line: 0,
            message: first,
        });
    }
    Ok(src)
}

fn parse_object(line: usize, text: &str) -> Result<Map<String, Value>> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(Error::Format {
            line,
            message: "record is not an object".into(),
        }),
        Err(e) => Err(Error::Format {
            line,
            message: e.to_string(),
        }),
    }
}

fn parse_block(line: usize, mut rec: Map<String, Value>) -> Result<Block> {
    fn take_str(
        rec: &mut Map<String, Value>,
        line: usize,
        field: &'static str,
    ) -> Result<Option<String>> {
        match rec.remove(field) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(Value::Number(n)) => Ok(Some(n.to_string())),
            Some(_) => Err(Error::Format {
                line,
                message: format!("`{field}` must be a string"),
            }),
        }
    }
    fn take_int(rec: &mut Map<String, Value>, line: usize, field: &'static str) -> Result<i64> {
        let v = rec.remove(field).ok_or(Error::MissingField { line, field })?;
        v.as_i64().ok_or_else(|| Error::Format {
            line,
            message: format!("`{field}` must be an integer"),
        })
    }

    let id = take_str(&mut rec, line, "id")?.ok_or(Error::MissingField { line, field: "id" })?;
    if id.is_empty() || id == ROOT_ID {
        return Err(Error::Format {
            line,
            message: format!("invalid block id `{id}`"),
        });
    }
    let tag = take_str(&mut rec, line, "type")?.ok_or(Error::MissingField {
        line,
        field: "type",
    })?;
    let layout_type = LayoutType::parse(&tag).unwrap_or_else(|| {
        log::warn!("line {line}: unknown layout type `{tag}`, treating block `{id}` as Text");
        LayoutType::Text
    });
    let page = take_int(&mut rec, line, "page")?;
    let order = take_int(&mut rec, line, "order")?;
    if order < 0 {
        return Err(Error::Format {
            line,
            message: "order must be non-negative".into(),
        });
    }
    let page = u32::try_from(page.max(0)).map_err(|_| Error::Format {
        line,
        message: "page out of range".into(),
    })?;

    let content = if layout_type == LayoutType::Image {
        let path = take_str(&mut rec, line, "image_path")?.ok_or(Error::MissingField {
            line,
            field: "image_path",
        })?;
        BlockContent::Image { path }
    } else {
        let text = take_str(&mut rec, line, "content")?.ok_or(Error::MissingField {
            line,
            field: "content",
        })?;
        BlockContent::Text(text)
    };

    let font_size = match rec.remove("font_size") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or_else(|| Error::Format {
            line,
            message: "`font_size` must be a number".into(),
        })?),
    };
    let bbox = match rec.remove("bbox") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let coords: Vec<f64> = serde_json::from_value(v).map_err(|e| Error::Format {
                line,
                message: format!("bad bbox: {e}"),
            })?;
            let arr: [f64; 4] = coords.try_into().map_err(|_| Error::Format {
                line,
                message: "bbox must have 4 coordinates".into(),
            })?;
            Some(BBox(arr))
        }
    };

    Ok(Block {
        id,
        content,
        layout_type,
        features: Features {
            font_size,
            bbox,
            page,
            extra: rec.into_iter().collect(),
        },
        order,
    })
}

/// List every invariant violation; empty means the source is valid.
pub fn validate_source(src: &DocumentSource) -> Vec<String> {
    let mut out = Vec::new();
    if src.blocks.is_empty() {
        out.push("no blocks".to_string());
        return out;
    }
    for pair in src.blocks.windows(2) {
        if pair[1].order <= pair[0].order {
            out.push(format!(
                "block `{}`: order {} does not follow {}",
                pair[1].id, pair[1].order, pair[0].order
            ));
        }
    }
    let mut max_page = 0;
    for b in &src.blocks {
        if b.features.page == 0 {
            out.push(format!("block `{}`: page must be >= 1", b.id));
        }
        max_page = max_page.max(b.features.page);
        if let Some(BBox(coords)) = b.features.bbox {
            if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
                out.push(format!("block `{}`: bbox coordinates must be non-negative", b.id));
            }
        }
        match (&b.content, b.layout_type) {
            (BlockContent::Text(t), LayoutType::Text | LayoutType::Title) if t.trim().is_empty() => {
                out.push(format!("block `{}`: empty content", b.id));
            }
            (BlockContent::Image { path }, _) if path.trim().is_empty() => {
                out.push(format!("block `{}`: empty image reference", b.id));
            }
            (BlockContent::Image { .. }, t) if t != LayoutType::Image => {
                out.push(format!("block `{}`: image content on a {t} block", b.id));
            }
            (BlockContent::Text(_), LayoutType::Image) => {
                out.push(format!("block `{}`: image block without image reference", b.id));
            }
            _ => {}
        }
    }
    if src.page_count < max_page {
        out.push(format!(
            "page_count {} is below the highest referenced page {max_page}",
            src.page_count
        ));
    }
    out
}

/// Render a source back into block-list text (inverse of [`parse_blocks`]).
pub fn serialize_blocks(src: &DocumentSource) -> String {
    let mut out = String::new();
    let header = serde_json::json!({
        "format_version": BLOCK_FORMAT_VERSION,
        "doc_id": src.doc_id,
        "page_count": src.page_count,
    });
    out.push_str(&header.to_string());
    out.push('\n');
    for b in &src.blocks {
        let mut rec = Map::new();
        rec.insert("id".into(), Value::String(b.id.clone()));
        rec.insert("type".into(), Value::String(b.layout_type.as_str().into()));
        match &b.content {
            BlockContent::Text(t) => rec.insert("content".into(), Value::String(t.clone())),
            BlockContent::Image { path } => {
                rec.insert("image_path".into(), Value::String(path.clone()))
            }
        };
        rec.insert("page".into(), b.features.page.into());
        rec.insert("order".into(), b.order.into());
        if let Some(fs) = b.features.font_size {
            rec.insert("font_size".into(), fs.into());
        }
        if let Some(BBox(c)) = b.features.bbox {
            rec.insert("bbox".into(), serde_json::json!(c));
        }
        for (k, v) in &b.features.extra {
            rec.insert(k.clone(), v.clone());
        }
        out.push_str(&Value::Object(rec).to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = r#"{"format_version": "1", "doc_id": "d"}"#;

    fn doc(lines: &[&str]) -> String {
        let mut s = HEADER.to_string();
        for l in lines {
            s.push('\n');
            s.push_str(l);
        }
        s
    }

    #[test]
    fn three_typed_records_load_in_order() {
        let raw = doc(&[
            r#"{"id":"t","type":"Title","content":"Intro","page":1,"order":0}"#,
            r#"{"id":"x","type":"Text","content":"Body","page":1,"order":1}"#,
            r#"{"id":"tb","type":"Table","content":"a|b","page":2,"order":2}"#,
        ]);
        let src = parse_blocks(&raw, "f").unwrap();
        let types: Vec<_> = src.blocks.iter().map(|b| b.layout_type).collect();
        assert_eq!(types, [LayoutType::Title, LayoutType::Text, LayoutType::Table]);
        assert_eq!(src.page_count, 2);
        assert_eq!(src.doc_id, "d");
    }

    #[test]
    fn out_of_order_records_are_sorted() {
        let raw = doc(&[
            r#"{"id":"b","type":"Text","content":"second","page":1,"order":5}"#,
            r#"{"id":"a","type":"Text","content":"first","page":1,"order":2}"#,
        ]);
        let src = parse_blocks(&raw, "f").unwrap();
        assert_eq!(src.blocks[0].id, "a");
    }

    #[test]
    fn duplicate_orders_are_rejected() {
        let raw = doc(&[
            r#"{"id":"a","type":"Text","content":"x","page":1,"order":1}"#,
            r#"{"id":"b","type":"Text","content":"y","page":1,"order":1}"#,
        ]);
        assert!(matches!(parse_blocks(&raw, "f"), Err(Error::Format { line: 3, .. })));
    }

    #[test]
    fn missing_header_or_fields() {
        let raw = r#"{"id":"a","type":"Text","content":"x","page":1,"order":1}"#;
        assert!(matches!(
            parse_blocks(raw, "f"),
            Err(Error::MissingField { field: "format_version", .. })
        ));
        let raw = doc(&[r#"{"id":"a","type":"Text","page":1,"order":1}"#]);
        assert!(matches!(
            parse_blocks(&raw, "f"),
            Err(Error::MissingField { field: "content", .. })
        ));
        let raw = r#"{"format_version": "2"}"#;
        assert!(matches!(parse_blocks(raw, "f"), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_types_become_text_and_extras_pass_through() {
        let raw = doc(&[
            r#"{"id":"a","type":"sidebar","content":"x","page":1,"order":1,"score":0.9}"#,
        ]);
        let src = parse_blocks(&raw, "f").unwrap();
        assert_eq!(src.blocks[0].layout_type, LayoutType::Text);
        assert_eq!(src.blocks[0].features.extra["score"], 0.9);
    }

    #[test]
    fn validation_reports_each_problem() {
        let raw = doc(&[r#"{"id":"a","type":"Text","content":"x","page":1,"order":1}"#]);
        let mut src = parse_blocks(&raw, "f").unwrap();
        assert!(validate_source(&src).is_empty());

        src.blocks[0].features.page = 0;
        let v = validate_source(&src);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("`a`"));

        src.blocks.clear();
        assert_eq!(validate_source(&src), vec!["no blocks".to_string()]);
    }

    #[test]
    fn images_must_resolve_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.jsonl");
        fs::write(
            &path,
            doc(&[r#"{"id":"i","type":"Image","image_path":"missing.png","page":1,"order":0}"#]),
        )
        .unwrap();
        assert!(matches!(load_blocks(&path), Err(Error::UnresolvableImage { .. })));
        fs::write(dir.path().join("missing.png"), [0x89, b'P', b'N', b'G']).unwrap();
        let src = load_blocks(&path).unwrap();
        assert_eq!(src.doc_id, "d");
    }
}
