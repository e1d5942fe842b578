//! Prompt templates.
//!
//! Template bodies live in `prompts/*.txt` and use `{slot}` placeholders with
//! `{{` / `}}` as literal braces. Each template names one salient slot whose
//! value becomes the prompt's lookup key in the mock backend's script table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template: String,
    /// Value of the template's salient slot.
    pub key: String,
    pub slots: BTreeMap<String, String>,
    pub text: String,
}

#[derive(Debug, Clone, Copy)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub key_slot: &'static str,
    pub slots: &'static [&'static str],
    body: &'static str,
}

macro_rules! template {
    ($ident:ident, $name:literal, $key:literal, [$($slot:literal),*]) => {
        pub const $ident: PromptTemplate = PromptTemplate {
            name: $name,
            key_slot: $key,
            slots: &[$($slot),*],
            body: include_str!(concat!("../../prompts/", $name, ".txt")),
        };
    };
}

template!(CLASSIFY, "classify", "query", ["query"]);
template!(DECOMPOSE, "decompose", "query", ["query"]);
template!(FILTER_SPEC, "filter_spec", "query", ["query"]);
template!(ER_ADJUDICATE, "er_adjudicate", "entity_name", ["entity_name", "new_entity", "candidates"]);
template!(SECTION_FILTER, "section_filter", "batch", ["batch", "context", "candidates"]);
template!(EXTRACT_TEXT, "extract_text", "node_id", ["node_id", "content"]);
template!(EXTRACT_TABLE, "extract_table", "node_id", ["node_id", "caption", "content"]);
template!(EXTRACT_FORMULA, "extract_formula", "node_id", ["node_id", "content"]);
template!(EXTRACT_VISION, "extract_vision", "node_id", ["node_id", "caption"]);
template!(EXTRACT_QUERY_ENTITIES, "extract_query_entities", "query", ["query"]);
template!(SELECT_SECTIONS, "select_sections", "query", ["query", "sections"]);
template!(MAP, "map", "question", ["question", "evidence"]);
template!(REDUCE, "reduce", "query", ["query", "instruction", "parts"]);
template!(ANSWER_EXTRACT, "answer_extract", "raw", ["question", "raw"]);

pub const ALL: &[PromptTemplate] = &[
    CLASSIFY,
    DECOMPOSE,
    FILTER_SPEC,
    ER_ADJUDICATE,
    SECTION_FILTER,
    EXTRACT_TEXT,
    EXTRACT_TABLE,
    EXTRACT_FORMULA,
    EXTRACT_VISION,
    EXTRACT_QUERY_ENTITIES,
    SELECT_SECTIONS,
    MAP,
    REDUCE,
    ANSWER_EXTRACT,
];

impl PromptTemplate {
    pub fn body(&self) -> &'static str {
        self.body
    }

    /// Bind every slot and render. Unbound or unknown slots are errors.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<Prompt> {
        let mut slots = BTreeMap::new();
        for (name, value) in values {
            if !self.slots.contains(name) {
                return Err(Error::InvalidInput(format!(
                    "template `{}` has no slot `{name}`",
                    self.name
                )));
            }
            slots.insert((*name).to_string(), (*value).to_string());
        }
        if let Some(missing) = self.slots.iter().find(|s| !slots.contains_key(**s)) {
            return Err(Error::InvalidInput(format!(
                "template `{}`: slot `{missing}` is unbound",
                self.name
            )));
        }

        let mut text = String::with_capacity(self.body.len() + 256);
        let mut chars = self.body.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let name: String = chars.by_ref().take_while(|&c| c != '}').collect();
                    let value = slots.get(&name).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "template `{}` references undeclared slot `{name}`",
                            self.name
                        ))
                    })?;
                    text.push_str(value);
                }
                c => text.push(c),
            }
        }

        Ok(Prompt {
            template: self.name.to_string(),
            key: slots[self.key_slot].clone(),
            slots,
            text,
        })
    }
}
