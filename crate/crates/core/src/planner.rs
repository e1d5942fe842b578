//! Query classification and plan construction.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::gateway::prompts::{CLASSIFY, FILTER_SPEC};
use crate::gateway::ModelGateway;
use crate::operators::{decompose, propose_mentions, SubQuestionKind};
use crate::text::extract_json;
use crate::tree::NodeType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryCategory {
    SingleHop,
    MultiHop,
    Global,
}

impl QueryCategory {
    pub fn parse(s: &str) -> Option<Self> {
        let k: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphabetic())
            .collect();
        match k.as_str() {
            "simple" | "singlehop" => Some(QueryCategory::SingleHop),
            "complex" | "multihop" => Some(QueryCategory::MultiHop),
            "global" => Some(QueryCategory::Global),
            _ => None,
        }
    }
}

impl fmt::Display for QueryCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterType {
    Section,
    Image,
    Table,
    Page,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Operation {
    Count,
    List,
    Summarize,
    Analyze,
}

impl Operation {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "COUNT" => Some(Operation::Count),
            "LIST" => Some(Operation::List),
            "SUMMARIZE" | "SUMMARISE" => Some(Operation::Summarize),
            "ANALYZE" | "ANALYSE" => Some(Operation::Analyze),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub filter_type: FilterType,
    pub filter_value: Option<String>,
}

/// Filters plus the aggregation they feed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalSpec {
    pub filters: Vec<FilterSpec>,
    pub operation: Operation,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RangeSpec {
    /// Inclusive, 1-based.
    Pages { start: u32, end: u32 },
    /// Subtree(s) of the section(s) with this title.
    Section { title: String },
}

impl RangeSpec {
    pub fn pages(start: u32, end: u32) -> Result<Self> {
        if start == 0 || end == 0 || start > end {
            return Err(Error::InvalidRange(format!("{start}-{end}")));
        }
        Ok(RangeSpec::Pages { start, end })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "operator")]
pub enum Step {
    /// Query entity mentions proposed by the model at planning time; linked
    /// to graph entities when the plan runs.
    Extract { mentions: Vec<String> },
    /// Falls back to section selection at run time when no mention links.
    SelectByEntity { depth: usize },
    SelectBySection { depth: usize },
    GraphReasoning,
    TextReasoning,
    SkylineRanker { criteria: Vec<String> },
    Decompose { sub_questions: Vec<SubQuestion> },
    /// Retrieval for one sub-question: a single-hop plan without its Reduce.
    SubPlan { question: String, steps: Vec<Step> },
    FilterModal {
        node_type: NodeType,
        /// Only sections at this tree depth (used for bare section filters).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        depth: Option<usize>,
    },
    FilterRange { range: RangeSpec },
    Map,
    Reduce {
        instruction: Option<String>,
        operation: Option<Operation>,
    },
}

impl Step {
    pub fn name(&self) -> &'static str {
        match self {
            Step::Extract { .. } => "Extract",
            Step::SelectByEntity { .. } => "Select_by_Entity",
            Step::SelectBySection { .. } => "Select_by_Section",
            Step::GraphReasoning => "Graph_Reasoning",
            Step::TextReasoning => "Text_Reasoning",
            Step::SkylineRanker { .. } => "Skyline_Ranker",
            Step::Decompose { .. } => "Decompose",
            Step::SubPlan { .. } => "SubPlan",
            Step::FilterModal { .. } => "Filter_Modal",
            Step::FilterRange { .. } => "Filter_Range",
            Step::Map => "Map",
            Step::Reduce { .. } => "Reduce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub question: String,
    pub kind: SubQuestionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub query: String,
    pub category: QueryCategory,
    pub steps: Vec<Step>,
    /// Raw planner-stage model replies, in call order.
    pub provenance: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub section_depth: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { section_depth: 1 }
    }
}

fn parse_category(reply: &str) -> Option<QueryCategory> {
    match extract_json(reply) {
        Some(v) => v
            .get("category")
            .and_then(Value::as_str)
            .and_then(QueryCategory::parse),
        None => QueryCategory::parse(reply.trim().trim_matches('"')),
    }
}

/// Classify `q`, retrying once on an unparsable reply.
pub fn classify(q: &str, gateway: &ModelGateway) -> Result<QueryCategory> {
    classify_with_provenance(q, gateway).map(|(c, _)| c)
}

fn classify_with_provenance(q: &str, gateway: &ModelGateway) -> Result<(QueryCategory, Vec<String>)> {
    if q.trim().is_empty() {
        return Err(Error::InvalidInput("empty query".into()));
    }
    let prompt = CLASSIFY.render(&[("query", q)])?;
    let mut replies = Vec::new();
    for _ in 0..2 {
        let reply = gateway.complete(&prompt)?;
        let parsed = parse_category(&reply);
        replies.push(reply);
        if let Some(c) = parsed {
            return Ok((c, replies));
        }
    }
    Err(Error::MalformedVerdict(format!(
        "classification reply not understood: {:?}",
        replies.last().expect("two attempts")
    )))
}

/// Parse a filter-spec reply into validated filters and an operation.
pub fn parse_filter_spec(reply: &str) -> Result<GlobalSpec> {
    let malformed = |m: String| Error::MalformedVerdict(m);
    let v = extract_json(reply).ok_or_else(|| malformed("filter spec is not JSON".into()))?;
    let filters = v
        .get("filters")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("filter spec has no `filters` list".into()))?;
    if filters.is_empty() {
        return Err(malformed("filter spec has an empty `filters` list".into()));
    }
    let operation = v
        .get("operation")
        .and_then(Value::as_str)
        .and_then(Operation::parse)
        .ok_or_else(|| malformed(format!("unknown operation {}", v.get("operation").unwrap_or(&Value::Null))))?;

    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for f in filters {
        let ty = f.get("filter_type").and_then(Value::as_str).unwrap_or("");
        let filter_type = match ty.trim().to_ascii_lowercase().as_str() {
            "section" => FilterType::Section,
            "image" => FilterType::Image,
            "table" => FilterType::Table,
            "page" => FilterType::Page,
            _ => return Err(malformed(format!("unknown filter_type {ty:?}"))),
        };
        let value = match f.get("filter_value") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) if s.trim().is_empty() => None,
            Some(Value::String(s)) => Some(s.trim().to_string()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(other) => return Err(malformed(format!("filter_value {other} is not text"))),
        };
        let value = match filter_type {
            FilterType::Image | FilterType::Table if value.is_some() => {
                warnings.push(format!(
                    "{ty} filter carried value {:?}; ignored",
                    value.as_deref().unwrap_or("")
                ));
                None
            }
            FilterType::Page => {
                let Some(v) = value else {
                    return Err(malformed("page filter without a value".into()));
                };
                parse_page_range(&v)?;
                Some(v)
            }
            _ => value,
        };
        out.push(FilterSpec {
            filter_type,
            filter_value: value,
        });
    }
    Ok(GlobalSpec {
        filters: out,
        operation,
        warnings,
    })
}

/// Accepts `"a-b"` or `"a"`.
pub fn parse_page_range(v: &str) -> Result<RangeSpec> {
    let num = |s: &str| {
        s.trim()
            .parse::<u32>()
            .map_err(|_| Error::MalformedVerdict(format!("page range {v:?} is not `a-b` or `a`")))
    };
    match v.split_once('-') {
        Some((a, b)) => RangeSpec::pages(num(a)?, num(b)?),
        None => {
            let a = num(v)?;
            RangeSpec::pages(a, a)
        }
    }
}

fn filter_steps(spec: &GlobalSpec, cfg: &PlannerConfig) -> Result<Vec<Step>> {
    spec.filters
        .iter()
        .map(|f| {
            Ok(match (f.filter_type, &f.filter_value) {
                (FilterType::Page, Some(v)) => Step::FilterRange {
                    range: parse_page_range(v)?,
                },
                (FilterType::Page, None) => {
                    return Err(Error::MalformedVerdict("page filter without a value".into()))
                }
                (FilterType::Section, Some(title)) => Step::FilterRange {
                    range: RangeSpec::Section { title: title.clone() },
                },
                (FilterType::Section, None) => Step::FilterModal {
                    node_type: NodeType::Section,
                    depth: Some(cfg.section_depth),
                },
                (FilterType::Image, _) => Step::FilterModal {
                    node_type: NodeType::Image,
                    depth: None,
                },
                (FilterType::Table, _) => Step::FilterModal {
                    node_type: NodeType::Table,
                    depth: None,
                },
            })
        })
        .collect()
}

fn retrieval_steps(mentions: Vec<String>, depth: usize) -> Vec<Step> {
    let select = if mentions.is_empty() {
        Step::SelectBySection { depth }
    } else {
        Step::SelectByEntity { depth }
    };
    vec![
        Step::Extract { mentions },
        select,
        Step::GraphReasoning,
        Step::TextReasoning,
        Step::SkylineRanker {
            criteria: vec!["s_graph".into(), "s_text".into()],
        },
    ]
}

/// Instantiate the category's plan template for `q`.
pub fn make_plan(
    q: &str,
    category: QueryCategory,
    gateway: &ModelGateway,
    cfg: &PlannerConfig,
) -> Result<QueryPlan> {
    if q.trim().is_empty() {
        return Err(Error::InvalidInput("empty query".into()));
    }
    let mut provenance = Vec::new();
    let steps = match category {
        QueryCategory::SingleHop => {
            let (mentions, raw) = propose_mentions(q, gateway)?;
            provenance.push(raw);
            let mut steps = retrieval_steps(mentions, cfg.section_depth);
            steps.push(Step::Reduce {
                instruction: None,
                operation: None,
            });
            steps
        }
        QueryCategory::MultiHop => {
            let (subs, raw) = decompose(q, gateway)?;
            provenance.push(raw);
            let mut steps = vec![Step::Decompose {
                sub_questions: subs.clone(),
            }];
            let mut synthesis = Vec::new();
            for s in &subs {
                match s.kind {
                    SubQuestionKind::Retrieval => {
                        let (mentions, raw) = propose_mentions(&s.question, gateway)?;
                        provenance.push(raw);
                        steps.push(Step::SubPlan {
                            question: s.question.clone(),
                            steps: retrieval_steps(mentions, cfg.section_depth),
                        });
                    }
                    SubQuestionKind::Synthesis => synthesis.push(s.question.clone()),
                }
            }
            steps.push(Step::Map);
            steps.push(Step::Reduce {
                instruction: (!synthesis.is_empty()).then(|| synthesis.join(" ")),
                operation: None,
            });
            steps
        }
        QueryCategory::Global => {
            let prompt = FILTER_SPEC.render(&[("query", q)])?;
            let raw = gateway.complete(&prompt)?;
            let spec = parse_filter_spec(&raw)?;
            provenance.push(raw);
            for w in &spec.warnings {
                log::warn!("{w}");
            }
            let mut steps = filter_steps(&spec, cfg)?;
            steps.push(Step::Map);
            steps.push(Step::Reduce {
                instruction: None,
                operation: Some(spec.operation),
            });
            steps
        }
    };
    let plan = QueryPlan {
        query: q.to_string(),
        category,
        steps,
        provenance,
    };
    validate_plan(&plan)?;
    Ok(plan)
}

/// Classify then plan.
pub fn plan_query(q: &str, gateway: &ModelGateway, cfg: &PlannerConfig) -> Result<QueryPlan> {
    let (category, mut replies) = classify_with_provenance(q, gateway)?;
    let mut plan = make_plan(q, category, gateway, cfg)?;
    replies.append(&mut plan.provenance);
    plan.provenance = replies;
    Ok(plan)
}

fn retrieval_ok(steps: &[Step]) -> bool {
    matches!(
        steps,
        [
            Step::Extract { .. },
            Step::SelectByEntity { .. } | Step::SelectBySection { .. },
            Step::GraphReasoning,
            Step::TextReasoning,
            Step::SkylineRanker { criteria },
        ] if criteria.len() >= 2
    )
}

/// Check `plan.steps` against its category's template.
pub fn validate_plan(plan: &QueryPlan) -> Result<()> {
    let bad = |why: &str| {
        Err(Error::PlanValidation(format!(
            "{} plan: {why}",
            plan.category
        )))
    };
    let steps = &plan.steps;
    match plan.category {
        QueryCategory::SingleHop => {
            let n = steps.len();
            if n != 6 || !retrieval_ok(&steps[..5]) {
                return bad("expected Extract, Select, Graph_Reasoning, Text_Reasoning, Skyline_Ranker, Reduce");
            }
            match &steps[5] {
                Step::Reduce { operation: None, .. } => Ok(()),
                _ => bad("must end in a plain Reduce"),
            }
        }
        QueryCategory::MultiHop => {
            let n = steps.len();
            if n < 4 {
                return bad("too short");
            }
            let Step::Decompose { sub_questions } = &steps[0] else {
                return bad("must start with Decompose");
            };
            let subplans = &steps[1..n - 2];
            let retrieval: Vec<&SubQuestion> = sub_questions
                .iter()
                .filter(|s| s.kind == SubQuestionKind::Retrieval)
                .collect();
            if subplans.is_empty() || subplans.len() != retrieval.len() {
                return bad("needs one sub-plan per retrieval sub-question");
            }
            for (sp, sq) in subplans.iter().zip(&retrieval) {
                match sp {
                    Step::SubPlan { question, steps } if question == &sq.question && retrieval_ok(steps) => {}
                    _ => return bad("malformed sub-plan"),
                }
            }
            match (&steps[n - 2], &steps[n - 1]) {
                (Step::Map, Step::Reduce { operation: None, .. }) => Ok(()),
                _ => bad("must end in Map, Reduce"),
            }
        }
        QueryCategory::Global => {
            let n = steps.len();
            if n < 3 {
                return bad("too short");
            }
            let filters_ok = steps[..n - 2]
                .iter()
                .all(|s| matches!(s, Step::FilterModal { .. } | Step::FilterRange { .. }));
            if !filters_ok {
                return bad("only filters may precede Map");
            }
            match (&steps[n - 2], &steps[n - 1]) {
                (Step::Map, Step::Reduce { operation: Some(_), .. }) => Ok(()),
                _ => bad("must end in Map, Reduce with an operation"),
            }
        }
    }
}
