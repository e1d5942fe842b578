//! The `bookindex` command line. [`run`] does the work so tests can drive
//! it in-process; `main` only wires up logging and the process exit code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{BackendKind, Config};
use crate::error::{Error, ErrorClass, Result};
use crate::eval::{load_dataset, run_eval, EvalReport};
use crate::index::{build_index, BookIndex, MANIFEST_FILE};
use crate::ingest::load_blocks;
use crate::operators::execute;
use crate::planner::plan_query;
use crate::stats::graph_stats;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_GATEWAY: i32 = 3;

/// Report file written next to a freshly built index.
pub const BUILD_REPORT_FILE: &str = "build_report.json";

#[derive(Debug, Parser)]
#[command(name = "bookindex", version, about = "Build and query tree + graph document indexes")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// TOML config file.
    #[arg(long, global = true, env = "BOOKRAG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Use the offline mock backend.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Script file for the mock backend; implies --mock.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Gradient threshold for entity resolution.
    #[arg(long, global = true)]
    pub g: Option<f64>,
    /// Candidates fetched per entity during resolution.
    #[arg(long = "top-k", global = true)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or inspect an index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Answer a question against an index.
    Query {
        index: PathBuf,
        question: String,
        /// Print the operator trace and retrieval set.
        #[arg(long)]
        trace: bool,
        /// Print the plan without executing it.
        #[arg(long)]
        plan_only: bool,
        /// Print the plan and execution as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Score a QA dataset against an index directory or a corpus manifest.
    Eval {
        target: PathBuf,
        dataset: PathBuf,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Build an index from a block-list file.
    Build { doc: PathBuf, out: PathBuf },
    /// Print graph statistics.
    Stats {
        index: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => EXIT_USAGE,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Gateway => EXIT_GATEWAY,
    }
}

fn resolve_config(g: &GlobalOpts) -> Result<Config> {
    let mut cfg = Config::load(g.config.as_deref())?;
    if g.mock || g.mock_script.is_some() {
        cfg.gateway.backend = BackendKind::Mock;
    }
    if let Some(p) = &g.mock_script {
        cfg.gateway.mock_script = Some(p.clone());
    }
    if let Some(v) = g.g {
        cfg.resolution.g = v;
    }
    if let Some(k) = g.top_k {
        cfg.resolution.top_k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parse `args` (program name first) and run the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Index(IndexCommand::Build { doc, out: dir }) => cmd_index_build(&cfg, doc, dir, out, err),
        Command::Index(IndexCommand::Stats { index, json }) => cmd_index_stats(index, *json, out),
        Command::Query {
            index,
            question,
            trace,
            plan_only,
            json,
        } => cmd_query(&cfg, index, question, *trace, *plan_only, *json, out, err),
        Command::Eval {
            target,
            dataset,
            out: report,
            workers,
        } => cmd_eval(&cfg, target, dataset, report.as_deref(), *workers, out, err),
    }
}

fn w(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn cmd_index_build(cfg: &Config, doc: &Path, dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let src = load_blocks(doc)?;
    let gw = cfg.gateway()?;
    let (index, report) = build_index(&src, &gw, &cfg.build_config(doc.parent()))?;
    index.save(dir)?;
    let report_path = dir.join(BUILD_REPORT_FILE);
    fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;

    writeln!(out, "doc_id: {}", report.doc_id).map_err(w)?;
    writeln!(out, "nodes: {} ({} sections)", report.nodes, report.sections).map_err(w)?;
    writeln!(
        out,
        "entities: {} ({} extracted, {} merges, {} adjudications)",
        report.entities, report.extracted_entities, report.merges, report.adjudications
    )
    .map_err(w)?;
    writeln!(out, "relations: {}", report.relations).map_err(w)?;
    writeln!(out, "tokens: {}", report.usage.tokens()).map_err(w)?;
    writeln!(out, "index written to {}", dir.display()).map_err(w)?;
    for warning in &report.warnings {
        let _ = writeln!(err, "warning: {warning}");
    }
    if report.failed_nodes > 0 {
        let _ = writeln!(err, "error: extraction failed for {} node(s)", report.failed_nodes);
        return Ok(EXIT_DATA);
    }
    Ok(EXIT_OK)
}

pub fn cmd_index_stats(dir: &Path, json: bool, out: &mut dyn Write) -> Result<i32> {
    let index = BookIndex::load(dir)?;
    let s = graph_stats(&index.graph);
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&s)?).map_err(w)?;
    } else {
        writeln!(out, "# Entity: {}", s.entities).map_err(w)?;
        writeln!(out, "Density: {:.6}", s.density).map_err(w)?;
        writeln!(out, "Diameter: {}", s.diameter).map_err(w)?;
        writeln!(out, "# CC: {}", s.components).map_err(w)?;
    }
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_query(
    cfg: &Config,
    dir: &Path,
    question: &str,
    trace: bool,
    plan_only: bool,
    json: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let index = BookIndex::load(dir)?;
    let gw = cfg.gateway()?;
    let plan = plan_query(question, &gw, &cfg.planner_config())?;
    if plan_only {
        writeln!(out, "{}", serde_json::to_string_pretty(&plan)?).map_err(w)?;
        return Ok(EXIT_OK);
    }
    let exec = execute(&plan, &index, &gw, &cfg.reasoner)?;
    for warning in &exec.warnings {
        let _ = writeln!(err, "warning: {warning}");
    }
    if json {
        let v = serde_json::json!({ "plan": plan, "execution": exec });
        writeln!(out, "{}", serde_json::to_string_pretty(&v)?).map_err(w)?;
        return Ok(EXIT_OK);
    }
    writeln!(out, "{}", exec.answer).map_err(w)?;
    if trace {
        writeln!(out, "\ncategory: {:?}", plan.category).map_err(w)?;
        writeln!(out, "{:<22} {:>6} {:>6} {:>7} {:>9}  sub-plan", "operator", "in", "out", "tokens", "ms").map_err(w)?;
        for r in &exec.trace {
            writeln!(
                out,
                "{:<22} {:>6} {:>6} {:>7} {:>9.1}  {}",
                r.operator,
                r.input_size,
                r.output_size,
                r.tokens,
                r.elapsed_ms,
                r.sub_plan.as_deref().unwrap_or("")
            )
            .map_err(w)?;
        }
        for s in &exec.retrieval.summaries {
            writeln!(out, "retrieval |N|={} |N_s|={} |N_R|={}  {}", s.total, s.selected, s.ranked, s.question)
                .map_err(w)?;
        }
        for n in &exec.retrieval.nodes {
            let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(out, "  {}  graph {}  text {}", n.node_id, f(n.s_graph), f(n.s_text)).map_err(w)?;
        }
    }
    Ok(EXIT_OK)
}

/// Indexes named by `target`: an index directory, or a JSON corpus manifest
/// mapping doc ids to index directories (relative to the manifest).
pub fn load_corpus(target: &Path) -> Result<BTreeMap<String, BookIndex>> {
    if target.is_dir() || target.join(MANIFEST_FILE).exists() {
        let index = BookIndex::load(target)?;
        return Ok(BTreeMap::from([(index.doc_id.clone(), index)]));
    }
    let raw = fs::read_to_string(target).map_err(|e| Error::io(target, e))?;
    let map: BTreeMap<String, PathBuf> = serde_json::from_str(&raw)
        .map_err(|e| Error::InvalidInput(format!("{}: corpus manifest: {e}", target.display())))?;
    if map.is_empty() {
        return Err(Error::InvalidInput(format!("{}: corpus manifest lists no indexes", target.display())));
    }
    let base = target.parent().unwrap_or(Path::new("."));
    map.into_iter()
        .map(|(doc_id, dir)| Ok((doc_id, BookIndex::load(&base.join(dir))?)))
        .collect()
}

pub fn cmd_eval(
    cfg: &Config,
    target: &Path,
    dataset: &Path,
    report_path: Option<&Path>,
    workers: Option<usize>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let data = load_dataset(dataset)?;
    let indexes = load_corpus(target)?;
    let gw = cfg.gateway()?;
    let mut ecfg = cfg.eval_config();
    if let Some(n) = workers {
        ecfg.workers = n;
    }
    let report: EvalReport = run_eval(&data, &indexes, &gw, &ecfg)?;
    if let Some(p) = report_path {
        fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?;
    }
    write!(out, "{}", report.to_text()).map_err(w)?;
    for (i, r) in report.records.iter().enumerate() {
        if let Some(e) = &r.error {
            let _ = writeln!(err, "error: example {}: {e}", i + 1);
        }
    }
    Ok(if report.aggregates.failures > 0 { EXIT_DATA } else { EXIT_OK })
}
