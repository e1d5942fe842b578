//! Fixture helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bookindex::config::Config;
use bookindex::gateway::{MockBackend, ModelGateway};
use bookindex::graph::{embed_entity, Entity, EntityId, KnowledgeGraph};
use bookindex::index::{build_index, BookIndex, BuildConfig, BuildReport};
use bookindex::ingest::{load_blocks, parse_blocks};
use bookindex::resolution::{resolve, ResolutionConfig, VectorStore};
use bookindex::text::name_key;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn mock_config() -> Config {
    Config::from_file(&fixture("mock.toml")).unwrap()
}

pub fn mock_gateway() -> ModelGateway {
    ModelGateway::new(MockBackend::new())
}

pub fn fixture_build_config() -> BuildConfig {
    mock_config().build_config(Some(&fixture("")))
}

pub fn build_fixture(name: &str, gw: &ModelGateway) -> (BookIndex, BuildReport) {
    let src = load_blocks(&fixture(name)).unwrap();
    build_index(&src, gw, &fixture_build_config()).unwrap()
}

/// Questions run against `synthetic.jsonl`, covering all three categories.
pub const SYNTHETIC_QUERIES: [&str; 10] = [
    "Who proposed Policy Gradient methods?",
    "What is the Success Rate of the Dialog Agent on MultiWOZ?",
    "What is the discount factor of the Reward Model?",
    "Which architecture does the Policy Network use?",
    "What is the difference between the Success Rate of Reinforcement Learning and Supervised Learning on MultiWOZ?",
    "Compare the Policy Network and the Reward Model",
    "How many figures are there from page 3 to page 10?",
    "List all tables in the document",
    "Summarize the section Experiments",
    "How many sections does the document have?",
];

// ------------------------------------------------------------------ entity resolution corpora

const WORDS: [&str; 26] = [
    "alpha", "bravo", "cobalt", "delta", "ember", "falcon", "garnet", "harbor", "indigo", "juniper",
    "kestrel", "lumen", "mosaic", "nectar", "onyx", "prism", "quartz", "raven", "sierra", "tundra",
    "umber", "vertex", "willow", "xenon", "yonder", "zephyr",
];

/// A randomized corpus: entity names in arrival order and the alias class
/// of each. Aliases are case, spacing or acronym variants of a class's base
/// name; base names have distinct acronyms.
#[derive(Debug, Clone)]
pub struct AliasCorpus {
    pub names: Vec<String>,
    pub class: Vec<usize>,
    pub base: Vec<String>,
}

fn title(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

pub fn alias_corpus(seed: u64, max_entities: usize) -> AliasCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_entities);
    let mut acronyms = BTreeSet::new();
    let mut base = Vec::new();
    let mut names = Vec::new();
    let mut class = Vec::new();
    while names.len() < n {
        let words: Vec<&str> = loop {
            let k = rng.random_range(2..=3);
            let ws: Vec<&str> = (0..k).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            let acr: String = ws.iter().map(|w| &w[..1]).collect();
            if acronyms.insert(acr) {
                break ws;
            }
        };
        let c = base.len();
        let b = words.iter().map(|w| title(w)).collect::<Vec<_>>().join(" ");
        base.push(b.clone());
        let size = rng.random_range(1..=5).min(n - names.len());
        for _ in 0..size {
            let name = match rng.random_range(0..5) {
                0 => b.clone(),
                1 => b.to_lowercase(),
                2 => b.to_uppercase(),
                3 => words.iter().map(|w| w[..1].to_uppercase()).collect(),
                _ => words.iter().map(|w| title(w)).collect::<Vec<_>>().join("  "),
            };
            names.push(name);
            class.push(c);
        }
    }
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(&mut rng);
    AliasCorpus {
        names: order.iter().map(|&i| names[i].clone()).collect(),
        class: order.iter().map(|&i| class[i]).collect(),
        base,
    }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Entity name from a rendered `name (TYPE): description` string.
fn rendered_name(s: &str) -> &str {
    s.rsplit_once(" (").map_or(s, |(n, _)| n)
}

/// Reranker that scores 1.0 for aliases and a hash-derived score in
/// (0.12, 0.2] otherwise.
pub fn alias_gateway(corpus: &AliasCorpus) -> ModelGateway {
    let lookup: BTreeMap<String, usize> = corpus
        .names
        .iter()
        .zip(&corpus.class)
        .map(|(n, c)| (name_key(n), *c))
        .collect();
    let rerank = move |q: &str, c: &str| {
        let (a, b) = (rendered_name(q), rendered_name(c));
        match (lookup.get(&name_key(a)), lookup.get(&name_key(b))) {
            (Some(x), Some(y)) if x == y => 1.0,
            _ => 0.12 + 0.08 * ((fnv(&format!("{a}|{b}")) % 1000) + 1) as f64 / 1000.0,
        }
    };
    ModelGateway::new(MockBackend::new().with_reranker(Arc::new(rerank)))
}

/// Sequentially resolve the corpus; returns the partition of arrival
/// indices induced by the final entities.
pub fn resolve_corpus(corpus: &AliasCorpus, cfg: &ResolutionConfig) -> BTreeSet<BTreeSet<usize>> {
    let gw = alias_gateway(corpus);
    let mut graph = KnowledgeGraph::default();
    let mut store = VectorStore::new(gw.dimension());
    for (i, name) in corpus.names.iter().enumerate() {
        let desc = corpus.base[corpus.class[i]].to_lowercase();
        let e = Entity::new(EntityId(i as u64), name, "CONCEPT", &desc, &format!("n{i}"));
        let e = embed_entity(e, &gw, cfg.embed_budget).unwrap();
        resolve(e, &mut store, &mut graph, &gw, cfg).unwrap();
        assert_eq!(store.len(), graph.len(), "store and graph diverged");
    }
    graph
        .entities
        .values()
        .map(|e| e.origins.iter().map(|o| o[1..].parse::<usize>().unwrap()).collect())
        .collect()
}

/// All-pairs alias relation closed transitively (Floyd-Warshall style).
#[allow(clippy::needless_range_loop)]
pub fn closure_oracle(corpus: &AliasCorpus) -> BTreeSet<BTreeSet<usize>> {
    let n = corpus.names.len();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = i == j || corpus.class[i] == corpus.class[j];
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n)
        .map(|i| (0..n).filter(|&j| reach[i][j]).collect())
        .collect()
}

// ------------------------------------------------------------------ other oracles

/// Brute-force maximal set: indices not dominated by any other point.
pub fn dominance_oracle(points: &[Vec<f64>]) -> BTreeSet<usize> {
    let dominates = |q: &[f64], p: &[f64]| {
        q.iter().zip(p).all(|(a, b)| a >= b) && q.iter().zip(p).any(|(a, b)| a > b)
    };
    (0..points.len())
        .filter(|&i| !points.iter().any(|q| dominates(q, &points[i])))
        .collect()
}

/// Stationary vector of the personalized walk by solving
/// `(I - d W) r = (1 - d) p` with Gaussian elimination. No dangling
/// vertices allowed.
#[allow(clippy::needless_range_loop)]
pub fn pagerank_linear_oracle(n: usize, edges: &[(usize, usize)], p: &[f64], d: f64) -> Vec<f64> {
    let mut adj = vec![BTreeSet::new(); n];
    for &(a, b) in edges {
        if a != b {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    let mut m = vec![vec![0.0; n + 1]; n];
    for v in 0..n {
        m[v][v] = 1.0;
        m[v][n] = (1.0 - d) * p[v];
    }
    for u in 0..n {
        assert!(!adj[u].is_empty(), "oracle needs no dangling vertices");
        for &v in &adj[u] {
            m[v][u] -= d / adj[u].len() as f64;
        }
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                if f != 0.0 {
                    for k in col..=n {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
        }
    }
    (0..n).map(|i| m[i][n] / m[i][i]).collect()
}

// ------------------------------------------------------------------ random documents

/// A random block-list document whose text mentions capitalised names, so
/// every node yields at least one entity under the mock extractor.
pub fn random_document(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = vec![format!(r#"{{"format_version": "1", "doc_id": "rand{seed}", "page_count": 20}}"#)];
    let mut order = 0;
    let mut page = 1;
    let sections = rng.random_range(1..=4);
    let name = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(1..=2);
        (0..k)
            .map(|_| title(WORDS[rng.random_range(0..WORDS.len())]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    for s in 0..sections {
        let head = name(&mut rng);
        lines.push(format!(
            r#"{{"id": "h{s}", "type": "Title", "content": "{head}", "page": {page}, "order": {order}, "font_size": 18}}"#
        ));
        order += 1;
        for p in 0..rng.random_range(1..=4) {
            let (a, b) = (name(&mut rng), name(&mut rng));
            let verb = ["supports", "extends", "replaces", "cites"][rng.random_range(0..4)];
            lines.push(format!(
                r#"{{"id": "p{s}_{p}", "type": "Text", "content": "The {a} system {verb} the {b} module.", "page": {page}, "order": {order}}}"#
            ));
            order += 1;
            if rng.random_bool(0.3) {
                page += 1;
            }
        }
        if rng.random_bool(0.4) {
            let (a, b) = (name(&mut rng), name(&mut rng));
            lines.push(format!(
                r#"{{"id": "t{s}", "type": "Table", "content": "Model | Score\n{a} | 1\n{b} | 2", "caption": "Table {s}: Scores", "page": {page}, "order": {order}}}"#
            ));
            order += 1;
        }
        page += 1;
    }
    lines.join("\n")
}

pub fn build_random(seed: u64, gw: &ModelGateway) -> BookIndex {
    let src = parse_blocks(&random_document(seed), "rand").unwrap();
    build_index(&src, gw, &fixture_build_config()).unwrap().0
}
