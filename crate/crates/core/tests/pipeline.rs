//! End-to-end retrieval and synthesis over the synthetic fixture.

mod common;

use std::collections::BTreeMap;

use bookindex::eval::{run_eval, EvalConfig, load_dataset};
use bookindex::gateway::{MockBackend, ModelGateway};
use bookindex::operators::{execute, reduce_synthesize, ReasonerConfig, SubAnswer};
use bookindex::planner::{plan_query, PlannerConfig, QueryCategory};
use common::*;

#[test]
fn single_hop_retrieves_the_answering_paragraph() {
    let gw = mock_gateway();
    let (index, _) = build_fixture("synthetic.jsonl", &gw);
    let plan = plan_query(SYNTHETIC_QUERIES[0], &gw, &PlannerConfig::default()).unwrap();
    assert_eq!(plan.category, QueryCategory::SingleHop);
    let run = execute(&plan, &index, &gw, &ReasonerConfig::default()).unwrap();
    assert_eq!(run.retrieval.node_ids(), ["p3"]);
    assert!(run.answer.contains("Bob Jones"), "{}", run.answer);
}

#[test]
fn global_count_over_a_page_range() {
    let gw = mock_gateway();
    let (index, _) = build_fixture("synthetic.jsonl", &gw);
    let plan = plan_query(SYNTHETIC_QUERIES[6], &gw, &PlannerConfig::default()).unwrap();
    assert_eq!(plan.category, QueryCategory::Global);
    let run = execute(&plan, &index, &gw, &ReasonerConfig::default()).unwrap();
    assert_eq!(run.answer, "I found 5 items.");
    assert_eq!(run.retrieval.node_ids(), ["im2", "im3", "im4", "im5", "im6"]);
}

#[test]
fn reduce_combines_sub_answers() {
    let q = "What is the difference between the Success Rate of RL and SL on MultiWOZ?";
    let gw = ModelGateway::new(MockBackend::new().with_response(
        "reduce",
        q,
        "RL reaches 0.6818 and SL reaches 0.3945, a difference of 0.2873.",
    ));
    let (index, _) = build_fixture("synthetic.jsonl", &mock_gateway());
    let parts = [
        SubAnswer { question: "Success Rate of SL?".into(), answer: "0.3945".into(), evidence: vec![], failed: false },
        SubAnswer { question: "Success Rate of RL?".into(), answer: "0.6818".into(), evidence: vec![], failed: false },
    ];
    let a = reduce_synthesize(q, &parts, None, None, &[], &index.tree, &gw).unwrap();
    for v in ["0.3945", "0.6818", "0.2873"] {
        assert!(a.contains(v), "{a}");
    }
    assert!(((0.6818f64 - 0.3945) - 0.2873).abs() < 1e-12);
}

#[test]
fn scripted_extraction_scores_exact_match() {
    let gw = mock_gateway();
    let (index, _) = build_fixture("synthetic.jsonl", &gw);
    let data = load_dataset(&fixture("dataset.jsonl")).unwrap();
    let corpus = BTreeMap::from([(index.doc_id.clone(), index)]);

    let plain = run_eval(&data, &corpus, &gw, &EvalConfig::default()).unwrap();
    let a = &plain.aggregates;
    assert_eq!(a.accuracy, 0.75);
    assert_eq!(a.em, 0.0);
    assert!((a.f1 - (0.4 + 2.0 / 7.0 + 2.0 / 7.0) / 4.0).abs() < 1e-12, "{}", a.f1);
    assert_eq!(a.recall, Some(0.75));

    // script the extractor for the first single-hop answer only
    let raw = plain.records[1].raw_answer.clone();
    let scripted = ModelGateway::new(MockBackend::new().with_response("answer_extract", raw, "Bob Jones"));
    let r = run_eval(&data, &corpus, &scripted, &EvalConfig::default()).unwrap();
    assert_eq!(r.records[1].extracted, "Bob Jones");
    assert_eq!((r.records[1].em, r.records[1].f1), (1.0, 1.0));
    assert_eq!(r.aggregates.em, 0.25);
}
