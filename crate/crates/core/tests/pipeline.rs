use std::collections::BTreeMap;

use dpicl_core::llm_client::*;
use dpicl_core::pipeline::*;
use dpicl_core::retrieval::{ingest_query, ingest_record, FlatIndex, QueryRecord, RawRecord};
use dpicl_core::synthetic::{ClusterSampler, ClusterSpec};

fn classes(sampler: &ClusterSampler) -> Vec<String> {
    sampler.classes().to_vec()
}

fn cluster_setup(labels: &[&str], n: usize, queries: usize, seed: u64) -> (ClusterSampler, FlatIndex, Vec<QueryRecord>) {
    let sampler = ClusterSampler::new(ClusterSpec::balanced(labels, 16, 0.05), seed);
    let index = FlatIndex::build(sampler.demos(n, 0, seed + 1), 16).unwrap();
    let queries = sampler.queries(queries, 1_000_000, seed + 2);
    (sampler, index, queries)
}

fn classification(classes: Vec<String>, sigma: f64, uses: u32) -> RunConfig {
    let mut config = RunConfig::classification_preset(classes, 1.0);
    config.mechanism.sigma = Some(sigma);
    config.privacy.uses_per_record = uses;
    config
}

fn accuracy(report: &ExperimentReport, queries: &[QueryRecord]) -> f64 {
    let truth: BTreeMap<u64, &str> = queries.iter().map(|q| (q.id, q.answer.as_deref().unwrap())).collect();
    let correct = report.outcomes.iter().filter(|o| o.answer.as_deref() == Some(truth[&o.query_id])).count();
    correct as f64 / report.outcomes.len() as f64
}

#[test]
fn separable_clusters_are_classified() {
    let (sampler, index, queries) = cluster_setup(&["north", "south"], 400, 100, 1);
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let report = run_experiment(&index, &model, classification(classes(&sampler), 0.1, 100), &queries).unwrap();
    assert_eq!(report.summary.full, 100);
    assert!(accuracy(&report, &queries) >= 0.95);
    assert_eq!(report.metrics.as_ref().unwrap().per_query.len(), 100);
}

#[test]
fn exhausted_corpus_falls_back_without_charge() {
    let (sampler, index, _) = cluster_setup(&["a", "b"], 40, 0, 2);
    let q = sampler.queries(1, 500, 3).remove(0);
    let queries = vec![q.clone(), QueryRecord { id: 501, ..q }];
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let mut exp = Experiment::new(&index, &model, classification(classes(&sampler), 1.0, 1)).unwrap();
    let report = exp.run(&queries).unwrap();
    assert_eq!(report.outcomes[0].mode, OutcomeMode::Full);
    assert_eq!(report.outcomes[0].retrieved.len(), 40);
    assert_eq!(report.outcomes[1].mode, OutcomeMode::FallbackZeroShot);
    assert!(report.outcomes[1].retrieved.is_empty());
    assert_eq!(report.outcomes[1].charged, dpicl_core::privacy_filter::QueryCost::ZERO);
    assert_eq!(report.summary.exhausted_records, 40);
    assert_eq!(exp.filter_state().unwrap().log().len(), 2);
}

#[test]
fn huge_noise_randomizes_predictions() {
    let labels = ["w", "x", "y", "z"];
    let (sampler, index, queries) = cluster_setup(&labels, 200, 800, 3);
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let report = run_experiment(&index, &model, classification(classes(&sampler), 1e6, 10_000), &queries).unwrap();
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for o in &report.outcomes {
        *freq.entry(o.answer.clone().unwrap()).or_default() += 1;
    }
    for label in labels {
        let share = freq.get(label).copied().unwrap_or(0) as f64 / 800.0;
        assert!((share - 0.25).abs() < 0.06, "{label}: {share}");
    }
}

#[test]
fn dummy_nn_matches_single_shot_voting() {
    let (sampler, index, queries) = cluster_setup(&["a", "b", "c"], 150, 30, 4);
    let mut config = classification(classes(&sampler), 2.0, 100);
    config.n_shot = 1;
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let voted = run_experiment(&index, &model, config.clone(), &queries).unwrap();
    config.retrieval_mode = RetrievalMode::DummyNn;
    let direct = run_experiment(&index, &model, config, &queries).unwrap();
    for (v, d) in voted.outcomes.iter().zip(&direct.outcomes) {
        assert_eq!(v.answer, d.answer);
        assert_eq!(v.retrieved, d.retrieved);
    }
}

#[test]
fn dummy_nn_abstains_when_exhausted() {
    let (sampler, index, queries) = cluster_setup(&["a", "b"], 40, 2, 5);
    let mut config = classification(classes(&sampler), 1.0, 1);
    config.retrieval_mode = RetrievalMode::DummyNn;
    let model = MockLlm::new(MockBehavior::FixedText("unused".into()));
    let report = run_experiment(&index, &model, config, &queries).unwrap();
    assert_eq!(report.outcomes[1].mode, OutcomeMode::Abstain);
    assert_eq!(report.outcomes[1].answer, None);
}

fn qa_corpus(answers: impl Fn(u64) -> String, n: u64) -> FlatIndex {
    let records = (0..n)
        .map(|id| {
            let raw = RawRecord {
                id,
                content: format!("passage {id}"),
                question: Some("which landmark?".into()),
                answer: Some(answers(id)),
                embedding: vec![1.0, id as f64 / n as f64],
            };
            ingest_record(raw, 2).unwrap()
        })
        .collect();
    FlatIndex::build(records, 2).unwrap()
}

fn qa_query(id: u64) -> QueryRecord {
    let raw = RawRecord {
        id,
        content: "a tall iron lattice".into(),
        question: Some("which landmark?".into()),
        answer: Some("eiffel tower".into()),
        embedding: vec![1.0, 0.5],
    };
    ingest_query(raw, 2).unwrap()
}

fn qa_config(shards: usize, k: usize) -> RunConfig {
    let mut config = RunConfig::qa_preset(4.0);
    config.shards = shards;
    config.mechanism.sigma = Some(0.1);
    config.mechanism.epsilon_em = 0.0;
    config.mechanism.fixed_k = Some(k);
    config.privacy.uses_per_record = 10;
    config
}

#[test]
fn unanimous_answers_release_keywords() {
    let index = qa_corpus(|_| "Eiffel Tower".into(), 40);
    let model = MockLlm::new(MockBehavior::KeywordEcho);
    let report = run_experiment(&index, &model, qa_config(10, 2), &[qa_query(7)]).unwrap();
    let o = &report.outcomes[0];
    assert_eq!(o.mode, OutcomeMode::Full);
    assert_eq!(o.keywords.as_deref(), Some(&["eiffel".to_string(), "tower".to_string()][..]));
    assert_eq!(o.answer.as_deref(), Some("eiffel tower"));
    assert_eq!(report.metrics.unwrap().mean.exact_match, 1.0);
}

#[test]
fn disjoint_answers_fall_back_but_charge() {
    let index = qa_corpus(|id| format!("word{id}"), 40);
    let model = MockLlm::new(MockBehavior::KeywordEcho);
    let queries: Vec<QueryRecord> = (0..20).map(qa_query).collect();
    let mut config = qa_config(10, 3);
    config.privacy.uses_per_record = 20;
    let mut exp = Experiment::new(&index, &model, config).unwrap();
    let report = exp.run(&queries).unwrap();
    for o in &report.outcomes {
        assert_eq!(o.mode, OutcomeMode::FallbackZeroShot);
        assert!(o.keywords.is_none());
        assert_eq!(o.retrieved.len(), 40);
        assert_eq!(o.charged, exp.plan().cost);
    }
    let spent = exp.filter_state().unwrap().ledger(0).unwrap().spent_epsilon;
    assert!((spent - 20.0 * exp.plan().cost.epsilon_t).abs() < 1e-9);
}

#[test]
fn single_shard_always_falls_back() {
    let index = qa_corpus(|_| "eiffel tower".into(), 40);
    let model = MockLlm::new(MockBehavior::KeywordEcho);
    let queries: Vec<QueryRecord> = (0..10).map(qa_query).collect();
    let report = run_experiment(&index, &model, qa_config(1, 2), &queries).unwrap();
    assert!(report.outcomes.iter().all(|o| o.mode == OutcomeMode::FallbackZeroShot));
}

#[test]
fn zero_queries_report_configured_guarantee() {
    let (sampler, index, _) = cluster_setup(&["a", "b"], 10, 0, 6);
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let report = run_experiment(&index, &model, classification(classes(&sampler), 5.0, 1), &[]).unwrap();
    assert!(report.outcomes.is_empty());
    assert!(report.metrics.is_none());
    assert_eq!(report.guarantee, report.plan.guarantee);
}

#[test]
fn reruns_are_identical() {
    let (sampler, index, queries) = cluster_setup(&["a", "b", "c"], 100, 20, 7);
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let config = classification(classes(&sampler), 30.0, 2);
    let a = serde_json::to_string(&run_experiment(&index, &model, config.clone(), &queries).unwrap()).unwrap();
    let b = serde_json::to_string(&run_experiment(&index, &model, config.clone(), &queries).unwrap()).unwrap();
    assert_eq!(a, b);
    let other_seed = RunConfig { seed: 99, ..config };
    let c = serde_json::to_string(&run_experiment(&index, &model, other_seed, &queries).unwrap()).unwrap();
    assert_ne!(a, c);
}

/// Fails every request for one shard.
struct BrokenShard {
    inner: MockLlm,
    shard: usize,
}

impl LanguageModel for BrokenShard {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        if request.shard == self.shard {
            return Err(LlmError::Transport {
                query_id: request.query_id,
                shard: request.shard,
                attempts: 5,
                last_error: "request timed out".into(),
            });
        }
        self.inner.complete(request)
    }
}

#[test]
fn shard_failure_fails_query_without_charge() {
    let (sampler, index, queries) = cluster_setup(&["a", "b"], 100, 3, 8);
    let model = BrokenShard { inner: MockLlm::new(MockBehavior::MajorityLabel), shard: 3 };
    let mut exp = Experiment::new(&index, &model, classification(classes(&sampler), 1.0, 1)).unwrap();
    let report = exp.run(&queries).unwrap();
    assert_eq!(report.summary.failed, 3);
    assert!(report.outcomes.iter().all(|o| o.error.as_deref().unwrap().contains("timed out")));
    assert!(exp.filter_state().unwrap().ledgers().all(|l| l.spent_epsilon == 0.0));
    assert!(exp.filter_state().unwrap().log().is_empty());
    assert!(report.metrics.is_none());
}

#[test]
fn guarantee_is_independent_of_data_and_volume() {
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let (s1, i1, q1) = cluster_setup(&["a", "b"], 300, 5, 9);
    let (_, i2, q2) = cluster_setup(&["a", "b"], 80, 40, 10);
    let config = classification(classes(&s1), 4.0, 3);
    let r1 = run_experiment(&i1, &model, config.clone(), &q1).unwrap();
    let r2 = run_experiment(&i2, &model, config, &q2).unwrap();
    assert_eq!(r1.guarantee, r2.guarantee);
    assert_eq!(r1.guarantee, r1.plan.guarantee);
}

#[test]
fn poisson_guarantee_composes_over_queries() {
    let (sampler, index, queries) = cluster_setup(&["a", "b"], 400, 10, 11);
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let mut config = classification(classes(&sampler), 5.0, 1);
    config.retrieval_mode = RetrievalMode::Poisson;
    let none = run_experiment(&index, &model, config.clone(), &[]).unwrap();
    let few = run_experiment(&index, &model, config.clone(), &queries[..2]).unwrap();
    let many = run_experiment(&index, &model, config, &queries).unwrap();
    assert_eq!(none.guarantee.epsilon_hat, 0.0);
    assert!(few.guarantee.epsilon_hat > 0.0);
    assert!(many.guarantee.epsilon_hat > few.guarantee.epsilon_hat);
    assert!(many.outcomes.iter().all(|o| o.retrieved.len() <= 40));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (sampler, index, queries) = cluster_setup(&["a", "b", "c"], 120, 12, 12);
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let config = classification(classes(&sampler), 2.0, 2);

    let mut whole = Experiment::new(&index, &model, config.clone()).unwrap();
    let full = whole.run(&queries).unwrap();

    let mut first = Experiment::new(&index, &model, config.clone()).unwrap();
    let head = first.run(&queries[..5]).unwrap();
    let state = first.filter_state().unwrap().clone();
    let mut second = Experiment::new(&index, &model, config).unwrap().resume(state).unwrap();
    assert_eq!(second.completed_queries().len(), 5);
    let tail = second.run(&queries[5..]).unwrap();

    assert_eq!(second.filter_state(), whole.filter_state());
    let stitched: Vec<_> = head.outcomes.into_iter().chain(tail.outcomes).collect();
    assert_eq!(stitched, full.outcomes);
}

#[test]
fn resume_rejects_foreign_budget() {
    let (sampler, index, _) = cluster_setup(&["a", "b"], 20, 0, 13);
    let model = MockLlm::new(MockBehavior::MajorityLabel);
    let donor = Experiment::new(&index, &model, classification(classes(&sampler), 2.0, 5)).unwrap();
    let state = donor.filter_state().unwrap().clone();
    let fresh = Experiment::new(&index, &model, classification(classes(&sampler), 2.0, 1)).unwrap();
    assert!(matches!(fresh.resume(state), Err(PipelineError::Config(_))));
}
