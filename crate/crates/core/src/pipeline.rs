//! End-to-end private in-context learning runs.
//!
//! For every query, in input order: gate the corpus through the privacy
//! filter, retrieve and shard demonstrations, prompt the model once per
//! shard, aggregate the shard outputs privately and charge the records that
//! were used. The Poisson-sampling baseline replaces retrieval with random
//! sampling and the per-record filter with a single global accountant.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::{
    complete_batch, extract_class_label, extract_qa_answer, render_classification_prompt, render_keyword_followup,
    render_qa_prompt, ChatRequest, EndpointConfig, LanguageModel, LlmError,
};
use crate::mechanisms::{
    build_token_histogram, build_vote_histogram, find_best_k, rnm_gaussian, top_k_with_ptr, KeywordRelease,
    MechanismError, Tokenizer, DEFAULT_K_MAX, DEFAULT_K_MIN,
};
use crate::metrics::MetricReport;
use crate::privacy_core::{
    best_guarantee, calibrate_noise, calibrate_sigma, compose, subsampled_rdp, AccountingError, ApproxRdp,
    DpGuarantee, RenyiOrder, SamplingConfig, DEFAULT_ALPHA_GRID,
};
use crate::privacy_filter::{
    budget_guarantee, mechanism_rdp, BudgetConfig, FilterError, FilterState, MechanismDescriptor, QueryCost,
    VOTE_SENSITIVITY,
};
use crate::retrieval::{poisson_sample, top_k, FlatIndex, QueryRecord, RetrievalError, ShardPlan};

pub const CLASSIFICATION_TEMPERATURE: f64 = 0.0;
pub const QA_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_EPSILON_EM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("query {query_id}: {source}")]
    Llm {
        query_id: u64,
        #[source]
        source: LlmError,
    },
    #[error("privacy invariant violated: {0}")]
    Invariant(String),
}

fn config_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Qa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Knn,
    Poisson,
    DummyNn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismParams {
    /// Aggregation noise; calibrated from the privacy target when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// FindBestK budget; 0 disables it in favor of `fixed_k`.
    #[serde(default = "default_epsilon_em")]
    pub epsilon_em: f64,
    /// PTR failure probability per query; defaults to `delta_max / uses`.
    #[serde(default)]
    pub delta_i: Option<f64>,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub fixed_k: Option<usize>,
}

fn default_epsilon_em() -> f64 {
    DEFAULT_EPSILON_EM
}
fn default_k_min() -> usize {
    DEFAULT_K_MIN
}
fn default_k_max() -> usize {
    DEFAULT_K_MAX
}

impl Default for MechanismParams {
    fn default() -> Self {
        Self {
            sigma: None,
            epsilon_em: DEFAULT_EPSILON_EM,
            delta_i: None,
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
            fixed_k: None,
        }
    }
}

/// End-to-end `(ε, δ)` target and how many times each record may be used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyTarget {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default = "default_uses")]
    pub uses_per_record: u32,
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
}

fn default_uses() -> u32 {
    1
}

impl PrivacyTarget {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self { epsilon, delta, uses_per_record: 1, alpha_grid: None }
    }

    pub fn grid(&self) -> Result<Vec<RenyiOrder>, PipelineError> {
        let raw = self.alpha_grid.clone().unwrap_or_else(|| DEFAULT_ALPHA_GRID.to_vec());
        if raw.is_empty() {
            return Err(config_err("alpha_grid is empty"));
        }
        raw.into_iter().map(|a| RenyiOrder::new(a).map_err(PipelineError::from)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub retrieval_mode: RetrievalMode,
    pub shards: usize,
    pub n_shot: usize,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub mechanism: MechanismParams,
    pub privacy: PrivacyTarget,
    #[serde(default)]
    pub seed: u64,
    /// Poisson inclusion probability; defaults to `shards * n_shot / N`.
    #[serde(default)]
    pub poisson_gamma: Option<f64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub endpoint: EndpointConfig,
}

impl RunConfig {
    /// 10 shards of 4 demonstrations, δ = 1e-5, one use per record.
    pub fn classification_preset(classes: Vec<String>, epsilon: f64) -> Self {
        Self {
            task: Task::Classification,
            retrieval_mode: RetrievalMode::Knn,
            shards: 10,
            n_shot: 4,
            classes,
            mechanism: MechanismParams::default(),
            privacy: PrivacyTarget::new(epsilon, 1e-5),
            seed: 0,
            poisson_gamma: None,
            temperature: None,
            endpoint: EndpointConfig::default(),
        }
    }

    /// 4-shot QA over 10 shards with keyword aggregation.
    pub fn qa_preset(epsilon: f64) -> Self {
        Self { task: Task::Qa, classes: vec![], ..Self::classification_preset(vec![], epsilon) }
    }

    pub fn k(&self) -> usize {
        self.shards * self.n_shot
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(match self.task {
            Task::Classification => CLASSIFICATION_TEMPERATURE,
            Task::Qa => QA_TEMPERATURE,
        })
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.shards < 1 {
            return Err(config_err("shards must be >= 1"));
        }
        if self.retrieval_mode != RetrievalMode::Poisson && self.k() == 0 {
            return Err(config_err("nearest-neighbor retrieval needs shards * n_shot >= 1"));
        }
        match self.task {
            Task::Classification if self.classes.is_empty() => {
                return Err(config_err("classification needs a non-empty class list"))
            }
            Task::Qa if self.retrieval_mode == RetrievalMode::DummyNn => {
                return Err(config_err("dummy_nn retrieval only applies to classification"))
            }
            _ => {}
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(config_err(format!("duplicate class {dup:?}")));
        }
        self.validate_privacy()
    }

    /// The subset of [`RunConfig::validate`] that privacy planning needs.
    pub fn validate_privacy(&self) -> Result<(), PipelineError> {
        if self.task == Task::Qa {
            let m = &self.mechanism;
            if m.k_min < 1 || m.k_min > m.k_max {
                return Err(config_err(format!("invalid k range [{}, {}]", m.k_min, m.k_max)));
            }
            if !(m.epsilon_em >= 0.0) {
                return Err(config_err("epsilon_em must be >= 0"));
            }
            if m.epsilon_em == 0.0 && m.fixed_k.is_none() {
                return Err(config_err("epsilon_em = 0 requires fixed_k"));
            }
        }
        if let Some(s) = self.mechanism.sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(config_err(format!("sigma must be finite and > 0, got {s}")));
            }
        }
        if let Some(g) = self.poisson_gamma {
            SamplingConfig::new(g)?;
        }
        DpGuarantee::new(self.privacy.epsilon, self.privacy.delta)?;
        if !(self.privacy.epsilon > 0.0) {
            return Err(config_err("target epsilon must be > 0"));
        }
        Ok(())
    }
}

/// Calibrated noise, committed order and per-record budget for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyPlan {
    pub sigma: f64,
    pub alpha_star: RenyiOrder,
    pub mechanism: MechanismDescriptor,
    pub cost: QueryCost,
    pub budget: BudgetConfig,
    pub uses_per_record: u32,
    pub guarantee: DpGuarantee,
}

/// Sum of `n` copies of `x` by repeated addition, matching how ledgers
/// accumulate charges.
fn repeated_sum(x: f64, n: u32) -> f64 {
    (0..n).fold(0.0, |acc, _| acc + x)
}

fn descriptor(config: &RunConfig, sigma: f64, delta_i: f64) -> MechanismDescriptor {
    match (config.task, config.retrieval_mode) {
        (Task::Classification, RetrievalMode::DummyNn) => MechanismDescriptor::NearestNeighborDummy { sigma },
        (Task::Classification, _) => MechanismDescriptor::RnmGaussian { sigma },
        (Task::Qa, _) => MechanismDescriptor::KsaPtr { sigma, delta_i, epsilon_em: config.mechanism.epsilon_em },
    }
}

/// Chooses the noise scale, the committed order and the per-record budget.
///
/// Vote-based mechanisms are exact Gaussian mechanisms, so the whole δ goes
/// to the RDP conversion. Keyword release splits δ evenly between the PTR
/// failure budget and the conversion.
pub fn plan_privacy(config: &RunConfig) -> Result<PrivacyPlan, PipelineError> {
    config.validate_privacy()?;
    let target = DpGuarantee::new(config.privacy.epsilon, config.privacy.delta)?;
    let grid = config.privacy.grid()?;
    let uses = config.privacy.uses_per_record;
    // with no uses allowed the noise scale is still sized for one
    let calibration_uses = uses.max(1);

    let (delta_max, delta_i) = match config.task {
        Task::Classification => (0.0, 0.0),
        Task::Qa => {
            let delta_max = target.delta_hat / 2.0;
            let delta_i = match config.mechanism.delta_i {
                Some(d) => d,
                None => {
                    // round down until the ledger's repeated sums fit the budget
                    let mut d = delta_max / calibration_uses as f64;
                    while repeated_sum(d, calibration_uses) > delta_max {
                        d = d.next_down();
                    }
                    d
                }
            };
            if !(delta_i > 0.0 && delta_i < 1.0) {
                return Err(config_err(format!("delta_i must lie in (0, 1), got {delta_i}")));
            }
            if repeated_sum(delta_i, uses) > delta_max {
                return Err(config_err(format!(
                    "{uses} uses of delta_i = {delta_i} exceed the PTR failure budget {delta_max}"
                )));
            }
            (delta_max, delta_i)
        }
    };

    let total_cost = |sigma: f64, alpha: RenyiOrder| -> Result<ApproxRdp, AccountingError> {
        let once = mechanism_rdp(descriptor(config, sigma, delta_i), alpha)
            .map_err(|e| AccountingError::InvalidParameter(e.to_string()))?;
        Ok(ApproxRdp { alpha, epsilon: repeated_sum(once.epsilon, calibration_uses), delta: delta_max })
    };

    let (sigma, alpha_star) = match (config.mechanism.sigma, config.task) {
        (Some(sigma), _) => {
            let (_, alpha) = best_guarantee(&grid, target.delta_hat, |a| total_cost(sigma, a))?;
            (sigma, alpha)
        }
        (None, Task::Classification) => calibrate_sigma(target, VOTE_SENSITIVITY, calibration_uses, &grid)?,
        (None, Task::Qa) => calibrate_noise(target, &grid, total_cost)?,
    };

    let mechanism = descriptor(config, sigma, delta_i);
    let once = mechanism_rdp(mechanism, alpha_star)?;
    let cost = QueryCost { epsilon_t: once.epsilon, delta_t: once.delta };
    let budget = BudgetConfig::new(alpha_star, repeated_sum(cost.epsilon_t, uses), delta_max, target.delta_hat)?;
    let guarantee = budget_guarantee(&budget)?;
    Ok(PrivacyPlan { sigma, alpha_star, mechanism, cost, budget, uses_per_record: uses, guarantee })
}

/// Composed subsampled-RDP accountant for the Poisson baseline, tracked at
/// every integer order of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalAccountant {
    pub gamma: f64,
    pub target_delta: f64,
    pub totals: Vec<ApproxRdp>,
    pub queries: u64,
}

impl GlobalAccountant {
    fn new(gamma: f64, target_delta: f64, grid: &[RenyiOrder]) -> Result<Self, PipelineError> {
        let totals: Vec<ApproxRdp> = grid
            .iter()
            .filter(|a| a.as_integer().is_some_and(|i| i >= 2))
            .map(|&alpha| ApproxRdp { alpha, epsilon: 0.0, delta: 0.0 })
            .collect();
        if totals.is_empty() {
            return Err(config_err("Poisson accounting needs at least one integer order >= 2 in alpha_grid"));
        }
        Ok(Self { gamma, target_delta, totals, queries: 0 })
    }

    fn record(&mut self, mechanism: MechanismDescriptor) -> Result<(), PipelineError> {
        let sampling = SamplingConfig::new(self.gamma)?;
        let base_delta = match mechanism {
            MechanismDescriptor::KsaPtr { delta_i, .. } => delta_i,
            _ => 0.0,
        };
        for total in &mut self.totals {
            let base = |j: u32| {
                mechanism_rdp(mechanism, RenyiOrder::new(j as f64).expect("j >= 2")).map(|c| c.epsilon).unwrap_or(f64::INFINITY)
            };
            let step = subsampled_rdp(base, sampling, base_delta, total.alpha)?;
            *total = compose(&[*total, step])?;
        }
        self.queries += 1;
        Ok(())
    }

    pub fn guarantee(&self) -> Result<DpGuarantee, PipelineError> {
        let orders: Vec<RenyiOrder> = self.totals.iter().map(|t| t.alpha).collect();
        let (g, _) = best_guarantee(&orders, self.target_delta, |alpha| {
            Ok(*self.totals.iter().find(|t| t.alpha == alpha).expect("order tracked"))
        })?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Accountant {
    Filter(FilterState),
    Global(GlobalAccountant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    Full,
    FallbackZeroShot,
    Abstain,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub answer: Option<String>,
    pub mode: OutcomeMode,
    pub retrieved: Vec<u64>,
    pub shard_responses: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    pub invalid_votes: usize,
    pub charged: QueryCost,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryOutcome {
    fn new(query_id: u64, mode: OutcomeMode) -> Self {
        Self {
            query_id,
            answer: None,
            mode,
            retrieved: vec![],
            shard_responses: vec![],
            keywords: None,
            invalid_votes: 0,
            charged: QueryCost::ZERO,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub queries: usize,
    pub full: usize,
    pub fallback_zero_shot: usize,
    pub abstained: usize,
    pub failed: usize,
    pub invalid_votes: usize,
    pub exhausted_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub plan: PrivacyPlan,
    pub outcomes: Vec<QueryOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    pub summary: RunSummary,
    pub guarantee: DpGuarantee,
}

const STREAM_SAMPLE: u64 = 1;
const STREAM_AGGREGATE: u64 = 2;
const STREAM_SELECT_K: u64 = 3;

/// Independent per-query, per-purpose seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, query_id: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(query_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Demonstrations chosen for one query.
struct Selection {
    plan: ShardPlan,
    retrieved: BTreeSet<u64>,
    ranked: Vec<u64>,
}

/// One experiment: corpus, model, configuration and accounting state.
pub struct Experiment<'a> {
    index: &'a FlatIndex,
    model: &'a dyn LanguageModel,
    config: RunConfig,
    plan: PrivacyPlan,
    accountant: Accountant,
}

impl<'a> Experiment<'a> {
    pub fn new(index: &'a FlatIndex, model: &'a dyn LanguageModel, config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let plan = plan_privacy(&config)?;
        let accountant = match config.retrieval_mode {
            RetrievalMode::Poisson => {
                let gamma = match config.poisson_gamma {
                    Some(g) => g,
                    None if index.is_empty() => 0.0,
                    None => (config.k() as f64 / index.len() as f64).min(1.0),
                };
                Accountant::Global(GlobalAccountant::new(gamma, config.privacy.delta, &config.privacy.grid()?)?)
            }
            _ => Accountant::Filter(FilterState::new(plan.budget, index.ids())),
        };
        Ok(Self { index, model, config, plan, accountant })
    }

    /// Continues from a saved filter state, which must carry this run's budget.
    pub fn resume(mut self, state: FilterState) -> Result<Self, PipelineError> {
        match &self.accountant {
            Accountant::Filter(_) if *state.budget() == self.plan.budget => {
                if let Some(missing) = self.index.ids().find(|id| state.ledger(*id).is_none()) {
                    return Err(config_err(format!("checkpoint has no ledger for record {missing}")));
                }
                self.accountant = Accountant::Filter(state);
                Ok(self)
            }
            Accountant::Filter(_) => Err(config_err("checkpoint budget does not match the planned budget")),
            Accountant::Global(_) => Err(config_err("Poisson runs do not use a per-record filter")),
        }
    }

    pub fn plan(&self) -> &PrivacyPlan {
        &self.plan
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn accountant(&self) -> &Accountant {
        &self.accountant
    }

    pub fn filter_state(&self) -> Option<&FilterState> {
        match &self.accountant {
            Accountant::Filter(s) => Some(s),
            Accountant::Global(_) => None,
        }
    }

    /// Ids of queries already logged by the filter.
    pub fn completed_queries(&self) -> BTreeSet<u64> {
        self.filter_state().map(|s| s.log().iter().map(|e| e.query).collect()).unwrap_or_default()
    }

    pub fn guarantee(&self) -> Result<DpGuarantee, PipelineError> {
        match &self.accountant {
            Accountant::Filter(state) => Ok(state.report_guarantee()?),
            Accountant::Global(global) => global.guarantee(),
        }
    }

    fn seed(&self, query: &QueryRecord, stream: u64) -> u64 {
        derive_seed(self.config.seed, query.id, stream)
    }

    /// `None` means the filter left nothing eligible.
    fn select(&self, query: &QueryRecord) -> Result<Option<Selection>, PipelineError> {
        match &self.accountant {
            Accountant::Filter(state) => {
                let eligible = state.eligible_set(self.plan.cost);
                if eligible.is_empty() {
                    return Ok(None);
                }
                let ranked = top_k(self.index, &query.embedding, self.config.k(), &eligible)?.ids();
                Ok(Some(Selection {
                    plan: ShardPlan::round_robin(&ranked, self.config.shards),
                    retrieved: ranked.iter().copied().collect(),
                    ranked,
                }))
            }
            Accountant::Global(global) => {
                let plan = poisson_sample(
                    self.index,
                    SamplingConfig::new(global.gamma)?,
                    self.config.shards,
                    self.config.n_shot,
                    self.seed(query, STREAM_SAMPLE),
                )?;
                let ranked = plan.all_ids();
                Ok(Some(Selection { retrieved: ranked.iter().copied().collect(), ranked, plan }))
            }
        }
    }

    fn charge(&mut self, query: u64, retrieved: &BTreeSet<u64>, cost: QueryCost) -> Result<(), PipelineError> {
        match &mut self.accountant {
            Accountant::Filter(state) => state.charge(query, retrieved, cost)?,
            Accountant::Global(global) => {
                if cost != QueryCost::ZERO {
                    global.record(self.plan.mechanism)?;
                }
            }
        }
        Ok(())
    }

    fn request(&self, query: &QueryRecord, shard: usize, prompt: String) -> ChatRequest {
        ChatRequest {
            model: self.config.endpoint.model.clone(),
            prompt,
            temperature: self.config.temperature(),
            max_tokens: self.config.endpoint.max_tokens,
            query_id: query.id,
            shard,
        }
    }

    fn complete_all(&self, query: &QueryRecord, prompts: Vec<String>) -> Result<Vec<String>, PipelineError> {
        let requests: Vec<ChatRequest> =
            prompts.into_iter().enumerate().map(|(i, p)| self.request(query, i, p)).collect();
        let parallel = self.config.endpoint.max_parallel.unwrap_or(self.config.shards);
        complete_batch(self.model, &requests, parallel)
            .into_iter()
            .map(|r| r.map(|resp| resp.text).map_err(|source| PipelineError::Llm { query_id: query.id, source }))
            .collect()
    }

    fn complete_one(&self, query: &QueryRecord, prompt: String) -> Result<String, PipelineError> {
        self.complete_all(query, vec![prompt]).map(|mut v| v.remove(0))
    }

    fn record(&self, id: u64) -> &crate::retrieval::DemoRecord {
        self.index.get(id).expect("selected ids come from the index")
    }

    fn classification_prompt(&self, demos: &[u64], query: &QueryRecord) -> Result<String, PipelineError> {
        let pairs: Vec<(&str, &str)> = demos
            .iter()
            .map(|&id| {
                let r = self.record(id);
                (r.content.as_str(), r.answer.as_str())
            })
            .collect();
        render_classification_prompt(&self.config.classes, &pairs, &query.content)
            .map_err(|source| PipelineError::Llm { query_id: query.id, source })
    }

    fn qa_prompt(&self, demos: &[u64], query: &QueryRecord) -> Result<String, PipelineError> {
        let triples: Vec<(&str, &str, &str)> = demos
            .iter()
            .map(|&id| {
                let r = self.record(id);
                (r.content.as_str(), r.question.as_deref().unwrap_or(""), r.answer.as_str())
            })
            .collect();
        render_qa_prompt(&triples, (&query.content, query.question.as_deref().unwrap_or("")))
            .map_err(|source| PipelineError::Llm { query_id: query.id, source })
    }

    fn log_uncharged(&mut self, query: u64) -> Result<(), PipelineError> {
        self.charge(query, &BTreeSet::new(), QueryCost::ZERO)
    }

    /// Classifies one query with shard voting and Gaussian report-noisy-max.
    /// On error nothing is charged.
    pub fn classify_query(&mut self, query: &QueryRecord) -> Result<QueryOutcome, PipelineError> {
        if self.config.task != Task::Classification {
            return Err(config_err("classify_query needs a classification run"));
        }
        let Some(selection) = self.select(query)? else {
            let prompt = self.classification_prompt(&[], query)?;
            let response = self.complete_one(query, prompt)?;
            self.log_uncharged(query.id)?;
            let mut outcome = QueryOutcome::new(query.id, OutcomeMode::FallbackZeroShot);
            outcome.answer = extract_class_label(&response, &self.config.classes);
            outcome.shard_responses = vec![response];
            return Ok(outcome);
        };
        let prompts = selection
            .plan
            .batches
            .iter()
            .map(|batch| self.classification_prompt(batch, query))
            .collect::<Result<Vec<_>, _>>()?;
        let responses = self.complete_all(query, prompts)?;
        let votes: Vec<Option<String>> =
            responses.iter().map(|r| extract_class_label(r, &self.config.classes)).collect();
        let hist = build_vote_histogram(&votes, &self.config.classes);
        let winner = rnm_gaussian(&hist, self.plan.sigma, self.seed(query, STREAM_AGGREGATE))?;
        self.charge(query.id, &selection.retrieved, self.plan.cost)?;

        let mut outcome = QueryOutcome::new(query.id, OutcomeMode::Full);
        outcome.answer = Some(hist.labels[winner].clone());
        outcome.retrieved = selection.ranked;
        outcome.shard_responses = responses;
        outcome.invalid_votes = hist.dropped;
        outcome.charged = self.plan.cost;
        Ok(outcome)
    }

    /// Report-noisy-max directly over the retrieved neighbors' labels.
    pub fn dummy_nn_query(&mut self, query: &QueryRecord) -> Result<QueryOutcome, PipelineError> {
        if self.config.task != Task::Classification {
            return Err(config_err("dummy_nn_query needs a classification run"));
        }
        let Some(selection) = self.select(query)? else {
            self.log_uncharged(query.id)?;
            return Ok(QueryOutcome::new(query.id, OutcomeMode::Abstain));
        };
        let labels: Vec<Option<&str>> =
            selection.ranked.iter().map(|&id| Some(self.record(id).answer.as_str())).collect();
        let hist = build_vote_histogram(&labels, &self.config.classes);
        let winner = rnm_gaussian(&hist, self.plan.sigma, self.seed(query, STREAM_AGGREGATE))?;
        self.charge(query.id, &selection.retrieved, self.plan.cost)?;

        let mut outcome = QueryOutcome::new(query.id, OutcomeMode::Full);
        outcome.answer = Some(hist.labels[winner].clone());
        outcome.retrieved = selection.ranked;
        outcome.invalid_votes = hist.dropped;
        outcome.charged = self.plan.cost;
        Ok(outcome)
    }

    /// Answers one query with keyword aggregation: token histogram,
    /// FindBestK, TopKwithPTR, then a follow-up prompt built from the
    /// released keywords or a zero-shot prompt on fallback. Retrieved records
    /// are charged in both branches.
    pub fn answer_query(&mut self, query: &QueryRecord) -> Result<QueryOutcome, PipelineError> {
        if self.config.task != Task::Qa {
            return Err(config_err("answer_query needs a QA run"));
        }
        let question = (query.content.as_str(), query.question.as_deref().unwrap_or(""));
        let Some(selection) = self.select(query)? else {
            let prompt = self.qa_prompt(&[], query)?;
            let response = self.complete_one(query, prompt)?;
            self.log_uncharged(query.id)?;
            let mut outcome = QueryOutcome::new(query.id, OutcomeMode::FallbackZeroShot);
            outcome.answer = Some(extract_qa_answer(&response));
            return Ok(outcome);
        };
        let prompts = selection
            .plan
            .batches
            .iter()
            .map(|batch| self.qa_prompt(batch, query))
            .collect::<Result<Vec<_>, _>>()?;
        let responses = self.complete_all(query, prompts)?;
        let answers: Vec<String> = responses.iter().map(|r| extract_qa_answer(r)).collect();
        let hist = build_token_histogram(&answers, Tokenizer::KEYWORDS);

        let m = &self.config.mechanism;
        let k = if m.epsilon_em > 0.0 {
            find_best_k(&hist, m.epsilon_em, m.k_min, m.k_max, self.seed(query, STREAM_SELECT_K))?
        } else {
            m.fixed_k.ok_or_else(|| config_err("epsilon_em = 0 requires fixed_k"))?
        };
        let delta_i = match self.plan.mechanism {
            MechanismDescriptor::KsaPtr { delta_i, .. } => delta_i,
            _ => unreachable!("QA plans use keyword release"),
        };
        let release = top_k_with_ptr(&hist, k, self.plan.sigma, delta_i, self.seed(query, STREAM_AGGREGATE))?;
        self.charge(query.id, &selection.retrieved, self.plan.cost)?;

        let mut outcome = QueryOutcome::new(query.id, OutcomeMode::Full);
        outcome.retrieved = selection.ranked;
        outcome.shard_responses = responses;
        outcome.charged = self.plan.cost;
        let final_prompt = match &release {
            KeywordRelease::Released(keywords) => {
                outcome.keywords = Some(keywords.clone());
                render_keyword_followup(keywords, question)
                    .map_err(|source| PipelineError::Llm { query_id: query.id, source })?
            }
            KeywordRelease::Fallback => {
                outcome.mode = OutcomeMode::FallbackZeroShot;
                self.qa_prompt(&[], query)?
            }
        };
        // the mechanism already ran, so a failure here keeps the charge
        match self.complete_one(query, final_prompt) {
            Ok(text) => outcome.answer = Some(extract_qa_answer(&text)),
            Err(e) => {
                outcome.mode = OutcomeMode::Failed;
                outcome.error = Some(e.to_string());
            }
        }
        Ok(outcome)
    }

    /// Dispatches one query according to the task and retrieval mode.
    pub fn process(&mut self, query: &QueryRecord) -> Result<QueryOutcome, PipelineError> {
        match (self.config.task, self.config.retrieval_mode) {
            (Task::Classification, RetrievalMode::DummyNn) => self.dummy_nn_query(query),
            (Task::Classification, _) => self.classify_query(query),
            (Task::Qa, _) => self.answer_query(query),
        }
    }

    fn check_budgets(&self) -> Result<(), PipelineError> {
        if let Accountant::Filter(state) = &self.accountant {
            let b = state.budget();
            if let Some(l) = state.ledgers().find(|l| l.spent_epsilon > b.epsilon_max || l.spent_delta > b.delta_max) {
                return Err(PipelineError::Invariant(format!(
                    "record {} spent (ε={}, δ={}) over budget (ε={}, δ={})",
                    l.id, l.spent_epsilon, l.spent_delta, b.epsilon_max, b.delta_max
                )));
            }
        }
        Ok(())
    }

    /// Processes `queries` in order. Queries whose model calls fail are
    /// recorded as failed and charged nothing; the report is always produced
    /// unless a privacy invariant breaks.
    pub fn run(&mut self, queries: &[QueryRecord]) -> Result<ExperimentReport, PipelineError> {
        let mut outcomes = Vec::with_capacity(queries.len());
        for query in queries {
            match self.process(query) {
                Ok(outcome) => outcomes.push(outcome),
                Err(PipelineError::Llm { source, .. }) => {
                    let mut failed = QueryOutcome::new(query.id, OutcomeMode::Failed);
                    failed.error = Some(source.to_string());
                    outcomes.push(failed);
                }
                Err(e) => return Err(e),
            }
        }
        self.check_budgets()?;

        let scored: Vec<(u64, &str, &str)> = queries
            .iter()
            .zip(&outcomes)
            .filter(|(_, o)| o.mode != OutcomeMode::Failed)
            .filter_map(|(q, o)| q.answer.as_deref().map(|truth| (q.id, o.answer.as_deref().unwrap_or(""), truth)))
            .collect();
        let metrics = (!scored.is_empty()).then(|| MetricReport::from_pairs(scored));

        let count = |mode: OutcomeMode| outcomes.iter().filter(|o| o.mode == mode).count();
        let exhausted_records = match &self.accountant {
            Accountant::Filter(state) => state.exhausted_count(self.plan.cost),
            Accountant::Global(_) => 0,
        };
        let summary = RunSummary {
            queries: outcomes.len(),
            full: count(OutcomeMode::Full),
            fallback_zero_shot: count(OutcomeMode::FallbackZeroShot),
            abstained: count(OutcomeMode::Abstain),
            failed: count(OutcomeMode::Failed),
            invalid_votes: outcomes.iter().map(|o| o.invalid_votes).sum(),
            exhausted_records,
        };
        Ok(ExperimentReport {
            plan: self.plan.clone(),
            outcomes,
            metrics,
            summary,
            guarantee: self.guarantee()?,
        })
    }
}

/// Builds an experiment and runs every query.
pub fn run_experiment(
    index: &FlatIndex,
    model: &dyn LanguageModel,
    config: RunConfig,
    queries: &[QueryRecord],
) -> Result<ExperimentReport, PipelineError> {
    Experiment::new(index, model, config)?.run(queries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_by_stream_and_query() {
        let a = derive_seed(0, 1, STREAM_AGGREGATE);
        assert_ne!(a, derive_seed(0, 2, STREAM_AGGREGATE));
        assert_ne!(a, derive_seed(0, 1, STREAM_SAMPLE));
        assert_ne!(a, derive_seed(1, 1, STREAM_AGGREGATE));
        assert_eq!(a, derive_seed(0, 1, STREAM_AGGREGATE));
    }

    #[test]
    fn classification_plan_hits_target() {
        let config = RunConfig::classification_preset(vec!["a".into(), "b".into()], 0.5);
        let plan = plan_privacy(&config).unwrap();
        assert!(plan.sigma > 9.0 && plan.sigma < 15.0, "sigma {}", plan.sigma);
        assert_eq!(plan.budget.delta_max, 0.0);
        assert_eq!(plan.budget.epsilon_max, plan.cost.epsilon_t);
        assert!(plan.guarantee.epsilon_hat <= 0.5);
        assert_eq!(plan.guarantee.delta_hat, 1e-5);
    }

    #[test]
    fn qa_plan_splits_delta() {
        let mut config = RunConfig::qa_preset(2.0);
        config.privacy.uses_per_record = 3;
        let plan = plan_privacy(&config).unwrap();
        assert_eq!(plan.budget.delta_max, 5e-6);
        match plan.mechanism {
            MechanismDescriptor::KsaPtr { delta_i, .. } => assert!((delta_i - 5e-6 / 3.0).abs() < 1e-18),
            other => panic!("unexpected {other:?}"),
        }
        assert!(plan.guarantee.epsilon_hat <= 2.0);
    }

    #[test]
    fn zero_uses_gives_zero_budget() {
        let mut config = RunConfig::classification_preset(vec!["a".into()], 1.0);
        config.privacy.uses_per_record = 0;
        let plan = plan_privacy(&config).unwrap();
        assert_eq!(plan.budget.epsilon_max, 0.0);
        assert_eq!(plan.guarantee.epsilon_hat, 0.0);
        assert!(plan.cost.epsilon_t > 0.0);
    }

    #[test]
    fn infeasible_selection_budget() {
        let mut config = RunConfig::qa_preset(0.05);
        config.mechanism.epsilon_em = 1.0;
        assert!(plan_privacy(&config).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::classification_preset(vec![], 1.0);
        assert!(c.validate().is_err());
        c.classes = vec!["a".into(), "a".into()];
        assert!(c.validate().is_err());
        let mut q = RunConfig::qa_preset(1.0);
        q.mechanism.epsilon_em = 0.0;
        assert!(q.validate().is_err());
        q.mechanism.fixed_k = Some(3);
        assert!(q.validate().is_ok());
        q.retrieval_mode = RetrievalMode::DummyNn;
        assert!(q.validate().is_err());
    }
}
