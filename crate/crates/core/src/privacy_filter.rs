//! Individual approximate-RDP privacy filter.
//!
//! Every record owns a ledger of the RDP epsilon and approximation delta it
//! has spent at the committed order `alpha_star`. Before each query the
//! filter computes the set of records that can afford the upcoming charge;
//! only those can be retrieved, and only the retrieved ones are charged.
//! Since every record is capped at `(epsilon_max, delta_max)`, the whole
//! interaction is `delta_max`-approximately `(alpha_star, epsilon_max)`-RDP
//! for every individual, however many queries are answered.
//!
//! Records that are not retrieved are charged nothing. A stricter reading
//! would charge records whose substitute could have entered the top-k; that
//! is not done here.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::privacy_core::{
    compose, gaussian_rdp, invert_conversion, pure_dp_to_rdp, AccountingError, ApproxRdp, DpGuarantee,
    GaussianMechanismSpec, RenyiOrder,
};

/// ℓ2 sensitivity of a vote histogram under substitution of one demonstration.
pub const VOTE_SENSITIVITY: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("record {id} cannot afford the charge (spent ε={spent_epsilon}, δ={spent_delta}; charge ε={epsilon_t}, δ={delta_t})")]
    InvariantViolation { id: u64, spent_epsilon: f64, spent_delta: f64, epsilon_t: f64, delta_t: f64 },
    #[error("record {0} is not tracked by this filter")]
    UnknownRecord(u64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

/// Per-record budget at a committed Rényi order, plus the end-to-end δ̂ the
/// final guarantee is reported at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub alpha_star: RenyiOrder,
    pub epsilon_max: f64,
    pub delta_max: f64,
    pub target_delta: f64,
}

impl BudgetConfig {
    pub fn new(alpha_star: RenyiOrder, epsilon_max: f64, delta_max: f64, target_delta: f64) -> Result<Self, FilterError> {
        if !(epsilon_max >= 0.0) || !epsilon_max.is_finite() {
            return Err(FilterError::InvalidParameter(format!("epsilon_max must be finite and >= 0, got {epsilon_max}")));
        }
        if !(0.0..=1.0).contains(&delta_max) {
            return Err(FilterError::InvalidParameter(format!("delta_max must lie in [0, 1], got {delta_max}")));
        }
        if !(target_delta > 0.0 && target_delta < 1.0) {
            return Err(FilterError::InvalidParameter(format!("target delta must lie in (0, 1), got {target_delta}")));
        }
        Ok(Self { alpha_star, epsilon_max, delta_max, target_delta })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementLedger {
    pub id: u64,
    pub spent_epsilon: f64,
    pub spent_delta: f64,
}

/// Charge applied to each retrieved record for one query.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryCost {
    pub epsilon_t: f64,
    pub delta_t: f64,
}

impl QueryCost {
    pub const ZERO: QueryCost = QueryCost { epsilon_t: 0.0, delta_t: 0.0 };
}

/// Aggregation mechanism run on the retrieved records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MechanismDescriptor {
    /// Gaussian report-noisy-max over shard votes.
    RnmGaussian { sigma: f64 },
    /// FindBestK (skipped when `epsilon_em == 0`) followed by TopKwithPTR.
    KsaPtr { sigma: f64, delta_i: f64, epsilon_em: f64 },
    /// Report-noisy-max over the labels of the retrieved neighbors.
    NearestNeighborDummy { sigma: f64 },
}

/// RDP cost charged per retrieved record for one query at `alpha`.
pub fn per_query_cost(mechanism: MechanismDescriptor, alpha: RenyiOrder) -> Result<QueryCost, FilterError> {
    let rdp = mechanism_rdp(mechanism, alpha)?;
    Ok(QueryCost { epsilon_t: rdp.epsilon, delta_t: rdp.delta })
}

pub(crate) fn mechanism_rdp(mechanism: MechanismDescriptor, alpha: RenyiOrder) -> Result<ApproxRdp, FilterError> {
    match mechanism {
        MechanismDescriptor::RnmGaussian { sigma } | MechanismDescriptor::NearestNeighborDummy { sigma } => {
            Ok(gaussian_rdp(GaussianMechanismSpec::new(sigma, VOTE_SENSITIVITY)?, alpha))
        }
        MechanismDescriptor::KsaPtr { sigma, delta_i, epsilon_em } => {
            if !(0.0..1.0).contains(&delta_i) {
                return Err(FilterError::InvalidParameter(format!("delta_i must lie in [0, 1), got {delta_i}")));
            }
            let release = ApproxRdp { delta: delta_i, ..gaussian_rdp(GaussianMechanismSpec::new(sigma, 1.0)?, alpha) };
            let select = pure_dp_to_rdp(epsilon_em, alpha)?;
            Ok(compose(&[release, select])?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub query: u64,
    pub charged: Vec<u64>,
    pub cost: QueryCost,
}

/// Ledgers for every record of a corpus plus the append-only query log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    budget: BudgetConfig,
    ledgers: BTreeMap<u64, ElementLedger>,
    log: Vec<LogEntry>,
}

impl FilterState {
    pub fn new(budget: BudgetConfig, ids: impl IntoIterator<Item = u64>) -> Self {
        let ledgers = ids
            .into_iter()
            .map(|id| (id, ElementLedger { id, spent_epsilon: 0.0, spent_delta: 0.0 }))
            .collect();
        Self { budget, ledgers, log: Vec::new() }
    }

    pub fn budget(&self) -> &BudgetConfig {
        &self.budget
    }

    pub fn ledger(&self, id: u64) -> Option<&ElementLedger> {
        self.ledgers.get(&id)
    }

    pub fn ledgers(&self) -> impl Iterator<Item = &ElementLedger> {
        self.ledgers.values()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    fn can_afford(&self, ledger: &ElementLedger, cost: QueryCost) -> bool {
        ledger.spent_epsilon + cost.epsilon_t <= self.budget.epsilon_max
            && ledger.spent_delta + cost.delta_t <= self.budget.delta_max
    }

    /// Ids that can pay `upcoming` without exceeding their budget.
    pub fn eligible_set(&self, upcoming: QueryCost) -> BTreeSet<u64> {
        self.ledgers.values().filter(|l| self.can_afford(l, upcoming)).map(|l| l.id).collect()
    }

    /// Records whose remaining budget can no longer pay `cost`.
    pub fn exhausted_count(&self, cost: QueryCost) -> usize {
        self.ledgers.values().filter(|l| !self.can_afford(l, cost)).count()
    }

    /// Charges `cost` to every retrieved record and logs `query`. Nothing is
    /// mutated if any record is unknown or cannot afford the charge.
    pub fn charge(&mut self, query: u64, retrieved: &BTreeSet<u64>, cost: QueryCost) -> Result<(), FilterError> {
        if !(cost.epsilon_t >= 0.0 && cost.delta_t >= 0.0) || !cost.epsilon_t.is_finite() {
            return Err(FilterError::InvalidParameter(format!("invalid query cost {cost:?}")));
        }
        for &id in retrieved {
            let ledger = self.ledgers.get(&id).ok_or(FilterError::UnknownRecord(id))?;
            if !self.can_afford(ledger, cost) {
                return Err(FilterError::InvariantViolation {
                    id,
                    spent_epsilon: ledger.spent_epsilon,
                    spent_delta: ledger.spent_delta,
                    epsilon_t: cost.epsilon_t,
                    delta_t: cost.delta_t,
                });
            }
        }
        for id in retrieved {
            let ledger = self.ledgers.get_mut(id).expect("checked above");
            ledger.spent_epsilon += cost.epsilon_t;
            ledger.spent_delta += cost.delta_t;
        }
        self.log.push(LogEntry { query, charged: retrieved.iter().copied().collect(), cost });
        Ok(())
    }

    /// Rebuilds ledgers from a query log.
    pub fn replay(budget: BudgetConfig, ids: impl IntoIterator<Item = u64>, log: &[LogEntry]) -> Result<Self, FilterError> {
        let mut state = Self::new(budget, ids);
        for entry in log {
            let charged: BTreeSet<u64> = entry.charged.iter().copied().collect();
            state.charge(entry.query, &charged, entry.cost)?;
        }
        Ok(state)
    }

    /// `(ε̂, δ̂)`-DP guarantee implied by the per-record budget, at the
    /// configured target δ̂.
    pub fn report_guarantee(&self) -> Result<DpGuarantee, FilterError> {
        budget_guarantee(&self.budget)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), FilterError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    /// Loads a checkpoint and verifies that its ledgers match a replay of its
    /// log.
    pub fn load_checkpoint(path: &Path) -> Result<Self, FilterError> {
        let state: FilterState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let replayed = Self::replay(state.budget, state.ledgers.keys().copied(), &state.log)?;
        if replayed.ledgers != state.ledgers {
            return Err(FilterError::InvalidParameter("checkpoint ledgers disagree with its query log".into()));
        }
        Ok(state)
    }
}

/// Guarantee of a filter with the given budget, independent of usage.
pub fn budget_guarantee(budget: &BudgetConfig) -> Result<DpGuarantee, FilterError> {
    let cost = ApproxRdp::new(budget.alpha_star, budget.epsilon_max, budget.delta_max)?;
    Ok(invert_conversion(cost, budget.target_delta)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alpha(a: f64) -> RenyiOrder {
        RenyiOrder::new(a).unwrap()
    }

    fn budget(epsilon_max: f64, delta_max: f64) -> BudgetConfig {
        BudgetConfig::new(alpha(2.0), epsilon_max, delta_max, 1e-5).unwrap()
    }

    fn cost(e: f64) -> QueryCost {
        QueryCost { epsilon_t: e, delta_t: 0.0 }
    }

    #[test]
    fn eligibility() {
        let mut state = FilterState::new(budget(1.0, 0.0), 0..3);
        assert_eq!(state.eligible_set(cost(0.6)), (0..3).collect());
        state.charge(1, &[0].into(), cost(0.6)).unwrap();
        assert_eq!(state.eligible_set(cost(0.6)), [1, 2].into());
        let too_much_delta = QueryCost { epsilon_t: 0.0, delta_t: 1e-9 };
        assert!(state.eligible_set(too_much_delta).is_empty());
    }

    #[test]
    fn charging() {
        let mut state = FilterState::new(budget(1.0, 0.0), 0..3);
        state.charge(2, &[0, 1].into(), cost(0.5)).unwrap();
        assert_eq!(state.ledger(0).unwrap().spent_epsilon, 0.5);
        assert_eq!(state.ledger(1).unwrap().spent_epsilon, 0.5);
        assert_eq!(state.ledger(2).unwrap().spent_epsilon, 0.0);

        let before = state.clone();
        state.charge(3, &BTreeSet::new(), cost(0.5)).unwrap();
        assert_eq!(state.log().len(), 2);
        assert!(state.ledgers().eq(before.ledgers()));

        let mut state = FilterState::new(budget(1.0, 0.0), 0..3);
        state.charge(4, &[0].into(), cost(0.6)).unwrap();
        let snapshot = state.clone();
        let err = state.charge(5, &[1, 0].into(), cost(0.6)).unwrap_err();
        assert!(matches!(err, FilterError::InvariantViolation { id: 0, .. }));
        assert_eq!(state, snapshot);
        assert!(matches!(state.charge(6, &[7].into(), cost(0.1)), Err(FilterError::UnknownRecord(7))));
    }

    #[test]
    fn per_query_costs() {
        let c = per_query_cost(MechanismDescriptor::RnmGaussian { sigma: 10.0 }, alpha(32.0)).unwrap();
        assert!((c.epsilon_t - 0.32).abs() < 1e-12);
        assert_eq!(c.delta_t, 0.0);

        let c = per_query_cost(MechanismDescriptor::KsaPtr { sigma: 5.0, delta_i: 1e-6, epsilon_em: 1.0 }, alpha(2.0)).unwrap();
        assert!((c.epsilon_t - 1.04).abs() < 1e-12);
        assert_eq!(c.delta_t, 1e-6);

        let c = per_query_cost(MechanismDescriptor::KsaPtr { sigma: 5.0, delta_i: 1e-6, epsilon_em: 0.0 }, alpha(2.0)).unwrap();
        assert!((c.epsilon_t - 0.04).abs() < 1e-12);

        let nn = per_query_cost(MechanismDescriptor::NearestNeighborDummy { sigma: 10.0 }, alpha(32.0)).unwrap();
        assert!((nn.epsilon_t - 0.32).abs() < 1e-12);

        assert!(per_query_cost(MechanismDescriptor::RnmGaussian { sigma: 0.0 }, alpha(2.0)).is_err());
    }

    #[test]
    fn unknown_descriptor_rejected() {
        let parsed: Result<MechanismDescriptor, _> = serde_json::from_str(r#"{"kind":"laplace","sigma":1.0}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn guarantee_examples() {
        let zero = FilterState::new(BudgetConfig::new(alpha(2.0), 0.0, 0.0, 1e-5).unwrap(), 0..2);
        assert!(zero.report_guarantee().unwrap().epsilon_hat.abs() < 1e-12);

        let b = BudgetConfig::new(alpha(32.0), 0.32, 0.0, 1e-5).unwrap();
        let g = budget_guarantee(&b).unwrap();
        // hand inversion: ε̂ = ε - ln(32·δ̂)/31 + ln(31/32)
        let expected = 0.32 - (32f64.ln() + 1e-5f64.ln()) / 31.0 + (31f64 / 32.0).ln();
        assert!((g.epsilon_hat - expected).abs() < 1e-12);
        assert_eq!(g.delta_hat, 1e-5);

        let doubled = budget_guarantee(&BudgetConfig { epsilon_max: 0.64, ..b }).unwrap();
        assert!(doubled.epsilon_hat > g.epsilon_hat);

        let infeasible = BudgetConfig::new(alpha(2.0), 1.0, 1e-5, 1e-5).unwrap();
        assert!(matches!(budget_guarantee(&infeasible), Err(FilterError::Accounting(AccountingError::Infeasible(_)))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.json");
        let mut state = FilterState::new(budget(1.0, 0.0), 0..4);
        state.charge(7, &[1, 2].into(), cost(0.25)).unwrap();
        state.save_checkpoint(&path).unwrap();
        assert_eq!(FilterState::load_checkpoint(&path).unwrap(), state);
    }
}
