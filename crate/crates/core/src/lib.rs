//! Differentially private in-context learning over a retrieved corpus.
//!
//! Demonstrations are chosen by nearest-neighbor retrieval, gated by an
//! individual Rényi-DP filter so no record exceeds its budget, split into
//! disjoint shards and aggregated with noisy mechanisms: Gaussian
//! report-noisy-max for labels, and keyword selection with
//! propose-test-release for free-form answers.

pub mod llm_client;
pub mod mechanisms;
pub mod metrics;
pub mod pipeline;
pub mod privacy_core;
pub mod privacy_filter;
pub mod retrieval;
pub mod synthetic;

pub use pipeline::{run_experiment, Experiment, ExperimentReport, PipelineError, RunConfig};
pub use privacy_core::{ApproxRdp, DpGuarantee, RenyiOrder};
pub use privacy_filter::{BudgetConfig, FilterState};
pub use retrieval::{FlatIndex, QueryRecord};
