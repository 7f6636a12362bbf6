//! Editing metrics, Welch's t-test, exhaustive layer sweeps, the
//! proxy/test protocol, runtime comparison and report emission.

mod compare;
mod metrics;
mod runtime;
pub mod stats;
mod sweep;

pub use compare::{comparison_csv, evaluate_at_layer, ComparisonRow, COMPARISON_HEADER};
pub use metrics::{evaluate_edit, evaluate_with, fluency_score, Baseline, MetricVector, MetricWeights, FLUENCY_TOKENS};
pub use runtime::{runtime_benchmark, RuntimeRecord};
pub use stats::{t_test, TTestRecord, ALPHA};
pub use sweep::{
    aggregate_metrics, baselines, heatmap_csv, layer_sweep, proxy_generalization, proxy_generalization_from, Outcome,
    OutcomeMatrix, ProxyReport, SelectionMetric, Sweep, SweepOptions, SweepReport, OUTCOME_HEADER,
};
