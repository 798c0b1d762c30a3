//! Path metrics, attack evaluation reports, and the factor table.

mod metrics;
mod report;

pub use metrics::{
    dtw, entropy, heading_bin, heading_entropy, ndtw, ndtw_with, object_mentioned, oracle_success,
    success, synonyms, SUCCESS_DISTANCE,
};
pub use report::{
    competence, evaluate_instance, export_factors, factor_rows, instance_factors, read_factor_rows,
    write_factor_rows, Competence, EpisodeMetrics, FactorRow, InstanceFactors, MetricsReport, Reference,
    COMPETENCE_MIN_NDTW, COMPETENCE_MIN_SR_PCT, FACTOR_HEADER,
};
