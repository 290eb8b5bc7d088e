//! Plasticity diagnostics: effective and stable rank of features and
//! weights, active/dead unit fractions, weight magnitude, AAT, and the report
//! that collects them per task.

mod activity;
mod rank;
mod report;

pub use activity::{active_fraction, fau, UnitActivity, MIN_PROBE_BATCH};
pub use rank::{
    erank, rank_metrics_from_spectrum, rank_of_features, rank_of_matrix, rank_of_weights,
    rank_per_head, srank, RankEstimate, RankMetrics,
};
pub use report::{
    aat, delta_heatmap, ols_slope, series_table, ClsPoint, Heatmap, MetricRow, PlasticityReport,
    TaskRecord, WeightMetrics,
};
