//! Uncertainty: patient-level reshuffles, bootstrap draws, percentile
//! intervals, paired z-tests and Bonferroni correction.

mod compare;
mod draws;
mod splits;

pub use compare::{
    bonferroni, compare_all, compare_granular_to_coarse, ComparisonResult, percentile_ci, star_label, stars, PairedTest, MIN_PAIRS,
};
pub use draws::{
    bootstrap_metrics, prevalence_threshold, reshuffle_metrics, DrawKey, DrawKind, DrawSet,
    EvalSpec, GroupKey, GroupLevel, MetricDraws, ScoreModel, ThresholdRule,
};
pub use splits::{make_splits, SplitPlan};
