//! Why disparities arise: code enrichment for `p(X)` and nested
//! likelihood-ratio tests for `p(y | X)`.

mod enrichment;
mod fisher;
mod nested;

pub use enrichment::{
    enrichment_scan, CodeMatrix, EnrichmentConfig, EnrichmentResult, EnrichmentScan, EnrichmentUnit,
};
pub use fisher::{fisher_exact, hypergeom_ln_pmf, Table2x2};
pub use nested::{
    default_scan_features, fit_nested_regressions, group_interaction_test, lr_test,
    per_feature_interaction_scan, LrTestResult, ModelPair, NestedConfig, NestedFit, NEGATIVE_TOLERANCE,
};

#[cfg(test)]
mod tests;
