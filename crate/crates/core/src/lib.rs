//! Hierarchical subgroup disparity audits for clinical risk scores.
//!
//! The crate measures how a risk score performs on nested coarse and granular
//! population groups, attaches resampling-based uncertainty to every number,
//! and diagnoses whether disparities come from differing outcome rates,
//! feature prevalence, or feature-outcome relationships.
//!
//! Module map:
//!
//! - [`cohort`]: taxonomy, feature schema, cohort ingestion, filtering, imputation
//! - [`synthgen`]: synthetic cohorts with plantable label, covariate and concept shift
//! - [`riskscores`]: band-table scores and L2 logistic regression
//! - [`metrics`]: AUPRC, AUROC, FPR/FNR, ECE, Spearman
//! - [`resample`]: patient-level splits, bootstrap, percentile CIs, z-tests
//! - [`decompose`]: star tables, within/between variation, correlation diagnostics
//! - [`distshift`]: code enrichment (Fisher exact) and nested likelihood-ratio tests
//! - [`audit`]: end-to-end pipeline with cached stages and figure data

pub mod audit;
pub mod cohort;
pub mod decompose;
pub mod distshift;
mod error;
pub mod metrics;
pub mod resample;
pub mod riskscores;
pub mod rng;
pub mod stats;
pub mod synthgen;

pub use cohort::{Cohort, FeatureSchema, Outcome, Taxonomy};
pub use error::{Error, ErrorKind, Result};
pub use metrics::MetricId;
