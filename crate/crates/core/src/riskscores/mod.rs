//! Risk scores: additive band tables and L2-regularised logistic regression.

mod band;
mod concordance;
mod logistic;
pub mod newton;

pub use band::{BandScore, FeatureBands};
pub use concordance::{prediction_concordance, ConcordancePoint};
pub use logistic::{
    cross_validate, fit_logistic, patient_folds, CvResult, LogisticModel, SelectionMetric,
    TrainConfig, TrainingSet,
};

#[cfg(test)]
mod tests;
