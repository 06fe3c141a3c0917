//! Stability of held-out predictions as the training set shrinks

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, TrainConfig};
use crate::cohort::{apply_imputer, fit_imputer, Cohort, Outcome};
use crate::error::{Error, Result};
use crate::metrics::spearman;
use crate::rng::{rng_for, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcordancePoint {
    pub fraction: f64,
    pub train_patients: usize,
    pub spearman: f64,
}

/// Patients are shuffled once; the last `1 - reference` share is held out,
/// and a model trained on the first `fraction` share is compared with the
/// model trained on the first `reference` share by the Spearman correlation
/// of their held-out predictions.
pub fn prediction_concordance(
    cohort: &Cohort,
    fractions: &[f64],
    reference: f64,
    outcome: Outcome,
    config: &TrainConfig,
) -> Result<Vec<ConcordancePoint>> {
    if !(reference > 0.0 && reference < 1.0) {
        return Err(Error::Config(format!("reference fraction {reference} not in (0, 1)")));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= reference)) {
        return Err(Error::Config(format!("fraction {f} not in (0, {reference}]")));
    }
    let mut patients: Vec<usize> = cohort.patient_indices().to_vec();
    patients.sort_unstable();
    patients.dedup();
    patients.shuffle(&mut rng_for(config.seed, streams::CONCORDANCE, 0));
    let n = patients.len();
    let mut order = vec![usize::MAX; cohort.n_patients()];
    for (k, &p) in patients.iter().enumerate() {
        order[p] = k;
    }
    let n_ref = ((reference * n as f64).round() as usize).clamp(1, n - 1);
    let held_out: Vec<usize> = (0..cohort.len())
        .filter(|&r| order[cohort.patient_of(r)] >= n_ref)
        .collect();

    let predictions = |k: usize| -> Result<Vec<f64>> {
        let mask: Vec<bool> = (0..cohort.len())
            .map(|r| order[cohort.patient_of(r)] < k)
            .collect();
        let rows: Vec<usize> = (0..cohort.len()).filter(|&r| mask[r]).collect();
        let state = fit_imputer(cohort, &mask, cohort.schema())?;
        let imputed = apply_imputer(cohort, &state)?;
        let model = fit_logistic(&imputed, &rows, outcome, config)?;
        model.predict(&imputed, &held_out)
    };

    let reference_pred = predictions(n_ref)?;
    fractions
        .iter()
        .map(|&f| {
            let k = ((f * n as f64).round() as usize).clamp(1, n_ref);
            let pred = if k == n_ref { reference_pred.clone() } else { predictions(k)? };
            Ok(ConcordancePoint {
                fraction: f,
                train_patients: k,
                spearman: spearman(&pred, &reference_pred)?.rho,
            })
        })
        .collect()
}
