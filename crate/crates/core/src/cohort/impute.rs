use serde::{Deserialize, Serialize};

use super::{Cohort, FeatureSchema};
use crate::error::{Error, Result};
use crate::stats::median;

/// Per-feature medians fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationState {
    feature_names: Vec<String>,
    /// `None` for binary features.
    medians: Vec<Option<f64>>,
    /// Training values discarded for lying outside the valid range.
    pub invalid_removed: Vec<usize>,
    /// Training values that were missing.
    pub missing: Vec<usize>,
}

impl ImputationState {
    pub fn median(&self, feature: usize) -> Option<f64> {
        self.medians[feature]
    }

    pub fn medians(&self) -> &[Option<f64>] {
        &self.medians
    }
}

/// Fits per-feature medians over the training rows selected by `train_mask`,
/// after discarding missing and out-of-range values.
pub fn fit_imputer(c: &Cohort, train_mask: &[bool], schema: &FeatureSchema) -> Result<ImputationState> {
    if c.schema() != schema {
        return Err(Error::Schema("cohort schema differs from the imputation schema".into()));
    }
    if train_mask.len() != c.len() {
        return Err(Error::InvalidInput(format!(
            "train mask has {} entries for {} rows",
            train_mask.len(),
            c.len()
        )));
    }
    let p = schema.len();
    let mut medians = vec![None; p];
    let mut invalid_removed = vec![0; p];
    let mut missing = vec![0; p];
    let mut buf = Vec::new();
    for (j, spec) in schema.features().iter().enumerate() {
        if !spec.is_continuous() {
            continue;
        }
        buf.clear();
        for i in (0..c.len()).filter(|&i| train_mask[i]) {
            let v = c.value(i, j);
            if v.is_nan() {
                missing[j] += 1;
            } else if spec.is_valid(v) {
                buf.push(v);
            } else {
                invalid_removed[j] += 1;
            }
        }
        if buf.is_empty() {
            return Err(Error::NoValidValues(spec.name.clone()));
        }
        medians[j] = Some(median(&buf));
    }
    Ok(ImputationState {
        feature_names: schema.names().map(str::to_string).collect(),
        medians,
        invalid_removed,
        missing,
    })
}

/// Replaces missing or out-of-range continuous values by the stored medians.
/// Binary features pass through unchanged.
pub fn apply_imputer(c: &Cohort, state: &ImputationState) -> Result<Cohort> {
    if !c.schema().names().eq(state.feature_names.iter().map(String::as_str)) {
        return Err(Error::Schema("imputation state fitted on a different schema".into()));
    }
    let p = c.n_features();
    let mut features = c.feature_matrix().to_vec();
    for (j, spec) in c.schema().features().iter().enumerate() {
        let Some(m) = state.medians[j] else { continue };
        for row in features.chunks_exact_mut(p) {
            if !spec.is_valid(row[j]) {
                row[j] = m;
            }
        }
    }
    Ok(c.with_features(features))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::{FeatureCategory, FeatureSpec, Taxonomy};
    use super::*;

    fn single_feature(values: &[f64]) -> Cohort {
        let schema = Arc::new(
            FeatureSchema::new(vec![FeatureSpec::continuous(
                "x",
                FeatureCategory::Triage,
                0.0,
                10.0,
            )])
            .unwrap(),
        );
        let tax = Arc::new(Taxonomy::from_pairs([("A*", "A")]).unwrap());
        let mut b = Cohort::builder(schema, tax);
        for (i, v) in values.iter().enumerate() {
            b.push(&format!("p{i}"), "v", 0, &[*v], [0, 0, 0]).unwrap();
        }
        b.build()
    }

    #[test]
    fn median_of_train_rows() {
        let c = single_feature(&[1.0, 2.0, 3.0]);
        let s = fit_imputer(&c, &[true; 3], c.schema()).unwrap();
        assert_eq!(s.median(0), Some(2.0));
    }

    #[test]
    fn out_of_range_values_are_discarded() {
        let c = single_feature(&[1.0, 2.0, 999.0]);
        let s = fit_imputer(&c, &[true; 3], c.schema()).unwrap();
        assert_eq!(s.median(0), Some(1.5));
        assert_eq!(s.invalid_removed[0], 1);
    }

    #[test]
    fn only_train_rows_count() {
        let c = single_feature(&[1.0, 9.0, 9.0]);
        let s = fit_imputer(&c, &[true, false, false], c.schema()).unwrap();
        assert_eq!(s.median(0), Some(1.0));
    }

    #[test]
    fn no_valid_values_is_an_error() {
        let c = single_feature(&[f64::NAN, 50.0]);
        assert!(matches!(
            fit_imputer(&c, &[true, true], c.schema()),
            Err(Error::NoValidValues(_))
        ));
    }

    #[test]
    fn apply_replaces_missing_and_is_idempotent() {
        let c = single_feature(&[1.0, f64::NAN, 3.0, 11.0]);
        let s = fit_imputer(&c, &[true; 4], c.schema()).unwrap();
        let once = apply_imputer(&c, &s).unwrap();
        assert_eq!(once.value(1, 0), 2.0);
        assert_eq!(once.value(3, 0), 2.0);
        assert_eq!(once.value(0, 0), 1.0);
        assert_eq!(apply_imputer(&once, &s).unwrap(), once);

        let clean = single_feature(&[1.0, 2.0]);
        assert_eq!(apply_imputer(&clean, &s).unwrap(), clean);
    }
}
