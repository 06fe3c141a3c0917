//! Cohort data model: taxonomy, feature schema, ingestion, filtering and
//! train-only median imputation.

mod impute;
mod io;
mod schema;
mod taxonomy;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use impute::{apply_imputer, fit_imputer, ImputationState};
pub use io::{load_cohort, write_cohort};
pub use schema::{
    interaction_screen_features, FeatureCategory, FeatureKind, FeatureSchema, FeatureSpec,
    AGE_FEATURE, CHARLSON, CHIEF_COMPLAINTS, ELIXHAUSER, SEVERITY_FEATURE,
};
pub use taxonomy::{Taxonomy, STANDARD_GROUPS};
pub(crate) use taxonomy::csv_error;

use crate::error::{Error, Result};

/// Binary outcomes recorded for every visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Hospitalization,
    Critical,
    Revisit,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Hospitalization, Outcome::Critical, Outcome::Revisit];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column name in the cohort file.
    pub fn column(self) -> &'static str {
        match self {
            Outcome::Hospitalization => "y_hosp",
            Outcome::Critical => "y_crit",
            Outcome::Revisit => "y_revisit",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Hospitalization => "hospitalization",
            Outcome::Critical => "critical",
            Outcome::Revisit => "revisit",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.as_str() == s || o.column() == s)
            .ok_or_else(|| Error::Config(format!("unknown outcome {s:?}")))
    }
}

/// One row per emergency visit. Features are stored row-major with `NaN`
/// marking a missing value.
#[derive(Debug, Clone)]
pub struct Cohort {
    schema: Arc<FeatureSchema>,
    taxonomy: Arc<Taxonomy>,
    patient_ids: Vec<String>,
    visit_ids: Vec<String>,
    patient_index: Vec<usize>,
    n_patients: usize,
    granular: Vec<usize>,
    features: Vec<f64>,
    outcomes: [Vec<u8>; 3],
}

impl PartialEq for Cohort {
    /// Field-level equality; `NaN` feature markers compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.taxonomy == other.taxonomy
            && self.patient_ids == other.patient_ids
            && self.visit_ids == other.visit_ids
            && self.granular == other.granular
            && self.outcomes == other.outcomes
            && self.features.len() == other.features.len()
            && self
                .features
                .iter()
                .zip(&other.features)
                .all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

/// Incremental, validating cohort constructor.
#[derive(Debug)]
pub struct CohortBuilder {
    schema: Arc<FeatureSchema>,
    taxonomy: Arc<Taxonomy>,
    patient_ids: Vec<String>,
    visit_ids: Vec<String>,
    patient_index: Vec<usize>,
    granular: Vec<usize>,
    features: Vec<f64>,
    outcomes: [Vec<u8>; 3],
    patients: HashMap<String, (usize, usize)>,
    visits: HashSet<(usize, String)>,
}

impl CohortBuilder {
    pub fn new(schema: Arc<FeatureSchema>, taxonomy: Arc<Taxonomy>) -> Self {
        Self {
            schema,
            taxonomy,
            patient_ids: Vec::new(),
            visit_ids: Vec::new(),
            patient_index: Vec::new(),
            granular: Vec::new(),
            features: Vec::new(),
            outcomes: Default::default(),
            patients: HashMap::new(),
            visits: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.granular.len()
    }

    pub fn is_empty(&self) -> bool {
        self.granular.is_empty()
    }

    /// Appends a row. Errors report `line = row number + 2`, the file line of
    /// the row under a one-line header.
    pub fn push(
        &mut self,
        patient: &str,
        visit: &str,
        granular: usize,
        features: &[f64],
        outcomes: [u8; 3],
    ) -> Result<()> {
        let line = self.len() + 2;
        if granular >= self.taxonomy.n_granular() {
            return Err(Error::UnknownGroup {
                line,
                id: granular.to_string(),
            });
        }
        if features.len() != self.schema.len() {
            return Err(Error::Parse {
                line,
                message: format!(
                    "expected {} feature values, got {}",
                    self.schema.len(),
                    features.len()
                ),
            });
        }
        if outcomes.iter().any(|&y| y > 1) {
            return Err(Error::Parse {
                line,
                message: "outcomes must be 0 or 1".into(),
            });
        }
        let next = self.patients.len();
        let (pidx, pgroup) = *self
            .patients
            .entry(patient.to_string())
            .or_insert((next, granular));
        if pgroup != granular {
            return Err(Error::InconsistentGroup {
                patient: patient.to_string(),
                first: self.taxonomy.granular_names()[pgroup].clone(),
                second: self.taxonomy.granular_names()[granular].clone(),
            });
        }
        if !self.visits.insert((pidx, visit.to_string())) {
            return Err(Error::DuplicateVisit {
                line,
                patient: patient.to_string(),
                visit: visit.to_string(),
            });
        }
        self.patient_ids.push(patient.to_string());
        self.visit_ids.push(visit.to_string());
        self.patient_index.push(pidx);
        self.granular.push(granular);
        self.features.extend_from_slice(features);
        for (o, &y) in outcomes.iter().enumerate() {
            self.outcomes[o].push(y);
        }
        Ok(())
    }

    pub fn build(self) -> Cohort {
        Cohort {
            n_patients: self.patients.len(),
            schema: self.schema,
            taxonomy: self.taxonomy,
            patient_ids: self.patient_ids,
            visit_ids: self.visit_ids,
            patient_index: self.patient_index,
            granular: self.granular,
            features: self.features,
            outcomes: self.outcomes,
        }
    }
}

impl Cohort {
    pub fn builder(schema: Arc<FeatureSchema>, taxonomy: Arc<Taxonomy>) -> CohortBuilder {
        CohortBuilder::new(schema, taxonomy)
    }

    pub fn empty(schema: Arc<FeatureSchema>, taxonomy: Arc<Taxonomy>) -> Self {
        CohortBuilder::new(schema, taxonomy).build()
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn taxonomy_arc(&self) -> &Arc<Taxonomy> {
        &self.taxonomy
    }

    pub fn len(&self) -> usize {
        self.granular.len()
    }

    pub fn is_empty(&self) -> bool {
        self.granular.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn n_patients(&self) -> usize {
        self.n_patients
    }

    pub fn patient_id(&self, row: usize) -> &str {
        &self.patient_ids[row]
    }

    pub fn visit_id(&self, row: usize) -> &str {
        &self.visit_ids[row]
    }

    /// Dense patient index in `0..n_patients`, ordered by first appearance.
    pub fn patient_of(&self, row: usize) -> usize {
        self.patient_index[row]
    }

    pub fn patient_indices(&self) -> &[usize] {
        &self.patient_index
    }

    pub fn granular_of(&self, row: usize) -> usize {
        self.granular[row]
    }

    pub fn granular_groups(&self) -> &[usize] {
        &self.granular
    }

    pub fn coarse_of(&self, row: usize) -> usize {
        self.taxonomy.coarse_of(self.granular[row])
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let p = self.schema.len();
        &self.features[row * p..(row + 1) * p]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.features[row * self.schema.len() + feature]
    }

    pub fn feature_matrix(&self) -> &[f64] {
        &self.features
    }

    pub fn outcome(&self, outcome: Outcome) -> &[u8] {
        &self.outcomes[outcome.index()]
    }

    pub fn outcome_row(&self, row: usize) -> [u8; 3] {
        [self.outcomes[0][row], self.outcomes[1][row], self.outcomes[2][row]]
    }

    /// Age in years, when the schema carries an age feature and it is present.
    pub fn age(&self, row: usize) -> Option<f64> {
        let j = self.schema.age_index()?;
        let v = self.value(row, j);
        (!v.is_nan()).then_some(v)
    }

    pub fn severity(&self, row: usize) -> Option<f64> {
        let j = self.schema.severity_index()?;
        let v = self.value(row, j);
        (!v.is_nan()).then_some(v)
    }

    /// Rows whose granular group nests in `coarse`.
    pub fn rows_in_coarse(&self, coarse: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.coarse_of(i) == coarse)
            .collect()
    }

    pub fn rows_in_granular(&self, granular: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.granular[i] == granular)
            .collect()
    }

    /// New cohort holding `rows` in the given order.
    pub fn subset(&self, rows: &[usize]) -> Cohort {
        let mut b = CohortBuilder::new(self.schema.clone(), self.taxonomy.clone());
        for &i in rows {
            b.push(
                &self.patient_ids[i],
                &self.visit_ids[i],
                self.granular[i],
                self.row(i),
                self.outcome_row(i),
            )
            .expect("rows of a valid cohort stay valid");
        }
        b.build()
    }

    /// Same rows with a replaced feature matrix.
    pub(crate) fn with_features(&self, features: Vec<f64>) -> Cohort {
        debug_assert_eq!(features.len(), self.features.len());
        Cohort {
            features,
            ..self.clone()
        }
    }
}

/// Rows that pass the adult and recorded-severity rules.
pub fn retained_rows(c: &Cohort) -> Vec<usize> {
    let age = c.schema().age_index();
    let sev = c.schema().severity_index();
    (0..c.len())
        .filter(|&i| {
            let adult = age.is_none_or(|j| c.value(i, j) >= 18.0);
            let severity = sev.is_none_or(|j| !c.value(i, j).is_nan());
            adult && severity
        })
        .collect()
}

/// Drops visits by patients younger than 18 or without a triage severity.
/// A missing age is treated as failing the adult rule.
pub fn filter_cohort(c: &Cohort) -> Cohort {
    let keep = retained_rows(c);
    if keep.len() == c.len() {
        return c.clone();
    }
    c.subset(&keep)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub granular: String,
    pub coarse: String,
    pub patients: usize,
    pub visits: usize,
}

/// Distinct patients and visits per granular group, in taxonomy order;
/// groups without rows are omitted.
pub fn group_counts(c: &Cohort) -> Vec<GroupCount> {
    let t = c.taxonomy();
    let mut visits = vec![0usize; t.n_granular()];
    let mut patients: Vec<HashSet<usize>> = vec![HashSet::new(); t.n_granular()];
    for i in 0..c.len() {
        let g = c.granular_of(i);
        visits[g] += 1;
        patients[g].insert(c.patient_of(i));
    }
    (0..t.n_granular())
        .filter(|&g| visits[g] > 0)
        .map(|g| GroupCount {
            granular: t.granular_names()[g].clone(),
            coarse: t.coarse_names()[t.coarse_of(g)].clone(),
            patients: patients[g].len(),
            visits: visits[g],
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn tiny_schema() -> Arc<FeatureSchema> {
        use FeatureCategory::*;
        Arc::new(
            FeatureSchema::new(vec![
                FeatureSpec::continuous("age", Demographic, 18.0, 103.0),
                FeatureSpec::binary("gender", Demographic),
                FeatureSpec::continuous("triage_heartrate", Triage, 1.0, 256.0),
                FeatureSpec::continuous("triage_acuity", Triage, 1.0, 5.0),
            ])
            .unwrap(),
        )
    }

    pub fn tiny_taxonomy() -> Arc<Taxonomy> {
        Arc::new(Taxonomy::from_pairs([("A*", "A"), ("A1", "A"), ("B*", "B"), ("B1", "B")]).unwrap())
    }

    fn cohort_from(rows: &[(&str, &str, usize, [f64; 4])]) -> Cohort {
        let mut b = Cohort::builder(tiny_schema(), tiny_taxonomy());
        for (p, v, g, f) in rows {
            b.push(p, v, *g, f, [0, 0, 0]).unwrap();
        }
        b.build()
    }

    #[test]
    fn filter_keeps_adults_with_severity() {
        let c = cohort_from(&[
            ("p1", "v1", 0, [40.0, 1.0, 80.0, 3.0]),
            ("p2", "v2", 1, [40.0, 0.0, 80.0, 2.0]),
        ]);
        assert_eq!(filter_cohort(&c), c);

        let c = cohort_from(&[
            ("p1", "v1", 0, [40.0, 1.0, 80.0, 3.0]),
            ("p2", "v2", 1, [17.0, 0.0, 80.0, 2.0]),
            ("p3", "v3", 2, [50.0, 0.0, 80.0, f64::NAN]),
        ]);
        let f = filter_cohort(&c);
        assert_eq!(f.len(), 1);
        assert_eq!(f.patient_id(0), "p1");
        assert_eq!(filter_cohort(&f), f);
    }

    #[test]
    fn counts_distinct_patients() {
        let c = cohort_from(&[
            ("p1", "v1", 1, [40.0, 1.0, 80.0, 3.0]),
            ("p1", "v2", 1, [41.0, 1.0, 82.0, 3.0]),
        ]);
        let counts = group_counts(&c);
        assert_eq!(counts.len(), 1);
        assert_eq!((counts[0].patients, counts[0].visits), (1, 2));
        assert_eq!(counts[0].granular, "A1");
        assert_eq!(counts[0].coarse, "A");

        let empty = Cohort::empty(tiny_schema(), tiny_taxonomy());
        assert!(group_counts(&empty).is_empty());
    }

    #[test]
    fn builder_rejects_inconsistent_and_duplicate() {
        let mut b = Cohort::builder(tiny_schema(), tiny_taxonomy());
        b.push("p1", "v1", 0, &[40.0, 1.0, 80.0, 3.0], [0, 0, 0]).unwrap();
        let e = b.push("p1", "v2", 1, &[40.0, 1.0, 80.0, 3.0], [0, 0, 0]);
        assert!(matches!(e, Err(Error::InconsistentGroup { .. })));
        let e = b.push("p1", "v1", 0, &[40.0, 1.0, 80.0, 3.0], [0, 0, 0]);
        assert!(matches!(e, Err(Error::DuplicateVisit { .. })));
    }

    #[test]
    fn partition_property() {
        let c = cohort_from(&[
            ("p1", "v1", 0, [40.0, 1.0, 80.0, 3.0]),
            ("p2", "v2", 1, [40.0, 1.0, 80.0, 3.0]),
            ("p3", "v3", 2, [40.0, 1.0, 80.0, 3.0]),
            ("p4", "v4", 1, [40.0, 1.0, 80.0, 3.0]),
        ]);
        let t = c.taxonomy();
        for k in 0..t.n_coarse() {
            let mut union: Vec<usize> = t
                .members(k)
                .into_iter()
                .flat_map(|g| c.rows_in_granular(g))
                .collect();
            union.sort();
            assert_eq!(union, c.rows_in_coarse(k));
        }
    }
}
