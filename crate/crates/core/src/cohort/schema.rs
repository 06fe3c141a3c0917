use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::taxonomy::csv_error;
use crate::error::{Error, Result};

/// Name of the feature holding patient age in years.
pub const AGE_FEATURE: &str = "age";
/// Name of the feature holding the nurse-assigned triage severity.
pub const SEVERITY_FEATURE: &str = "triage_acuity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureCategory {
    Demographic,
    VisitFrequency,
    Triage,
    ChiefComplaint,
    Comorbidity,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Continuous => "continuous",
            FeatureKind::Binary => "binary",
        }
    }
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(FeatureKind::Continuous),
            "binary" => Ok(FeatureKind::Binary),
            other => Err(Error::Schema(format!("unknown feature kind {other:?}"))),
        }
    }
}

impl FeatureCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureCategory::Demographic => "demographic",
            FeatureCategory::VisitFrequency => "visit-frequency",
            FeatureCategory::Triage => "triage",
            FeatureCategory::ChiefComplaint => "chief-complaint",
            FeatureCategory::Comorbidity => "comorbidity",
        }
    }
}

impl FromStr for FeatureCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "demographic" => FeatureCategory::Demographic,
            "visit-frequency" => FeatureCategory::VisitFrequency,
            "triage" => FeatureCategory::Triage,
            "chief-complaint" => FeatureCategory::ChiefComplaint,
            "comorbidity" => FeatureCategory::Comorbidity,
            other => return Err(Error::Schema(format!("unknown feature category {other:?}"))),
        })
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub category: FeatureCategory,
    /// Closed valid range in native units; `None` for binary features.
    pub range: Option<(f64, f64)>,
}

impl FeatureSpec {
    pub fn continuous(name: &str, category: FeatureCategory, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Continuous,
            category,
            range: Some((min, max)),
        }
    }

    pub fn binary(name: &str, category: FeatureCategory) -> Self {
        Self {
            name: name.to_string(),
            kind: FeatureKind::Binary,
            category,
            range: None,
        }
    }

    pub fn is_continuous(&self) -> bool {
        self.kind == FeatureKind::Continuous
    }

    /// Whether `value` is present and inside the valid range.
    pub fn is_valid(&self, value: f64) -> bool {
        if value.is_nan() {
            return false;
        }
        match self.range {
            Some((lo, hi)) => value >= lo && value <= hi,
            None => value == 0.0 || value == 1.0,
        }
    }
}

/// Ordered feature descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
}

#[derive(Debug, Deserialize)]
struct SchemaRow {
    name: String,
    kind: String,
    category: String,
    min: Option<f64>,
    max: Option<f64>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        for (i, f) in features.iter().enumerate() {
            if f.name.is_empty() {
                return Err(Error::Schema("empty feature name".into()));
            }
            if features[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Schema(format!("duplicate feature {:?}", f.name)));
            }
            match (f.kind, f.range) {
                (FeatureKind::Continuous, Some((lo, hi))) if lo < hi => {}
                (FeatureKind::Continuous, _) => {
                    return Err(Error::Schema(format!(
                        "continuous feature {:?} needs a range with min < max",
                        f.name
                    )))
                }
                (FeatureKind::Binary, None) => {}
                (FeatureKind::Binary, Some(_)) => {
                    return Err(Error::Schema(format!(
                        "binary feature {:?} must not carry a range",
                        f.name
                    )))
                }
            }
        }
        Ok(Self { features })
    }

    /// Like [`FeatureSchema::new`] but also checks the feature count.
    pub fn with_count(features: Vec<FeatureSpec>, expected: usize) -> Result<Self> {
        if features.len() != expected {
            return Err(Error::Schema(format!(
                "expected {expected} features, got {}",
                features.len()
            )));
        }
        Self::new(features)
    }

    /// Reads a `name,kind,category,min,max` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut features = Vec::new();
        for (i, row) in reader.deserialize::<SchemaRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let kind: FeatureKind = row.kind.parse()?;
            let category: FeatureCategory = row.category.parse()?;
            let range = match (kind, row.min, row.max) {
                (FeatureKind::Binary, None, None) => None,
                (FeatureKind::Continuous, Some(lo), Some(hi)) => Some((lo, hi)),
                _ => {
                    return Err(Error::Parse {
                        line,
                        message: format!("bad range for feature {:?}", row.name),
                    })
                }
            };
            features.push(FeatureSpec {
                name: row.name,
                kind,
                category,
                range,
            });
        }
        Self::new(features)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e: csv::Error| csv_error(path, e);
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["name", "kind", "category", "min", "max"]).map_err(io)?;
        for f in &self.features {
            let (lo, hi) = match f.range {
                Some((lo, hi)) => (lo.to_string(), hi.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                f.name.as_str(),
                f.kind.as_str(),
                f.category.as_str(),
                lo.as_str(),
                hi.as_str(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn get(&self, i: usize) -> &FeatureSpec {
        &self.features[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn age_index(&self) -> Option<usize> {
        self.index_of(AGE_FEATURE)
    }

    pub fn severity_index(&self) -> Option<usize> {
        self.index_of(SEVERITY_FEATURE)
    }

    /// Sub-schema with the named features, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let features = names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .map(|i| self.features[i].clone())
                    .ok_or_else(|| Error::Schema(format!("unknown feature {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(features)
    }

    /// The 64 triage-time features with their valid ranges.
    pub fn standard() -> Self {
        use FeatureCategory::*;
        let c = FeatureSpec::continuous;
        let b = FeatureSpec::binary;
        let mut f = vec![
            c("age", Demographic, 18.0, 103.0),
            b("gender", Demographic),
            c("n_ed_30d", VisitFrequency, 0.0, 20.0),
            c("n_ed_90d", VisitFrequency, 0.0, 41.0),
            c("n_ed_365d", VisitFrequency, 0.0, 112.0),
            c("n_hosp_30d", VisitFrequency, 0.0, 15.0),
            c("n_hosp_90d", VisitFrequency, 0.0, 30.0),
            c("n_hosp_365d", VisitFrequency, 0.0, 70.0),
            c("n_icu_30d", VisitFrequency, 0.0, 4.0),
            c("n_icu_90d", VisitFrequency, 0.0, 7.0),
            c("n_icu_365d", VisitFrequency, 0.0, 14.0),
            c("triage_temperature", Triage, 26.0, 44.11),
            c("triage_heartrate", Triage, 1.0, 256.0),
            c("triage_resprate", Triage, 0.0, 209.0),
            c("triage_o2sat", Triage, 0.0, 100.0),
            c("triage_sbp", Triage, 1.0, 312.0),
            c("triage_dbp", Triage, 0.0, 375.0),
            c("triage_pain", Triage, 0.0, 10.0),
            c("triage_acuity", Triage, 1.0, 5.0),
        ];
        for name in CHIEF_COMPLAINTS {
            f.push(b(name, ChiefComplaint));
        }
        for name in CHARLSON.iter().chain(ELIXHAUSER.iter()) {
            f.push(b(name, Comorbidity));
        }
        Self::with_count(f, 64).expect("built-in schema is valid")
    }
}

pub const CHIEF_COMPLAINTS: [&str; 10] = [
    "chiefcom_chest_pain",
    "chiefcom_abdominal_pain",
    "chiefcom_headache",
    "chiefcom_shortness_of_breath",
    "chiefcom_back_pain",
    "chiefcom_cough",
    "chiefcom_nausea_vomiting",
    "chiefcom_fever_chills",
    "chiefcom_syncope",
    "chiefcom_dizziness",
];

pub const CHARLSON: [&str; 17] = [
    "cci_MI",
    "cci_CHF",
    "cci_PVD",
    "cci_Stroke",
    "cci_Dementia",
    "cci_Pulmonary",
    "cci_Rheumatic",
    "cci_PUD",
    "cci_Liver1",
    "cci_DM1",
    "cci_DM2",
    "cci_Paralysis",
    "cci_Renal",
    "cci_Cancer1",
    "cci_Liver2",
    "cci_Cancer2",
    "cci_HIV",
];

pub const ELIXHAUSER: [&str; 18] = [
    "eci_Arrhythmia",
    "eci_Valvular",
    "eci_PHTN",
    "eci_HTN1",
    "eci_HTN2",
    "eci_NeuroOther",
    "eci_Hypothyroid",
    "eci_Lymphoma",
    "eci_Coagulopathy",
    "eci_Obesity",
    "eci_WeightLoss",
    "eci_FluidsLytes",
    "eci_BloodLoss",
    "eci_Anemia",
    "eci_Alcohol",
    "eci_Drugs",
    "eci_Psychoses",
    "eci_Depression",
];

/// The thirty features screened one at a time for granular interactions.
pub fn interaction_screen_features() -> Vec<&'static str> {
    let mut v = vec![
        "age",
        "gender",
        "n_hosp_365d",
        "n_ed_365d",
        "triage_temperature",
        "triage_heartrate",
        "triage_resprate",
        "triage_o2sat",
        "triage_sbp",
        "triage_dbp",
        "triage_pain",
        "triage_acuity",
    ];
    v.extend(ELIXHAUSER);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_schema() {
        let s = FeatureSchema::standard();
        assert_eq!(s.len(), 64);
        let t = &s.features()[s.index_of("triage_temperature").unwrap()];
        assert_eq!(t.range, Some((26.0, 44.11)));
        assert_eq!(interaction_screen_features().len(), 30);
        for n in interaction_screen_features() {
            assert!(s.index_of(n).is_some(), "{n}");
        }
    }

    #[test]
    fn rejects_bad_ranges_and_duplicates() {
        use FeatureCategory::Triage;
        assert!(FeatureSchema::new(vec![FeatureSpec::continuous("x", Triage, 1.0, 1.0)]).is_err());
        assert!(FeatureSchema::new(vec![
            FeatureSpec::binary("x", Triage),
            FeatureSpec::binary("x", Triage)
        ])
        .is_err());
        assert!(FeatureSchema::with_count(vec![FeatureSpec::binary("x", Triage)], 64).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schema.csv");
        let s = FeatureSchema::standard();
        s.save(&p).unwrap();
        assert_eq!(FeatureSchema::load(&p).unwrap(), s);
    }
}
