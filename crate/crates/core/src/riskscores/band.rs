//! Additive band-table scores (NEWS, CART and relatives)

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, FeatureSchema};
use crate::error::{Error, Result};

const NEWS_TOML: &str = include_str!("../../configs/news.toml");
const CART_TOML: &str = include_str!("../../configs/cart.toml");

/// Points for one feature. Band `k` is `[edges[k], edges[k+1])`; the last
/// band also includes its upper edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBands {
    pub feature: String,
    pub edges: Vec<f64>,
    pub points: Vec<i64>,
}

impl FeatureBands {
    pub fn band_of(&self, value: f64) -> Option<usize> {
        let last = *self.edges.last()?;
        if value.is_nan() || value < self.edges[0] || value > last {
            return None;
        }
        if value == last {
            return Some(self.points.len() - 1);
        }
        // edges[k] <= value < edges[k+1]
        Some(self.edges.partition_point(|&e| e <= value) - 1)
    }

    pub fn points_for(&self, value: f64) -> Option<i64> {
        self.band_of(value).map(|k| self.points[k])
    }

    fn check_shape(&self) -> Result<()> {
        if self.edges.len() < 2 || self.points.len() != self.edges.len() - 1 {
            return Err(Error::Config(format!(
                "feature {}: {} edges need {} points, got {}",
                self.feature,
                self.edges.len(),
                self.edges.len().saturating_sub(1),
                self.points.len()
            )));
        }
        if self.edges.iter().any(|e| !e.is_finite()) || self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "feature {}: band edges must be finite and strictly increasing",
                self.feature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandScore {
    pub name: String,
    pub bands: Vec<FeatureBands>,
}

impl BandScore {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let score: BandScore =
            toml::from_str(text).map_err(|e| Error::Config(format!("band score: {e}")))?;
        for b in &score.bands {
            b.check_shape()?;
        }
        let mut names: Vec<&str> = score.bands.iter().map(|b| b.feature.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("band score {} lists a feature twice", score.name)));
        }
        Ok(score)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("band score serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn news() -> Self {
        Self::from_toml_str(NEWS_TOML).expect("shipped NEWS table is valid")
    }

    pub fn cart() -> Self {
        Self::from_toml_str(CART_TOML).expect("shipped CART table is valid")
    }

    /// Checks that every banded feature exists, is continuous, and that its
    /// bands span exactly the schema's valid range.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<Vec<usize>> {
        self.bands
            .iter()
            .map(|b| {
                let idx = schema.index_of(&b.feature).ok_or_else(|| {
                    Error::Schema(format!("band score {}: unknown feature {}", self.name, b.feature))
                })?;
                let (lo, hi) = schema.get(idx).range.ok_or_else(|| {
                    Error::Schema(format!("band score {}: feature {} has no range", self.name, b.feature))
                })?;
                if b.edges[0] != lo || *b.edges.last().unwrap() != hi {
                    return Err(Error::Config(format!(
                        "band score {}: bands for {} span [{}, {}] but the valid range is [{lo}, {hi}]",
                        self.name,
                        b.feature,
                        b.edges[0],
                        b.edges.last().unwrap()
                    )));
                }
                Ok(idx)
            })
            .collect()
    }

    /// Score of a single feature row laid out per `schema`.
    pub fn score_row(&self, schema: &FeatureSchema, row: &[f64]) -> Result<i64> {
        let idx = self.validate(schema)?;
        self.score_indexed(&idx, row)
    }

    fn score_indexed(&self, idx: &[usize], row: &[f64]) -> Result<i64> {
        let mut total = 0;
        for (b, &j) in self.bands.iter().zip(idx) {
            total += b.points_for(row[j]).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{}: value {} of {} falls in no band",
                    self.name, row[j], b.feature
                ))
            })?;
        }
        Ok(total)
    }

    /// Scores for the given rows, as reals for the metric machinery.
    pub fn score_cohort(&self, cohort: &Cohort, rows: &[usize]) -> Result<Vec<f64>> {
        let idx = self.validate(cohort.schema())?;
        rows.iter()
            .map(|&r| self.score_indexed(&idx, cohort.row(r)).map(|s| s as f64))
            .collect()
    }
}
