//! Code enrichment of granular groups against the rest of their coarse group

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fisher::{fisher_exact, Table2x2};
use crate::cohort::{csv_error, Cohort, FeatureCategory, FeatureSpec};
use crate::error::{Error, Result};
use crate::resample::bonferroni;

/// Binary code indicators per cohort row.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    names: Vec<String>,
    n_rows: usize,
    data: Vec<u8>,
}

impl CodeMatrix {
    pub fn new(names: Vec<String>, n_rows: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != names.len() * n_rows || data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("code matrix must be binary and rows x codes".into()));
        }
        Ok(Self { names, n_rows, data })
    }

    /// Binary features of one category as codes; missing counts as absent.
    pub fn from_features(c: &Cohort, category: FeatureCategory) -> Self {
        Self::from_binary_features(c, |f| f.category == category)
    }

    /// Binary features whose name starts with `prefix`.
    pub fn from_prefix(c: &Cohort, prefix: &str) -> Self {
        Self::from_binary_features(c, |f| f.name.starts_with(prefix))
    }

    fn from_binary_features(c: &Cohort, keep: impl Fn(&FeatureSpec) -> bool) -> Self {
        let cols: Vec<usize> = c
            .schema()
            .features()
            .iter()
            .enumerate()
            .filter(|(_, f)| keep(f) && !f.is_continuous())
            .map(|(j, _)| j)
            .collect();
        let mut data = Vec::with_capacity(c.len() * cols.len());
        for r in 0..c.len() {
            data.extend(cols.iter().map(|&j| u8::from(c.value(r, j) == 1.0)));
        }
        Self {
            names: cols.iter().map(|&j| c.schema().get(j).name.clone()).collect(),
            n_rows: c.len(),
            data,
        }
    }

    /// Reads `patient_id,visit_id,code` records (one per present code) and
    /// aligns them with the cohort's rows.
    pub fn load_long_csv(path: impl AsRef<Path>, c: &Cohort) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["patient_id", "visit_id", "code"] {
            return Err(Error::Parse { line: 1, message: "expected header patient_id,visit_id,code".into() });
        }
        let row_of: HashMap<(&str, &str), usize> =
            (0..c.len()).map(|i| ((c.patient_id(i), c.visit_id(i)), i)).collect();
        let mut code_index: HashMap<String, usize> = HashMap::new();
        let mut names = Vec::new();
        let mut present = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = i + 2;
            if rec.len() != 3 {
                return Err(Error::Parse { line, message: "expected 3 fields".into() });
            }
            let row = *row_of.get(&(&rec[0], &rec[1])).ok_or_else(|| Error::Parse {
                line,
                message: format!("visit {}/{} not in cohort", &rec[0], &rec[1]),
            })?;
            let k = *code_index.entry(rec[2].to_string()).or_insert_with(|| {
                names.push(rec[2].to_string());
                names.len() - 1
            });
            present.push((row, k));
        }
        let mut data = vec![0u8; c.len() * names.len()];
        for (row, k) in present {
            data[row * names.len() + k] = 1;
        }
        Ok(Self { names, n_rows: c.len(), data })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_codes(&self) -> usize {
        self.names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn has(&self, row: usize, code: usize) -> bool {
        self.data[row * self.names.len() + code] == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EnrichmentUnit {
    /// A patient carries a code if any of their visits does.
    #[default]
    Patient,
    Visit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichmentConfig {
    pub unit: EnrichmentUnit,
    /// Results whose group count is below this are suppressed.
    pub min_count: u64,
    pub top_k: usize,
    pub alpha: f64,
    /// Bonferroni factor; defaults to granular groups x codes.
    pub correction_factor: Option<f64>,
}

impl Default for EnrichmentConfig {
    fn default() -> Self {
        Self {
            unit: EnrichmentUnit::Patient,
            min_count: 10,
            top_k: 5,
            alpha: 0.05,
            correction_factor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentResult {
    pub granular: String,
    pub coarse: String,
    pub code: String,
    pub group_prevalence: f64,
    pub remainder_prevalence: f64,
    /// `None` when the remainder prevalence is zero.
    pub ratio: Option<f64>,
    /// `[[group with, group without], [rest with, rest without]]`; dropped
    /// when suppressed.
    pub counts: Option<Table2x2>,
    pub p_value: f64,
    pub p_corrected: f64,
    pub suppressed: bool,
}

impl EnrichmentResult {
    fn ratio_key(&self) -> f64 {
        self.ratio.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentScan {
    pub correction_factor: f64,
    pub results: Vec<EnrichmentResult>,
}

impl EnrichmentScan {
    /// Per granular group, up to `top_k` unsuppressed codes with corrected
    /// p below `alpha` and ratio above 1, by ratio descending.
    pub fn top_enriched(&self, config: &EnrichmentConfig) -> Vec<&EnrichmentResult> {
        let mut out: Vec<&EnrichmentResult> = Vec::new();
        let mut groups: Vec<&str> = Vec::new();
        for r in &self.results {
            if !groups.contains(&r.granular.as_str()) {
                groups.push(&r.granular);
            }
        }
        for g in groups {
            let mut hits: Vec<&EnrichmentResult> = self
                .results
                .iter()
                .filter(|r| r.granular == g && !r.suppressed && r.p_corrected < config.alpha && r.ratio_key() > 1.0)
                .collect();
            hits.sort_by(|a, b| b.ratio_key().total_cmp(&a.ratio_key()).then(a.code.cmp(&b.code)));
            out.extend(hits.into_iter().take(config.top_k));
        }
        out
    }
}

/// Fisher exact test of every (granular group, code) against the rest of
/// the group's coarse group. Codes absent from a coarse group are skipped.
pub fn enrichment_scan(c: &Cohort, codes: &CodeMatrix, config: &EnrichmentConfig) -> Result<EnrichmentScan> {
    if codes.n_rows() != c.len() {
        return Err(Error::InvalidInput(format!(
            "code matrix has {} rows for a cohort of {}",
            codes.n_rows(),
            c.len()
        )));
    }
    let tax = c.taxonomy();
    let factor = config
        .correction_factor
        .unwrap_or((tax.n_granular() * codes.n_codes()) as f64)
        .max(1.0);
    let n_codes = codes.n_codes();

    // units (patients or visits) with their group and code presence
    let (unit_group, unit_codes): (Vec<usize>, Vec<Vec<bool>>) = match config.unit {
        EnrichmentUnit::Visit => (
            (0..c.len()).map(|r| c.granular_of(r)).collect(),
            (0..c.len()).map(|r| (0..n_codes).map(|k| codes.has(r, k)).collect()).collect(),
        ),
        EnrichmentUnit::Patient => {
            let mut group = vec![usize::MAX; c.n_patients()];
            let mut has = vec![vec![false; n_codes]; c.n_patients()];
            for r in 0..c.len() {
                let p = c.patient_of(r);
                group[p] = c.granular_of(r);
                for (k, h) in has[p].iter_mut().enumerate() {
                    *h |= codes.has(r, k);
                }
            }
            (group, has)
        }
    };
    let mut units_in = vec![0u64; tax.n_granular()];
    let mut with_code = vec![vec![0u64; n_codes]; tax.n_granular()];
    for (g, hs) in unit_group.iter().zip(&unit_codes) {
        units_in[*g] += 1;
        for (k, &h) in hs.iter().enumerate() {
            with_code[*g][k] += u64::from(h);
        }
    }

    let mut results = Vec::new();
    for g in 0..tax.n_granular() {
        let coarse = tax.coarse_of(g);
        let rest: Vec<usize> = tax.members(coarse).into_iter().filter(|&h| h != g).collect();
        let n_group = units_in[g];
        let n_rest: u64 = rest.iter().map(|&h| units_in[h]).sum();
        if n_group == 0 || n_rest == 0 {
            continue;
        }
        for k in 0..n_codes {
            let a = with_code[g][k];
            let cc: u64 = rest.iter().map(|&h| with_code[h][k]).sum();
            if a + cc == 0 {
                continue;
            }
            let table = Table2x2::new(a, n_group - a, cc, n_rest - cc);
            let gp = a as f64 / n_group as f64;
            let rp = cc as f64 / n_rest as f64;
            let p = fisher_exact(&table);
            let suppressed = a < config.min_count;
            results.push(EnrichmentResult {
                granular: tax.granular_names()[g].clone(),
                coarse: tax.coarse_names()[coarse].clone(),
                code: codes.names()[k].clone(),
                group_prevalence: gp,
                remainder_prevalence: rp,
                ratio: (rp > 0.0).then(|| gp / rp),
                counts: (!suppressed).then_some(table),
                p_value: p,
                p_corrected: bonferroni(p, factor),
                suppressed,
            });
        }
    }
    Ok(EnrichmentScan { correction_factor: factor, results })
}
