//! Nested unpenalised logistic regressions and likelihood-ratio tests for
//! group-specific feature-outcome relationships within a coarse group.
//!
//! Model (1): features + granular offsets. Model (2): (1) + every
//! feature x group interaction. Model (3, j): (1) + feature j x group.
//! The asterisk group is the reference level.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{interaction_screen_features, Cohort, Outcome};
use crate::error::{Error, Result};
use crate::resample::bonferroni;
use crate::riskscores::newton::{independent_in_gram, Design, Problem, SolverOptions};
use crate::stats::{chi2_sf, logit};

/// LR statistics this far below zero indicate a failed fit.
pub const NEGATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NestedConfig {
    /// Features entering the models; `None` uses the whole schema.
    pub features: Option<Vec<String>>,
    pub rank_tol: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NestedConfig {
    fn default() -> Self {
        Self { features: None, rank_tol: 1e-9, tol: 1e-8, max_iter: 100 }
    }
}

/// Which pair of models a test compares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPair {
    /// (1) vs (2): all interactions.
    AllInteractions,
    /// (1) vs (3): interactions of one feature.
    Feature(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrTestResult {
    pub coarse: String,
    pub outcome: Outcome,
    pub pair: ModelPair,
    pub ll_reduced: f64,
    pub ll_full: f64,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub p_corrected: f64,
    /// Set when the test could not be run; the numbers are then NaN.
    pub skipped: Option<String>,
}

impl LrTestResult {
    fn skipped(coarse: &str, outcome: Outcome, pair: ModelPair, reason: String) -> Self {
        Self {
            coarse: coarse.to_string(),
            outcome,
            pair,
            ll_reduced: f64::NAN,
            ll_full: f64::NAN,
            statistic: f64::NAN,
            df: 0,
            p_value: f64::NAN,
            p_corrected: f64::NAN,
            skipped: Some(reason),
        }
    }
}

/// `2 (ll_full - ll_reduced)` and its chi-square upper tail. Statistics in
/// `[-NEGATIVE_TOLERANCE, 0)` are clamped to zero.
pub fn lr_test(ll_full: f64, ll_reduced: f64, df: usize) -> Result<(f64, f64)> {
    if df == 0 {
        return Err(Error::InvalidInput("likelihood-ratio test needs df >= 1".into()));
    }
    let stat = 2.0 * (ll_full - ll_reduced);
    if !stat.is_finite() {
        return Err(Error::Numerical(format!("non-finite LR statistic {stat}")));
    }
    if stat < -NEGATIVE_TOLERANCE {
        return Err(Error::NegativeStatistic(stat));
    }
    let stat = stat.max(0.0);
    Ok((stat, chi2_sf(stat, df as f64)))
}

/// Columns of all candidate models for one coarse group and outcome.
struct CoarseDesign {
    coarse: String,
    feature_names: Vec<String>,
    n_dummies: usize,
    /// intercept, features, dummies, then interactions feature-major
    design: Design,
    gram: Vec<f64>,
    y: Vec<f64>,
}

impl CoarseDesign {
    fn build(c: &Cohort, coarse: usize, outcome: Outcome, features: &[String]) -> Result<Self> {
        let tax = c.taxonomy();
        let name = tax.coarse_names()[coarse].clone();
        let rows = c.rows_in_coarse(coarse);
        let mut present: Vec<usize> = tax.members(coarse);
        present.retain(|&g| rows.iter().any(|&r| c.granular_of(r) == g));
        if present.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "coarse group {name} has {} granular groups with data, need 2",
                present.len()
            )));
        }
        // asterisk group is the reference; fall back to the first present
        let reference = if present.contains(&tax.asterisk_of(coarse)) { tax.asterisk_of(coarse) } else { present[0] };
        let dummies: Vec<usize> = present.into_iter().filter(|&g| g != reference).collect();
        let labels = c.outcome(outcome);
        let y: Vec<f64> = rows.iter().map(|&r| labels[r] as f64).collect();
        let pos = y.iter().filter(|&&v| v == 1.0).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::SingleClass(format!("{outcome} in coarse group {name}")));
        }
        let idx: Vec<usize> = features
            .iter()
            .map(|f| c.schema().index_of(f).ok_or_else(|| Error::Schema(format!("unknown feature {f}"))))
            .collect::<Result<_>>()?;
        let n = rows.len() as f64;
        let mut cols: Vec<(f64, f64)> = Vec::with_capacity(idx.len());
        for &j in &idx {
            let spec = c.schema().get(j);
            let vals: Vec<f64> = rows.iter().map(|&r| c.value(r, j)).collect();
            if vals.iter().any(|v| v.is_nan()) {
                return Err(Error::InvalidInput(format!("feature {} has missing values; impute first", spec.name)));
            }
            if spec.is_continuous() {
                let m = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                cols.push((m, if var > 0.0 { var.sqrt() } else { 1.0 }));
            } else {
                cols.push((0.0, 1.0));
            }
        }
        let f = idx.len();
        let d = dummies.len();
        let width = 1 + f + d + f * d;
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut x = vec![0.0; f];
        for &r in &rows {
            for (k, &j) in idx.iter().enumerate() {
                x[k] = (c.value(r, j) - cols[k].0) / cols[k].1;
            }
            let g = c.granular_of(r);
            data.push(1.0);
            data.extend_from_slice(&x);
            data.extend(dummies.iter().map(|&h| f64::from(u8::from(h == g))));
            for &xk in &x {
                data.extend(dummies.iter().map(|&h| if h == g { xk } else { 0.0 }));
            }
        }
        let design = Design::new(rows.len(), width, data)?;
        let gram = design.gram();
        Ok(Self {
            coarse: name,
            feature_names: features.to_vec(),
            n_dummies: d,
            design,
            gram,
            y,
        })
    }

    fn base_columns(&self) -> Vec<usize> {
        (0..1 + self.feature_names.len() + self.n_dummies).collect()
    }

    fn interaction_columns(&self, feature: usize) -> Vec<usize> {
        let start = 1 + self.feature_names.len() + self.n_dummies + feature * self.n_dummies;
        (start..start + self.n_dummies).collect()
    }

    fn fit(&self, cols: &[usize], config: &NestedConfig) -> Result<f64> {
        let design = self.design.select_columns(cols);
        let problem = Problem::new(&design, &self.y, 1.0, vec![0.0; cols.len()])?;
        let ybar = self.y.iter().sum::<f64>() / self.y.len() as f64;
        let mut start = vec![0.0; cols.len()];
        start[0] = logit(ybar);
        let opts = SolverOptions { tol: config.tol, max_iter: config.max_iter };
        Ok(problem.solve(Some(start), opts, &mut |_| {})?.log_likelihood)
    }

    fn screen(&self, candidates: &[usize], tol: f64) -> Vec<usize> {
        independent_in_gram(&self.gram, self.design.cols(), candidates, tol)
    }
}

/// Maximised log-likelihoods of models (1) and (2) with their identifiable
/// parameter counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedFit {
    pub coarse: String,
    pub outcome: Outcome,
    pub ll_reduced: f64,
    pub ll_full: f64,
    pub params_reduced: usize,
    pub params_full: usize,
    /// Columns dropped as linearly dependent.
    pub dropped_columns: usize,
}

fn feature_list(c: &Cohort, config: &NestedConfig) -> Vec<String> {
    config
        .features
        .clone()
        .unwrap_or_else(|| c.schema().names().map(str::to_string).collect())
}

pub fn fit_nested_regressions(c: &Cohort, coarse: usize, outcome: Outcome, config: &NestedConfig) -> Result<NestedFit> {
    let features = feature_list(c, config);
    let cd = CoarseDesign::build(c, coarse, outcome, &features)?;
    let mut all = cd.base_columns();
    for k in 0..features.len() {
        all.extend(cd.interaction_columns(k));
    }
    let kept = cd.screen(&all, config.rank_tol);
    let base_len = cd.base_columns().len();
    let reduced: Vec<usize> = kept.iter().copied().filter(|&j| j < base_len).collect();
    let ll_reduced = cd.fit(&reduced, config)?;
    let ll_full = cd.fit(&kept, config)?;
    Ok(NestedFit {
        coarse: cd.coarse,
        outcome,
        ll_reduced,
        ll_full,
        params_reduced: reduced.len(),
        params_full: kept.len(),
        dropped_columns: all.len() - kept.len(),
    })
}

fn skip_reason(e: &Error) -> String {
    match e {
        Error::NonConvergence { diverging: true, .. } => format!("separation suspected: {e}"),
        _ => e.to_string(),
    }
}

/// Model (1) vs model (2) for one coarse group; failures become skipped
/// results.
pub fn group_interaction_test(
    c: &Cohort,
    coarse: usize,
    outcome: Outcome,
    config: &NestedConfig,
    correction_factor: f64,
) -> LrTestResult {
    let name = c.taxonomy().coarse_names()[coarse].clone();
    let fit = match fit_nested_regressions(c, coarse, outcome, config) {
        Ok(f) => f,
        Err(e) => return LrTestResult::skipped(&name, outcome, ModelPair::AllInteractions, skip_reason(&e)),
    };
    let df = fit.params_full - fit.params_reduced;
    if df == 0 {
        return LrTestResult::skipped(&name, outcome, ModelPair::AllInteractions, "no identifiable interaction columns".into());
    }
    match lr_test(fit.ll_full, fit.ll_reduced, df) {
        Ok((statistic, p)) => LrTestResult {
            coarse: name,
            outcome,
            pair: ModelPair::AllInteractions,
            ll_reduced: fit.ll_reduced,
            ll_full: fit.ll_full,
            statistic,
            df,
            p_value: p,
            p_corrected: bonferroni(p, correction_factor),
            skipped: None,
        },
        Err(e) => LrTestResult::skipped(&name, outcome, ModelPair::AllInteractions, skip_reason(&e)),
    }
}

/// Default feature subset for the per-feature scan: the shipped screen list
/// restricted to the cohort's schema.
pub fn default_scan_features(c: &Cohort) -> Vec<String> {
    interaction_screen_features()
        .into_iter()
        .filter(|f| c.schema().index_of(f).is_some())
        .map(str::to_string)
        .collect()
}

/// Model (1) vs model (3, j) for each feature `j` in `scan`. Model (1) uses
/// `config.features` (default: whole schema) and is fitted once. The
/// default Bonferroni factor is `scan.len() x coarse groups`.
pub fn per_feature_interaction_scan(
    c: &Cohort,
    coarse: usize,
    outcome: Outcome,
    scan: &[String],
    config: &NestedConfig,
    correction_factor: Option<f64>,
) -> Result<Vec<LrTestResult>> {
    let factor = correction_factor.unwrap_or((scan.len() * c.taxonomy().n_coarse()) as f64).max(1.0);
    let mut features = feature_list(c, config);
    for f in scan {
        if !features.contains(f) {
            features.push(f.clone());
        }
    }
    let name = c.taxonomy().coarse_names()[coarse].clone();
    let cd = match CoarseDesign::build(c, coarse, outcome, &features) {
        Ok(cd) => cd,
        Err(e @ (Error::Schema(_) | Error::InvalidInput(_) | Error::SingleClass(_))) => {
            return Ok(scan
                .iter()
                .map(|f| LrTestResult::skipped(&name, outcome, ModelPair::Feature(f.clone()), e.to_string()))
                .collect());
        }
        Err(e) => return Err(e),
    };
    let reduced = cd.screen(&cd.base_columns(), config.rank_tol);
    let ll_reduced = match cd.fit(&reduced, config) {
        Ok(ll) => ll,
        Err(e) => {
            return Ok(scan
                .iter()
                .map(|f| LrTestResult::skipped(&name, outcome, ModelPair::Feature(f.clone()), skip_reason(&e)))
                .collect())
        }
    };
    Ok(scan
        .par_iter()
        .map(|f| {
            let pair = ModelPair::Feature(f.clone());
            let k = features.iter().position(|x| x == f).expect("scan feature in list");
            let mut cand = reduced.clone();
            cand.extend(cd.interaction_columns(k));
            let kept = cd.screen(&cand, config.rank_tol);
            let df = kept.len() - reduced.len();
            if df == 0 {
                return LrTestResult::skipped(&name, outcome, pair, format!("{f} has no identifiable interaction within {name}"));
            }
            let result = cd
                .fit(&kept, config)
                .and_then(|ll_full| lr_test(ll_full, ll_reduced, df).map(|t| (ll_full, t)));
            match result {
                Ok((ll_full, (statistic, p))) => LrTestResult {
                    coarse: name.clone(),
                    outcome,
                    pair,
                    ll_reduced,
                    ll_full,
                    statistic,
                    df,
                    p_value: p,
                    p_corrected: bonferroni(p, factor),
                    skipped: None,
                },
                Err(e) => LrTestResult::skipped(&name, outcome, pair, skip_reason(&e)),
            }
        })
        .collect())
}
