//! L2-regularised logistic regression with patient-level cross-validation

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::newton::{Design, IterationRecord, Problem, SolverOptions};
use crate::cohort::{Cohort, Outcome};
use crate::error::{Error, Result};
use crate::metrics::{auprc, auroc, ScoredLabels};
use crate::rng::{rng_for, streams};
use crate::stats::{logit, sigmoid};

/// Metric maximised when choosing C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Auroc,
    Auprc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c_grid: vec![0.01, 0.1, 1.0, 10.0],
            folds: 5,
            tol: 1e-8,
            max_iter: 100,
            seed: 0,
            selection: SelectionMetric::Auroc,
        }
    }
}

impl TrainConfig {
    /// A single fixed C, no cross-validation.
    pub fn fixed(c: f64) -> Self {
        Self {
            c_grid: vec![c],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_grid.is_empty() {
            return Err(Error::Config("C grid is empty".into()));
        }
        if self.c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::Config("C values must be positive and finite".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }

    fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

/// A fitted model. The linear index is
/// `b + sum_j w_j (x_j - mean_j) / scale_j`; binary features have mean 0
/// and scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub outcome: Outcome,
    pub c: f64,
    pub intercept: f64,
    pub feature_names: Vec<String>,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl LogisticModel {
    pub fn linear_index(&self, row: &[f64]) -> f64 {
        let mut z = self.intercept;
        for j in 0..self.weights.len() {
            if self.weights[j] != 0.0 {
                z += self.weights[j] * (row[j] - self.means[j]) / self.scales[j];
            }
        }
        z
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        sigmoid(self.linear_index(row))
    }

    /// Coefficient of feature `j` per raw unit.
    pub fn raw_coefficient(&self, j: usize) -> f64 {
        self.weights[j] / self.scales[j]
    }

    pub fn predict(&self, cohort: &Cohort, rows: &[usize]) -> Result<Vec<f64>> {
        if !cohort.schema().names().eq(self.feature_names.iter().map(String::as_str)) {
            return Err(Error::Schema("model was fitted on a different feature schema".into()));
        }
        rows.iter()
            .map(|&r| {
                let row = cohort.row(r);
                if row.iter().any(|v| v.is_nan()) {
                    return Err(Error::InvalidInput(format!(
                        "row {r} has missing features; impute before predicting"
                    )));
                }
                Ok(self.predict_row(row))
            })
            .collect()
    }

    /// Plain-text serialisation; every real is written with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "outcome,{}", self.outcome.as_str()).unwrap();
        writeln!(s, "c,{:.16e}", self.c).unwrap();
        writeln!(s, "intercept,{:.16e}", self.intercept).unwrap();
        writeln!(s, "feature,mean,scale,weight").unwrap();
        for j in 0..self.weights.len() {
            writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e}",
                self.feature_names[j], self.means[j], self.scales[j], self.weights[j]
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            message: msg.to_string(),
        };
        let num = |line: usize, v: &str| {
            f64::from_str(v.trim()).map_err(|_| bad(line, &format!("not a number: {v}")))
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header = |key: &str| -> Result<(usize, String)> {
            let (n, l) = lines.next().ok_or_else(|| bad(0, "truncated model file"))?;
            let (k, v) = l.split_once(',').ok_or_else(|| bad(n, "expected key,value"))?;
            if k != key {
                return Err(bad(n, &format!("expected {key}")));
            }
            Ok((n, v.to_string()))
        };
        let (n, o) = header("outcome")?;
        let outcome = Outcome::from_str(&o).map_err(|_| bad(n, "unknown outcome"))?;
        let (n, c) = header("c")?;
        let c = num(n, &c)?;
        let (n, b) = header("intercept")?;
        let intercept = num(n, &b)?;
        let (n, cols) = header("feature")?;
        if cols != "mean,scale,weight" {
            return Err(bad(n, "unexpected feature table header"));
        }
        let mut model = LogisticModel {
            outcome,
            c,
            intercept,
            feature_names: Vec::new(),
            weights: Vec::new(),
            means: Vec::new(),
            scales: Vec::new(),
        };
        for (n, l) in lines {
            if l.is_empty() {
                continue;
            }
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(n, "expected feature,mean,scale,weight"));
            }
            model.feature_names.push(f[0].to_string());
            model.means.push(num(n, f[1])?);
            model.scales.push(num(n, f[2])?);
            model.weights.push(num(n, f[3])?);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Standardised design for one outcome on a set of training rows.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    outcome: Outcome,
    feature_names: Vec<String>,
    means: Vec<f64>,
    scales: Vec<f64>,
    /// Features with variation on the training rows; the rest get weight 0.
    active: Vec<usize>,
    design: Design,
    y: Vec<f64>,
}

impl TrainingSet {
    pub fn new(cohort: &Cohort, rows: &[usize], outcome: Outcome) -> Result<Self> {
        let labels = cohort.outcome(outcome);
        let positives = rows.iter().filter(|&&r| labels[r] == 1).count();
        if rows.is_empty() || positives == 0 || positives == rows.len() {
            return Err(Error::SingleClass(format!(
                "{} training rows with {positives} positives for {outcome}",
                rows.len()
            )));
        }
        let schema = cohort.schema();
        let p = schema.len();
        let n = rows.len() as f64;
        let mut means = vec![0.0; p];
        let mut scales = vec![1.0; p];
        let mut active = Vec::new();
        for (j, spec) in schema.features().iter().enumerate() {
            let mut sum = 0.0;
            let mut first = None;
            let mut constant = true;
            for &r in rows {
                let v = cohort.value(r, j);
                if v.is_nan() {
                    return Err(Error::InvalidInput(format!(
                        "feature {} is missing in row {r}; impute before fitting",
                        spec.name
                    )));
                }
                sum += v;
                match first {
                    None => first = Some(v),
                    Some(f) => constant &= f == v,
                }
            }
            if constant {
                continue;
            }
            active.push(j);
            if spec.is_continuous() {
                let m = sum / n;
                let var = rows.iter().map(|&r| (cohort.value(r, j) - m).powi(2)).sum::<f64>() / n;
                means[j] = m;
                scales[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
            }
        }
        let width = active.len() + 1;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let row = cohort.row(r);
            data.push(1.0);
            data.extend(active.iter().map(|&j| (row[j] - means[j]) / scales[j]));
        }
        Ok(Self {
            outcome,
            feature_names: schema.names().map(str::to_string).collect(),
            means,
            scales,
            active,
            design: Design::new(rows.len(), width, data)?,
            y: rows.iter().map(|&r| labels[r] as f64).collect(),
        })
    }

    /// Parameter vector layout: intercept first, then active features.
    pub fn n_params(&self) -> usize {
        self.design.cols()
    }

    pub fn active_features(&self) -> &[usize] {
        &self.active
    }

    pub fn problem(&self, c: f64) -> Problem<'_> {
        let mut penalty = vec![1.0; self.design.cols()];
        penalty[0] = 0.0;
        Problem::new(&self.design, &self.y, c, penalty).expect("consistent dimensions")
    }

    pub fn fit(
        &self,
        c: f64,
        opts: SolverOptions,
        hook: &mut dyn FnMut(&IterationRecord),
    ) -> Result<LogisticModel> {
        let ybar = self.y.iter().sum::<f64>() / self.y.len() as f64;
        let mut start = vec![0.0; self.n_params()];
        start[0] = logit(ybar);
        let sol = self.problem(c).solve(Some(start), opts, hook)?;
        Ok(self.model_from(c, &sol.coef))
    }

    pub fn model_from(&self, c: f64, theta: &[f64]) -> LogisticModel {
        let mut weights = vec![0.0; self.feature_names.len()];
        for (k, &j) in self.active.iter().enumerate() {
            weights[j] = theta[k + 1];
        }
        LogisticModel {
            outcome: self.outcome,
            c,
            intercept: theta[0],
            feature_names: self.feature_names.clone(),
            weights,
            means: self.means.clone(),
            scales: self.scales.clone(),
        }
    }
}

/// Cross-validation score per grid entry; `None` where no fold produced a
/// usable fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub c_grid: Vec<f64>,
    pub scores: Vec<Option<f64>>,
    pub chosen: f64,
}

/// Fold index for every row, assigned per patient.
pub fn patient_folds(cohort: &Cohort, rows: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut patients: Vec<usize> = rows.iter().map(|&r| cohort.patient_of(r)).collect();
    patients.sort_unstable();
    patients.dedup();
    patients.shuffle(&mut rng_for(seed, streams::CV_FOLDS, 0));
    let mut fold_of = std::collections::HashMap::with_capacity(patients.len());
    for (k, p) in patients.into_iter().enumerate() {
        fold_of.insert(p, k % folds);
    }
    rows.iter().map(|&r| fold_of[&cohort.patient_of(r)]).collect()
}

pub fn cross_validate(
    cohort: &Cohort,
    rows: &[usize],
    outcome: Outcome,
    config: &TrainConfig,
) -> Result<CvResult> {
    config.validate()?;
    let fold_of = patient_folds(cohort, rows, config.folds, config.seed);
    let labels = cohort.outcome(outcome);
    let jobs: Vec<(usize, usize)> = (0..config.c_grid.len())
        .flat_map(|ci| (0..config.folds).map(move |f| (ci, f)))
        .collect();
    let results: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(ci, f)| {
            let train: Vec<usize> = rows.iter().zip(&fold_of).filter(|(_, &k)| k != f).map(|(&r, _)| r).collect();
            let valid: Vec<usize> = rows.iter().zip(&fold_of).filter(|(_, &k)| k == f).map(|(&r, _)| r).collect();
            let set = TrainingSet::new(cohort, &train, outcome).ok()?;
            let model = set.fit(config.c_grid[ci], config.solver(), &mut |_| {}).ok()?;
            let scores = model.predict(cohort, &valid).ok()?;
            let y: Vec<u8> = valid.iter().map(|&r| labels[r]).collect();
            let s = ScoredLabels::new(&scores, &y).ok()?;
            let v = match config.selection {
                SelectionMetric::Auroc => auroc(&s),
                SelectionMetric::Auprc => auprc(&s),
            };
            v.ok().map(|m| m.value)
        })
        .collect();
    let scores: Vec<Option<f64>> = results
        .chunks(config.folds)
        .map(|fold_scores| {
            let ok: Vec<f64> = fold_scores.iter().flatten().copied().collect();
            (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (ci, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((ci, s));
            }
        }
    }
    let (ci, _) = best.ok_or_else(|| {
        Error::NonConvergence {
            iterations: config.max_iter,
            gradient: f64::NAN,
            diverging: false,
        }
    })?;
    Ok(CvResult {
        c_grid: config.c_grid.clone(),
        scores,
        chosen: config.c_grid[ci],
    })
}

/// Fits a model on `rows`, choosing C by cross-validation when the grid has
/// more than one entry.
pub fn fit_logistic(
    cohort: &Cohort,
    rows: &[usize],
    outcome: Outcome,
    config: &TrainConfig,
) -> Result<LogisticModel> {
    config.validate()?;
    let set = TrainingSet::new(cohort, rows, outcome)?;
    let c = if config.c_grid.len() == 1 {
        config.c_grid[0]
    } else {
        cross_validate(cohort, rows, outcome, config)?.chosen
    };
    set.fit(c, config.solver(), &mut |_| {})
}
