//! Per-iteration metric draws for reshuffled splits and bootstraps

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::splits::SplitPlan;
use crate::cohort::{apply_imputer, fit_imputer, csv_error, Cohort, Outcome, Taxonomy};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricId, ScoredLabels};
use crate::riskscores::{fit_logistic, BandScore, TrainConfig};
use crate::rng::{rng_for, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupLevel {
    Coarse,
    Granular,
    /// Coarse group evaluated on a without-replacement subsample of its rows.
    CoarseDownsampled,
}

impl GroupLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupLevel::Coarse => "coarse",
            GroupLevel::Granular => "granular",
            GroupLevel::CoarseDownsampled => "coarse-downsampled",
        }
    }
}

impl FromStr for GroupLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse" => Ok(GroupLevel::Coarse),
            "granular" => Ok(GroupLevel::Granular),
            "coarse-downsampled" => Ok(GroupLevel::CoarseDownsampled),
            _ => Err(Error::Config(format!("unknown group level {s:?}"))),
        }
    }
}

/// A coarse or granular group by taxonomy index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub level: GroupLevel,
    pub index: usize,
}

impl GroupKey {
    pub fn coarse(index: usize) -> Self {
        Self { level: GroupLevel::Coarse, index }
    }

    pub fn granular(index: usize) -> Self {
        Self { level: GroupLevel::Granular, index }
    }

    pub fn downsampled(index: usize) -> Self {
        Self { level: GroupLevel::CoarseDownsampled, index }
    }

    pub fn name<'t>(&self, taxonomy: &'t Taxonomy) -> &'t str {
        match self.level {
            GroupLevel::Granular => &taxonomy.granular_names()[self.index],
            _ => &taxonomy.coarse_names()[self.index],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawKind {
    Reshuffle,
    Bootstrap,
}

impl fmt::Display for DrawKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DrawKind::Reshuffle => "reshuffle",
            DrawKind::Bootstrap => "bootstrap",
        })
    }
}

/// Which metrics to compute on which groups.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub outcomes: Vec<Outcome>,
    pub metrics: Vec<MetricId>,
    /// Also evaluate coarse groups on subsamples at this ratio.
    pub downsample_ratio: Option<f64>,
}

impl EvalSpec {
    pub fn new(outcomes: Vec<Outcome>, metrics: Vec<MetricId>) -> Self {
        Self { outcomes, metrics, downsample_ratio: None }
    }

    fn keys(&self, taxonomy: &Taxonomy) -> Vec<DrawKey> {
        let mut groups: Vec<GroupKey> = (0..taxonomy.n_coarse()).map(GroupKey::coarse).collect();
        groups.extend((0..taxonomy.n_granular()).map(GroupKey::granular));
        if self.downsample_ratio.is_some() {
            groups.extend((0..taxonomy.n_coarse()).map(GroupKey::downsampled));
        }
        let mut keys = Vec::new();
        for &outcome in &self.outcomes {
            for &metric in &self.metrics {
                for &group in &groups {
                    keys.push(DrawKey { outcome, metric, group });
                }
            }
        }
        keys
    }

    fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() || self.metrics.is_empty() {
            return Err(Error::Config("no outcomes or metrics requested".into()));
        }
        if let Some(r) = self.downsample_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("downsample ratio {r} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DrawKey {
    pub outcome: Outcome,
    pub metric: MetricId,
    pub group: GroupKey,
}

/// Draws for one (outcome, metric, group); `None` marks an iteration where
/// the group lacked support for the metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricDraws<'a> {
    pub key: DrawKey,
    pub kind: DrawKind,
    pub values: &'a [Option<f64>],
}

impl MetricDraws<'_> {
    pub fn valid(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// All draws of one resampling run, stored by key then iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawSet {
    pub kind: DrawKind,
    pub n_iter: usize,
    keys: Vec<DrawKey>,
    index: HashMap<DrawKey, usize>,
    values: Vec<Vec<Option<f64>>>,
    /// Per-iteration problems (single-class train side, failed fits).
    pub notes: Vec<String>,
}

impl DrawSet {
    fn from_iterations(kind: DrawKind, keys: Vec<DrawKey>, per_iter: Vec<Vec<Option<f64>>>, notes: Vec<String>) -> Self {
        let n_iter = per_iter.len();
        let mut values = vec![Vec::with_capacity(n_iter); keys.len()];
        for it in per_iter {
            for (k, v) in it.into_iter().enumerate() {
                values[k].push(v);
            }
        }
        let index = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self { kind, n_iter, keys, index, values, notes }
    }

    /// Joins draw sets with disjoint keys and equal iteration counts.
    pub fn concat(parts: Vec<DrawSet>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::InvalidInput("nothing to concatenate".into()));
        };
        let (kind, n_iter) = (first.kind, first.n_iter);
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut notes = Vec::new();
        for p in parts {
            if p.kind != kind || p.n_iter != n_iter {
                return Err(Error::InvalidInput("draw sets differ in kind or iteration count".into()));
            }
            keys.extend(p.keys);
            values.extend(p.values);
            notes.extend(p.notes);
        }
        let index: HashMap<DrawKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        if index.len() != keys.len() {
            return Err(Error::InvalidInput("draw sets share keys".into()));
        }
        Ok(Self { kind, n_iter, keys, index, values, notes })
    }

    pub fn keys(&self) -> &[DrawKey] {
        &self.keys
    }

    pub fn get(&self, outcome: Outcome, metric: MetricId, group: GroupKey) -> Option<MetricDraws<'_>> {
        let key = DrawKey { outcome, metric, group };
        self.index.get(&key).map(|&i| MetricDraws {
            key,
            kind: self.kind,
            values: &self.values[i],
        })
    }

    pub fn outcomes(&self) -> Vec<Outcome> {
        let mut v: Vec<Outcome> = self.keys.iter().map(|k| k.outcome).collect();
        v.dedup();
        v
    }

    pub fn metrics(&self) -> Vec<MetricId> {
        let mut v: Vec<MetricId> = Vec::new();
        for k in &self.keys {
            if !v.contains(&k.metric) {
                v.push(k.metric);
            }
        }
        v
    }

    /// Writes `kind,outcome,metric,level,group,iteration,value`; missing
    /// draws have an empty value.
    pub fn save_csv(&self, path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut write = |rec: &[&str]| w.write_record(rec).map_err(|e| csv_error(path, e));
        write(&["kind", "outcome", "metric", "level", "group", "iteration", "value"])?;
        let kind = self.kind.to_string();
        for (key, vals) in self.keys.iter().zip(&self.values) {
            let metric = key.metric.to_string();
            for (i, v) in vals.iter().enumerate() {
                let value = v.map(|x| x.to_string()).unwrap_or_default();
                write(&[
                    &kind,
                    key.outcome.as_str(),
                    &metric,
                    key.group.level.as_str(),
                    key.group.name(taxonomy),
                    &i.to_string(),
                    &value,
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut kind = None;
        let mut keys: Vec<DrawKey> = Vec::new();
        let mut values: Vec<Vec<Option<f64>>> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let bad = |m: String| Error::Parse { line, message: m };
            if rec.len() != 7 {
                return Err(bad(format!("expected 7 fields, got {}", rec.len())));
            }
            let k = match &rec[0] {
                "reshuffle" => DrawKind::Reshuffle,
                "bootstrap" => DrawKind::Bootstrap,
                other => return Err(bad(format!("unknown draw kind {other:?}"))),
            };
            if *kind.get_or_insert(k) != k {
                return Err(bad("mixed draw kinds".into()));
            }
            let outcome = Outcome::from_str(&rec[1]).map_err(|e| bad(e.to_string()))?;
            let metric = MetricId::from_str(&rec[2]).map_err(|e| bad(e.to_string()))?;
            let level = GroupLevel::from_str(&rec[3]).map_err(|e| bad(e.to_string()))?;
            let index = match level {
                GroupLevel::Granular => taxonomy.granular_index(&rec[4]),
                _ => taxonomy.coarse_index(&rec[4]),
            }
            .ok_or_else(|| Error::UnknownGroup { line, id: rec[4].to_string() })?;
            let key = DrawKey { outcome, metric, group: GroupKey { level, index } };
            if keys.last() != Some(&key) {
                keys.push(key);
                values.push(Vec::new());
            }
            let iteration: usize = rec[5].parse().map_err(|_| bad("bad iteration".into()))?;
            let vals = values.last_mut().unwrap();
            if iteration != vals.len() {
                return Err(bad("iterations out of order".into()));
            }
            vals.push(if rec[6].is_empty() {
                None
            } else {
                Some(rec[6].parse().map_err(|_| bad(format!("bad value {:?}", &rec[6])))?)
            });
        }
        let n_iter = values.first().map_or(0, Vec::len);
        if values.iter().any(|v| v.len() != n_iter) {
            return Err(Error::Parse { line: 0, message: "keys have differing iteration counts".into() });
        }
        let index: HashMap<DrawKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        if index.len() != keys.len() {
            return Err(Error::Parse { line: 0, message: "a key appears in more than one block".into() });
        }
        Ok(Self {
            kind: kind.unwrap_or(DrawKind::Bootstrap),
            n_iter,
            keys,
            index,
            values,
            notes: Vec::new(),
        })
    }
}

/// How FPR/FNR thresholds are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// The score whose predicted-positive rate equals the outcome prevalence
    /// on the reference rows (train rows for reshuffles, all rows for
    /// bootstraps).
    #[default]
    Prevalence,
    Fixed(f64),
}

impl ThresholdRule {
    pub fn threshold(&self, scores: &[f64], labels: &[u8]) -> f64 {
        match *self {
            ThresholdRule::Fixed(t) => t,
            ThresholdRule::Prevalence => prevalence_threshold(scores, labels),
        }
    }
}

/// Score at rank `round(prevalence * n)` in descending order (at least rank 1).
pub fn prevalence_threshold(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return f64::INFINITY;
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let k = ((pos as f64 / labels.len() as f64) * scores.len() as f64).round() as usize;
    let k = k.clamp(1, scores.len());
    let mut s = scores.to_vec();
    s.sort_unstable_by(|a, b| b.total_cmp(a));
    s[k - 1]
}

/// Computes every key's metric on `rows` (which may repeat) for one iteration.
#[allow(clippy::too_many_arguments)]
fn evaluate_rows(
    c: &Cohort,
    rows: &[usize],
    scores: &[&[f64]],
    thresholds: &[f64],
    spec: &EvalSpec,
    keys: &[DrawKey],
    skip: &[Outcome],
    downsample_seed: Option<(u64, u64)>,
) -> Vec<Option<f64>> {
    let tax = c.taxonomy();
    let mut by_coarse = vec![Vec::new(); tax.n_coarse()];
    let mut by_granular = vec![Vec::new(); tax.n_granular()];
    for (pos, &r) in rows.iter().enumerate() {
        by_coarse[c.coarse_of(r)].push(pos);
        by_granular[c.granular_of(r)].push(pos);
    }
    let downsampled: Vec<Vec<usize>> = match (spec.downsample_ratio, downsample_seed) {
        (Some(ratio), Some((seed, iter))) => {
            let mut rng = rng_for(seed, streams::DOWNSAMPLE, iter);
            by_coarse
                .iter()
                .map(|members| {
                    let m = ((ratio * members.len() as f64).round() as usize).min(members.len());
                    let m = if members.is_empty() { 0 } else { m.max(1) };
                    let mut picked: Vec<usize> = sample(&mut rng, members.len(), m)
                        .into_iter()
                        .map(|i| members[i])
                        .collect();
                    picked.sort_unstable();
                    picked
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let mut s_buf = Vec::new();
    let mut y_buf = Vec::new();
    keys.iter()
        .map(|key| {
            if skip.contains(&key.outcome) {
                return None;
            }
            let oi = spec.outcomes.iter().position(|&o| o == key.outcome).expect("key outcome");
            let members = match key.group.level {
                GroupLevel::Coarse => &by_coarse[key.group.index],
                GroupLevel::Granular => &by_granular[key.group.index],
                GroupLevel::CoarseDownsampled => &downsampled[key.group.index],
            };
            if members.is_empty() {
                return None;
            }
            let labels = c.outcome(key.outcome);
            s_buf.clear();
            y_buf.clear();
            for &pos in members {
                s_buf.push(scores[oi][pos]);
                y_buf.push(labels[rows[pos]]);
            }
            let s = ScoredLabels::new(&s_buf, &y_buf).ok()?;
            evaluate(key.metric, &s, Some(thresholds[oi])).ok().map(|m| m.value)
        })
        .collect()
}

/// How reshuffle iterations produce scores.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreModel {
    /// Refit a logistic model per plan and outcome.
    Logistic(TrainConfig),
    /// A fixed band-table score (no training).
    Band(BandScore),
}

/// Per plan: fit the imputer on train rows, fit the model on train rows,
/// score the test rows, and compute each metric per group on test rows.
pub fn reshuffle_metrics(
    c: &Cohort,
    model: &ScoreModel,
    spec: &EvalSpec,
    plans: &[SplitPlan],
    thresholds: ThresholdRule,
    seed: u64,
) -> Result<DrawSet> {
    spec.validate()?;
    if let ScoreModel::Band(b) = model {
        b.validate(c.schema())?;
    }
    let keys = spec.keys(c.taxonomy());
    let results: Vec<Result<(Vec<Option<f64>>, Vec<String>)>> = plans
        .par_iter()
        .map(|plan| {
            let mut notes = Vec::new();
            let mask = plan.train_mask(c);
            let (train, test) = plan.rows(c);
            let state = fit_imputer(c, &mask, c.schema())?;
            let imputed = apply_imputer(c, &state)?;
            let mut skip = Vec::new();
            if matches!(model, ScoreModel::Logistic(_)) {
                for &o in &plan.single_class {
                    notes.push(format!("plan {}: {o} train side has a single class", plan.index));
                    skip.push(o);
                }
            }
            let mut test_scores: Vec<Vec<f64>> = Vec::with_capacity(spec.outcomes.len());
            let mut cut = Vec::with_capacity(spec.outcomes.len());
            let band_scores = match model {
                ScoreModel::Band(b) => Some((b.score_cohort(&imputed, &train)?, b.score_cohort(&imputed, &test)?)),
                ScoreModel::Logistic(_) => None,
            };
            for &o in &spec.outcomes {
                let train_labels: Vec<u8> = train.iter().map(|&r| c.outcome(o)[r]).collect();
                let (train_s, test_s) = match (model, &band_scores) {
                    (_, Some((a, b))) => (a.clone(), b.clone()),
                    (ScoreModel::Logistic(cfg), None) if !skip.contains(&o) => {
                        match fit_logistic(&imputed, &train, o, cfg) {
                            Ok(m) => (m.predict(&imputed, &train)?, m.predict(&imputed, &test)?),
                            Err(e) => {
                                notes.push(format!("plan {}: {o} fit failed: {e}", plan.index));
                                skip.push(o);
                                (Vec::new(), vec![0.0; test.len()])
                            }
                        }
                    }
                    _ => (Vec::new(), vec![0.0; test.len()]),
                };
                cut.push(thresholds.threshold(&train_s, &train_labels));
                test_scores.push(test_s);
            }
            let refs: Vec<&[f64]> = test_scores.iter().map(Vec::as_slice).collect();
            let vals = evaluate_rows(c, &test, &refs, &cut, spec, &keys, &skip, Some((seed, plan.index as u64)));
            Ok((vals, notes))
        })
        .collect();
    let mut per_iter = Vec::with_capacity(plans.len());
    let mut notes = Vec::new();
    for r in results {
        let (v, n) = r?;
        per_iter.push(v);
        notes.extend(n);
    }
    Ok(DrawSet::from_iterations(DrawKind::Reshuffle, keys, per_iter, notes))
}

/// Row-level bootstrap of fixed scores. `scores[k]` holds every row's score
/// for `spec.outcomes[k]`; thresholds are set once on the full data.
pub fn bootstrap_metrics(
    c: &Cohort,
    scores: &[Vec<f64>],
    spec: &EvalSpec,
    n_iter: usize,
    thresholds: ThresholdRule,
    seed: u64,
) -> Result<DrawSet> {
    spec.validate()?;
    if scores.len() != spec.outcomes.len() || scores.iter().any(|s| s.len() != c.len()) {
        return Err(Error::InvalidInput("need one full-length score vector per outcome".into()));
    }
    if c.is_empty() {
        return Err(Error::InvalidInput("cannot bootstrap an empty cohort".into()));
    }
    let keys = spec.keys(c.taxonomy());
    let cut: Vec<f64> = spec
        .outcomes
        .iter()
        .zip(scores)
        .map(|(&o, s)| thresholds.threshold(s, c.outcome(o)))
        .collect();
    let n = c.len();
    let per_iter: Vec<Vec<Option<f64>>> = (0..n_iter)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, streams::BOOTSTRAP, i as u64);
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let drawn: Vec<Vec<f64>> = scores.iter().map(|s| rows.iter().map(|&r| s[r]).collect()).collect();
            let refs: Vec<&[f64]> = drawn.iter().map(Vec::as_slice).collect();
            evaluate_rows(c, &rows, &refs, &cut, spec, &keys, &[], Some((seed, i as u64)))
        })
        .collect();
    Ok(DrawSet::from_iterations(DrawKind::Bootstrap, keys, per_iter, Vec::new()))
}
