//! Synthetic cohorts with plantable label, covariate and concept shift.
//!
//! Each outcome is drawn as
//! `Bernoulli(sigmoid(b_o + offset_go + sum_j (beta_oj + delta_goj) (x_j - center_j)))`
//! where `center_j` is the base mean (continuous) or base prevalence
//! (binary) of feature `j`, so `b_o` is the log-odds of an average patient.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{write_cohort, Cohort, FeatureSchema, Outcome, Taxonomy, STANDARD_GROUPS};
use crate::error::{Error, Result};
use crate::rng::{rng_for, streams, Rng};
use crate::stats::{logit, sigmoid};

const CALIBRATION_ROWS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousBase {
    pub mean: f64,
    pub sd: f64,
    /// Round draws to whole numbers (counts, integer vitals).
    #[serde(default)]
    pub integer: bool,
}

/// Base distribution of one feature: `{ mean, sd }` or `{ prevalence }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureBase {
    Continuous(ContinuousBase),
    Binary { prevalence: f64 },
}

/// Intercept given directly, or calibrated so that the base population has
/// the stated mean outcome probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeBase {
    Intercept(f64),
    BaseRate(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    /// Share of patients whose age is redrawn below 18.
    pub minor_rate: f64,
    /// Share of rows with the severity feature blanked.
    pub missing_severity_rate: f64,
    /// Per-value rate of blanking other continuous features.
    pub missing_rate: f64,
    /// Per-value rate of replacing a continuous value with an out-of-range one.
    pub invalid_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub granular: String,
    pub coarse: String,
    pub patients: usize,
    #[serde(default = "one")]
    pub mean_visits: f64,
    /// Log-odds offsets keyed by outcome.
    #[serde(default)]
    pub outcome_offsets: BTreeMap<Outcome, f64>,
    /// Shifts of continuous feature means, native units.
    #[serde(default)]
    pub mean_shifts: BTreeMap<String, f64>,
    /// Multipliers on binary feature prevalence.
    #[serde(default)]
    pub prevalence_multipliers: BTreeMap<String, f64>,
    /// Coefficient perturbations applied to every outcome, log-odds per unit.
    #[serde(default)]
    pub coef_perturbations: BTreeMap<String, f64>,
    /// Further perturbations for single outcomes.
    #[serde(default)]
    pub outcome_coef_perturbations: BTreeMap<Outcome, BTreeMap<String, f64>>,
}

fn one() -> f64 {
    1.0
}

impl GroupSpec {
    pub fn new(granular: &str, coarse: &str, patients: usize) -> Self {
        Self {
            granular: granular.to_string(),
            coarse: coarse.to_string(),
            patients,
            mean_visits: 1.0,
            outcome_offsets: BTreeMap::new(),
            mean_shifts: BTreeMap::new(),
            prevalence_multipliers: BTreeMap::new(),
            coef_perturbations: BTreeMap::new(),
            outcome_coef_perturbations: BTreeMap::new(),
        }
    }
}

/// A full scenario. Features absent from `features` default to a normal
/// centred on the middle of the valid range with sd of a sixth of the range
/// (continuous), or prevalence 0.1 (binary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    #[serde(default)]
    pub features: BTreeMap<String, FeatureBase>,
    pub outcomes: BTreeMap<Outcome, OutcomeBase>,
    /// Shared coefficients, log-odds per native unit.
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
    /// Per-outcome coefficients; listed features override the shared ones.
    #[serde(default)]
    pub outcome_coefficients: BTreeMap<Outcome, BTreeMap<String, f64>>,
    #[serde(default)]
    pub corruption: Corruption,
    pub groups: Vec<GroupSpec>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Taxonomy implied by the group list.
    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::from_pairs(self.groups.iter().map(|g| (g.granular.as_str(), g.coarse.as_str())))
    }

    /// Checks feature references, group nesting and probability bounds.
    pub fn validate(&self, schema: &FeatureSchema, taxonomy: &Taxonomy) -> Result<()> {
        let known = |name: &str, what: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| Error::Config(format!("{what} refers to unknown feature {name}")))
        };
        for (name, base) in &self.features {
            let spec = schema.get(known(name, "features")?);
            match (base, spec.is_continuous()) {
                (FeatureBase::Continuous(c), true) => {
                    if !(c.sd > 0.0 && c.mean.is_finite()) {
                        return Err(Error::Config(format!("feature {name}: sd must be positive")));
                    }
                }
                (FeatureBase::Binary { prevalence }, false) => {
                    if !(0.0..=1.0).contains(prevalence) {
                        return Err(Error::Config(format!("feature {name}: prevalence outside [0, 1]")));
                    }
                }
                _ => return Err(Error::Config(format!("feature {name}: base does not match its kind"))),
            }
        }
        for name in self
            .coefficients
            .keys()
            .chain(self.outcome_coefficients.values().flat_map(|m| m.keys()))
        {
            known(name, "coefficients")?;
        }
        for (o, base) in &self.outcomes {
            if let OutcomeBase::BaseRate(r) = base {
                if !(*r > 0.0 && *r < 1.0) {
                    return Err(Error::Config(format!("{o}: base rate must lie in (0, 1)")));
                }
            }
        }
        for o in Outcome::ALL {
            if !self.outcomes.contains_key(&o) {
                return Err(Error::Config(format!("no base specified for outcome {o}")));
            }
        }
        let c = &self.corruption;
        for (what, r) in [
            ("minor_rate", c.minor_rate),
            ("missing_severity_rate", c.missing_severity_rate),
            ("missing_rate", c.missing_rate),
            ("invalid_rate", c.invalid_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("corruption {what} outside [0, 1]")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.groups {
            let gi = taxonomy
                .granular_index(&g.granular)
                .ok_or_else(|| Error::Config(format!("group {} not in taxonomy", g.granular)))?;
            if taxonomy.coarse_names()[taxonomy.coarse_of(gi)] != g.coarse {
                return Err(Error::Config(format!(
                    "group {} is nested under {} in the taxonomy, not {}",
                    g.granular,
                    taxonomy.coarse_names()[taxonomy.coarse_of(gi)],
                    g.coarse
                )));
            }
            if !seen.insert(gi) {
                return Err(Error::Config(format!("group {} listed twice", g.granular)));
            }
            if !(g.mean_visits >= 1.0) {
                return Err(Error::Config(format!("group {}: mean_visits below 1", g.granular)));
            }
            for name in g
                .mean_shifts
                .keys()
                .chain(g.prevalence_multipliers.keys())
                .chain(g.coef_perturbations.keys())
                .chain(g.outcome_coef_perturbations.values().flat_map(|m| m.keys()))
            {
                known(name, "group shift")?;
            }
            for name in g.mean_shifts.keys() {
                if !schema.get(known(name, "")?).is_continuous() {
                    return Err(Error::Config(format!("mean shift on binary feature {name}")));
                }
            }
            for (name, m) in &g.prevalence_multipliers {
                let j = known(name, "")?;
                if schema.get(j).is_continuous() {
                    return Err(Error::Config(format!("prevalence multiplier on continuous feature {name}")));
                }
                let p = self.binary_base(name) * m;
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "group {}: prevalence of {name} becomes {p}, outside (0, 1)",
                        g.granular
                    )));
                }
            }
        }
        Ok(())
    }

    fn binary_base(&self, name: &str) -> f64 {
        match self.features.get(name) {
            Some(FeatureBase::Binary { prevalence }) => *prevalence,
            _ => 0.1,
        }
    }
}

/// Resolved per-feature sampling parameters.
#[derive(Debug, Clone)]
enum Sampler {
    Continuous { mean: f64, sd: f64, lo: f64, hi: f64, integer: bool },
    Binary { p: f64 },
}

impl Sampler {
    fn draw(&self, rng: &mut Rng) -> f64 {
        match *self {
            Sampler::Binary { p } => f64::from(u8::from(rng.random::<f64>() < p)),
            Sampler::Continuous { mean, sd, lo, hi, integer } => {
                let normal = Normal::new(mean, sd).expect("validated sd");
                let mut x = f64::NAN;
                for _ in 0..10_000 {
                    let v = normal.sample(rng);
                    if v >= lo && v <= hi {
                        x = v;
                        break;
                    }
                }
                if x.is_nan() {
                    // mean far outside the range: fall back to clamping
                    x = normal.sample(rng).clamp(lo, hi);
                }
                if integer {
                    x = x.round().clamp(lo.ceil(), hi.floor());
                }
                x
            }
        }
    }
}

fn base_samplers(config: &ScenarioConfig, schema: &FeatureSchema) -> (Vec<Sampler>, Vec<f64>) {
    let mut samplers = Vec::with_capacity(schema.len());
    let mut centers = Vec::with_capacity(schema.len());
    for spec in schema.features() {
        match (spec.range, config.features.get(&spec.name)) {
            (Some((lo, hi)), Some(FeatureBase::Continuous(c))) => {
                samplers.push(Sampler::Continuous { mean: c.mean, sd: c.sd, lo, hi, integer: c.integer });
                centers.push(c.mean);
            }
            (Some((lo, hi)), _) => {
                let mean = 0.5 * (lo + hi);
                samplers.push(Sampler::Continuous { mean, sd: (hi - lo) / 6.0, lo, hi, integer: false });
                centers.push(mean);
            }
            (None, _) => {
                let p = config.binary_base(&spec.name);
                samplers.push(Sampler::Binary { p });
                centers.push(p);
            }
        }
    }
    (samplers, centers)
}

fn coefficient_vector(config: &ScenarioConfig, schema: &FeatureSchema, o: Outcome) -> Vec<f64> {
    let overrides = config.outcome_coefficients.get(&o);
    schema
        .names()
        .map(|n| {
            overrides
                .and_then(|m| m.get(n))
                .or_else(|| config.coefficients.get(n))
                .copied()
                .unwrap_or(0.0)
        })
        .collect()
}

fn linear(beta: &[f64], centers: &[f64], x: &[f64]) -> f64 {
    beta.iter()
        .zip(centers)
        .zip(x)
        .filter(|((b, _), _)| **b != 0.0)
        .map(|((b, c), v)| b * (v - c))
        .sum()
}

/// Intercept giving mean probability `rate` over base-population draws.
fn calibrate_intercept(rate: f64, eta: &[f64]) -> f64 {
    if eta.iter().all(|&e| e == 0.0) {
        return logit(rate);
    }
    let mean_p = |b: f64| eta.iter().map(|e| sigmoid(b + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTruth {
    pub granular: String,
    pub coarse: String,
    pub patients: usize,
    pub visits: usize,
    /// Mean true outcome probability over the group's generated rows.
    pub true_rate: BTreeMap<Outcome, f64>,
    pub empirical_rate: BTreeMap<Outcome, f64>,
    /// Empirical feature means before corruption.
    pub feature_means: BTreeMap<String, f64>,
    /// Effective intercept (base plus group offset).
    pub intercept: BTreeMap<Outcome, f64>,
    /// Effective coefficients, log-odds per native unit; zeros omitted.
    pub coefficients: BTreeMap<Outcome, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CorruptionCounts {
    pub minors: usize,
    pub missing_severity: usize,
    pub missing_values: usize,
    pub invalid_values: usize,
}

/// What the generator actually planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub base_intercepts: BTreeMap<Outcome, f64>,
    /// Centering values per feature.
    pub centers: BTreeMap<String, f64>,
    pub groups: Vec<GroupTruth>,
    pub corruption: CorruptionCounts,
}

impl GroundTruth {
    pub fn group(&self, granular: &str) -> Option<&GroupTruth> {
        self.groups.iter().find(|g| g.granular == granular)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("ledger serialises");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("ground truth: {e}")))
    }
}

/// Generates a cohort and its ground-truth ledger. Every group draws from
/// its own stream, so the output depends only on the config.
pub fn generate(
    config: &ScenarioConfig,
    schema: Arc<FeatureSchema>,
    taxonomy: Arc<Taxonomy>,
) -> Result<(Cohort, GroundTruth)> {
    config.validate(&schema, &taxonomy)?;
    let p = schema.len();
    let (base, centers) = base_samplers(config, &schema);
    let betas: Vec<Vec<f64>> = Outcome::ALL.iter().map(|&o| coefficient_vector(config, &schema, o)).collect();

    // intercepts, calibrated on base-population draws where requested
    let needs_calibration = config.outcomes.values().any(|b| matches!(b, OutcomeBase::BaseRate(_)));
    let calibration: Vec<Vec<f64>> = if needs_calibration {
        let mut rng = rng_for(config.seed, streams::SYNTH_CALIBRATION, 0);
        (0..CALIBRATION_ROWS)
            .map(|_| base.iter().map(|s| s.draw(&mut rng)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let mut intercepts = [0.0; 3];
    for o in Outcome::ALL {
        intercepts[o.index()] = match config.outcomes[&o] {
            OutcomeBase::Intercept(b) => b,
            OutcomeBase::BaseRate(r) => {
                let eta: Vec<f64> = calibration.iter().map(|x| linear(&betas[o.index()], &centers, x)).collect();
                calibrate_intercept(r, &eta)
            }
        };
    }

    let age_idx = schema.age_index();
    let sev_idx = schema.severity_index();
    let mut builder = Cohort::builder(schema.clone(), taxonomy.clone());
    let mut groups = Vec::with_capacity(config.groups.len());
    let mut counts = CorruptionCounts::default();
    let mut patient_no = 0usize;
    let mut visit_no = 0usize;
    let mut x = vec![0.0; p];
    let corr = &config.corruption;

    for (gi, g) in config.groups.iter().enumerate() {
        let granular = taxonomy.granular_index(&g.granular).expect("validated");
        let mut rng = rng_for(config.seed, streams::SYNTH, gi as u64);
        let samplers: Vec<Sampler> = schema
            .features()
            .iter()
            .zip(&base)
            .map(|(spec, s)| match s.clone() {
                Sampler::Continuous { mean, sd, lo, hi, integer } => Sampler::Continuous {
                    mean: mean + g.mean_shifts.get(&spec.name).copied().unwrap_or(0.0),
                    sd,
                    lo,
                    hi,
                    integer,
                },
                Sampler::Binary { p } => Sampler::Binary {
                    p: p * g.prevalence_multipliers.get(&spec.name).copied().unwrap_or(1.0),
                },
            })
            .collect();
        let mut eff_beta = betas.clone();
        let mut eff_b = intercepts;
        for o in Outcome::ALL {
            eff_b[o.index()] += g.outcome_offsets.get(&o).copied().unwrap_or(0.0);
            for (j, name) in schema.names().enumerate() {
                eff_beta[o.index()][j] += g.coef_perturbations.get(name).copied().unwrap_or(0.0)
                    + g.outcome_coef_perturbations
                        .get(&o)
                        .and_then(|m| m.get(name))
                        .copied()
                        .unwrap_or(0.0);
            }
        }
        let visits_dist = Geometric::new(1.0 / g.mean_visits).map_err(|e| Error::Config(e.to_string()))?;

        let mut true_sum = [0.0; 3];
        let mut pos = [0usize; 3];
        let mut feat_sum = vec![0.0; p];
        let mut rows = 0usize;
        for _ in 0..g.patients {
            patient_no += 1;
            let pid = format!("P{patient_no:07}");
            let n_visits = 1 + visits_dist.sample(&mut rng) as usize;
            let minor = corr.minor_rate > 0.0 && rng.random::<f64>() < corr.minor_rate;
            let minor_age = rng.random_range(0.0..18.0f64).floor();
            if minor {
                counts.minors += 1;
            }
            for _ in 0..n_visits {
                visit_no += 1;
                for (xj, s) in x.iter_mut().zip(&samplers) {
                    *xj = s.draw(&mut rng);
                }
                let mut y = [0u8; 3];
                for o in 0..3 {
                    let prob = sigmoid(eff_b[o] + linear(&eff_beta[o], &centers, &x));
                    true_sum[o] += prob;
                    y[o] = u8::from(rng.random::<f64>() < prob);
                    pos[o] += y[o] as usize;
                }
                for (s, v) in feat_sum.iter_mut().zip(&x) {
                    *s += v;
                }
                rows += 1;
                corrupt(&mut x, &schema, corr, &mut counts, &mut rng, age_idx, sev_idx);
                if minor {
                    if let Some(a) = age_idx {
                        x[a] = minor_age;
                    }
                }
                builder.push(&pid, &format!("V{visit_no:09}"), granular, &x, y)?;
            }
        }
        let by_outcome = |f: &dyn Fn(usize) -> f64| -> BTreeMap<Outcome, f64> {
            Outcome::ALL.iter().map(|&o| (o, f(o.index()))).collect()
        };
        let denom = rows.max(1) as f64;
        groups.push(GroupTruth {
            granular: g.granular.clone(),
            coarse: g.coarse.clone(),
            patients: g.patients,
            visits: rows,
            true_rate: by_outcome(&|o| true_sum[o] / denom),
            empirical_rate: by_outcome(&|o| pos[o] as f64 / denom),
            feature_means: schema.names().zip(&feat_sum).map(|(n, s)| (n.to_string(), s / denom)).collect(),
            intercept: by_outcome(&|o| eff_b[o]),
            coefficients: Outcome::ALL
                .iter()
                .map(|&o| {
                    let m = schema
                        .names()
                        .zip(&eff_beta[o.index()])
                        .filter(|(_, b)| **b != 0.0)
                        .map(|(n, b)| (n.to_string(), *b))
                        .collect();
                    (o, m)
                })
                .collect(),
        });
    }
    let truth = GroundTruth {
        seed: config.seed,
        base_intercepts: Outcome::ALL.iter().map(|&o| (o, intercepts[o.index()])).collect(),
        centers: schema.names().zip(&centers).map(|(n, c)| (n.to_string(), *c)).collect(),
        groups,
        corruption: counts,
    };
    Ok((builder.build(), truth))
}

fn corrupt(
    x: &mut [f64],
    schema: &FeatureSchema,
    corr: &Corruption,
    counts: &mut CorruptionCounts,
    rng: &mut Rng,
    age_idx: Option<usize>,
    sev_idx: Option<usize>,
) {
    if corr.missing_severity_rate > 0.0 {
        if let Some(s) = sev_idx {
            if rng.random::<f64>() < corr.missing_severity_rate {
                x[s] = f64::NAN;
                counts.missing_severity += 1;
            }
        }
    }
    if corr.missing_rate == 0.0 && corr.invalid_rate == 0.0 {
        return;
    }
    for (j, spec) in schema.features().iter().enumerate() {
        let Some((lo, hi)) = spec.range else { continue };
        if Some(j) == age_idx || Some(j) == sev_idx {
            continue;
        }
        let u = rng.random::<f64>();
        if u < corr.missing_rate {
            x[j] = f64::NAN;
            counts.missing_values += 1;
        } else if u < corr.missing_rate + corr.invalid_rate {
            x[j] = hi + (hi - lo).max(1.0);
            counts.invalid_values += 1;
        }
    }
}

/// Writes the cohort in the standard cohort file format.
pub fn emit(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    write_cohort(cohort, path)
}

/// Features of the compact schema used by [`standard_scenario`].
pub const COMPACT_FEATURES: [&str; 12] = [
    "age",
    "gender",
    "n_ed_365d",
    "triage_temperature",
    "triage_heartrate",
    "triage_resprate",
    "triage_o2sat",
    "triage_sbp",
    "triage_dbp",
    "triage_acuity",
    "cci_CHF",
    "eci_Arrhythmia",
];

/// Base distributions for the triage and demographic features.
pub fn standard_feature_bases() -> BTreeMap<String, FeatureBase> {
    let c = |mean: f64, sd: f64, integer: bool| FeatureBase::Continuous(ContinuousBase { mean, sd, integer });
    let mut m = BTreeMap::new();
    for (name, base) in [
        ("age", c(52.0, 19.0, true)),
        ("n_ed_30d", c(0.3, 1.0, true)),
        ("n_ed_90d", c(0.7, 1.8, true)),
        ("n_ed_365d", c(1.5, 3.0, true)),
        ("n_hosp_30d", c(0.1, 0.6, true)),
        ("n_hosp_90d", c(0.3, 1.0, true)),
        ("n_hosp_365d", c(0.8, 1.8, true)),
        ("n_icu_30d", c(0.0, 0.3, true)),
        ("n_icu_90d", c(0.0, 0.4, true)),
        ("n_icu_365d", c(0.1, 0.6, true)),
        ("triage_temperature", c(36.8, 0.6, false)),
        ("triage_heartrate", c(87.0, 18.0, true)),
        ("triage_resprate", c(18.0, 2.5, true)),
        ("triage_o2sat", c(98.0, 2.5, true)),
        ("triage_sbp", c(135.0, 23.0, true)),
        ("triage_dbp", c(78.0, 15.0, true)),
        ("triage_pain", c(4.0, 3.5, true)),
        ("triage_acuity", c(2.6, 0.7, true)),
    ] {
        m.insert(name.to_string(), base);
    }
    m.insert("gender".into(), FeatureBase::Binary { prevalence: 0.54 });
    m.insert("cci_CHF".into(), FeatureBase::Binary { prevalence: 0.08 });
    m.insert("eci_Arrhythmia".into(), FeatureBase::Binary { prevalence: 0.12 });
    m
}

/// Shared coefficients (log-odds per native unit) for the compact features.
pub fn standard_coefficients() -> BTreeMap<String, f64> {
    [
        ("age", 0.03),
        ("gender", 0.1),
        ("n_ed_365d", 0.08),
        ("triage_temperature", 0.3),
        ("triage_heartrate", 0.012),
        ("triage_resprate", 0.08),
        ("triage_o2sat", -0.08),
        ("triage_sbp", -0.004),
        ("triage_dbp", -0.004),
        ("triage_acuity", -1.1),
        ("cci_CHF", 0.6),
        ("eci_Arrhythmia", 0.4),
    ]
    .into_iter()
    .map(|(n, b)| (n.to_string(), b))
    .collect()
}

/// A null scenario over the 26 standard groups: patients per group are
/// `max(min_patients, round(scale * reference patients))`, mean visits follow
/// the reference stays-per-patient, and outcome base rates are 0.45, 0.06
/// and 0.03. Returns the config with the compact schema and the taxonomy.
pub fn standard_scenario(seed: u64, scale: f64, min_patients: usize) -> (ScenarioConfig, Arc<FeatureSchema>, Arc<Taxonomy>) {
    let schema = Arc::new(FeatureSchema::standard().select(&COMPACT_FEATURES).expect("compact features exist"));
    let taxonomy = Arc::new(Taxonomy::standard());
    let groups = STANDARD_GROUPS
        .iter()
        .map(|&(granular, coarse, patients, stays)| GroupSpec {
            patients: ((scale * patients as f64).round() as usize).max(min_patients),
            mean_visits: stays as f64 / patients as f64,
            ..GroupSpec::new(granular, coarse, 0)
        })
        .collect();
    let bases = standard_feature_bases();
    let features = COMPACT_FEATURES
        .iter()
        .map(|&n| (n.to_string(), bases[n].clone()))
        .collect();
    let mut revisit = BTreeMap::new();
    for (name, b) in standard_coefficients() {
        revisit.insert(name, b * 0.3);
    }
    let config = ScenarioConfig {
        seed,
        features,
        outcomes: [
            (Outcome::Hospitalization, OutcomeBase::BaseRate(0.45)),
            (Outcome::Critical, OutcomeBase::BaseRate(0.06)),
            (Outcome::Revisit, OutcomeBase::BaseRate(0.03)),
        ]
        .into_iter()
        .collect(),
        coefficients: standard_coefficients(),
        outcome_coefficients: [(Outcome::Revisit, revisit)].into_iter().collect(),
        corruption: Corruption::default(),
        groups,
    };
    (config, schema, taxonomy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::load_cohort;
    use crate::cohort::tests::{tiny_schema, tiny_taxonomy};

    fn tiny_config(seed: u64, patients: usize) -> ScenarioConfig {
        ScenarioConfig::from_toml_str(&format!(
            r#"
            seed = {seed}
            [features.age]
            mean = 50.0
            sd = 15.0
            integer = true
            [features.gender]
            prevalence = 0.5
            [features.triage_heartrate]
            mean = 85.0
            sd = 15.0
            [features.triage_acuity]
            mean = 3.0
            sd = 1.0
            integer = true
            [outcomes]
            hospitalization = {{ base_rate = 0.45 }}
            critical = {{ intercept = -2.0 }}
            revisit = {{ base_rate = 0.03 }}
            [coefficients]
            age = 0.02
            triage_acuity = -0.5
            [[groups]]
            granular = "A*"
            coarse = "A"
            patients = {patients}
            mean_visits = 1.5
            [[groups]]
            granular = "A1"
            coarse = "A"
            patients = {patients}
            [groups.outcome_offsets]
            hospitalization = 1.0
            [[groups]]
            granular = "B*"
            coarse = "B"
            patients = {patients}
            [groups.mean_shifts]
            age = 10.0
            [[groups]]
            granular = "B1"
            coarse = "B"
            patients = 0
            "#
        ))
        .unwrap()
    }

    #[test]
    fn same_seed_same_cohort() {
        let cfg = tiny_config(11, 300);
        let (a, ta) = generate(&cfg, tiny_schema(), tiny_taxonomy()).unwrap();
        let (b, tb) = generate(&cfg, tiny_schema(), tiny_taxonomy()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&tiny_config(12, 300), tiny_schema(), tiny_taxonomy()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn values_respect_ranges_and_groups_nest() {
        let (c, truth) = generate(&tiny_config(1, 500), tiny_schema(), tiny_taxonomy()).unwrap();
        for r in 0..c.len() {
            for (j, spec) in c.schema().features().iter().enumerate() {
                assert!(spec.is_valid(c.value(r, j)));
            }
        }
        assert_eq!(truth.group("B1").unwrap().visits, 0);
        assert!(truth.group("A*").unwrap().visits > truth.group("A1").unwrap().visits);
    }

    #[test]
    fn offset_group_rate_and_ledger_consistency() {
        let (c, truth) = generate(&tiny_config(2, 6000), tiny_schema(), tiny_taxonomy()).unwrap();
        let g = truth.group("A1").unwrap();
        let rows = c.rows_in_granular(1);
        let y = c.outcome(Outcome::Hospitalization);
        let emp = rows.iter().map(|&r| y[r] as f64).sum::<f64>() / rows.len() as f64;
        assert_eq!(emp, g.empirical_rate[&Outcome::Hospitalization]);
        for gt in &truth.groups {
            if gt.visits == 0 {
                continue;
            }
            for o in Outcome::ALL {
                let t = gt.true_rate[&o];
                let se = (t * (1.0 - t) / gt.visits as f64).sqrt();
                assert!((gt.empirical_rate[&o] - t).abs() < 3.0 * se + 1e-12, "{} {o}", gt.granular);
            }
        }
    }

    #[test]
    fn base_rate_without_features_is_exact_logit() {
        let mut cfg = tiny_config(3, 10);
        cfg.coefficients.clear();
        let (_, truth) = generate(&cfg, tiny_schema(), tiny_taxonomy()).unwrap();
        assert_eq!(truth.base_intercepts[&Outcome::Hospitalization], logit(0.45));
        assert_eq!(truth.group("A1").unwrap().intercept[&Outcome::Hospitalization], logit(0.45) + 1.0);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = tiny_config(1, 10);
        cfg.groups[1].coarse = "B".into();
        assert!(generate(&cfg, tiny_schema(), tiny_taxonomy()).is_err());
        let mut cfg = tiny_config(1, 10);
        cfg.coefficients.insert("nope".into(), 1.0);
        assert!(matches!(generate(&cfg, tiny_schema(), tiny_taxonomy()), Err(Error::Config(_))));
        let mut cfg = tiny_config(1, 10);
        cfg.features.insert("gender".into(), FeatureBase::Binary { prevalence: 0.6 });
        cfg.groups[0].prevalence_multipliers.insert("gender".into(), 2.0);
        assert!(matches!(generate(&cfg, tiny_schema(), tiny_taxonomy()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn corruption_is_counted_and_visible() {
        let mut cfg = tiny_config(4, 400);
        cfg.corruption = Corruption {
            minor_rate: 0.1,
            missing_severity_rate: 0.05,
            missing_rate: 0.05,
            invalid_rate: 0.05,
        };
        let (c, truth) = generate(&cfg, tiny_schema(), tiny_taxonomy()).unwrap();
        let k = &truth.corruption;
        assert!(k.minors > 0 && k.missing_severity > 0 && k.missing_values > 0 && k.invalid_values > 0);
        let sev = c.schema().severity_index().unwrap();
        let blank = (0..c.len()).filter(|&r| c.value(r, sev).is_nan()).count();
        assert_eq!(blank, k.missing_severity);
    }

    #[test]
    fn emit_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let empty = Cohort::empty(tiny_schema(), tiny_taxonomy());
        emit(&empty, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 1);
        let one = empty.subset(&[]);
        assert_eq!(one.len(), 0);
        let (c, _) = generate(&tiny_config(5, 50), tiny_schema(), tiny_taxonomy()).unwrap();
        let single = c.subset(&[0]);
        emit(&single, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
        emit(&c, &path).unwrap();
        assert_eq!(load_cohort(&path, tiny_schema(), tiny_taxonomy()).unwrap(), c);
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = tiny_config(9, 10);
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        let (scenario, schema, tax) = standard_scenario(1, 0.05, 200);
        scenario.validate(&schema, &tax).unwrap();
        assert_eq!(scenario.groups.len(), 26);
        assert_eq!(ScenarioConfig::from_toml_str(&scenario.to_toml_string()).unwrap(), scenario);
    }
}
