//! End-to-end audit: config, cached stages, report files and figure data.
//!
//! Every stage writes delimited files under the output directory and records
//! a content key in `.cache/<stage>.json`. A stage is skipped when its key
//! and the hashes of its outputs are unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{
    apply_imputer, csv_error, filter_cohort, fit_imputer, group_counts, load_cohort, Cohort, FeatureSchema, Outcome,
    Taxonomy,
};
use crate::decompose::{
    baserate_performance_correlation, build_star_table, downsample_ratio, downsampled_between, outcome_frequencies,
    size_performance_correlation, variation_decomposition, CorrelationResult, OutcomeFrequency, VariationConfig,
    VariationEstimate,
};
use crate::distshift::{
    default_scan_features, enrichment_scan, group_interaction_test, per_feature_interaction_scan, CodeMatrix,
    EnrichmentConfig, EnrichmentUnit, LrTestResult, ModelPair, NestedConfig,
};
use crate::error::{Error, ErrorKind, Result};
use crate::metrics::MetricId;
use crate::resample::{
    bootstrap_metrics, compare_all, make_splits, percentile_ci, reshuffle_metrics, star_label, ComparisonResult,
    DrawKind, DrawSet, EvalSpec, GroupLevel, ScoreModel, ThresholdRule,
};
use crate::riskscores::{cross_validate, fit_logistic, BandScore, TrainConfig};
use crate::rng::{derive_seed, streams};
use crate::stats::median;
use crate::synthgen::{self, ScenarioConfig, COMPACT_FEATURES};

pub const FIGURE_IDS: [&str; 4] = ["performance", "variation", "variation_downsampled", "outcome_freqs"];

const MANIFEST: &str = "manifest.json";
const CACHE_DIR: &str = ".cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

/// Bonferroni factor: `"auto"` or an explicit number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrectionFactor {
    Explicit(f64),
    Auto(AutoKeyword),
}

impl Default for CorrectionFactor {
    fn default() -> Self {
        CorrectionFactor::Auto(AutoKeyword::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Cohort file; exclusive with `synth`.
    pub cohort: Option<PathBuf>,
    /// Scenario file; the cohort is generated into `<output>/synth/`.
    pub synth: Option<PathBuf>,
    /// `standard`, `compact`, or a schema file. Default `standard`.
    pub schema: Option<String>,
    /// `standard` or a taxonomy file. Default `standard`; ignored with `synth`.
    pub taxonomy: Option<String>,
    /// Long-format code file for enrichment (`patient_id,visit_id,code`).
    pub codes: Option<PathBuf>,
    /// Skip the adult / recorded-severity filter.
    pub no_filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub outcomes: Vec<Outcome>,
    pub metrics: Vec<MetricId>,
    pub iterations: usize,
    pub train_fraction: f64,
    pub draws: DrawKind,
    pub thresholds: ThresholdRule,
    pub correction_factor: CorrectionFactor,
    pub ci_level: f64,
    /// Also draw downsampled coarse groups at `coarse / granular` ratio.
    pub downsample: bool,
    pub ddof: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            outcomes: Outcome::ALL.to_vec(),
            metrics: vec![MetricId::Auprc, MetricId::Auroc, MetricId::Fpr, MetricId::Fnr],
            iterations: 1000,
            train_fraction: 0.3,
            draws: DrawKind::Reshuffle,
            thresholds: ThresholdRule::Prevalence,
            correction_factor: CorrectionFactor::default(),
            ci_level: 0.95,
            downsample: true,
            ddof: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Output subdirectory name.
    pub name: String,
    pub kind: ModelKind,
    /// Band table: `news`, `cart`, or a TOML file.
    pub table: Option<String>,
    /// Logistic training options; the fold seed is the audit seed.
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichmentSection {
    pub enabled: bool,
    /// Binary schema features with this prefix are the codes when no code
    /// file is given.
    pub feature_prefix: String,
    pub unit: EnrichmentUnit,
    pub min_count: u64,
    pub top_k: usize,
    pub alpha: f64,
    pub correction_factor: Option<f64>,
}

impl Default for EnrichmentSection {
    fn default() -> Self {
        let d = EnrichmentConfig::default();
        Self {
            enabled: true,
            feature_prefix: "eci_".into(),
            unit: d.unit,
            min_count: d.min_count,
            top_k: d.top_k,
            alpha: d.alpha,
            correction_factor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSection {
    pub enabled: bool,
    /// Defaults to the evaluation outcomes.
    pub outcomes: Option<Vec<Outcome>>,
    /// Features of model (1); default the whole schema.
    pub features: Option<Vec<String>>,
    /// Features scanned one at a time; default the shipped screen list.
    pub scan_features: Option<Vec<String>>,
    /// Factor for the per-feature scan; default scan size x coarse groups.
    pub correction_factor: Option<f64>,
    pub rank_tol: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LrSection {
    fn default() -> Self {
        let d = NestedConfig::default();
        Self {
            enabled: true,
            outcomes: None,
            features: None,
            scan_features: None,
            correction_factor: None,
            rank_tol: d.rank_tol,
            tol: d.tol,
            max_iter: d.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Write stage wall times into the manifest (breaks byte-identity).
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub enrichment: EnrichmentSection,
    #[serde(default)]
    pub lr_tests: LrSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl AuditConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.base_dir = base_dir.into();
        c.check()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, base)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    fn check(&self) -> Result<()> {
        let e = &self.evaluation;
        if e.iterations < 2 {
            return Err(Error::Config("evaluation.iterations must be at least 2".into()));
        }
        if e.outcomes.is_empty() || e.metrics.is_empty() {
            return Err(Error::Config("evaluation needs at least one outcome and one metric".into()));
        }
        if !(e.train_fraction > 0.0 && e.train_fraction < 1.0) {
            return Err(Error::Config("evaluation.train_fraction must be in (0, 1)".into()));
        }
        if !(e.ci_level > 0.0 && e.ci_level < 1.0) {
            return Err(Error::Config("evaluation.ci_level must be in (0, 1)".into()));
        }
        if let CorrectionFactor::Explicit(f) = e.correction_factor {
            if !(f >= 1.0) {
                return Err(Error::Config("correction_factor must be >= 1".into()));
            }
        }
        match (&self.data.cohort, &self.data.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("data.cohort and data.synth are exclusive".into())),
            (None, None) => return Err(Error::Config("set data.cohort or data.synth".into())),
            _ => {}
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models configured".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            let ok = !m.name.is_empty() && m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok || m.name == "figures" || m.name == "synth" {
                return Err(Error::Config(format!("bad model name {:?}", m.name)));
            }
            if self.models[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate model name {:?}", m.name)));
            }
            match m.kind {
                ModelKind::Band if m.table.is_none() => {
                    return Err(Error::Config(format!("band model {:?} needs a table", m.name)))
                }
                ModelKind::Logistic => m.train.validate()?,
                _ => {}
            }
        }
        for p in [&self.data.cohort, &self.data.synth, &self.data.codes].into_iter().flatten() {
            if !self.resolve(p).is_file() {
                return Err(Error::Config(format!("file not found: {}", self.resolve(p).display())));
            }
        }
        Ok(())
    }

    /// `outcomes x metrics x granular groups`, or the explicit factor.
    pub fn correction_factor(&self, taxonomy: &Taxonomy) -> f64 {
        match self.evaluation.correction_factor {
            CorrectionFactor::Explicit(f) => f,
            CorrectionFactor::Auto(_) => auto_correction_factor(
                self.evaluation.outcomes.len(),
                self.evaluation.metrics.len(),
                taxonomy.n_granular(),
            ),
        }
    }

    fn schema(&self) -> Result<Arc<FeatureSchema>> {
        let schema = match self.data.schema.as_deref() {
            None | Some("standard") => FeatureSchema::standard(),
            Some("compact") => FeatureSchema::standard().select(&COMPACT_FEATURES)?,
            Some(p) => FeatureSchema::load(self.resolve(Path::new(p)))?,
        };
        Ok(Arc::new(schema))
    }

    fn taxonomy(&self) -> Result<Arc<Taxonomy>> {
        Ok(Arc::new(match self.data.taxonomy.as_deref() {
            None | Some("standard") => Taxonomy::standard(),
            Some(p) => Taxonomy::load(self.resolve(Path::new(p)))?,
        }))
    }

    fn band(&self, table: &str) -> Result<BandScore> {
        match table {
            "news" => Ok(BandScore::news()),
            "cart" => Ok(BandScore::cart()),
            p => BandScore::load(self.resolve(Path::new(p))),
        }
    }
}

pub fn auto_correction_factor(outcomes: usize, metrics: usize, granular_groups: usize) -> f64 {
    (outcomes * metrics * granular_groups).max(1) as f64
}

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct AuditError {
    pub stage: String,
    pub source: Error,
}

impl AuditError {
    pub fn kind(&self) -> ErrorKind {
        self.source.kind()
    }
}

impl fmt::Display for AuditError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for AuditError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait StageContext<T> {
    fn stage(self, name: &str) -> std::result::Result<T, AuditError>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, name: &str) -> std::result::Result<T, AuditError> {
        self.map_err(|source| AuditError { stage: name.to_string(), source })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Rerun every stage regardless of cache state.
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub name: String,
    pub status: StageStatus,
    pub seconds: f64,
}

/// What a run did and where it put the report.
#[derive(Debug, Clone)]
pub struct AuditSummary {
    pub output_dir: PathBuf,
    pub stages: Vec<StageOutcome>,
    pub correction_factor: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CacheRecord {
    key: String,
    outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn json_string<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serialises")
}

struct Runner<'a> {
    out: PathBuf,
    force: bool,
    stages: Vec<StageOutcome>,
    config: &'a AuditConfig,
}

impl Runner<'_> {
    /// Runs `f` unless the cache record for `name` matches `key` and every
    /// output still has its recorded hash.
    fn stage(
        &mut self,
        name: &str,
        key_parts: &[&str],
        outputs: &[&str],
        f: impl FnOnce(&Path) -> Result<()>,
    ) -> std::result::Result<(), AuditError> {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION"));
        h.update([0]);
        h.update(name);
        for p in key_parts {
            h.update([0]);
            h.update(p);
        }
        let key: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let record_path = self.out.join(CACHE_DIR).join(format!("{}.json", name.replace('/', "__")));
        if !self.force {
            if let Ok(text) = fs::read_to_string(&record_path) {
                if let Ok(rec) = serde_json::from_str::<CacheRecord>(&text) {
                    let fresh = rec.key == key
                        && outputs.iter().all(|o| {
                            rec.outputs.get(*o).is_some_and(|h| file_hash(&self.out.join(o)).ok().as_ref() == Some(h))
                        });
                    if fresh {
                        self.stages.push(StageOutcome { name: name.into(), status: StageStatus::Skipped, seconds: 0.0 });
                        return Ok(());
                    }
                }
            }
        }
        let start = Instant::now();
        for o in outputs {
            if let Some(parent) = self.out.join(o).parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)).stage(name)?;
            }
        }
        f(&self.out).stage(name)?;
        let mut rec = CacheRecord { key, outputs: BTreeMap::new() };
        for o in outputs {
            rec.outputs.insert(o.to_string(), file_hash(&self.out.join(o)).stage(name)?);
        }
        write_text(&record_path, &serde_json::to_string_pretty(&rec).expect("record serialises")).stage(name)?;
        self.stages.push(StageOutcome {
            name: name.into(),
            status: StageStatus::Ran,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    fn hash_of(&self, rel: &str, stage: &str) -> std::result::Result<String, AuditError> {
        file_hash(&self.out.join(rel)).stage(stage)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads (or generates) and filters the cohort described by `config`.
pub fn load_configured_cohort(config: &AuditConfig) -> Result<Cohort> {
    let (path, schema, taxonomy) = cohort_source(config)?;
    let c = load_cohort(path, schema, taxonomy)?;
    Ok(if config.data.no_filter { c } else { filter_cohort(&c) })
}

fn cohort_source(config: &AuditConfig) -> Result<(PathBuf, Arc<FeatureSchema>, Arc<Taxonomy>)> {
    match (&config.data.cohort, &config.data.synth) {
        (Some(p), _) => Ok((config.resolve(p), config.schema()?, config.taxonomy()?)),
        (None, Some(s)) => {
            let scenario = ScenarioConfig::load(config.resolve(s))?;
            let dir = config.output_path().join("synth");
            Ok((dir.join("cohort.csv"), config.schema()?, Arc::new(scenario.taxonomy()?)))
        }
        (None, None) => Err(Error::Config("set data.cohort or data.synth".into())),
    }
}

/// Generates a scenario into `dir`: cohort, schema, taxonomy and ground truth.
pub fn write_scenario(scenario: &ScenarioConfig, schema: Arc<FeatureSchema>, dir: &Path) -> Result<()> {
    let taxonomy = Arc::new(scenario.taxonomy()?);
    let (cohort, truth) = synthgen::generate(scenario, schema.clone(), taxonomy.clone())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    synthgen::emit(&cohort, dir.join("cohort.csv"))?;
    schema.save(dir.join("schema.csv"))?;
    taxonomy.save(dir.join("taxonomy.csv"))?;
    truth.save(dir.join("ground_truth.json"))?;
    write_text(&dir.join("scenario.toml"), &scenario.to_toml_string())
}

/// Runs every stage and writes the report into the configured output
/// directory.
pub fn run_audit(config: &AuditConfig, options: &RunOptions) -> std::result::Result<AuditSummary, AuditError> {
    let out = config.output_path();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).stage("setup")?;
    let mut r = Runner { out: out.clone(), force: options.force, stages: Vec::new(), config };
    let config_json = json_string(config);

    // synth
    if let Some(s) = &config.data.synth {
        let scenario = ScenarioConfig::load(config.resolve(s)).stage("synth")?;
        let schema = config.schema().stage("synth")?;
        let key = json_string(&scenario) + &json_string(&config.data.schema);
        let outputs = ["synth/cohort.csv", "synth/schema.csv", "synth/taxonomy.csv", "synth/ground_truth.json", "synth/scenario.toml"];
        r.stage("synth", &[&key], &outputs, |out| write_scenario(&scenario, schema.clone(), &out.join("synth")))?;
    }

    // load + filter
    let (cohort_path, schema, taxonomy) = cohort_source(config).stage("load")?;
    let cohort_hash = file_hash(&cohort_path).stage("load")?;
    let raw = load_cohort(&cohort_path, schema.clone(), taxonomy.clone()).stage("load")?;
    let cohort = if config.data.no_filter { raw.clone() } else { filter_cohort(&raw) };
    if cohort.is_empty() {
        return Err(Error::InvalidInput("no visits left after filtering".into())).stage("filter");
    }
    let data_key = format!(
        "{cohort_hash}|{}|{}|{}",
        json_string(schema.as_ref()),
        json_string(taxonomy.as_ref()),
        config.data.no_filter
    );
    r.stage("filter", &[&data_key], &["cohort_summary.csv"], |out| {
        write_cohort_summary(&raw, &cohort, &out.join("cohort_summary.csv"))
    })?;

    let factor = config.correction_factor(&taxonomy);
    let seed = config.seed;
    let eval_key = json_string(&config.evaluation);

    // outcome frequencies (shared by every model)
    let freq_seed = derive_seed(seed, streams::OUTCOME_FREQS, 0);
    r.stage("outcome_freqs", &[&data_key, &eval_key, &seed.to_string()], &["outcome_freqs.csv"], |out| {
        let f = outcome_frequencies(
            &cohort,
            &config.evaluation.outcomes,
            config.evaluation.iterations,
            config.evaluation.ci_level,
            freq_seed,
        )?;
        write_outcome_freqs(&f, &out.join("outcome_freqs.csv"))
    })?;
    let freqs = read_outcome_freqs(&out.join("outcome_freqs.csv"), &taxonomy).stage("outcome_freqs")?;
    let sizes = patient_sizes(&cohort);

    for model in &config.models {
        run_model(&mut r, model, &cohort, &data_key, factor, &sizes, &freqs)?;
    }

    // enrichment
    if config.enrichment.enabled {
        let codes_hash = match &config.data.codes {
            Some(p) => file_hash(&config.resolve(p)).stage("enrichment")?,
            None => String::new(),
        };
        let key = json_string(&config.enrichment) + &codes_hash;
        r.stage("enrichment", &[&data_key, &key], &["enrichment.csv", "enrichment_top.csv"], |out| {
            run_enrichment(config, &cohort, out)
        })?;
    }

    // likelihood-ratio tests
    if config.lr_tests.enabled {
        let key = json_string(&config.lr_tests) + &eval_key;
        r.stage("lr_tests", &[&data_key, &key], &["lr_tests.csv"], |out| run_lr_tests(config, &cohort, out))?;
    }

    // figures
    let mut fig_inputs = vec![r.hash_of("outcome_freqs.csv", "figures")?];
    for m in &config.models {
        fig_inputs.push(r.hash_of(&format!("{}/group_cis.csv", m.name), "figures")?);
        fig_inputs.push(r.hash_of(&format!("{}/variation.csv", m.name), "figures")?);
    }
    let fig_outputs: Vec<String> = config
        .models
        .iter()
        .flat_map(|m| {
            ["performance", "variation", "variation_downsampled"].map(|id| format!("figures/{}_{id}.csv", m.name))
        })
        .chain(std::iter::once("figures/outcome_freqs.csv".to_string()))
        .collect();
    let fig_refs: Vec<&str> = fig_outputs.iter().map(String::as_str).collect();
    let fig_key = fig_inputs.join("|");
    r.stage("figures", &[&fig_key], &fig_refs, |out| {
        for m in &config.models {
            for id in ["performance", "variation", "variation_downsampled"] {
                let text = emit_figure(out, id, Some(&m.name))?;
                write_text(&out.join(format!("figures/{}_{id}.csv", m.name)), &text)?;
            }
        }
        write_text(&out.join("figures/outcome_freqs.csv"), &emit_figure(out, "outcome_freqs", None)?)
    })?;

    let stages = std::mem::take(&mut r.stages);
    write_manifest(config, &out, &config_json, factor, &stages).stage("manifest")?;
    Ok(AuditSummary { output_dir: out, stages, correction_factor: factor })
}

fn patient_sizes(c: &Cohort) -> Vec<usize> {
    let tax = c.taxonomy();
    let mut sizes = vec![0; tax.n_granular()];
    for g in group_counts(c) {
        if let Some(i) = tax.granular_index(&g.granular) {
            sizes[i] = g.patients;
        }
    }
    sizes
}

fn write_cohort_summary(raw: &Cohort, filtered: &Cohort, path: &Path) -> Result<()> {
    let before = group_counts(raw);
    let after = group_counts(filtered);
    let rows = before.iter().map(|b| {
        let a = after.iter().find(|a| a.granular == b.granular);
        vec![
            b.coarse.clone(),
            b.granular.clone(),
            b.patients.to_string(),
            b.visits.to_string(),
            a.map_or(0, |a| a.patients).to_string(),
            a.map_or(0, |a| a.visits).to_string(),
        ]
    });
    write_csv(
        path,
        &["coarse", "granular", "patients_raw", "visits_raw", "patients", "visits"],
        rows,
    )
}

fn write_outcome_freqs(freqs: &[OutcomeFrequency], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["outcome", "coarse", "granular", "visits", "rate", "ci_low", "ci_high"],
        freqs.iter().map(|f| {
            vec![
                f.outcome.to_string(),
                f.coarse.clone(),
                f.granular.clone(),
                f.visits.to_string(),
                fmt_opt(f.rate),
                fmt_opt(f.ci.map(|c| c.0)),
                fmt_opt(f.ci.map(|c| c.1)),
            ]
        }),
    )
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse { line: 0, message: format!("bad number {s:?}") })
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| csv_error(path, e))?;
    Ok((header, rows))
}

fn read_outcome_freqs(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<OutcomeFrequency>> {
    let (_, rows) = read_rows(path)?;
    rows.iter()
        .map(|r| {
            let granular_index = taxonomy
                .granular_index(&r[2])
                .ok_or_else(|| Error::UnknownGroup { line: 0, id: r[2].to_string() })?;
            let lo = parse_opt(&r[5])?;
            let hi = parse_opt(&r[6])?;
            Ok(OutcomeFrequency {
                outcome: r[0].parse()?,
                coarse: r[1].to_string(),
                granular: r[2].to_string(),
                granular_index,
                visits: r[3].parse().map_err(|_| Error::Parse { line: 0, message: "bad visit count".into() })?,
                rate: parse_opt(&r[4])?,
                ci: lo.zip(hi),
            })
        })
        .collect()
}

fn run_model(
    r: &mut Runner<'_>,
    model: &ModelConfig,
    cohort: &Cohort,
    data_key: &str,
    factor: f64,
    sizes: &[usize],
    freqs: &[OutcomeFrequency],
) -> std::result::Result<(), AuditError> {
    let config = r.config;
    let name = &model.name;
    let stage_draws = format!("{name}/draws");
    let draws_rel = format!("{name}/draws.csv");
    let notes_rel = format!("{name}/notes.txt");
    let model_key = json_string(model);
    let eval_key = json_string(&config.evaluation);
    let seed = config.seed;
    r.stage(
        &stage_draws,
        &[data_key, &model_key, &eval_key, &seed.to_string()],
        &[draws_rel.as_str(), notes_rel.as_str()],
        |out| {
            let draws = compute_draws(config, model, cohort)?;
            draws.save_csv(out.join(&draws_rel), cohort.taxonomy())?;
            let mut notes = draws.notes.join("\n");
            if !notes.is_empty() {
                notes.push('\n');
            }
            write_text(&out.join(&notes_rel), &notes)
        },
    )?;
    let draws_hash = r.hash_of(&draws_rel, &stage_draws)?;
    let draws = DrawSet::load_csv(r.out.join(&draws_rel), cohort.taxonomy()).stage(&stage_draws)?;
    let tax = cohort.taxonomy();

    let stage = format!("{name}/compare");
    let outputs = [format!("{name}/comparisons.csv"), format!("{name}/star_table.csv"), format!("{name}/group_cis.csv")];
    let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    let level = config.evaluation.ci_level;
    r.stage(&stage, &[&draws_hash, &factor.to_string(), &level.to_string()], &refs, |out| {
        let comps = compare_all(&draws, tax, factor)?;
        write_comparisons(&comps, &out.join(&outputs[0]))?;
        build_star_table(&comps).write_csv(out.join(&outputs[1]))?;
        write_group_cis(&draws, tax, level, &out.join(&outputs[2]))
    })?;

    let stage = format!("{name}/variation");
    let var_rel = format!("{name}/variation.csv");
    let vcfg = VariationConfig { ddof: config.evaluation.ddof, level };
    r.stage(&stage, &[&draws_hash, &json_string(&vcfg)], &[var_rel.as_str()], |out| {
        let mut v = variation_decomposition(&draws, tax, &vcfg)?;
        if config.evaluation.downsample {
            v.extend(downsampled_between(&draws, tax, &vcfg)?);
        }
        write_variation(&v, &out.join(&var_rel))
    })?;

    let stage = format!("{name}/correlations");
    let corr_rel = format!("{name}/correlations.csv");
    let freq_hash = r.hash_of("outcome_freqs.csv", &stage)?;
    let size_key = json_string(&sizes);
    r.stage(&stage, &[&draws_hash, &freq_hash, &size_key], &[corr_rel.as_str()], |out| {
        let size = size_performance_correlation(&draws, sizes);
        let base = baserate_performance_correlation(&draws, freqs);
        write_correlations(&size, &base, &out.join(&corr_rel))
    })
}

/// Draws for one model following the evaluation section.
pub fn compute_draws(config: &AuditConfig, model: &ModelConfig, cohort: &Cohort) -> Result<DrawSet> {
    let ev = &config.evaluation;
    let seed = config.seed;
    let mut spec = EvalSpec::new(ev.outcomes.clone(), ev.metrics.clone());
    if ev.downsample {
        spec.downsample_ratio = Some(downsample_ratio(cohort.taxonomy()));
    }
    let plans = make_splits(cohort, ev.iterations, ev.train_fraction, seed)?;
    match (model.kind, ev.draws) {
        (ModelKind::Band, DrawKind::Reshuffle) => {
            let band = config.band(model.table.as_deref().unwrap_or_default())?;
            reshuffle_metrics(cohort, &ScoreModel::Band(band), &spec, &plans, ev.thresholds, seed)
        }
        (ModelKind::Band, DrawKind::Bootstrap) => {
            let band = config.band(model.table.as_deref().unwrap_or_default())?;
            let all_rows: Vec<usize> = (0..cohort.len()).collect();
            let state = fit_imputer(cohort, &vec![true; cohort.len()], cohort.schema())?;
            let imputed = apply_imputer(cohort, &state)?;
            let scores = band.score_cohort(&imputed, &all_rows)?;
            let per_outcome = vec![scores; ev.outcomes.len()];
            bootstrap_metrics(cohort, &per_outcome, &spec, ev.iterations, ev.thresholds, seed)
        }
        (ModelKind::Logistic, kind) => {
            // C is chosen once per outcome on the first plan's train side,
            // then held fixed across plans.
            let mut train = model.train.clone();
            train.seed = seed;
            let first = &plans[0];
            let (train_rows, test_rows) = first.rows(cohort);
            let state = fit_imputer(cohort, &first.train_mask(cohort), cohort.schema())?;
            let imputed = apply_imputer(cohort, &state)?;
            let mut chosen = Vec::with_capacity(ev.outcomes.len());
            for &o in &ev.outcomes {
                let c = if train.c_grid.len() == 1 {
                    train.c_grid[0]
                } else {
                    cross_validate(&imputed, &train_rows, o, &train)?.chosen
                };
                chosen.push(TrainConfig { c_grid: vec![c], ..train.clone() });
            }
            match kind {
                DrawKind::Reshuffle => {
                    // one model config per outcome: run outcome by outcome
                    // when the chosen C differs
                    if chosen.windows(2).all(|w| w[0] == w[1]) {
                        reshuffle_metrics(cohort, &ScoreModel::Logistic(chosen[0].clone()), &spec, &plans, ev.thresholds, seed)
                    } else {
                        let mut parts = Vec::new();
                        for (k, &o) in ev.outcomes.iter().enumerate() {
                            let sub = EvalSpec { outcomes: vec![o], ..spec.clone() };
                            parts.push(reshuffle_metrics(
                                cohort,
                                &ScoreModel::Logistic(chosen[k].clone()),
                                &sub,
                                &plans,
                                ev.thresholds,
                                seed,
                            )?);
                        }
                        DrawSet::concat(parts)
                    }
                }
                DrawKind::Bootstrap => {
                    // fixed model from the first plan, bootstrapped on its test rows
                    let test = cohort.subset(&test_rows);
                    let test_imputed = imputed.subset(&test_rows);
                    let all: Vec<usize> = (0..test.len()).collect();
                    let mut scores = Vec::with_capacity(ev.outcomes.len());
                    for (k, &o) in ev.outcomes.iter().enumerate() {
                        let m = fit_logistic(&imputed, &train_rows, o, &chosen[k])?;
                        scores.push(m.predict(&test_imputed, &all)?);
                    }
                    bootstrap_metrics(&test, &scores, &spec, ev.iterations, ev.thresholds, seed)
                }
            }
        }
    }
}

fn write_comparisons(comps: &[ComparisonResult], path: &Path) -> Result<()> {
    let header = [
        "outcome", "metric", "coarse", "granular", "valid_pairs", "dropped_pairs", "available", "mean_diff", "sd_diff",
        "z", "p_raw", "p_corrected", "stars", "skewness", "kurtosis", "reason",
    ];
    write_csv(
        path,
        &header,
        comps.iter().map(|c| {
            let t = c.test.as_ref();
            vec![
                c.outcome.to_string(),
                c.metric.to_string(),
                c.coarse.clone(),
                c.granular.clone(),
                t.map(|t| t.valid_pairs.to_string()).unwrap_or_default(),
                t.map(|t| t.dropped_pairs.to_string()).unwrap_or_default(),
                c.available().to_string(),
                fmt_opt(t.map(|t| t.mean_diff)),
                fmt_opt(t.map(|t| t.sd_diff)),
                fmt_opt(t.map(|t| t.z)),
                fmt_opt(t.map(|t| t.p_raw)),
                fmt_opt(c.p_corrected()),
                star_label(c.stars()).to_string(),
                fmt_opt(t.map(|t| t.skewness)),
                fmt_opt(t.map(|t| t.kurtosis)),
                c.reason.clone().unwrap_or_default(),
            ]
        }),
    )
}

fn write_group_cis(draws: &DrawSet, tax: &Taxonomy, level: f64, path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for key in draws.keys() {
        let d = draws.get(key.outcome, key.metric, key.group).expect("listed key");
        let v = d.valid();
        let coarse = match key.group.level {
            GroupLevel::Granular => tax.coarse_names()[tax.coarse_of(key.group.index)].clone(),
            _ => tax.coarse_names()[key.group.index].clone(),
        };
        let (med, ci) = if v.is_empty() { (None, None) } else { (Some(median(&v)), percentile_ci(d.values, level).ok()) };
        rows.push(vec![
            key.outcome.to_string(),
            key.metric.to_string(),
            key.group.level.as_str().to_string(),
            key.group.name(tax).to_string(),
            coarse,
            v.len().to_string(),
            fmt_opt(med),
            fmt_opt(ci.map(|c| c.0)),
            fmt_opt(ci.map(|c| c.1)),
        ]);
    }
    write_csv(
        path,
        &["outcome", "metric", "level", "group", "coarse", "n_valid", "median", "ci_low", "ci_high"],
        rows,
    )
}

fn write_variation(v: &[VariationEstimate], path: &Path) -> Result<()> {
    write_csv(
        path,
        &[
            "outcome", "metric", "downsampled", "between", "between_low", "between_high", "within", "within_low",
            "within_high", "between_draws", "within_draws", "excluded_coarse",
        ],
        v.iter().map(|e| {
            vec![
                e.outcome.to_string(),
                e.metric.to_string(),
                e.downsampled.to_string(),
                e.between.to_string(),
                e.between_ci.0.to_string(),
                e.between_ci.1.to_string(),
                e.within.to_string(),
                e.within_ci.0.to_string(),
                e.within_ci.1.to_string(),
                e.between_draws.to_string(),
                e.within_draws.to_string(),
                e.excluded_coarse.join(";"),
            ]
        }),
    )
}

fn write_correlations(size: &[CorrelationResult], base: &[CorrelationResult], path: &Path) -> Result<()> {
    let rows = size
        .iter()
        .map(|c| ("group_size", c))
        .chain(base.iter().map(|c| ("base_rate", c)))
        .map(|(what, c)| {
            vec![
                what.to_string(),
                c.outcome.to_string(),
                c.metric.to_string(),
                c.n_groups.to_string(),
                fmt_opt(c.rho),
                fmt_opt(c.p_value),
                c.note.clone().unwrap_or_default(),
            ]
        });
    write_csv(path, &["against", "outcome", "metric", "n_groups", "rho", "p_value", "note"], rows)
}

fn full_imputed(c: &Cohort) -> Result<Cohort> {
    let state = fit_imputer(c, &vec![true; c.len()], c.schema())?;
    apply_imputer(c, &state)
}

fn run_enrichment(config: &AuditConfig, cohort: &Cohort, out: &Path) -> Result<()> {
    let s = &config.enrichment;
    let codes = match &config.data.codes {
        Some(p) => CodeMatrix::load_long_csv(config.resolve(p), cohort)?,
        None => CodeMatrix::from_prefix(cohort, &s.feature_prefix),
    };
    let ecfg = EnrichmentConfig {
        unit: s.unit,
        min_count: s.min_count,
        top_k: s.top_k,
        alpha: s.alpha,
        correction_factor: s.correction_factor,
    };
    let scan = enrichment_scan(cohort, &codes, &ecfg)?;
    let header = [
        "coarse", "granular", "code", "group_prevalence", "remainder_prevalence", "ratio", "group_with", "group_without",
        "rest_with", "rest_without", "p_value", "p_corrected", "suppressed",
    ];
    let row = |r: &crate::distshift::EnrichmentResult| {
        let t = r.counts;
        // suppressed rows carry no counts or prevalences
        let hide = |v: String| if r.suppressed { String::new() } else { v };
        vec![
            r.coarse.clone(),
            r.granular.clone(),
            r.code.clone(),
            hide(r.group_prevalence.to_string()),
            hide(r.remainder_prevalence.to_string()),
            hide(fmt_opt(r.ratio)),
            t.map(|t| t.a.to_string()).unwrap_or_default(),
            t.map(|t| t.b.to_string()).unwrap_or_default(),
            t.map(|t| t.c.to_string()).unwrap_or_default(),
            t.map(|t| t.d.to_string()).unwrap_or_default(),
            r.p_value.to_string(),
            r.p_corrected.to_string(),
            r.suppressed.to_string(),
        ]
    };
    write_csv(&out.join("enrichment.csv"), &header, scan.results.iter().map(row))?;
    write_csv(
        &out.join("enrichment_top.csv"),
        &["coarse", "granular", "code", "ratio", "p_corrected"],
        scan.top_enriched(&ecfg).into_iter().map(|r| {
            vec![r.coarse.clone(), r.granular.clone(), r.code.clone(), fmt_opt(r.ratio), r.p_corrected.to_string()]
        }),
    )
}

fn run_lr_tests(config: &AuditConfig, cohort: &Cohort, out: &Path) -> Result<()> {
    let s = &config.lr_tests;
    let imputed = full_imputed(cohort)?;
    let outcomes = s.outcomes.clone().unwrap_or_else(|| config.evaluation.outcomes.clone());
    let ncfg = NestedConfig { features: s.features.clone(), rank_tol: s.rank_tol, tol: s.tol, max_iter: s.max_iter };
    let scan = s.scan_features.clone().unwrap_or_else(|| default_scan_features(&imputed));
    let n_coarse = imputed.taxonomy().n_coarse();
    let mut results: Vec<LrTestResult> = Vec::new();
    for &o in &outcomes {
        for k in 0..n_coarse {
            // the group test is corrected across outcomes x coarse groups
            results.push(group_interaction_test(&imputed, k, o, &ncfg, (outcomes.len() * n_coarse) as f64));
        }
    }
    for &o in &outcomes {
        for k in 0..n_coarse {
            if scan.is_empty() {
                continue;
            }
            results.extend(per_feature_interaction_scan(&imputed, k, o, &scan, &ncfg, s.correction_factor)?);
        }
    }
    write_csv(
        &out.join("lr_tests.csv"),
        &[
            "outcome", "coarse", "comparison", "feature", "ll_reduced", "ll_full", "statistic", "df", "p_value",
            "p_corrected", "skipped",
        ],
        results.iter().map(|r| {
            let (cmp, feature) = match &r.pair {
                ModelPair::AllInteractions => ("1_vs_2", String::new()),
                ModelPair::Feature(f) => ("1_vs_3", f.clone()),
            };
            let num = |v: f64| if r.skipped.is_some() { String::new() } else { v.to_string() };
            vec![
                r.outcome.to_string(),
                r.coarse.clone(),
                cmp.to_string(),
                feature,
                num(r.ll_reduced),
                num(r.ll_full),
                num(r.statistic),
                if r.skipped.is_some() { String::new() } else { r.df.to_string() },
                num(r.p_value),
                num(r.p_corrected),
                r.skipped.clone().unwrap_or_default(),
            ]
        }),
    )
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config_hash: String,
    correction_factor: f64,
    iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    timing_seconds: Option<BTreeMap<&'a str, f64>>,
    files: BTreeMap<String, String>,
}

fn list_files(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel == MANIFEST || rel == CACHE_DIR {
            continue;
        }
        if path.is_dir() {
            list_files(&path, root, out)?;
        } else {
            out.push(rel);
        }
    }
    Ok(())
}

fn write_manifest(
    config: &AuditConfig,
    out: &Path,
    config_json: &str,
    factor: f64,
    stages: &[StageOutcome],
) -> Result<()> {
    let mut files = Vec::new();
    list_files(out, out, &mut files)?;
    let mut hashes = BTreeMap::new();
    for f in files {
        let h = file_hash(&out.join(&f))?;
        hashes.insert(f, h);
    }
    let m = Manifest {
        tool: "granaudit",
        version: env!("CARGO_PKG_VERSION"),
        seed: config.seed,
        config_hash: sha256_hex(config_json.as_bytes()),
        correction_factor: factor,
        iterations: config.evaluation.iterations,
        timing_seconds: config
            .record_timing
            .then(|| stages.iter().map(|s| (s.name.as_str(), s.seconds)).collect()),
        files: hashes,
    };
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serialises");
    text.push('\n');
    write_text(&out.join(MANIFEST), &text)
}

/// Plot-ready point list for one figure, read back from a finished report.
/// `model` picks the model subdirectory for per-model figures.
pub fn emit_figure(report_dir: &Path, id: &str, model: Option<&str>) -> Result<String> {
    let need_model = || {
        model.ok_or_else(|| Error::Config(format!("figure {id:?} needs a model name")))
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::InvalidInput(e.to_string());
    match id {
        "performance" => {
            let (_, rows) = read_rows(&report_dir.join(need_model()?).join("group_cis.csv"))?;
            w.write_record(["outcome", "metric", "kind", "group", "coarse", "median", "ci_low", "ci_high"]).map_err(io)?;
            for r in rows.iter().filter(|r| &r[2] != "coarse_downsampled") {
                let kind = if &r[2] == "granular" { "granular" } else { "coarse_reference" };
                w.write_record([&r[0], &r[1], kind, &r[3], &r[4], &r[6], &r[7], &r[8]]).map_err(io)?;
            }
        }
        "variation" | "variation_downsampled" => {
            let want = if id == "variation" { "false" } else { "true" };
            let (_, rows) = read_rows(&report_dir.join(need_model()?).join("variation.csv"))?;
            w.write_record(["outcome", "metric", "component", "estimate", "ci_low", "ci_high"]).map_err(io)?;
            for r in rows.iter().filter(|r| &r[2] == want) {
                w.write_record([&r[0], &r[1], "between", &r[3], &r[4], &r[5]]).map_err(io)?;
                w.write_record([&r[0], &r[1], "within", &r[6], &r[7], &r[8]]).map_err(io)?;
            }
        }
        "outcome_freqs" => {
            let (_, rows) = read_rows(&report_dir.join("outcome_freqs.csv"))?;
            w.write_record(["outcome", "granular", "coarse", "rate", "ci_low", "ci_high"]).map_err(io)?;
            for r in &rows {
                w.write_record([&r[0], &r[2], &r[1], &r[4], &r[5], &r[6]]).map_err(io)?;
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown figure id {other:?}; expected one of {}",
                FIGURE_IDS.join(", ")
            )))
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Checks the config and its inputs without running anything. Returns
/// human-readable findings; errors are fatal problems.
pub fn validate(config: &AuditConfig) -> Result<Vec<String>> {
    let mut notes = Vec::new();
    let schema = config.schema()?;
    let taxonomy = config.taxonomy()?;
    for m in &config.models {
        if let (ModelKind::Band, Some(t)) = (m.kind, &m.table) {
            config.band(t)?.validate(&schema)?;
        }
    }
    if let Some(s) = &config.data.synth {
        let scenario = ScenarioConfig::load(config.resolve(s))?;
        let tax = scenario.taxonomy()?;
        scenario.validate(&schema, &tax)?;
        notes.push(format!("scenario: {} granular groups", tax.n_granular()));
        notes.push(format!("correction factor: {}", config.correction_factor(&tax)));
        return Ok(notes);
    }
    let c = load_configured_cohort(config)?;
    notes.push(format!(
        "cohort: {} visits, {} patients, {} features after filtering",
        c.len(),
        c.n_patients(),
        c.n_features()
    ));
    for o in &config.evaluation.outcomes {
        let pos = c.outcome(*o).iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == c.len() {
            notes.push(format!("warning: outcome {o} has a single class"));
        }
    }
    let empty: Vec<&str> = (0..taxonomy.n_granular())
        .filter(|&g| c.rows_in_granular(g).is_empty())
        .map(|g| taxonomy.granular_names()[g].as_str())
        .collect();
    if !empty.is_empty() {
        notes.push(format!("warning: granular groups without visits: {}", empty.join(", ")));
    }
    notes.push(format!("correction factor: {}", config.correction_factor(&taxonomy)));
    Ok(notes)
}
