//! Percentile intervals, paired granular-vs-coarse z-tests, Bonferroni

use serde::{Deserialize, Serialize};

use super::draws::{DrawSet, GroupKey};
use crate::cohort::{Outcome, Taxonomy};
use crate::error::{Error, Result};
use crate::metrics::MetricId;
use crate::stats::{mean, percentile_sorted, skew_kurtosis, std_dev, two_sided_normal_p};

/// Minimum number of valid pairs for a comparison.
pub const MIN_PAIRS: usize = 30;

/// Central percentile interval of the non-missing draws, linear
/// interpolation between order statistics.
pub fn percentile_ci(draws: &[Option<f64>], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("CI level {level} not in (0, 1)")));
    }
    let mut v: Vec<f64> = draws.iter().flatten().copied().collect();
    if v.len() < 2 {
        return Err(Error::InsufficientDraws { needed: 2, got: v.len() });
    }
    v.sort_unstable_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok((percentile_sorted(&v, tail), percentile_sorted(&v, 1.0 - tail)))
}

/// `min(1, p * factor)`.
pub fn bonferroni(p: f64, factor: f64) -> f64 {
    (p * factor).min(1.0)
}

/// 3 below 0.001, 2 below 0.01, 1 below 0.05, else 0.
pub fn stars(p: f64) -> u8 {
    if p < 0.001 {
        3
    } else if p < 0.01 {
        2
    } else if p < 0.05 {
        1
    } else {
        0
    }
}

pub fn star_label(n: u8) -> &'static str {
    match n {
        0 => "-",
        1 => "*",
        2 => "**",
        _ => "***",
    }
}

/// Outcome of a paired test of `granular - coarse` draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub valid_pairs: usize,
    pub dropped_pairs: usize,
    /// False when more than half the pairs were dropped; the statistics
    /// below are then not computed.
    pub available: bool,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub z: f64,
    pub p_raw: f64,
    pub p_corrected: f64,
    pub stars: u8,
    /// Normality diagnostic of the differences (excess kurtosis).
    pub skewness: f64,
    pub kurtosis: f64,
}

/// Pairs draws by iteration, drops pairs with a missing side, and tests the
/// mean difference with `z = mean(d) / sd(d)` (sample sd).
pub fn compare_granular_to_coarse(
    granular: &[Option<f64>],
    coarse: &[Option<f64>],
    correction_factor: f64,
) -> Result<PairedTest> {
    if granular.len() != coarse.len() {
        return Err(Error::InvalidInput(format!(
            "draw arrays differ in length: {} vs {}",
            granular.len(),
            coarse.len()
        )));
    }
    if !(correction_factor >= 1.0) {
        return Err(Error::Config(format!("correction factor {correction_factor} below 1")));
    }
    let d: Vec<f64> = granular
        .iter()
        .zip(coarse)
        .filter_map(|(g, c)| Some((*g)? - (*c)?))
        .collect();
    let dropped = granular.len() - d.len();
    if d.len() < MIN_PAIRS {
        return Err(Error::InsufficientDraws { needed: MIN_PAIRS, got: d.len() });
    }
    if 2 * dropped > granular.len() {
        return Ok(PairedTest {
            valid_pairs: d.len(),
            dropped_pairs: dropped,
            available: false,
            mean_diff: f64::NAN,
            sd_diff: f64::NAN,
            z: f64::NAN,
            p_raw: f64::NAN,
            p_corrected: f64::NAN,
            stars: 0,
            skewness: f64::NAN,
            kurtosis: f64::NAN,
        });
    }
    let m = mean(&d);
    let sd = std_dev(&d, 1);
    let z = if sd > 0.0 {
        m / sd
    } else if m == 0.0 {
        0.0
    } else {
        m.signum() * f64::INFINITY
    };
    let p_raw = if z.is_infinite() { 0.0 } else { two_sided_normal_p(z) };
    let p_corrected = bonferroni(p_raw, correction_factor);
    let (skewness, kurtosis) = skew_kurtosis(&d);
    Ok(PairedTest {
        valid_pairs: d.len(),
        dropped_pairs: dropped,
        available: true,
        mean_diff: m,
        sd_diff: sd,
        z,
        p_raw,
        p_corrected,
        stars: stars(p_corrected),
        skewness,
        kurtosis,
    })
}

/// One granular-vs-coarse comparison. `test` is `None` when there were too
/// few valid pairs to test at all; `reason` then says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub granular: String,
    pub coarse: String,
    pub outcome: Outcome,
    pub metric: MetricId,
    pub test: Option<PairedTest>,
    pub reason: Option<String>,
}

impl ComparisonResult {
    pub fn available(&self) -> bool {
        self.test.as_ref().is_some_and(|t| t.available)
    }

    /// Corrected p, or `None` if the comparison was not tested.
    pub fn p_corrected(&self) -> Option<f64> {
        self.test.as_ref().filter(|t| t.available).map(|t| t.p_corrected)
    }

    pub fn stars(&self) -> u8 {
        self.test.as_ref().map_or(0, |t| t.stars)
    }
}

/// Compares every granular group with its coarse group for every outcome
/// and metric in `draws`.
pub fn compare_all(draws: &DrawSet, taxonomy: &Taxonomy, correction_factor: f64) -> Result<Vec<ComparisonResult>> {
    let mut out = Vec::new();
    for outcome in draws.outcomes() {
        for metric in draws.metrics() {
            for g in 0..taxonomy.n_granular() {
                let k = taxonomy.coarse_of(g);
                let (Some(gd), Some(cd)) = (
                    draws.get(outcome, metric, GroupKey::granular(g)),
                    draws.get(outcome, metric, GroupKey::coarse(k)),
                ) else {
                    continue;
                };
                let (test, reason) = match compare_granular_to_coarse(gd.values, cd.values, correction_factor) {
                    Ok(t) => {
                        let reason = (!t.available).then(|| {
                            format!("{} of {} pairs lacked metric support", t.dropped_pairs, draws.n_iter)
                        });
                        (Some(t), reason)
                    }
                    Err(Error::InsufficientDraws { needed, got }) => {
                        (None, Some(format!("{got} valid pairs, need {needed}")))
                    }
                    Err(e) => return Err(e),
                };
                out.push(ComparisonResult {
                    granular: taxonomy.granular_names()[g].clone(),
                    coarse: taxonomy.coarse_names()[k].clone(),
                    outcome,
                    metric,
                    test,
                    reason,
                });
            }
        }
    }
    Ok(out)
}
