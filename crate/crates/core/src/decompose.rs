//! Star tables, within/between variation, and correlation diagnostics over
//! granular groups.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Outcome, Taxonomy};
use crate::error::{Error, Result};
use crate::metrics::{spearman, MetricId};
use crate::resample::{
    bootstrap_metrics, percentile_ci, star_label, stars, ComparisonResult, DrawSet, EvalSpec,
    GroupKey, ThresholdRule,
};
use crate::stats::{median, std_dev};

/// Most significant granular group per (outcome, metric, coarse).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarCell {
    pub outcome: Outcome,
    pub metric: MetricId,
    pub coarse: String,
    /// Smallest corrected p among tested granular groups.
    pub min_p_corrected: Option<f64>,
    pub granular: Option<String>,
    pub stars: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarTable {
    pub cells: Vec<StarCell>,
}

/// Cells appear in first-seen order of (outcome, metric, coarse).
pub fn build_star_table(comparisons: &[ComparisonResult]) -> StarTable {
    let mut cells: Vec<StarCell> = Vec::new();
    for c in comparisons {
        let idx = match cells
            .iter()
            .position(|s| s.outcome == c.outcome && s.metric == c.metric && s.coarse == c.coarse)
        {
            Some(i) => i,
            None => {
                cells.push(StarCell {
                    outcome: c.outcome,
                    metric: c.metric,
                    coarse: c.coarse.clone(),
                    min_p_corrected: None,
                    granular: None,
                    stars: 0,
                });
                cells.len() - 1
            }
        };
        let cell = &mut cells[idx];
        if let Some(p) = c.p_corrected() {
            if cell.min_p_corrected.is_none_or(|m| p < m) {
                cell.min_p_corrected = Some(p);
                cell.granular = Some(c.granular.clone());
                cell.stars = stars(p);
            }
        }
    }
    StarTable { cells }
}

impl StarTable {
    pub fn get(&self, outcome: Outcome, metric: MetricId, coarse: &str) -> Option<&StarCell> {
        self.cells
            .iter()
            .find(|c| c.outcome == outcome && c.metric == metric && c.coarse == coarse)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| crate::cohort::csv_error(path, e))?;
        let err = |e| crate::cohort::csv_error(path, e);
        w.write_record(["outcome", "metric", "coarse", "stars", "min_p_corrected", "granular"])
            .map_err(err)?;
        for c in &self.cells {
            w.write_record([
                c.outcome.as_str(),
                c.metric.as_str(),
                &c.coarse,
                star_label(c.stars),
                &c.min_p_corrected.map(|p| p.to_string()).unwrap_or_default(),
                c.granular.as_deref().unwrap_or(""),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationConfig {
    /// Delta degrees of freedom of every standard deviation (1 = sample sd).
    pub ddof: usize,
    pub level: f64,
}

impl Default for VariationConfig {
    fn default() -> Self {
        Self { ddof: 1, level: 0.95 }
    }
}

/// Between- and within-coarse variation of one (outcome, metric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationEstimate {
    pub outcome: Outcome,
    pub metric: MetricId,
    pub downsampled: bool,
    pub between: f64,
    pub between_ci: (f64, f64),
    pub within: f64,
    pub within_ci: (f64, f64),
    /// Iterations with a defined between / within value.
    pub between_draws: usize,
    pub within_draws: usize,
    /// Coarse groups with fewer than two granular groups, left out of the
    /// within term.
    pub excluded_coarse: Vec<String>,
}

/// Between = sd across the present coarse values; within = unweighted mean
/// over coarse groups of the sd across their present granular values.
/// Coarse groups with fewer than two present granular values contribute no
/// within term. Either side is `None` when nothing is left to average.
pub fn decompose_values(
    coarse: &[Option<f64>],
    granular_by_coarse: &[Vec<Option<f64>>],
    ddof: usize,
) -> (Option<f64>, Option<f64>) {
    let present: Vec<f64> = coarse.iter().flatten().copied().collect();
    let between = (present.len() > ddof.max(1)).then(|| std_dev(&present, ddof));
    let terms: Vec<f64> = granular_by_coarse
        .iter()
        .filter_map(|members| {
            let v: Vec<f64> = members.iter().flatten().copied().collect();
            (v.len() >= 2 && v.len() > ddof).then(|| std_dev(&v, ddof))
        })
        .collect();
    let within = (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64);
    (between, within)
}

fn summarise(values: &[Option<f64>], level: f64) -> Result<(f64, (f64, f64), usize)> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return Err(Error::InsufficientDraws { needed: 2, got: 0 });
    }
    let ci = percentile_ci(values, level)?;
    Ok((median(&v), ci, v.len()))
}

fn decompose_draws(
    draws: &DrawSet,
    taxonomy: &Taxonomy,
    config: &VariationConfig,
    downsampled: bool,
) -> Result<Vec<VariationEstimate>> {
    let within_coarse: Vec<usize> = (0..taxonomy.n_coarse())
        .filter(|&k| taxonomy.members(k).len() >= 2)
        .collect();
    let excluded: Vec<String> = (0..taxonomy.n_coarse())
        .filter(|k| !within_coarse.contains(k))
        .map(|k| taxonomy.coarse_names()[k].clone())
        .collect();
    let mut out = Vec::new();
    for outcome in draws.outcomes() {
        for metric in draws.metrics() {
            let coarse_key = |k| if downsampled { GroupKey::downsampled(k) } else { GroupKey::coarse(k) };
            let coarse: Vec<&[Option<f64>]> = (0..taxonomy.n_coarse())
                .map(|k| {
                    draws.get(outcome, metric, coarse_key(k)).map(|d| d.values).ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "no {} draws for {outcome}/{metric} coarse group {}",
                            if downsampled { "downsampled" } else { "coarse" },
                            taxonomy.coarse_names()[k]
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            let granular: Vec<Vec<&[Option<f64>]>> = within_coarse
                .iter()
                .map(|&k| {
                    taxonomy
                        .members(k)
                        .into_iter()
                        .map(|g| {
                            draws.get(outcome, metric, GroupKey::granular(g)).map(|d| d.values).ok_or_else(|| {
                                Error::InvalidInput(format!("no draws for granular group {}", taxonomy.granular_names()[g]))
                            })
                        })
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?;
            let mut between = Vec::with_capacity(draws.n_iter);
            let mut within = Vec::with_capacity(draws.n_iter);
            for i in 0..draws.n_iter {
                let cv: Vec<Option<f64>> = coarse.iter().map(|d| d[i]).collect();
                let gv: Vec<Vec<Option<f64>>> =
                    granular.iter().map(|ms| ms.iter().map(|d| d[i]).collect()).collect();
                let (b, w) = decompose_values(&cv, &gv, config.ddof);
                between.push(b);
                within.push(w);
            }
            let (b, b_ci, nb) = summarise(&between, config.level)?;
            let (w, w_ci, nw) = summarise(&within, config.level)?;
            out.push(VariationEstimate {
                outcome,
                metric,
                downsampled,
                between: b,
                between_ci: b_ci,
                within: w,
                within_ci: w_ci,
                between_draws: nb,
                within_draws: nw,
                excluded_coarse: excluded.clone(),
            });
        }
    }
    Ok(out)
}

/// Per-draw decomposition summarised by median and percentile interval.
pub fn variation_decomposition(
    draws: &DrawSet,
    taxonomy: &Taxonomy,
    config: &VariationConfig,
) -> Result<Vec<VariationEstimate>> {
    decompose_draws(draws, taxonomy, config, false)
}

/// As [`variation_decomposition`], with the between term taken from the
/// downsampled coarse draws. Needs draws made with a downsample ratio.
pub fn downsampled_between(
    draws: &DrawSet,
    taxonomy: &Taxonomy,
    config: &VariationConfig,
) -> Result<Vec<VariationEstimate>> {
    decompose_draws(draws, taxonomy, config, true)
}

/// Coarse-to-granular group count ratio used for the downsampling control.
pub fn downsample_ratio(taxonomy: &Taxonomy) -> f64 {
    taxonomy.n_coarse() as f64 / taxonomy.n_granular() as f64
}

/// Spearman correlation across granular groups; `rho` is `None` when the
/// ranks are degenerate or too few groups have data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub outcome: Outcome,
    pub metric: MetricId,
    pub n_groups: usize,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    pub note: Option<String>,
}

fn correlate(
    draws: &DrawSet,
    n_granular: usize,
    x_of: &dyn Fn(Outcome, usize) -> Option<f64>,
) -> Vec<CorrelationResult> {
    let mut out = Vec::new();
    for outcome in draws.outcomes() {
        for metric in draws.metrics() {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for g in 0..n_granular {
                let Some(d) = draws.get(outcome, metric, GroupKey::granular(g)) else { continue };
                let v = d.valid();
                let Some(x) = x_of(outcome, g) else { continue };
                if v.is_empty() {
                    continue;
                }
                xs.push(x);
                ys.push(median(&v));
            }
            let n = xs.len();
            let (rho, p_value, note) = if n < 4 {
                (None, None, Some(format!("{n} groups with data, need 4")))
            } else {
                match spearman(&xs, &ys) {
                    Ok(s) => (Some(s.rho), Some(s.p_value), None),
                    Err(_) => (None, None, Some("zero rank variance".to_string())),
                }
            };
            out.push(CorrelationResult { outcome, metric, n_groups: n, rho, p_value, note });
        }
    }
    out
}

/// Median draw value against group size (patients), per (outcome, metric).
/// `sizes` is indexed by granular group; zero-size groups are skipped.
pub fn size_performance_correlation(draws: &DrawSet, sizes: &[usize]) -> Vec<CorrelationResult> {
    correlate(draws, sizes.len(), &|_, g| (sizes[g] > 0).then_some(sizes[g] as f64))
}

/// Median draw value against the group's outcome rate for the same outcome.
pub fn baserate_performance_correlation(draws: &DrawSet, rates: &[OutcomeFrequency]) -> Vec<CorrelationResult> {
    let n = rates.iter().map(|r| r.granular_index + 1).max().unwrap_or(0);
    correlate(draws, n, &|o, g| {
        rates
            .iter()
            .find(|r| r.outcome == o && r.granular_index == g)
            .and_then(|r| r.rate)
    })
}

/// Empirical outcome rate of a granular group with a bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFrequency {
    pub granular: String,
    pub granular_index: usize,
    pub coarse: String,
    pub outcome: Outcome,
    pub visits: usize,
    pub rate: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

/// Per granular group and outcome: sample rate plus percentile interval over
/// `n_iter` row-level bootstraps.
pub fn outcome_frequencies(
    c: &Cohort,
    outcomes: &[Outcome],
    n_iter: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<OutcomeFrequency>> {
    let spec = EvalSpec::new(outcomes.to_vec(), vec![MetricId::Prevalence]);
    let zeros = vec![vec![0.0; c.len()]; outcomes.len()];
    let draws = bootstrap_metrics(c, &zeros, &spec, n_iter, ThresholdRule::Fixed(0.5), seed)?;
    let tax = c.taxonomy();
    let mut out = Vec::new();
    for &o in outcomes {
        let y = c.outcome(o);
        for g in 0..tax.n_granular() {
            let rows = c.rows_in_granular(g);
            let rate = (!rows.is_empty())
                .then(|| rows.iter().map(|&r| y[r] as f64).sum::<f64>() / rows.len() as f64);
            let d = draws.get(o, MetricId::Prevalence, GroupKey::granular(g)).expect("granular key");
            out.push(OutcomeFrequency {
                granular: tax.granular_names()[g].clone(),
                granular_index: g,
                coarse: tax.coarse_names()[tax.coarse_of(g)].clone(),
                outcome: o,
                visits: rows.len(),
                rate,
                ci: percentile_ci(d.values, level).ok(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::PairedTest;

    fn cmp(granular: &str, coarse: &str, p: Option<f64>) -> ComparisonResult {
        ComparisonResult {
            granular: granular.into(),
            coarse: coarse.into(),
            outcome: Outcome::Hospitalization,
            metric: MetricId::Auprc,
            test: p.map(|p| PairedTest {
                valid_pairs: 100,
                dropped_pairs: 0,
                available: true,
                mean_diff: 0.0,
                sd_diff: 1.0,
                z: 0.0,
                p_raw: p,
                p_corrected: p,
                stars: stars(p),
                skewness: 0.0,
                kurtosis: 0.0,
            }),
            reason: None,
        }
    }

    #[test]
    fn star_table_takes_minimum_p() {
        let t = build_star_table(&[cmp("A1", "A", Some(1.0)), cmp("A*", "A", Some(1.0)), cmp("B1", "B", Some(1.0))]);
        assert!(t.cells.iter().all(|c| c.stars == 0));
        let t = build_star_table(&[cmp("A1", "A", Some(0.2)), cmp("A*", "A", Some(0.0005)), cmp("B1", "B", None)]);
        let a = t.get(Outcome::Hospitalization, MetricId::Auprc, "A").unwrap();
        assert_eq!((a.stars, a.granular.as_deref()), (3, Some("A*")));
        let b = t.get(Outcome::Hospitalization, MetricId::Auprc, "B").unwrap();
        assert_eq!((b.stars, b.min_p_corrected), (0, None));
        let again = build_star_table(&[cmp("A1", "A", Some(0.2)), cmp("A*", "A", Some(0.0005)), cmp("B1", "B", None)]);
        assert_eq!(t, again);
    }

    #[test]
    fn fixed_table() {
        let (b, w) = decompose_values(
            &[Some(0.5), Some(0.7)],
            &[vec![Some(0.4), Some(0.6)], vec![Some(0.6), Some(0.8)]],
            1,
        );
        let expect = 0.02f64.sqrt();
        assert!((b.unwrap() - expect).abs() < 1e-15);
        assert!((w.unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn identical_values_give_zero() {
        let (b, w) = decompose_values(&[Some(0.3); 4], &[vec![Some(0.2); 3], vec![Some(0.9); 2]], 1);
        assert_eq!((b, w), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn single_member_and_missing_terms_drop_out() {
        let (_, w) = decompose_values(
            &[Some(0.5), Some(0.7), None],
            &[vec![Some(0.4), Some(0.6)], vec![Some(0.6), None], vec![None, None]],
            1,
        );
        assert!((w.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(decompose_values(&[Some(0.5)], &[vec![Some(0.1)]], 1), (None, None));
    }

    #[test]
    fn invariant_to_relabeling() {
        let c = [Some(0.5), Some(0.7), Some(0.65)];
        let g = [vec![Some(0.4), Some(0.6), Some(0.55)], vec![Some(0.6), Some(0.8)], vec![Some(0.1), Some(0.9)]];
        let a = decompose_values(&c, &g, 1);
        let c2 = [c[2], c[0], c[1]];
        let g2 = [g[2].clone(), vec![g[0][2], g[0][0], g[0][1]], g[1].clone()];
        let b = decompose_values(&c2, &g2, 1);
        assert!((a.0.unwrap() - b.0.unwrap()).abs() < 1e-15);
        assert!((a.1.unwrap() - b.1.unwrap()).abs() < 1e-15);
    }

    #[test]
    fn standard_ratio() {
        assert!((downsample_ratio(&Taxonomy::standard()) - 4.0 / 26.0).abs() < 1e-15);
    }
}
