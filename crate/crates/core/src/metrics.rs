//! Performance metrics over `(score, label)` pairs.
//!
//! Tie rules are fixed so that heavily tied integer band scores give exact,
//! reproducible values: AUROC counts ties as one half, AUPRC processes tied
//! scores as one block, and a row is predicted positive when `score >= threshold`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::stats::{average_ranks, pearson};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricId {
    Auprc,
    Auroc,
    Fpr,
    Fnr,
    Ece,
    /// Empirical outcome rate `p(y = 1)`.
    Prevalence,
}

impl MetricId {
    /// The four metrics of the headline disparity tables.
    pub const STANDARD: [MetricId; 4] = [MetricId::Auprc, MetricId::Auroc, MetricId::Fpr, MetricId::Fnr];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::Auprc => "auprc",
            MetricId::Auroc => "auroc",
            MetricId::Fpr => "fpr",
            MetricId::Fnr => "fnr",
            MetricId::Ece => "ece",
            MetricId::Prevalence => "prevalence",
        }
    }

    pub fn needs_positives(self) -> bool {
        matches!(self, MetricId::Auprc | MetricId::Auroc | MetricId::Fnr)
    }

    pub fn needs_negatives(self) -> bool {
        matches!(self, MetricId::Auroc | MetricId::Fpr)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "auprc" => MetricId::Auprc,
            "auroc" => MetricId::Auroc,
            "fpr" => MetricId::Fpr,
            "fnr" => MetricId::Fnr,
            "ece" => MetricId::Ece,
            "prevalence" | "outcome_rate" => MetricId::Prevalence,
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        })
    }
}

/// Parallel score and binary-label arrays.
#[derive(Debug, Clone, Copy)]
pub struct ScoredLabels<'a> {
    scores: &'a [f64],
    labels: &'a [u8],
    positives: usize,
}

impl<'a> ScoredLabels<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [u8]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::InvalidInput("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::InvalidInput("scores contain NaN".into()));
        }
        let positives = labels.iter().filter(|&&y| y == 1).count();
        Ok(Self {
            scores,
            labels,
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives
    }

    pub fn scores(&self) -> &[f64] {
        self.scores
    }

    pub fn labels(&self) -> &[u8] {
        self.labels
    }

    fn value(&self, metric: MetricId, value: f64) -> MetricValue {
        MetricValue {
            metric,
            value,
            positives: self.positives,
            negatives: self.negatives(),
            total: self.len(),
        }
    }

    fn require_both(&self, what: &str) -> Result<()> {
        if self.positives == 0 || self.negatives() == 0 {
            return Err(Error::SingleClass(format!(
                "{what} needs positives and negatives ({} / {})",
                self.positives,
                self.negatives()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: MetricId,
    pub value: f64,
    pub positives: usize,
    pub negatives: usize,
    pub total: usize,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (rank-sum form).
pub fn auroc(s: &ScoredLabels<'_>) -> Result<MetricValue> {
    s.require_both("AUROC")?;
    let ranks = average_ranks(s.scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(s.labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let n1 = s.positives as f64;
    let n0 = s.negatives() as f64;
    let u = rank_sum - n1 * (n1 + 1.0) / 2.0;
    Ok(s.value(MetricId::Auroc, (u / (n1 * n0)).clamp(0.0, 1.0)))
}

/// Average precision: sum over distinct descending thresholds of
/// `(recall increment) * precision`, tied scores entering as one block.
pub fn auprc(s: &ScoredLabels<'_>) -> Result<MetricValue> {
    if s.positives == 0 {
        return Err(Error::SingleClass("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let total_pos = s.positives as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = s.scores[order[i]];
        let mut block_tp = 0;
        while i < order.len() && s.scores[order[i]] == score {
            if s.labels[order[i]] == 1 {
                block_tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        tp += block_tp;
        if block_tp > 0 {
            ap += (block_tp as f64 / total_pos) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(s.value(MetricId::Auprc, ap.clamp(0.0, 1.0)))
}

/// False positive and false negative rates with `score >= threshold`
/// predicted positive.
pub fn fpr_fnr(s: &ScoredLabels<'_>, threshold: f64) -> Result<(MetricValue, MetricValue)> {
    s.require_both("FPR/FNR")?;
    let (mut fp, mut fneg) = (0usize, 0usize);
    for (&score, &y) in s.scores.iter().zip(s.labels) {
        let predicted = score >= threshold;
        match (y, predicted) {
            (0, true) => fp += 1,
            (1, false) => fneg += 1,
            _ => {}
        }
    }
    Ok((
        s.value(MetricId::Fpr, fp as f64 / s.negatives() as f64),
        s.value(MetricId::Fnr, fneg as f64 / s.positives as f64),
    ))
}

pub fn fpr(s: &ScoredLabels<'_>, threshold: f64) -> Result<MetricValue> {
    if s.negatives() == 0 {
        return Err(Error::SingleClass("FPR needs at least one negative".into()));
    }
    let fp = s
        .scores
        .iter()
        .zip(s.labels)
        .filter(|(&sc, &y)| y == 0 && sc >= threshold)
        .count();
    Ok(s.value(MetricId::Fpr, fp as f64 / s.negatives() as f64))
}

pub fn fnr(s: &ScoredLabels<'_>, threshold: f64) -> Result<MetricValue> {
    if s.positives == 0 {
        return Err(Error::SingleClass("FNR needs at least one positive".into()));
    }
    let fneg = s
        .scores
        .iter()
        .zip(s.labels)
        .filter(|(&sc, &y)| y == 1 && sc < threshold)
        .count();
    Ok(s.value(MetricId::Fnr, fneg as f64 / s.positives as f64))
}

pub const ECE_BINS: usize = 10;

fn ece_bins(s: &ScoredLabels<'_>) -> Result<[(f64, f64, usize); ECE_BINS]> {
    let mut bins = [(0.0, 0.0, 0usize); ECE_BINS];
    for (&p, &y) in s.scores.iter().zip(s.labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("score {p} outside [0, 1]")));
        }
        let m = ((p * ECE_BINS as f64).floor() as usize).min(ECE_BINS - 1);
        bins[m].0 += p;
        bins[m].1 += y as f64;
        bins[m].2 += 1;
    }
    Ok(bins)
}

/// Ten fixed-width bins `[m/10, (m+1)/10)` (last bin closed), per-bin
/// `|mean(score) - mean(label)|`, averaged over all ten bins with empty bins
/// contributing zero.
pub fn ece_10bin(s: &ScoredLabels<'_>) -> Result<MetricValue> {
    let bins = ece_bins(s)?;
    let sum: f64 = bins
        .iter()
        .filter(|b| b.2 > 0)
        .map(|&(ps, ys, n)| (ps / n as f64 - ys / n as f64).abs())
        .sum();
    Ok(s.value(MetricId::Ece, sum / ECE_BINS as f64))
}

/// Count-weighted variant of [`ece_10bin`]; not used by the audit pipeline.
pub fn ece_10bin_weighted(s: &ScoredLabels<'_>) -> Result<MetricValue> {
    let bins = ece_bins(s)?;
    if s.is_empty() {
        return Ok(s.value(MetricId::Ece, 0.0));
    }
    let sum: f64 = bins
        .iter()
        .filter(|b| b.2 > 0)
        .map(|&(ps, ys, _)| (ps - ys).abs())
        .sum();
    Ok(s.value(MetricId::Ece, sum / s.len() as f64))
}

pub fn prevalence(s: &ScoredLabels<'_>) -> Result<MetricValue> {
    if s.is_empty() {
        return Err(Error::InvalidInput("prevalence of an empty set".into()));
    }
    Ok(s.value(MetricId::Prevalence, s.positives as f64 / s.len() as f64))
}

/// Evaluates one metric. `threshold` is required for FPR and FNR.
pub fn evaluate(metric: MetricId, s: &ScoredLabels<'_>, threshold: Option<f64>) -> Result<MetricValue> {
    let need_threshold = || {
        threshold.ok_or_else(|| Error::InvalidInput(format!("{metric} needs a threshold")))
    };
    match metric {
        MetricId::Auroc => auroc(s),
        MetricId::Auprc => auprc(s),
        MetricId::Fpr => fpr(s, need_threshold()?),
        MetricId::Fnr => fnr(s, need_threshold()?),
        MetricId::Ece => ece_10bin(s),
        MetricId::Prevalence => prevalence(s),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided p-value from the t approximation with `n - 2` degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("Spearman needs at least 3 pairs, got {n}")));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Numerical("zero rank variance".into()))?;
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(SpearmanResult { rho, p_value, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sl<'a>(s: &'a [f64], y: &'a [u8]) -> ScoredLabels<'a> {
        ScoredLabels::new(s, y).unwrap()
    }

    #[test]
    fn auroc_trivial_cases() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let y = [0, 0, 1, 1];
        assert_eq!(auroc(&sl(&s, &y)).unwrap().value, 1.0);
        let s = [0.5; 4];
        assert_eq!(auroc(&sl(&s, &y)).unwrap().value, 0.5);
        assert!(matches!(auroc(&sl(&s, &[1, 1, 1, 1])), Err(Error::SingleClass(_))));
    }

    #[test]
    fn auprc_trivial_cases() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let y = [0, 0, 1, 1];
        assert_eq!(auprc(&sl(&s, &y)).unwrap().value, 1.0);
        // all tied: one block, precision = prevalence
        let s = [0.3; 4];
        assert_eq!(auprc(&sl(&s, &[1, 0, 0, 0])).unwrap().value, 0.25);
        assert!(matches!(auprc(&sl(&s, &[0; 4])), Err(Error::SingleClass(_))));
    }

    #[test]
    fn fpr_fnr_extremes() {
        let s = [0.1, 0.4, 0.6, 0.9];
        let y = [0, 1, 0, 1];
        let (fpr, fnr) = fpr_fnr(&sl(&s, &y), 0.0).unwrap();
        assert_eq!((fpr.value, fnr.value), (1.0, 0.0));
        let (fpr, fnr) = fpr_fnr(&sl(&s, &y), 1.0).unwrap();
        assert_eq!((fpr.value, fnr.value), (0.0, 1.0));
        // closed on the positive side
        let (fpr, fnr) = fpr_fnr(&sl(&s, &y), 0.6).unwrap();
        assert_eq!((fpr.value, fnr.value), (0.5, 0.5));
    }

    #[test]
    fn ece_hand_cases() {
        let s = [0.0, 1.0, 1.0, 0.0];
        let y = [0, 1, 1, 0];
        assert_eq!(ece_10bin(&sl(&s, &y)).unwrap().value, 0.0);
        let s = [0.95; 20];
        let y = [1; 20];
        assert!((ece_10bin(&sl(&s, &y)).unwrap().value - 0.005).abs() < 1e-15);
        assert!(ece_10bin(&sl(&[1.5], &[1])).is_err());
    }

    #[test]
    fn spearman_monotone_and_degenerate() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = [2.0, 4.0, 8.0, 16.0, 32.0];
        let down = [5.0, 3.0, 1.0, 0.0, -7.0];
        assert!((spearman(&x, &up).unwrap().rho - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &down).unwrap().rho + 1.0).abs() < 1e-15);
        assert!(spearman(&x, &[1.0; 5]).is_err());
        assert!(spearman(&x[..2], &up[..2]).is_err());
    }

    proptest! {
        #[test]
        fn ranking_metrics_invariant_under_monotone_maps(
            pairs in prop::collection::vec((0u32..50, 0u8..2), 2..80)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 10.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 1.0).collect();
            let a = sl(&scores, &labels);
            let b = sl(&mapped, &labels);
            if a.positives() > 0 && a.negatives() > 0 {
                prop_assert!((auroc(&a).unwrap().value - auroc(&b).unwrap().value).abs() < 1e-12);
                let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
                let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
                let c = sl(&neg, &flipped);
                prop_assert!((auroc(&c).unwrap().value - auroc(&a).unwrap().value).abs() < 1e-12);
                let t1 = scores[0];
                let t2 = t1 + 0.35;
                let (f1, n1) = fpr_fnr(&a, t1).unwrap();
                let (f2, n2) = fpr_fnr(&a, t2).unwrap();
                prop_assert!(f2.value <= f1.value);
                prop_assert!(n2.value >= n1.value);
            }
            if a.positives() > 0 {
                prop_assert!((auprc(&a).unwrap().value - auprc(&b).unwrap().value).abs() < 1e-12);
            }
        }

        #[test]
        fn label_flip_complements_auroc(
            pairs in prop::collection::vec((0u32..50, 0u8..2), 2..80)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let a = sl(&scores, &labels);
            prop_assume!(a.positives() > 0 && a.negatives() > 0);
            let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
            let b = sl(&scores, &flipped);
            prop_assert!((auroc(&b).unwrap().value - (1.0 - auroc(&a).unwrap().value)).abs() < 1e-12);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let c = sl(&neg, &labels);
            prop_assert!((auroc(&c).unwrap().value - (1.0 - auroc(&a).unwrap().value)).abs() < 1e-12);
        }
    }
}
