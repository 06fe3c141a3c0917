use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::cohort::tests::tiny_schema;
use crate::cohort::{Cohort, FeatureCategory, Outcome, Taxonomy};
use crate::rng::rng_for;
use crate::stats::sigmoid;

// exact binomial coefficient in floating point, independent of log-gamma
fn choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn enumerated_p(t: &Table2x2) -> f64 {
    let (r1, r2, c1) = (t.a + t.b, t.c + t.d, t.a + t.c);
    let n = r1 + r2;
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let total = choose(n, c1);
    let probs: Vec<f64> = (lo..=hi).map(|k| choose(r1, k) * choose(r2, c1 - k) / total).collect();
    let obs = probs[(t.a - lo) as usize];
    probs.iter().filter(|&&p| p <= obs * (1.0 + 1e-7)).sum::<f64>().min(1.0)
}

fn table() -> impl Strategy<Value = Table2x2> {
    (0u64..=25, 0u64..=25, 0u64..=25, 0u64..=25)
        .prop_filter("non-empty", |(a, b, c, d)| a + b + c + d > 0)
        .prop_map(|(a, b, c, d)| Table2x2::new(a, b, c, d))
}

proptest! {
    #[test]
    fn fisher_matches_enumeration(t in table()) {
        let p = fisher_exact(&t);
        prop_assert!((p - enumerated_p(&t)).abs() < 1e-12, "{t:?}: {p} vs {}", enumerated_p(&t));
    }

    #[test]
    fn fisher_symmetric(t in table()) {
        let p = fisher_exact(&t);
        prop_assert!((p - fisher_exact(&t.swap_rows())).abs() < 1e-12);
        prop_assert!((p - fisher_exact(&t.swap_cols())).abs() < 1e-12);
        prop_assert!((p - fisher_exact(&t.transpose())).abs() < 1e-12);
    }
}

#[test]
fn fisher_no_association() {
    assert!((fisher_exact(&Table2x2::new(10, 10, 10, 10)) - 1.0).abs() < 1e-12);
}

fn two_member_taxonomy() -> Arc<Taxonomy> {
    Arc::new(Taxonomy::from_pairs([("A*", "A"), ("A1", "A"), ("B*", "B"), ("B1", "B")]).unwrap())
}

// one visit per patient; `codes[i]` marks the first `with` patients of group i
fn code_cohort(sizes: [usize; 4], with: [usize; 4]) -> (Cohort, CodeMatrix) {
    let mut b = Cohort::builder(tiny_schema(), two_member_taxonomy());
    let mut data = Vec::new();
    let mut n = 0;
    for g in 0..4 {
        for i in 0..sizes[g] {
            b.push(&format!("p{n}"), &format!("v{n}"), g, &[40.0, 0.0, 80.0, 3.0], [0, 0, 0]).unwrap();
            data.push(u8::from(i < with[g]));
            data.push(0);
            n += 1;
        }
    }
    let codes = CodeMatrix::new(vec!["X1".into(), "unused".into()], n, data).unwrap();
    (b.build(), codes)
}

#[test]
fn enrichment_ratio_and_reciprocal() {
    let (c, codes) = code_cohort([100, 50, 30, 30], [2, 3, 0, 0]);
    let cfg = EnrichmentConfig { min_count: 1, ..Default::default() };
    let scan = enrichment_scan(&c, &codes, &cfg).unwrap();
    // "unused" never occurs and coarse B has no X1: both skipped
    assert_eq!(scan.results.len(), 2);
    assert_eq!(scan.correction_factor, 8.0);
    let a1 = scan.results.iter().find(|r| r.granular == "A1").unwrap();
    assert!((a1.group_prevalence - 0.06).abs() < 1e-15);
    assert!((a1.remainder_prevalence - 0.02).abs() < 1e-15);
    assert!((a1.ratio.unwrap() - 3.0).abs() < 1e-12);
    assert_eq!(a1.counts, Some(Table2x2::new(3, 47, 2, 98)));
    let star = scan.results.iter().find(|r| r.granular == "A*").unwrap();
    assert!((star.ratio.unwrap() * a1.ratio.unwrap() - 1.0).abs() < 1e-12);
    assert!((a1.p_value - star.p_value).abs() < 1e-12);
}

#[test]
fn enrichment_suppresses_small_counts() {
    let (c, codes) = code_cohort([100, 50, 30, 30], [2, 3, 0, 0]);
    let scan = enrichment_scan(&c, &codes, &EnrichmentConfig::default()).unwrap();
    assert!(scan.results.iter().all(|r| r.suppressed && r.counts.is_none()));
    assert!(scan.top_enriched(&EnrichmentConfig::default()).is_empty());
}

#[test]
fn enrichment_top_codes_sorted() {
    let mut b = Cohort::builder(tiny_schema(), two_member_taxonomy());
    let mut data = Vec::new();
    for i in 0..400 {
        let g = if i < 200 { 0 } else { 1 };
        b.push(&format!("p{i}"), &format!("v{i}"), g, &[40.0, 0.0, 80.0, 3.0], [0, 0, 0]).unwrap();
        let j = i % 200;
        // code k enriched in A1 by a factor that grows with k
        for k in 0..3 {
            let cut = if g == 1 { 10 * (k + 3) } else { 10 };
            data.push(u8::from(j < cut));
        }
    }
    let names = vec!["c0".to_string(), "c1".into(), "c2".into()];
    let codes = CodeMatrix::new(names, 400, data).unwrap();
    let cfg = EnrichmentConfig::default();
    let scan = enrichment_scan(&b.build(), &codes, &cfg).unwrap();
    let top = scan.top_enriched(&cfg);
    let got: Vec<&str> = top.iter().map(|r| r.code.as_str()).collect();
    assert_eq!(got, ["c2", "c1", "c0"]);
    assert!(top.iter().all(|r| r.granular == "A1"));
}

#[test]
fn enrichment_patient_vs_visit_unit() {
    let mut b = Cohort::builder(tiny_schema(), two_member_taxonomy());
    for (i, (p, g)) in [("p0", 0), ("p0", 0), ("p1", 0), ("p2", 1)].iter().enumerate() {
        b.push(p, &format!("v{i}"), *g, &[40.0, 0.0, 80.0, 3.0], [0, 0, 0]).unwrap();
    }
    let c = b.build();
    let codes = CodeMatrix::new(vec!["X".into()], 4, vec![1, 1, 0, 1]).unwrap();
    let cfg = EnrichmentConfig { min_count: 0, ..Default::default() };
    let per_patient = enrichment_scan(&c, &codes, &cfg).unwrap();
    let star = per_patient.results.iter().find(|r| r.granular == "A*").unwrap();
    assert_eq!(star.counts, Some(Table2x2::new(1, 1, 1, 0)));
    let cfg = EnrichmentConfig { unit: EnrichmentUnit::Visit, ..cfg };
    let per_visit = enrichment_scan(&c, &codes, &cfg).unwrap();
    let star = per_visit.results.iter().find(|r| r.granular == "A*").unwrap();
    assert_eq!(star.counts, Some(Table2x2::new(2, 1, 1, 0)));
}

#[test]
fn code_matrix_from_binary_features() {
    let (c, _) = code_cohort([3, 0, 0, 1], [0; 4]);
    let m = CodeMatrix::from_features(&c, FeatureCategory::Demographic);
    assert_eq!(m.names(), ["gender"]);
    assert_eq!(m.n_rows(), 4);
}

#[test]
fn chi_square_tail() {
    let (stat, p) = lr_test(-100.0, -100.0, 3).unwrap();
    assert_eq!((stat, p), (0.0, 1.0));
    let (_, p) = lr_test(3.841 / 2.0, 0.0, 1).unwrap();
    assert!((p - 0.05).abs() < 1e-3);
    for x in [0.1, 1.0, 4.0, 10.0] {
        let (_, p) = lr_test(x / 2.0, 0.0, 1).unwrap();
        assert!((p - libm::erfc((x / 2.0f64).sqrt())).abs() < 1e-12, "{x}");
    }
    assert_eq!(lr_test(0.0, 1e-9, 1).unwrap().0, 0.0);
    assert!(matches!(lr_test(0.0, 1.0, 1), Err(crate::Error::NegativeStatistic(_))));
    assert!(lr_test(1.0, 0.0, 0).is_err());
}

fn three_member_taxonomy() -> Arc<Taxonomy> {
    Arc::new(Taxonomy::from_pairs([("A*", "A"), ("A1", "A"), ("A2", "A"), ("B*", "B"), ("B1", "B")]).unwrap())
}

/// Features: age, gender, heartrate, acuity. `shift` adds to the heartrate
/// coefficient in group A1.
pub(crate) fn interaction_cohort(seed: u64, n: usize, shift: f64) -> Cohort {
    let mut rng = rng_for(seed, 99, 0);
    let mut b = Cohort::builder(tiny_schema(), three_member_taxonomy());
    for i in 0..n {
        let g = match rng.random_range(0..10) {
            0..=4 => 0,
            5..=7 => 1,
            8 => 2,
            _ => 3 + rng.random_range(0..2),
        };
        let age = rng.random_range(18.0..90.0);
        let gender = f64::from(u8::from(rng.random_bool(0.5)));
        let hr = rng.random_range(50.0..150.0);
        let acuity = f64::from(rng.random_range(1..=5u8));
        let z_hr = (hr - 100.0) / 29.0;
        let beta_hr = 0.5 + if g == 1 { shift } else { 0.0 };
        let eta = -0.5 + 0.02 * (age - 55.0) + 0.3 * gender + beta_hr * z_hr - 0.4 * (acuity - 3.0)
            + [0.0, 0.3, -0.2, 0.0, 0.1][g];
        let y = u8::from(rng.random_bool(sigmoid(eta)));
        b.push(&format!("p{i}"), &format!("v{i}"), g, &[age, gender, hr, acuity], [y, 0, 0]).unwrap();
    }
    b.build()
}

#[test]
fn nested_parameter_counts_and_monotone() {
    let c = interaction_cohort(1, 3000, 0.0);
    let fit = fit_nested_regressions(&c, 0, Outcome::Hospitalization, &NestedConfig::default()).unwrap();
    // intercept + 4 features + 2 offsets, then 4 x 2 interactions
    assert_eq!(fit.params_reduced, 7);
    assert_eq!(fit.params_full, 7 + 4 * 2);
    assert_eq!(fit.dropped_columns, 0);
    assert!(fit.ll_full >= fit.ll_reduced - 1e-6);
    assert!(fit.ll_full < 0.0);
}

#[test]
fn lr_statistic_affine_invariant() {
    let c = interaction_cohort(2, 2000, 0.3);
    let cfg = NestedConfig::default();
    let r1 = group_interaction_test(&c, 0, Outcome::Hospitalization, &cfg, 1.0);
    let mut x = c.feature_matrix().to_vec();
    for row in x.chunks_mut(4) {
        row[0] = 3.0 * row[0] - 7.0;
        row[2] = -0.5 * row[2] + 200.0;
    }
    let r2 = group_interaction_test(&c.with_features(x), 0, Outcome::Hospitalization, &cfg, 1.0);
    assert!(r1.skipped.is_none());
    assert!((r1.statistic - r2.statistic).abs() < 1e-6, "{} vs {}", r1.statistic, r2.statistic);
    assert_eq!(r1.df, 8);
}

#[test]
fn planted_interaction_rejects() {
    let c = interaction_cohort(3, 20_000, 1.0);
    let r = group_interaction_test(&c, 0, Outcome::Hospitalization, &NestedConfig::default(), 1.0);
    assert!(r.p_value < 1e-4, "{r:?}");
}

#[test]
fn per_feature_scan_flags_planted_interaction() {
    let c = interaction_cohort(3, 8000, 0.5);
    let scan: Vec<String> = ["age", "gender", "triage_heartrate", "triage_acuity"].map(String::from).to_vec();
    let res = per_feature_interaction_scan(&c, 0, Outcome::Hospitalization, &scan, &NestedConfig::default(), None)
        .unwrap();
    assert_eq!(res.len(), 4);
    for r in &res {
        assert_eq!(r.df, 2);
        assert_eq!(r.p_corrected, (r.p_value * 8.0).min(1.0));
    }
    let flagged: Vec<&ModelPair> = res.iter().filter(|r| r.p_corrected < 0.05).map(|r| &r.pair).collect();
    assert_eq!(flagged, [&ModelPair::Feature("triage_heartrate".into())]);
}

#[test]
fn constant_feature_scan_is_skipped() {
    let c = interaction_cohort(4, 1500, 0.0);
    let mut x = c.feature_matrix().to_vec();
    for row in x.chunks_mut(4) {
        row[1] = 1.0;
    }
    let c = c.with_features(x);
    let scan = vec!["gender".to_string(), "age".to_string()];
    let cfg = NestedConfig { features: Some(vec!["age".into(), "triage_acuity".into()]), ..Default::default() };
    let res = per_feature_interaction_scan(&c, 0, Outcome::Hospitalization, &scan, &cfg, Some(1.0)).unwrap();
    assert!(res[0].skipped.as_deref().unwrap().contains("gender"), "{:?}", res[0].skipped);
    assert!(res[1].skipped.is_none());
    assert_eq!(res[1].df, 2);
}

#[test]
fn nested_errors() {
    let c = interaction_cohort(5, 500, 0.0);
    // coarse B has only two members but both present; single-class outcome
    let r = group_interaction_test(&c, 1, Outcome::Critical, &NestedConfig::default(), 1.0);
    assert!(r.skipped.is_some());
    assert!(r.statistic.is_nan());
    let e = fit_nested_regressions(&c, 1, Outcome::Critical, &NestedConfig::default());
    assert!(matches!(e, Err(crate::Error::SingleClass(_))));
}
