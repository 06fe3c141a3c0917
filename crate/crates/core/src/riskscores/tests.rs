use std::sync::Arc;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::newton::SolverOptions;
use super::*;
use crate::cohort::tests::{tiny_schema, tiny_taxonomy};
use crate::cohort::{Cohort, FeatureSchema, Outcome};
use crate::stats::sigmoid;

/// Rows over (age, gender, heartrate, acuity); hospitalisation from a
/// logistic model in raw units.
fn simulated(n: usize, seed: u64, beta: [f64; 4], b: f64) -> Cohort {
    simulated_with(tiny_schema(), n, seed, beta, b)
}

fn simulated_with(schema: Arc<FeatureSchema>, n: usize, seed: u64, beta: [f64; 4], b: f64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr = Normal::new(85.0f64, 15.0).unwrap();
    let mut builder = Cohort::builder(schema, tiny_taxonomy());
    for i in 0..n {
        let x = [
            rng.random_range(18.0..90.0f64).round(),
            if rng.random_bool(0.5) { 1.0 } else { 0.0 },
            hr.sample(&mut rng).clamp(30.0, 200.0).round(),
            rng.random_range(1..=5) as f64,
        ];
        let eta = b + x.iter().zip(&beta).map(|(a, c)| a * c).sum::<f64>();
        let y = u8::from(rng.random::<f64>() < sigmoid(eta));
        let p = format!("p{}", i / 2);
        builder.push(&p, &format!("v{i}"), (i / 2) % 4, &x, [y, 0, 0]).unwrap();
    }
    builder.build()
}

fn all_rows(c: &Cohort) -> Vec<usize> {
    (0..c.len()).collect()
}

#[test]
fn predict_trivial_cases() {
    let c = simulated(20, 1, [0.0; 4], 0.0);
    let mut m = LogisticModel {
        outcome: Outcome::Hospitalization,
        c: 1.0,
        intercept: 0.0,
        feature_names: c.schema().names().map(str::to_string).collect(),
        weights: vec![0.0; 4],
        means: vec![0.0; 4],
        scales: vec![1.0; 4],
    };
    assert!(m.predict(&c, &all_rows(&c)).unwrap().iter().all(|&p| p == 0.5));
    m.intercept = 30.0;
    assert!(m.predict(&c, &all_rows(&c)).unwrap().iter().all(|&p| p >= 1.0 - 1e-9));
}

#[test]
fn intercept_only_approaches_logit() {
    // every feature constant: only the intercept can move
    let mut b = Cohort::builder(tiny_schema(), tiny_taxonomy());
    for i in 0..400 {
        let y = u8::from(i % 4 == 0);
        b.push(&format!("p{i}"), "v", 0, &[50.0, 1.0, 80.0, 3.0], [y, 0, 0]).unwrap();
    }
    let c = b.build();
    let m = fit_logistic(&c, &all_rows(&c), Outcome::Hospitalization, &TrainConfig::fixed(1.0)).unwrap();
    assert!(m.weights.iter().all(|&w| w == 0.0));
    assert!(m.scales.iter().all(|&s| s == 1.0));
    assert!((m.intercept - (0.25f64 / 0.75).ln()).abs() < 1e-9);
}

#[test]
fn single_class_is_rejected() {
    let mut b = Cohort::builder(tiny_schema(), tiny_taxonomy());
    for i in 0..10 {
        b.push(&format!("p{i}"), "v", 0, &[50.0, 1.0, 80.0 + i as f64, 3.0], [0, 0, 0]).unwrap();
    }
    let c = b.build();
    let r = fit_logistic(&c, &all_rows(&c), Outcome::Hospitalization, &TrainConfig::fixed(1.0));
    assert!(matches!(r, Err(crate::Error::SingleClass(_))));
}

#[test]
fn gradient_matches_central_differences_at_optimum_and_elsewhere() {
    let c = simulated(2000, 2, [0.02, 0.4, 0.02, -0.5], -2.0);
    let set = TrainingSet::new(&c, &all_rows(&c), Outcome::Hospitalization).unwrap();
    let prob = set.problem(1.0);
    let m = set.fit(1.0, SolverOptions::default(), &mut |_| {}).unwrap();
    let opt: Vec<f64> = std::iter::once(m.intercept).chain(m.weights.iter().copied()).collect();
    let off: Vec<f64> = opt.iter().map(|v| v + 0.3).collect();
    for theta in [off, opt] {
        let g = prob.gradient(&theta);
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[k] += h;
            b[k] -= h;
            let fd = (prob.objective(&a) - prob.objective(&b)) / (2.0 * h);
            let scale = g[k].abs().max(1.0);
            assert!((fd - g[k]).abs() / scale <= 1e-5, "coord {k}: {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn objective_never_increases() {
    let c = simulated(3000, 3, [0.03, -0.5, 0.02, -0.4], -1.5);
    let set = TrainingSet::new(&c, &all_rows(&c), Outcome::Hospitalization).unwrap();
    let mut trace = Vec::new();
    set.fit(10.0, SolverOptions::default(), &mut |r| trace.push(r.objective)).unwrap();
    assert!(trace.len() >= 2);
    assert!(trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn weight_norm_shrinks_with_c() {
    let c = simulated(1500, 4, [0.03, -0.5, 0.02, -0.4], -1.5);
    let set = TrainingSet::new(&c, &all_rows(&c), Outcome::Hospitalization).unwrap();
    let norms: Vec<f64> = [100.0, 1.0, 0.1, 0.01, 0.001]
        .iter()
        .map(|&cv| {
            let m = set.fit(cv, SolverOptions::default(), &mut |_| {}).unwrap();
            m.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
        })
        .collect();
    assert!(norms.windows(2).all(|w| w[1] <= w[0]), "{norms:?}");
}

#[test]
fn rescaling_a_feature_leaves_predictions_unchanged() {
    let c = simulated(2000, 5, [0.03, -0.5, 0.02, -0.4], -1.5);
    let mut b = Cohort::builder(c.schema_arc().clone(), c.taxonomy_arc().clone());
    for r in 0..c.len() {
        let mut x = c.row(r).to_vec();
        x[2] *= 10.0;
        b.push(c.patient_id(r), c.visit_id(r), c.granular_of(r), &x, c.outcome_row(r)).unwrap();
    }
    let scaled = b.build();
    let cfg = TrainConfig::fixed(1.0);
    let m1 = fit_logistic(&c, &all_rows(&c), Outcome::Hospitalization, &cfg).unwrap();
    let m2 = fit_logistic(&scaled, &all_rows(&scaled), Outcome::Hospitalization, &cfg).unwrap();
    let ratio = m2.raw_coefficient(2) / m1.raw_coefficient(2);
    assert!((ratio - 0.1).abs() < 1e-8, "{ratio}");
    let p1 = m1.predict(&c, &all_rows(&c)).unwrap();
    let p2 = m2.predict(&scaled, &all_rows(&scaled)).unwrap();
    for (a, b) in p1.iter().zip(&p2) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn batch_equals_row_prediction() {
    let c = simulated(500, 6, [0.03, -0.5, 0.02, -0.4], -1.5);
    let m = fit_logistic(&c, &all_rows(&c), Outcome::Hospitalization, &TrainConfig::fixed(1.0)).unwrap();
    let batch = m.predict(&c, &all_rows(&c)).unwrap();
    for r in 0..c.len() {
        assert_eq!(batch[r], m.predict_row(c.row(r)));
    }
}

#[test]
fn model_text_roundtrip_is_bit_exact() {
    let c = simulated(500, 7, [0.03, -0.5, 0.02, -0.4], -1.5);
    let m = fit_logistic(&c, &all_rows(&c), Outcome::Hospitalization, &TrainConfig::fixed(1.0)).unwrap();
    let text = m.to_text();
    assert!(text.contains("e"));
    let back = LogisticModel::from_text(&text).unwrap();
    assert_eq!(m, back);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path().join("m.txt")).unwrap();
    assert_eq!(LogisticModel::load(dir.path().join("m.txt")).unwrap(), m);
}

#[test]
fn schema_mismatch_on_predict() {
    let c = simulated(300, 8, [0.03, -0.5, 0.02, -0.4], -1.5);
    let mut m = fit_logistic(&c, &all_rows(&c), Outcome::Hospitalization, &TrainConfig::fixed(1.0)).unwrap();
    m.feature_names[0] = "other".into();
    assert!(m.predict(&c, &[0]).is_err());
}

#[test]
fn cv_folds_are_patient_level_and_grid_choice_is_deterministic() {
    let c = simulated(1200, 9, [0.03, -0.5, 0.02, -0.4], -1.5);
    let rows = all_rows(&c);
    let folds = patient_folds(&c, &rows, 5, 3);
    for r in 0..c.len() {
        for s in 0..c.len() {
            if c.patient_of(r) == c.patient_of(s) {
                assert_eq!(folds[r], folds[s]);
            }
        }
    }
    let cfg = TrainConfig {
        c_grid: vec![0.0001, 1.0],
        seed: 3,
        ..TrainConfig::default()
    };
    let a = cross_validate(&c, &rows, Outcome::Hospitalization, &cfg).unwrap();
    let b = cross_validate(&c, &rows, Outcome::Hospitalization, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.scores.iter().all(Option::is_some));
}

#[test]
fn concordance_reference_fraction_is_one_and_tiny_fraction_is_below() {
    let c = simulated(500, 10, [0.03, -0.5, 0.02, -0.4], -1.0);
    let cfg = TrainConfig::fixed(1.0);
    let pts = prediction_concordance(&c, &[0.8, 0.02], 0.8, Outcome::Hospitalization, &cfg).unwrap();
    assert_eq!(pts[0].spearman, 1.0);
    assert!(pts[1].spearman < 1.0);
    assert!(prediction_concordance(&c, &[0.9], 0.8, Outcome::Hospitalization, &cfg).is_err());
}

#[test]
fn band_score_additivity_on_standard_schema() {
    let schema = FeatureSchema::standard();
    let news = BandScore::news();
    let mut row = vec![0.0; schema.len()];
    let set = |row: &mut Vec<f64>, name: &str, v: f64| row[schema.index_of(name).unwrap()] = v;
    set(&mut row, "age", 40.0);
    set(&mut row, "triage_resprate", 16.0);
    set(&mut row, "triage_o2sat", 98.0);
    set(&mut row, "triage_temperature", 37.0);
    set(&mut row, "triage_sbp", 120.0);
    set(&mut row, "triage_heartrate", 70.0);
    assert_eq!(news.score_row(&schema, &row).unwrap(), 0);
    set(&mut row, "triage_resprate", 26.0);
    assert_eq!(news.score_row(&schema, &row).unwrap(), 3);
    set(&mut row, "triage_heartrate", 120.0);
    assert_eq!(news.score_row(&schema, &row).unwrap(), 5);
    set(&mut row, "triage_resprate", 16.0);
    assert_eq!(news.score_row(&schema, &row).unwrap(), 2);
}

