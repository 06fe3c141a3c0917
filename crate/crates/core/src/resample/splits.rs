//! Patient-level train/test plans

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Outcome};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, streams};

/// One random patient-level split. Patients are dense cohort indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub index: usize,
    pub seed: u64,
    pub train_patients: Vec<usize>,
    pub test_patients: Vec<usize>,
    /// Outcomes whose train side holds a single class in this plan.
    pub single_class: Vec<Outcome>,
}

impl SplitPlan {
    pub fn train_mask(&self, c: &Cohort) -> Vec<bool> {
        let mut is_train = vec![false; c.n_patients()];
        for &p in &self.train_patients {
            is_train[p] = true;
        }
        (0..c.len()).map(|r| is_train[c.patient_of(r)]).collect()
    }

    /// Train and test row indices, each in cohort order.
    pub fn rows(&self, c: &Cohort) -> (Vec<usize>, Vec<usize>) {
        let mask = self.train_mask(c);
        (0..c.len()).partition(|&r| mask[r])
    }
}

/// `n_iter` independent plans; plan `i` depends only on `(seed, i)`.
pub fn make_splits(c: &Cohort, n_iter: usize, train_fraction: f64, seed: u64) -> Result<Vec<SplitPlan>> {
    if c.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty cohort".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let n = c.n_patients();
    let k = (train_fraction * n as f64).round() as usize;
    let plans = (0..n_iter)
        .map(|i| {
            let mut patients: Vec<usize> = (0..n).collect();
            patients.shuffle(&mut rng_for(seed, streams::SPLITS, i as u64));
            let mut train = patients[..k].to_vec();
            let mut test = patients[k..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            let mut plan = SplitPlan {
                index: i,
                seed: derive_seed(seed, streams::SPLITS, i as u64),
                train_patients: train,
                test_patients: test,
                single_class: Vec::new(),
            };
            let mask = plan.train_mask(c);
            for o in Outcome::ALL {
                let y = c.outcome(o);
                let mut seen = [false; 2];
                for r in (0..c.len()).filter(|&r| mask[r]) {
                    seen[y[r] as usize] = true;
                }
                if !(seen[0] && seen[1]) {
                    plan.single_class.push(o);
                }
            }
            plan
        })
        .collect();
    Ok(plans)
}
