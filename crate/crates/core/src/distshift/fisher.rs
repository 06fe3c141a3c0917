//! Two-sided Fisher exact test for 2x2 tables

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// `[[a, b], [c, d]]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl Table2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }

    pub fn n(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.a, self.c, self.b, self.d)
    }

    pub fn swap_rows(&self) -> Self {
        Self::new(self.c, self.d, self.a, self.b)
    }

    pub fn swap_cols(&self) -> Self {
        Self::new(self.b, self.a, self.d, self.c)
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Log-probability of top-left cell `k` under fixed margins (row 1 total
/// `r1`, column 1 total `c1`, grand total `n`).
pub fn hypergeom_ln_pmf(k: u64, r1: u64, c1: u64, n: u64) -> f64 {
    let lo = (r1 + c1).saturating_sub(n);
    if k < lo || k > r1.min(c1) {
        return f64::NEG_INFINITY;
    }
    ln_choose(r1, k) + ln_choose(n - r1, c1 - k) - ln_choose(n, c1)
}

/// Sum of the probabilities of all tables with the observed margins that
/// are no more likely than the observed table (relative slack 1e-7).
///
/// Terms are built as log-ratios to the modal table with the recurrence
/// `p(k+1)/p(k) = (r1-k)(c1-k) / ((k+1)(n-r1-c1+k+1))`, so nothing
/// overflows at any cohort size.
pub fn fisher_exact(t: &Table2x2) -> f64 {
    let n = t.n();
    let r1 = t.a + t.b;
    let c1 = t.a + t.c;
    let lo = (r1 + c1).saturating_sub(n);
    let hi = r1.min(c1);
    if lo == hi {
        return 1.0;
    }
    let mode = (((r1 + 1) as f64 * (c1 + 1) as f64) / (n + 2) as f64).floor() as u64;
    let mode = mode.clamp(lo, hi);
    let step_up = |k: u64| -> f64 {
        ((r1 - k) as f64).ln() + ((c1 - k) as f64).ln()
            - ((k + 1) as f64).ln()
            - ((n + k + 1 - r1 - c1) as f64).ln()
    };
    let len = (hi - lo + 1) as usize;
    let mut lr = vec![0.0; len];
    let at = |k: u64| (k - lo) as usize;
    for k in mode..hi {
        lr[at(k + 1)] = lr[at(k)] + step_up(k);
    }
    for k in (lo..mode).rev() {
        lr[at(k)] = lr[at(k + 1)] - step_up(k);
    }
    let cutoff = lr[at(t.a)] + 1e-7f64.ln_1p();
    let mut total = 0.0;
    let mut tail = 0.0;
    // smallest terms first for accuracy
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_unstable_by(|&i, &j| lr[i].total_cmp(&lr[j]));
    for i in order {
        let p = lr[i].exp();
        total += p;
        if lr[i] <= cutoff {
            tail += p;
        }
    }
    (tail / total).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_table_is_one() {
        assert_eq!(fisher_exact(&Table2x2::new(10, 10, 10, 10)), 1.0);
    }

    #[test]
    fn known_value() {
        // tea tasting: [[3,1],[1,3]] two-sided p = 34/70
        assert!((fisher_exact(&Table2x2::new(3, 1, 1, 3)) - 34.0 / 70.0).abs() < 1e-14);
    }

    #[test]
    fn huge_margins_do_not_overflow() {
        let p = fisher_exact(&Table2x2::new(1200, 98_800, 1000, 99_000));
        assert!(p.is_finite() && p > 0.0 && p < 1.0);
        let p = fisher_exact(&Table2x2::new(50_000, 50_000, 50_000, 50_000));
        assert!((p - 1.0).abs() < 1e-12);
    }
}
