//! Damped Newton (IRLS) solver for binary logistic objectives
//!
//! `J(theta) = data_weight * sum_i [ln(1 + e^eta_i) - y_i eta_i] + 1/2 sum_j penalty_j theta_j^2`
//!
//! with `eta = X theta`. With `data_weight = C` and unit penalties on the
//! non-intercept coefficients this is the L2-regularised risk model; with
//! zero penalties it is plain maximum likelihood.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::{ln_1p_exp, sigmoid};

const CHUNK: usize = 4096;

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::InvalidInput(format!(
                "design data has {} values for {n} x {p}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design matrix contains missing or non-finite values".into()));
        }
        Ok(Self { n, p, data })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Design {
        let mut data = Vec::with_capacity(self.n * cols.len());
        for i in 0..self.n {
            let r = self.row(i);
            data.extend(cols.iter().map(|&j| r[j]));
        }
        Design {
            n: self.n,
            p: cols.len(),
            data,
        }
    }

    /// Columns that are linearly independent of the columns before them,
    /// judged by a sequential Cholesky factorisation of the Gram matrix with
    /// relative pivot tolerance `tol`.
    pub fn independent_columns(&self, tol: f64) -> Vec<usize> {
        let all: Vec<usize> = (0..self.p).collect();
        independent_in_gram(&self.gram(), self.p, &all, tol)
    }

    /// `X'X`, row-major `p x p`.
    pub fn gram(&self) -> Vec<f64> {
        let p = self.p;
        let partials: Vec<Vec<f64>> = (0..self.n)
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|rows| {
                let mut g = vec![0.0; p * p];
                for &i in rows {
                    let x = self.row(i);
                    for a in 0..p {
                        let xa = x[a];
                        if xa == 0.0 {
                            continue;
                        }
                        for b in a..p {
                            g[a * p + b] += xa * x[b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut g = sum_partials(partials, p * p);
        mirror(&mut g, p);
        g
    }
}

/// Greedy screen over `candidates` (in order) of a precomputed Gram matrix:
/// a column is kept when its squared residual against the kept columns
/// exceeds `tol` times its squared norm.
pub fn independent_in_gram(gram: &[f64], p: usize, candidates: &[usize], tol: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    // rows of L for kept columns, indexed by position in `kept`
    let mut l: Vec<Vec<f64>> = Vec::new();
    for &j in candidates {
        let gjj = gram[j * p + j];
        if gjj <= 0.0 {
            continue;
        }
        let mut row = vec![0.0; kept.len()];
        for a in 0..kept.len() {
            let mut s = gram[kept[a] * p + j];
            for b in 0..a {
                s -= l[a][b] * row[b];
            }
            row[a] = s / l[a][a];
        }
        let d = gjj - row.iter().map(|v| v * v).sum::<f64>();
        if d > tol * gjj {
            row.push(d.sqrt());
            l.push(row);
            kept.push(j);
        }
    }
    kept
}

fn sum_partials(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

fn mirror(m: &mut [f64], p: usize) {
    for a in 0..p {
        for b in 0..a {
            m[a * p + b] = m[b * p + a];
        }
    }
}

/// A logistic objective over a fixed design.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub design: &'a Design,
    pub y: &'a [f64],
    pub data_weight: f64,
    /// Ridge weight per coefficient (0 leaves it unpenalised).
    pub penalty: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Convergence when the gradient max-norm drops to this value.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_max: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub coef: Vec<f64>,
    pub objective: f64,
    pub log_likelihood: f64,
    pub gradient_max: f64,
    pub iterations: usize,
}

struct Eval {
    objective: f64,
    log_likelihood: f64,
    gradient: Vec<f64>,
    hessian: Option<Vec<f64>>,
}

impl<'a> Problem<'a> {
    pub fn new(design: &'a Design, y: &'a [f64], data_weight: f64, penalty: Vec<f64>) -> Result<Self> {
        if y.len() != design.rows() || penalty.len() != design.cols() {
            return Err(Error::InvalidInput("problem dimensions disagree".into()));
        }
        Ok(Self {
            design,
            y,
            data_weight,
            penalty,
        })
    }

    fn evaluate(&self, theta: &[f64], with_hessian: bool) -> Eval {
        let p = self.design.cols();
        let idx: Vec<usize> = (0..self.design.rows()).collect();
        let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = idx
            .par_chunks(CHUNK)
            .map(|rows| {
                let mut nll = 0.0;
                let mut g = vec![0.0; p];
                let mut h = if with_hessian { vec![0.0; p * p] } else { Vec::new() };
                for &i in rows {
                    let x = self.design.row(i);
                    let eta: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
                    let y = self.y[i];
                    nll += ln_1p_exp(eta) - y * eta;
                    let mu = sigmoid(eta);
                    let r = mu - y;
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += r * xj;
                    }
                    if with_hessian {
                        let w = mu * (1.0 - mu);
                        for a in 0..p {
                            let wa = w * x[a];
                            if wa == 0.0 {
                                continue;
                            }
                            for b in a..p {
                                h[a * p + b] += wa * x[b];
                            }
                        }
                    }
                }
                (nll, g, h)
            })
            .collect();
        let mut nll = 0.0;
        let mut grad = vec![0.0; p];
        let mut hess = if with_hessian { vec![0.0; p * p] } else { Vec::new() };
        for (part_nll, part_g, part_h) in partials {
            nll += part_nll;
            for (t, v) in grad.iter_mut().zip(part_g) {
                *t += v;
            }
            for (t, v) in hess.iter_mut().zip(part_h) {
                *t += v;
            }
        }
        let mut objective = self.data_weight * nll;
        for j in 0..p {
            grad[j] = self.data_weight * grad[j] + self.penalty[j] * theta[j];
            objective += 0.5 * self.penalty[j] * theta[j] * theta[j];
        }
        let hessian = with_hessian.then(|| {
            for v in hess.iter_mut() {
                *v *= self.data_weight;
            }
            for j in 0..p {
                hess[j * p + j] += self.penalty[j];
            }
            mirror(&mut hess, p);
            hess
        });
        Eval {
            objective,
            log_likelihood: -nll,
            gradient: grad,
            hessian,
        }
    }

    /// `J(to) - J(from)` from per-row differences, accurate relative to the
    /// change itself rather than to `J`.
    pub fn objective_change(&self, from: &[f64], to: &[f64]) -> f64 {
        let idx: Vec<usize> = (0..self.design.rows()).collect();
        let delta: Vec<f64> = to.iter().zip(from).map(|(t, f)| t - f).collect();
        let parts: Vec<f64> = idx
            .par_chunks(CHUNK)
            .map(|rows| {
                let mut acc = 0.0;
                for &i in rows {
                    let x = self.design.row(i);
                    let a: f64 = x.iter().zip(from).map(|(u, v)| u * v).sum();
                    let d: f64 = x.iter().zip(&delta).map(|(u, v)| u * v).sum();
                    let b = a + d;
                    let softplus = if d.abs() < 30.0 {
                        (sigmoid(a) * d.exp_m1()).ln_1p()
                    } else {
                        ln_1p_exp(b) - ln_1p_exp(a)
                    };
                    acc += softplus - self.y[i] * d;
                }
                acc
            })
            .collect();
        let mut change = self.data_weight * parts.iter().sum::<f64>();
        for j in 0..from.len() {
            change += 0.5 * self.penalty[j] * delta[j] * (to[j] + from[j]);
        }
        change
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, false).objective
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.evaluate(theta, false).gradient
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, false).log_likelihood
    }

    /// Minimises the objective from `start` (zeros when `None`).
    pub fn solve(
        &self,
        start: Option<Vec<f64>>,
        opts: SolverOptions,
        hook: &mut dyn FnMut(&IterationRecord),
    ) -> Result<Solution> {
        let p = self.design.cols();
        let mut theta = start.unwrap_or_else(|| vec![0.0; p]);
        let mut eval = self.evaluate(&theta, true);
        // tracked as J(start) plus accurate per-step changes, so it is exactly
        // non-increasing
        let mut objective = eval.objective;
        let mut step = 0.0;
        for iteration in 0..=opts.max_iter {
            let gmax = max_abs(&eval.gradient);
            hook(&IterationRecord {
                iteration,
                objective,
                gradient_max: gmax,
                step,
            });
            if gmax <= opts.tol {
                return Ok(Solution {
                    coef: theta,
                    objective,
                    log_likelihood: eval.log_likelihood,
                    gradient_max: gmax,
                    iterations: iteration,
                });
            }
            if iteration == opts.max_iter || max_abs(&theta) > 1e4 {
                return Err(Error::NonConvergence {
                    iterations: iteration,
                    gradient: gmax,
                    diverging: max_abs(&theta) > 50.0,
                });
            }
            let direction = newton_direction(eval.hessian.as_ref().expect("hessian"), &eval.gradient, p)?;
            let mut t = 1.0;
            let accepted = loop {
                let cand: Vec<f64> = theta
                    .iter()
                    .zip(&direction)
                    .map(|(a, d)| a - t * d)
                    .collect();
                let change = self.objective_change(&theta, &cand);
                if change <= 0.0 {
                    let next = self.evaluate(&cand, true);
                    if next.objective.is_finite() {
                        break Some((cand, next, change));
                    }
                }
                t *= 0.5;
                if t < 1e-12 {
                    break None;
                }
            };
            match accepted {
                Some((cand, next, change)) => {
                    theta = cand;
                    eval = next;
                    objective += change;
                    step = t;
                }
                None => {
                    return Err(Error::NonConvergence {
                        iterations: iteration,
                        gradient: gmax,
                        diverging: max_abs(&theta) > 50.0,
                    })
                }
            }
        }
        unreachable!("loop returns on the last iteration")
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn newton_direction(hessian: &[f64], gradient: &[f64], p: usize) -> Result<Vec<f64>> {
    let g = DVector::from_column_slice(gradient);
    let h = DMatrix::from_row_slice(p, p, hessian);
    let scale = (0..p).map(|j| hessian[j * p + j]).fold(0.0f64, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut hj = h.clone();
        if jitter > 0.0 {
            for j in 0..p {
                hj[(j, j)] += jitter;
            }
        }
        if let Some(chol) = hj.cholesky() {
            let d = chol.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d.iter().copied().collect());
            }
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    Err(Error::Numerical("Hessian is not positive definite".into()))
}
