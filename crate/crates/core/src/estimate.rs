//! Low-rank estimators used as confidence-set centers: the closed-form
//! nuclear-norm soft-thresholding estimator for Bernoulli data and a
//! box-constrained matrix lasso for trace-regression data.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::matrix::{clip_entries, frobenius_sq_dist, singular_value_soft_threshold, DenseMatrix};
use crate::synth::{BernoulliDataset, TraceDataset};

/// Default operator-norm constant in [`lambda_oracle`].
pub const DEFAULT_C_OP: f64 = 1.0;

/// Singular-value threshold `t = lambda m1 m2 / 2` applied to `(m1 m2 / n) Y`.
pub fn soft_threshold_level(m1: usize, m2: usize, lambda: f64) -> f64 {
    lambda * (m1 * m2) as f64 / 2.0
}

/// Minimizer of `||A||_F^2 / (m1 m2) - (2/n) <Y, A> + lambda ||A||_*`.
///
/// Completing the square shows the minimizer is the nuclear-norm prox of
/// `W = (m1 m2 / n) Y` at level [`soft_threshold_level`].
pub fn soft_threshold_estimator(data: &BernoulliDataset, lambda: f64) -> DenseMatrix {
    let (m1, m2) = data.shape();
    let w = data.values.scaled((m1 * m2) as f64 / data.n as f64);
    singular_value_soft_threshold(&w, soft_threshold_level(m1, m2, lambda))
}

/// Objective minimized by [`soft_threshold_estimator`].
pub fn soft_threshold_objective(data: &BernoulliDataset, a: &DenseMatrix, lambda: f64) -> f64 {
    let (m1, m2) = data.shape();
    let inner = data.values.dot(a);
    a.frobenius_sq() / (m1 * m2) as f64 - 2.0 / data.n as f64 * inner + lambda * nuclear_norm(a)
}

pub fn nuclear_norm(a: &DenseMatrix) -> f64 {
    a.singular_values().iter().sum()
}

/// Theory tuning `3 (3 sqrt(2) sigma + sqrt(2 C_op) U) / sqrt(m n)`.
pub fn lambda_oracle(sigma: f64, bound: f64, m: usize, n: usize, c_op: f64) -> f64 {
    3.0 * (3.0 * std::f64::consts::SQRT_2 * sigma + (2.0 * c_op).sqrt() * bound)
        / ((m * n) as f64).sqrt()
}

/// Data-driven tuning for the soft-thresholding estimator: puts the threshold
/// at `scale` times the expected operator norm of `W - M`.
///
/// Entry `(i, j)` of `W - M` has variance `(M_ij^2 (1 - p) + sigma^2) / p`;
/// the average over entries is estimated from the observed second moment
/// `mean(Y^2 | B = 1) = ||M||_F^2 / (m1 m2) + sigma^2`.
pub fn lambda_noise_level(data: &BernoulliDataset, sigma: f64, scale: f64) -> f64 {
    let (m1, m2) = data.shape();
    let p = data.p;
    let second_moment = if data.n_hat == 0 {
        sigma * sigma
    } else {
        data.observed().map(|(_, _, y)| y * y).sum::<f64>() / data.n_hat as f64
    };
    let signal = (second_moment - sigma * sigma).max(0.0);
    let entry_var = (signal * (1.0 - p) + sigma * sigma) / p;
    let op_norm = entry_var.sqrt() * ((m1 as f64).sqrt() + (m2 as f64).sqrt());
    2.0 * scale * op_norm / (m1 * m2) as f64
}

/// Tuning for [`matrix_lasso`]: `scale` times the typical operator norm of the
/// loss gradient at the truth, `(2/n) || sum_i eps_i X_i ||`, for noise level
/// `noise_scale` and `n` observations.
pub fn lasso_lambda(noise_scale: f64, m1: usize, m2: usize, n: usize, scale: f64) -> f64 {
    let (f1, f2) = (m1 as f64, m2 as f64);
    scale * 2.0 * noise_scale * (f1.sqrt() + f2.sqrt()) / (n as f64 * f1 * f2).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Converged,
    MaxIter,
    /// No step size decreased the objective.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LassoFit {
    pub estimate: DenseMatrix,
    /// Objective after every accepted iterate, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub status: SolverStatus,
}

/// Per-entry sufficient statistics of a trace sample.
struct EntryStats {
    counts: DMatrix<f64>,
    sums: DMatrix<f64>,
    sum_sq: f64,
    n: f64,
}

impl EntryStats {
    fn new(data: &TraceDataset) -> Self {
        let mut counts = DMatrix::zeros(data.m1, data.m2);
        let mut sums = DMatrix::zeros(data.m1, data.m2);
        let mut sum_sq = 0.0;
        for s in &data.samples {
            counts[(s.row, s.col)] += 1.0;
            sums[(s.row, s.col)] += s.value;
            sum_sq += s.value * s.value;
        }
        EntryStats {
            counts,
            sums,
            sum_sq,
            n: data.samples.len() as f64,
        }
    }

    /// `(1/n) sum_i (y_i - A_{pos_i})^2`.
    fn loss(&self, a: &DMatrix<f64>) -> f64 {
        let cross = self.sums.dot(a);
        let quad: f64 = self
            .counts
            .iter()
            .zip(a.iter())
            .map(|(c, x)| c * x * x)
            .sum();
        (self.sum_sq - 2.0 * cross + quad) / self.n
    }

    fn gradient(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        (self.counts.component_mul(a) - &self.sums) * (2.0 / self.n)
    }
}

/// Empirical trace-regression loss plus `lambda ||A||_*`.
pub fn lasso_objective(data: &TraceDataset, a: &DenseMatrix, lambda: f64) -> f64 {
    EntryStats::new(data).loss(a) + lambda * nuclear_norm(a)
}

/// Box-constrained matrix lasso by proximal gradient.
///
/// Each step takes a gradient step of size `1/L` (`L = 2 max_count / n`),
/// soft-thresholds singular values, then clips entries to `[-a, a]`. A step
/// is accepted only if the objective does not increase; otherwise the step
/// size is halved. Every returned iterate satisfies `||A||_inf <= a`.
pub fn matrix_lasso(
    data: &TraceDataset,
    lambda: f64,
    a: f64,
    max_iter: usize,
    tol: f64,
) -> LassoFit {
    let stats = EntryStats::new(data);
    let max_count = stats.counts.iter().copied().fold(0.0_f64, f64::max);
    let mut current = DenseMatrix::zeros(data.m1, data.m2);
    let mut objective = stats.loss(&current);
    let mut trace = vec![objective];
    if max_count == 0.0 {
        return LassoFit {
            estimate: current,
            objective_trace: trace,
            iterations: 0,
            status: SolverStatus::Converged,
        };
    }
    let base_step = stats.n / (2.0 * max_count);
    let mut status = SolverStatus::MaxIter;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let grad = stats.gradient(&current);
        let mut step = base_step;
        let mut accepted = None;
        for _ in 0..40 {
            let moved: DenseMatrix = (&*current - &grad * step).into();
            let shrunk = singular_value_soft_threshold(&moved, step * lambda);
            let candidate = clip_entries(&shrunk, a);
            let value = stats.loss(&candidate) + lambda * nuclear_norm(&candidate);
            if value <= objective {
                accepted = Some((candidate, value));
                break;
            }
            step *= 0.5;
        }
        let Some((candidate, value)) = accepted else {
            status = SolverStatus::Stalled;
            break;
        };
        let decrease = objective - value;
        current = candidate;
        objective = value;
        trace.push(objective);
        if decrease <= tol * objective.abs().max(f64::MIN_POSITIVE) {
            status = SolverStatus::Converged;
            break;
        }
    }
    LassoFit {
        estimate: current,
        objective_trace: trace,
        iterations,
        status,
    }
}

/// Normalized squared error `||M_hat - M||_F^2 / (m1 m2)`.
pub fn estimator_risk(estimate: &DenseMatrix, truth: &DenseMatrix) -> Result<f64> {
    let (m1, m2) = truth.shape();
    Ok(frobenius_sq_dist(estimate, truth)? / (m1 * m2) as f64)
}
