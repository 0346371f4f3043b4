//! Confidence sets in the trace-regression model.
//!
//! Both constructions split the sample in two halves: the second half fits the
//! center with [`matrix_lasso`], the first half estimates the center's risk.
//! With known noise variance the risk estimate is a residual sum of squares
//! minus `sigma^2`; with unknown variance it is a U-statistic over pairs of
//! repeated observations of the same entry, which needs no variance at all.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::estimate::{estimator_risk, lasso_lambda, matrix_lasso, SolverStatus};
use crate::matrix::{DenseMatrix, ENTRY_TOL};
use crate::synth::TraceDataset;

/// Default for the free constant `z` of the RSS set.
pub const DEFAULT_RSS_Z: f64 = 1.0;

/// Solver budget for confidence-set centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSolver {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CenterSolver {
    fn default() -> Self {
        CenterSolver {
            max_iter: 300,
            tol: 1e-7,
        }
    }
}

/// Split into `(first, second)` halves of size `floor(n/2)`; with odd `n` the
/// last observation is dropped.
pub fn split_sample(data: &TraceDataset) -> Result<(TraceDataset, TraceDataset)> {
    let n = data.len();
    if n < 2 {
        return Err(UqError::Domain(format!(
            "cannot split a sample of size {n}"
        )));
    }
    let half = n / 2;
    let part = |range: std::ops::Range<usize>| TraceDataset {
        m1: data.m1,
        m2: data.m2,
        samples: data.samples[range].to_vec(),
    };
    Ok((part(0..half), part(half..2 * half)))
}

/// Two independent observations `z`, `z'` of the entry `(row, col)`, taken
/// from sample indices `first_index < second_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservationPair {
    pub row: usize,
    pub col: usize,
    pub first_index: usize,
    pub second_index: usize,
    pub z: f64,
    pub z_prime: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSet {
    pub m1: usize,
    pub m2: usize,
    pub pairs: Vec<ObservationPair>,
}

impl PairedSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Couple consecutive repeats of each entry: with sample indices
/// `a1 < a2 < ...` at one position, form `(a1, a2), (a3, a4), ...`.
pub fn pair_repeats(half: &TraceDataset) -> PairedSet {
    let mut by_position: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (idx, s) in half.samples.iter().enumerate() {
        by_position.entry((s.row, s.col)).or_default().push(idx);
    }
    let mut pairs = Vec::new();
    for ((row, col), indices) in by_position {
        for couple in indices.chunks_exact(2) {
            let (l, s) = (couple[0], couple[1]);
            pairs.push(ObservationPair {
                row,
                col,
                first_index: l,
                second_index: s,
                z: half.samples[l].value,
                z_prime: half.samples[s].value,
            });
        }
    }
    PairedSet {
        m1: half.m1,
        m2: half.m2,
        pairs,
    }
}

/// `R_N = (1/N) sum_k (z_k - M_hat[pos_k]) (z'_k - M_hat[pos_k])`, zero when
/// there are no pairs.
pub fn u_statistic(pairs: &PairedSet, center: &DenseMatrix) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .pairs
        .iter()
        .map(|p| {
            let c = center[(p.row, p.col)];
            (p.z - c) * (p.z_prime - c)
        })
        .sum();
    total / pairs.len() as f64
}

/// Quantile constant `(U^2 + 4 a^2) / sqrt(N alpha)`, or `4 a^2` when `N = 0`.
pub fn u_quantile(alpha: f64, n_pairs: usize, a: f64, bound: f64) -> f64 {
    if n_pairs == 0 {
        4.0 * a * a
    } else {
        (bound * bound + 4.0 * a * a) / (n_pairs as f64 * alpha).sqrt()
    }
}

/// High-probability lower bound on the pair count and its probability:
/// `(n^2 / (64 m1 m2), 1 - exp(-n^2 / (372 m1 m2)))`.
pub fn n_pairs_bound(n: usize, m1: usize, m2: usize) -> Result<(f64, f64)> {
    let cells = (m1 * m2) as f64;
    if n > m1 * m2 {
        return Err(UqError::Domain(format!(
            "n = {n} exceeds m1 m2 = {}",
            m1 * m2
        )));
    }
    let n2 = (n as f64).powi(2);
    Ok((n2 / (64.0 * cells), 1.0 - (-n2 / (372.0 * cells)).exp()))
}

/// `R_n = (2/n) sum_{first half} (y_i - M_hat[pos_i])^2 - sigma^2`, with `n`
/// the full sample size, i.e. twice the half's length.
pub fn rss_statistic(half: &TraceDataset, center: &DenseMatrix, sigma: f64) -> f64 {
    if half.is_empty() {
        return -sigma * sigma;
    }
    let rss: f64 = half
        .samples
        .iter()
        .map(|s| (s.value - center[(s.row, s.col)]).powi(2))
        .sum();
    rss / half.len() as f64 - sigma * sigma
}

/// Inputs of the RSS radius besides the data-dependent `R_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssRadiusParams {
    pub alpha: f64,
    pub sigma: f64,
    pub bound: f64,
    pub z: f64,
    /// Full sample size.
    pub n: usize,
    /// `m1 + m2`.
    pub d: usize,
}

impl RssRadiusParams {
    /// `z_alpha = log(3 / alpha)`.
    pub fn z_alpha(&self) -> f64 {
        (3.0 / self.alpha).ln()
    }

    /// `xi = sqrt(2) sigma U log(3 / alpha)`.
    pub fn xi(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.sigma * self.bound * self.z_alpha()
    }

    /// `4 z d / (3 n)`: below this squared radius the `max` in `z_bar` is
    /// attained by its constant branch.
    pub fn branch_point(&self) -> f64 {
        4.0 * self.z * self.d as f64 / (3.0 * self.n as f64)
    }
}

/// Largest `r^2 >= 0` with
/// `r^2 <= 2 (R_n + z d/n + (z_bar(r^2) + xi) / sqrt(n))`,
/// `z_bar^2 = z_alpha sigma^2 max(3 r^2, 4 z d / n)`.
///
/// On `r^2 >= 4zd/(3n)` the inequality is a quadratic in `r` with positive
/// leading coefficient; below the branch point it is linear in `r^2`. The
/// right-hand side is concave in `r^2`, so the feasible set is an interval and
/// the answer is the valid upper root of whichever branch holds it. Returns 0
/// when no non-negative `r^2` is feasible.
pub fn rss_radius_sq(r_hat: f64, params: &RssRadiusParams) -> f64 {
    let n = params.n as f64;
    let sqrt_n = n.sqrt();
    let zd_n = params.z * params.d as f64 / n;
    let c = 2.0 * (r_hat + zd_n + params.xi() / sqrt_n);
    let var_scale = params.z_alpha() * params.sigma * params.sigma;
    let branch = params.branch_point();

    // upper branch: y^2 - b y - c <= 0 with y = r, b = 2 sqrt(3 z_alpha) sigma / sqrt(n)
    let b = 2.0 * (3.0 * var_scale).sqrt() / sqrt_n;
    let disc = b * b + 4.0 * c;
    if disc >= 0.0 {
        let y = 0.5 * (b + disc.sqrt());
        if y >= 0.0 && y * y >= branch {
            return y * y;
        }
    }
    // lower branch: constant z_bar
    let z_bar = (var_scale * 4.0 * zd_n).sqrt();
    let x = c + 2.0 * z_bar / sqrt_n;
    if x >= 0.0 && x < branch {
        return x;
    }
    0.0
}

/// Which construction produced a ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    Rss,
    UStatistic,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BallMeta {
    pub construction: Construction,
    pub alpha: f64,
    /// `N` (pairs) for the U-statistic set, `n` for the others.
    pub sample_count: usize,
    pub flags: Vec<String>,
}

/// `{A : ||A - center||_F^2 / (m1 m2) <= radius_sq}`, optionally intersected
/// with `{||A||_inf <= entry_bound}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrobeniusBall {
    pub center: DenseMatrix,
    pub radius_sq: f64,
    pub entry_bound: Option<f64>,
    pub meta: BallMeta,
}

impl FrobeniusBall {
    pub fn contains(&self, a: &DenseMatrix) -> Result<bool> {
        if let Some(bound) = self.entry_bound {
            if a.max_abs() > bound + ENTRY_TOL * bound.max(1.0) {
                return Ok(false);
            }
        }
        Ok(estimator_risk(a, &self.center)? <= self.radius_sq)
    }

    /// JSON record `{construction, alpha, center_file, radius_sq, N_or_n, flags}`.
    pub fn to_record(&self, center_file: &str) -> BallRecord {
        BallRecord {
            construction: self.meta.construction,
            alpha: self.meta.alpha,
            center_file: center_file.to_string(),
            radius_sq: self.radius_sq,
            n_or_n: self.meta.sample_count,
            flags: self.meta.flags.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BallRecord {
    pub construction: Construction,
    pub alpha: f64,
    pub center_file: String,
    pub radius_sq: f64,
    #[serde(rename = "N_or_n")]
    pub n_or_n: usize,
    pub flags: Vec<String>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UqError::Domain(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn fit_center(
    second: &TraceDataset,
    noise_scale: f64,
    a: f64,
    options: &TraceSetOptions,
    flags: &mut Vec<String>,
) -> DenseMatrix {
    let lambda = options.lambda.unwrap_or_else(|| {
        lasso_lambda(
            noise_scale,
            second.m1,
            second.m2,
            second.len(),
            options.lambda_scale,
        )
    });
    let fit = matrix_lasso(
        second,
        lambda,
        a,
        options.solver.max_iter,
        options.solver.tol,
    );
    match fit.status {
        SolverStatus::Converged => {}
        SolverStatus::MaxIter => flags.push("center_max_iter".into()),
        SolverStatus::Stalled => flags.push("center_stalled".into()),
    }
    if !fit.estimate.is_finite() {
        flags.push("failure:nonfinite_center".into());
    }
    fit.estimate
}

fn sample_size_flags(data: &TraceDataset, flags: &mut Vec<String>) {
    let m = data.m1.min(data.m2) as f64;
    let d = (data.m1 + data.m2) as f64;
    let n = data.len() as f64;
    if n < m * d.ln() || data.len() > data.m1 * data.m2 {
        log::warn!("n = {n} lies outside the recommended range [m log d, m1 m2]");
        flags.push("n_outside_recommended_range".into());
    }
}

/// Options shared by the trace-model sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSetOptions {
    /// Lasso tuning; `None` uses [`lasso_lambda`] at the relevant noise level.
    pub lambda: Option<f64>,
    /// Multiplier for the default tuning.
    pub lambda_scale: f64,
    pub solver: CenterSolver,
}

impl Default for TraceSetOptions {
    fn default() -> Self {
        TraceSetOptions {
            lambda: None,
            lambda_scale: 1.0,
            solver: CenterSolver::default(),
        }
    }
}

/// U-statistic confidence set (unknown variance). The center is fitted on the
/// second half with the noise bound `U` standing in for `sigma`; the radius is
/// `R_N + z_{alpha,N}` from the pairs in the first half.
pub fn u_ci(
    data: &TraceDataset,
    alpha: f64,
    a: f64,
    bound: f64,
    options: &TraceSetOptions,
) -> Result<FrobeniusBall> {
    check_alpha(alpha)?;
    let (first, second) = split_sample(data)?;
    let mut flags = Vec::new();
    sample_size_flags(data, &mut flags);
    let center = fit_center(&second, bound, a, options, &mut flags);
    let pairs = pair_repeats(&first);
    let radius_sq = u_statistic(&pairs, &center) + u_quantile(alpha, pairs.len(), a, bound);
    Ok(FrobeniusBall {
        center,
        radius_sq,
        entry_bound: Some(a),
        meta: BallMeta {
            construction: Construction::UStatistic,
            alpha,
            sample_count: pairs.len(),
            flags,
        },
    })
}

/// Residual-sum-of-squares confidence set (known variance).
pub fn rss_ci(
    data: &TraceDataset,
    alpha: f64,
    sigma: f64,
    bound: f64,
    z: f64,
    a: f64,
    options: &TraceSetOptions,
) -> Result<FrobeniusBall> {
    check_alpha(alpha)?;
    if !(z > 0.0) {
        return Err(UqError::Domain(format!("z must be positive, got {z}")));
    }
    let (first, second) = split_sample(data)?;
    let mut flags = Vec::new();
    sample_size_flags(data, &mut flags);
    let center = fit_center(&second, sigma, a, options, &mut flags);
    let n = 2 * first.len();
    let params = RssRadiusParams {
        alpha,
        sigma,
        bound,
        z,
        n,
        d: data.m1 + data.m2,
    };
    let r_hat = rss_statistic(&first, &center, sigma);
    Ok(FrobeniusBall {
        center,
        radius_sq: rss_radius_sq(r_hat, &params),
        entry_bound: None,
        meta: BallMeta {
            construction: Construction::Rss,
            alpha,
            sample_count: n,
            flags,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::synth::{make_low_rank, sample_trace, NoiseSpec, TraceSample};
    use approx::assert_abs_diff_eq;

    fn dataset(positions: &[(usize, usize)], m1: usize, m2: usize) -> TraceDataset {
        TraceDataset {
            m1,
            m2,
            samples: positions
                .iter()
                .enumerate()
                .map(|(k, &(row, col))| TraceSample {
                    row,
                    col,
                    value: k as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn split_sizes() {
        let even = dataset(&[(0, 0); 10], 2, 2);
        let (a, b) = split_sample(&even).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let mut joined = a.samples.clone();
        joined.extend(b.samples);
        assert_eq!(joined, even.samples);

        let odd = dataset(&[(0, 0); 11], 2, 2);
        let (a, b) = split_sample(&odd).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(split_sample(&dataset(&[(0, 0)], 2, 2)).is_err());
    }

    #[test]
    fn pairs_follow_index_order() {
        // position (1, 1) observed at indices 2, 5, 9
        let pos = [
            (0, 0),
            (0, 1),
            (1, 1),
            (1, 0),
            (2, 2),
            (1, 1),
            (2, 0),
            (0, 2),
            (2, 1),
            (1, 1),
        ];
        let half = dataset(&pos, 3, 3);
        let pairs = pair_repeats(&half);
        assert_eq!(pairs.len(), 1);
        let p = pairs.pairs[0];
        assert_eq!((p.row, p.col, p.first_index, p.second_index), (1, 1, 2, 5));
        assert_eq!((p.z, p.z_prime), (2.0, 5.0));
    }

    #[test]
    fn pair_counts() {
        let distinct = dataset(&[(0, 0), (0, 1), (1, 0), (1, 1)], 2, 2);
        assert!(pair_repeats(&distinct).is_empty());
        let six = dataset(&[(1, 0); 6], 2, 2);
        assert_eq!(pair_repeats(&six).len(), 3);
    }

    #[test]
    fn u_statistic_noiseless_cases() {
        let mut rng = rng_from_seed(4);
        let m = make_low_rank(5, 5, 2, 1.0, &mut rng).unwrap();
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let data = sample_trace(&m, 100, &noise, &mut rng).unwrap();
        let pairs = pair_repeats(&data);
        assert!(!pairs.is_empty());
        assert_eq!(u_statistic(&pairs, &m), 0.0);
        let shifted = m.map(|x| x + 0.3);
        assert_abs_diff_eq!(u_statistic(&pairs, &shifted), 0.09, epsilon = 1e-14);
        let empty = PairedSet {
            m1: 5,
            m2: 5,
            pairs: vec![],
        };
        assert_eq!(u_statistic(&empty, &shifted), 0.0);
    }

    #[test]
    fn u_quantile_examples() {
        assert_abs_diff_eq!(u_quantile(0.04, 25, 0.5, 1.0), 2.0, epsilon = 1e-14);
        assert_eq!(u_quantile(0.3, 0, 0.5, 7.0), 1.0);
        assert_abs_diff_eq!(
            u_quantile(0.1, 40, 0.7, 1.2),
            2.0 * u_quantile(0.1, 160, 0.7, 1.2),
            epsilon = 1e-14
        );
    }

    #[test]
    fn pair_bound_examples() {
        assert_eq!(n_pairs_bound(64, 8, 8).unwrap().0, 1.0);
        let (bound, prob) = n_pairs_bound(400, 20, 20).unwrap();
        assert_eq!(bound, 6.25);
        assert_abs_diff_eq!(prob, 1.0 - (-400.0f64 / 372.0).exp(), epsilon = 1e-15);
        assert!(n_pairs_bound(401, 20, 20).is_err());
    }

    #[test]
    fn rss_statistic_noiseless() {
        let mut rng = rng_from_seed(8);
        let m = make_low_rank(6, 4, 1, 1.0, &mut rng).unwrap();
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let half = sample_trace(&m, 30, &noise, &mut rng).unwrap();
        assert_eq!(rss_statistic(&half, &m, 0.0), 0.0);
        assert_abs_diff_eq!(
            rss_statistic(&half, &m.map(|x| x - 0.5), 0.0),
            0.25,
            epsilon = 1e-14
        );
    }

    #[test]
    fn rss_radius_degenerate_constants() {
        // R_n = 0, xi = 0 (sigma = 0), z_alpha irrelevant -> 2 z d / n
        let params = RssRadiusParams {
            alpha: 0.1,
            sigma: 0.0,
            bound: 1.0,
            z: 1.5,
            n: 200,
            d: 30,
        };
        assert_abs_diff_eq!(
            rss_radius_sq(0.0, &params),
            2.0 * 1.5 * 30.0 / 200.0,
            epsilon = 1e-15
        );
        // with z_alpha = 0 (alpha = 3) the formula is the same
        let params = RssRadiusParams {
            alpha: 3.0,
            sigma: 0.7,
            ..params
        };
        assert_abs_diff_eq!(
            rss_radius_sq(0.0, &params),
            2.0 * 1.5 * 30.0 / 200.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn rss_radius_branch_point() {
        let params = RssRadiusParams {
            alpha: 0.1,
            sigma: 1.0,
            bound: 1.0,
            z: 1.0,
            n: 400,
            d: 40,
        };
        assert_abs_diff_eq!(params.branch_point(), 4.0 * 40.0 / 1200.0, epsilon = 1e-15);
        // very negative R_n empties the set
        assert_eq!(rss_radius_sq(-10.0, &params), 0.0);
    }

    #[test]
    fn u_ci_without_pairs_covers_trivially() {
        let m = DenseMatrix::from_fn(3, 3, |i, j| if (i + j) % 2 == 0 { 0.5 } else { -0.5 });
        // 4 distinct positions in the first half, anything in the second
        let samples: Vec<TraceSample> = [
            (0, 0),
            (0, 1),
            (1, 0),
            (2, 2),
            (0, 0),
            (1, 1),
            (2, 1),
            (0, 2),
        ]
        .iter()
        .map(|&(row, col)| TraceSample {
            row,
            col,
            value: m[(row, col)],
        })
        .collect();
        let data = TraceDataset {
            m1: 3,
            m2: 3,
            samples,
        };
        let ball = u_ci(&data, 0.1, 0.5, 1.0, &TraceSetOptions::default()).unwrap();
        assert_eq!(ball.meta.sample_count, 0);
        assert_eq!(ball.radius_sq, 1.0);
        assert!(ball.contains(&m).unwrap());
    }

    #[test]
    fn membership_respects_entry_bound_and_radius() {
        let center = DenseMatrix::zeros(2, 2);
        let mut ball = FrobeniusBall {
            center,
            radius_sq: 0.25,
            entry_bound: Some(1.0),
            meta: BallMeta {
                construction: Construction::UStatistic,
                alpha: 0.1,
                sample_count: 0,
                flags: vec![],
            },
        };
        let inside = DenseMatrix::from_fn(2, 2, |_, _| 0.5);
        assert!(ball.contains(&inside).unwrap());
        assert!(!ball.contains(&inside.map(|_| 0.6)).unwrap());
        ball.radius_sq = 5.0;
        assert!(!ball.contains(&inside.map(|_| 2.0)).unwrap());
        ball.entry_bound = None;
        assert!(ball.contains(&inside.map(|_| 2.0)).unwrap());
        let json = serde_json::to_value(ball.to_record("center.csv")).unwrap();
        assert_eq!(json["construction"], "u-statistic");
        assert_eq!(json["N_or_n"], 0);
    }
}
