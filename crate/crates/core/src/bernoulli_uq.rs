//! Infimum test for low-rank hypotheses in the Bernoulli model (known
//! variance) and the adaptive confidence set built on top of it.
//!
//! The statistic is
//! `T = inf_{A in A(a, k0)} |f(A)|`, `f(A) = sum_{B=1} ((Y - A)^2 - sigma^2) / sqrt(2n)`.
//! The infimum is not computable exactly, so [`infimum_stat`] returns the
//! smallest `|f|` over the members it visits. Because `A(a, k0)` is
//! star-shaped around zero (`s A` stays in the class for `s` in `[0, 1]`), any
//! two visited members are joined by a path inside the class; if `f` takes
//! both signs on visited members it has a zero on that path, and `T = 0` is
//! certified exactly.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Result, UqError};
use crate::estimate::{lambda_noise_level, soft_threshold_estimator};
use crate::matrix::{
    clip_entries, minimax_rate_sq, project_rank_class, truncate_rank, DenseMatrix, RankClassSpec,
};
use crate::stats::quantile;
use crate::synth::{BernoulliDataset, NoiseSpec};
use crate::trace_uq::{BallMeta, Construction, FrobeniusBall};

/// Local-search budget for [`infimum_stat`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    /// Random starts on top of the spectral start.
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative decrease of the residual sum below which a start stops.
    pub tol: f64,
    /// Alternating truncate/clip rounds per projection.
    pub projection_iter: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            restarts: 8,
            max_iter: 200,
            tol: 1e-9,
            projection_iter: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfimumResult {
    pub statistic: f64,
    pub minimizer: DenseMatrix,
    /// A sign change of `f` was found, so the infimum is exactly zero.
    pub zero_certified: bool,
    /// No start managed to decrease the residual sum.
    pub gap_flag: bool,
}

/// `f(A) = (sum_{B=1} (Y - A)^2 - n_hat sigma^2) / sqrt(2n)`.
pub fn centered_rss(data: &BernoulliDataset, a: &DenseMatrix, sigma: f64) -> f64 {
    (masked_rss(data, a) - data.n_hat as f64 * sigma * sigma) / (2.0 * data.n as f64).sqrt()
}

fn masked_rss(data: &BernoulliDataset, a: &DenseMatrix) -> f64 {
    data.mask
        .iter()
        .zip(data.values.iter())
        .zip(a.iter())
        .filter(|((&b, _), _)| b != 0.0)
        .map(|((_, &y), &x)| (y - x) * (y - x))
        .sum()
}

/// Nearest-member heuristic: plain truncation when it already satisfies the
/// entry bound, alternating projection otherwise.
fn project_member(x: &DenseMatrix, spec: &RankClassSpec, rounds: usize) -> Result<DenseMatrix> {
    let t = truncate_rank(x, spec.k)?;
    if t.max_abs() <= spec.a {
        return Ok(t);
    }
    Ok(project_rank_class(x, spec, rounds, 1e-10)?.point)
}

struct Member {
    point: DenseMatrix,
    value: f64,
}

/// Best visited member and the first member whose `f` has the opposite sign
/// to `f(0)`.
struct Tracker {
    f0: f64,
    best: Member,
    crossing: Option<DenseMatrix>,
}

impl Tracker {
    /// Returns true once a sign change is found.
    fn visit(&mut self, m: &Member) -> bool {
        if m.value.abs() < self.best.value.abs() {
            self.best = Member {
                point: m.point.clone(),
                value: m.value,
            };
        }
        if m.value == 0.0 || (m.value > 0.0) != (self.f0 > 0.0) {
            self.crossing = Some(m.point.clone());
            return true;
        }
        false
    }
}

/// Descend the masked residual sum over the class from `start` by
/// majorize-minimize steps `A <- P(A + s B o (Y - A))`, halving `s` when a full
/// step does not help. Every visited member is reported to `tracker`.
fn local_search(
    data: &BernoulliDataset,
    spec: &RankClassSpec,
    sigma: f64,
    start: DenseMatrix,
    options: &SearchOptions,
    tracker: &mut Tracker,
) -> Result<bool> {
    let mut current = Member {
        value: centered_rss(data, &start, sigma),
        point: start,
    };
    if tracker.visit(&current) {
        return Ok(false);
    }
    let initial = current.value;
    let scale = (2.0 * data.n as f64).sqrt();
    for _ in 0..options.max_iter {
        let residual =
            DenseMatrix::from(data.mask.component_mul(&(&*data.values - &*current.point)));
        let mut improved = None;
        let mut step = 1.0;
        for _ in 0..4 {
            let trial = project_member(
                &DenseMatrix::from(&*current.point + &*residual.scaled(step)),
                spec,
                options.projection_iter,
            )?;
            let value = centered_rss(data, &trial, sigma);
            if value < current.value {
                improved = Some(Member {
                    point: trial,
                    value,
                });
                break;
            }
            step *= 0.5;
        }
        let Some(next) = improved else { break };
        let decrease = (current.value - next.value) * scale;
        let rss = current.value * scale + data.n_hat as f64 * sigma * sigma;
        current = next;
        if tracker.visit(&current) {
            break;
        }
        if decrease <= options.tol * rss.abs().max(1e-300) {
            break;
        }
    }
    Ok(current.value < initial)
}

fn random_start<R: Rng + ?Sized>(
    m1: usize,
    m2: usize,
    spec: &RankClassSpec,
    rng: &mut R,
) -> DenseMatrix {
    let u = DMatrix::<f64>::from_fn(m1, spec.k, |_, _| rng.sample(StandardNormal));
    let v = DMatrix::<f64>::from_fn(m2, spec.k, |_, _| rng.sample(StandardNormal));
    let x = DenseMatrix::from(u * v.transpose());
    let peak = x.max_abs();
    let target = spec.a * rng.random_range(0.1..1.0);
    if peak > 0.0 {
        x.scaled(target / peak)
    } else {
        x
    }
}

/// Bisect `s -> f(s A)` on `[0, 1]` where `f(0)` and `f(A)` differ in sign.
fn zero_on_ray(data: &BernoulliDataset, sigma: f64, a: &DenseMatrix, f0: f64) -> DenseMatrix {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let v = centered_rss(data, &a.scaled(mid), sigma);
        if (v > 0.0) == (f0 > 0.0) && v != 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    a.scaled(hi)
}

/// Approximate `inf_{A in A(a, k0)} |f(A)|` by multi-start local search.
///
/// Starts: zero, `+-a` times the all-ones matrix, the clipped spectral
/// estimate truncated to rank `k0`, and `options.restarts` random members.
pub fn infimum_stat<R: Rng + ?Sized>(
    data: &BernoulliDataset,
    k0: usize,
    a: f64,
    sigma: f64,
    options: &SearchOptions,
    rng: &mut R,
) -> Result<InfimumResult> {
    let (m1, m2) = data.shape();
    if k0 >= m1.min(m2) {
        return Err(UqError::Domain(format!(
            "k0 = {k0} must be below min({m1}, {m2})"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(UqError::Domain(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    let spec = RankClassSpec::new(a, k0)?;
    let zero = DenseMatrix::zeros(m1, m2);
    let f0 = centered_rss(data, &zero, sigma);
    if k0 == 0 || f0 == 0.0 {
        return Ok(InfimumResult {
            statistic: f0.abs(),
            minimizer: zero,
            zero_certified: f0 == 0.0,
            gap_flag: false,
        });
    }

    let mut tracker = Tracker {
        f0,
        best: Member {
            point: zero.clone(),
            value: f0,
        },
        crossing: None,
    };
    let ones = DenseMatrix::from_fn(m1, m2, |_, _| a);
    for anchor in [ones.clone(), ones.scaled(-1.0)] {
        let value = centered_rss(data, &anchor, sigma);
        if tracker.visit(&Member {
            point: anchor,
            value,
        }) {
            break;
        }
    }

    let mut progressed = false;
    if tracker.crossing.is_none() {
        let lambda = lambda_noise_level(data, sigma, 1.0);
        let spectral = clip_entries(&soft_threshold_estimator(data, lambda), a);
        let mut starts = vec![project_member(&spectral, &spec, options.projection_iter)?];
        for _ in 0..options.restarts {
            starts.push(project_member(
                &random_start(m1, m2, &spec, rng),
                &spec,
                options.projection_iter,
            )?);
        }
        for start in starts {
            progressed |= local_search(data, &spec, sigma, start, options, &mut tracker)?;
            if tracker.crossing.is_some() {
                break;
            }
        }
    }

    let Tracker { best, crossing, .. } = tracker;
    if let Some(point) = crossing {
        return Ok(InfimumResult {
            statistic: 0.0,
            minimizer: zero_on_ray(data, sigma, &point, f0),
            zero_certified: true,
            gap_flag: false,
        });
    }
    Ok(InfimumResult {
        statistic: best.value.abs(),
        minimizer: best.point,
        zero_certified: false,
        gap_flag: !progressed,
    })
}

/// `u_alpha = sigma sqrt(3 (U^2 - sigma^2) / (2 alpha))`.
pub fn u_alpha_theoretical(alpha: f64, sigma: f64, bound: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UqError::Domain(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if !(sigma > 0.0 && sigma <= bound) {
        return Err(UqError::Domain(format!(
            "need 0 < sigma <= U, got sigma = {sigma}, U = {bound}"
        )));
    }
    Ok(sigma * (3.0 * (bound * bound - sigma * sigma) / (2.0 * alpha)).sqrt())
}

/// Null statistic `|sum_{B=1} (eps^2 - sigma^2)| / sqrt(2n)` for one draw.
pub fn null_statistic<R: Rng + ?Sized>(
    sigma: f64,
    noise: &NoiseSpec,
    m1: usize,
    m2: usize,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let sampler = noise.sampler()?;
    let p = n as f64 / (m1 * m2) as f64;
    let mut total = 0.0;
    for _ in 0..m1 * m2 {
        if p >= 1.0 || rng.random::<f64>() < p {
            let e = sampler.sample(rng);
            total += e * e - sigma * sigma;
        }
    }
    Ok(total.abs() / (2.0 * n as f64).sqrt())
}

/// Empirical `(1 - alpha/3)`-quantile of [`null_statistic`] over `reps` draws.
pub fn u_alpha_calibrated<R: Rng + ?Sized>(
    alpha: f64,
    sigma: f64,
    noise: &NoiseSpec,
    shape: (usize, usize),
    n: usize,
    reps: usize,
    rng: &mut R,
) -> Result<f64> {
    if reps < 100 {
        return Err(UqError::Domain(format!(
            "calibration needs at least 100 draws, got {reps}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(UqError::Domain(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let (m1, m2) = shape;
    if n == 0 || n > m1 * m2 {
        return Err(UqError::Domain(format!("n = {n} outside 1..={}", m1 * m2)));
    }
    let draws = (0..reps)
        .map(|_| null_statistic(sigma, noise, m1, m2, n, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(quantile(&draws, 1.0 - alpha / 3.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Theoretical,
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestVerdict {
    #[serde(rename = "T_n")]
    pub statistic: f64,
    #[serde(rename = "u_alpha")]
    pub threshold: f64,
    pub reject: bool,
    pub mode: ThresholdMode,
    pub restarts: usize,
    pub gap_flag: bool,
    #[serde(skip)]
    pub minimizer: DenseMatrix,
}

/// `Psi = 1{T > u_alpha}` for `H0: M in A(a, k0)` with a fixed threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTest {
    pub k0: usize,
    pub a: f64,
    pub sigma: f64,
    pub threshold: f64,
    pub mode: ThresholdMode,
    pub search: SearchOptions,
}

impl LowRankTest {
    pub fn theoretical(
        k0: usize,
        a: f64,
        sigma: f64,
        bound: f64,
        alpha: f64,
        search: SearchOptions,
    ) -> Result<Self> {
        Ok(LowRankTest {
            k0,
            a,
            sigma,
            threshold: u_alpha_theoretical(alpha, sigma, bound)?,
            mode: ThresholdMode::Theoretical,
            search,
        })
    }

    /// Threshold from `reps` simulated null draws of shape `shape` with `n`
    /// expected observations under `noise`.
    #[allow(clippy::too_many_arguments)]
    pub fn calibrated<R: Rng + ?Sized>(
        k0: usize,
        a: f64,
        noise: &NoiseSpec,
        alpha: f64,
        shape: (usize, usize),
        n: usize,
        reps: usize,
        search: SearchOptions,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LowRankTest {
            k0,
            a,
            sigma: noise.sigma,
            threshold: u_alpha_calibrated(alpha, noise.sigma, noise, shape, n, reps, rng)?,
            mode: ThresholdMode::Calibrated,
            search,
        })
    }

    pub fn run<R: Rng + ?Sized>(
        &self,
        data: &BernoulliDataset,
        rng: &mut R,
    ) -> Result<TestVerdict> {
        let inf = infimum_stat(data, self.k0, self.a, self.sigma, &self.search, rng)?;
        if inf.gap_flag {
            log::debug!("infimum search made no progress from any start");
        }
        Ok(TestVerdict {
            statistic: inf.statistic,
            threshold: self.threshold,
            reject: inf.statistic > self.threshold,
            mode: self.mode,
            restarts: self.search.restarts,
            gap_flag: inf.gap_flag,
            minimizer: inf.minimizer,
        })
    }
}

/// Level at which the adaptive set runs its test: `min(alpha / 2, alpha')`.
pub fn adaptive_test_level(alpha: f64, alpha_prime: f64) -> f64 {
    (alpha / 2.0).min(alpha_prime)
}

/// Conditions under which the theoretical threshold is backed by the theory:
/// `alpha' >= 12 exp(-100 d)` and `n >= m log d`.
pub fn validity_flags(shape: (usize, usize), n: usize, alpha_prime: f64) -> Vec<String> {
    let (m1, m2) = shape;
    let d = (m1 + m2) as f64;
    let m = m1.min(m2) as f64;
    let mut flags = Vec::new();
    if alpha_prime < 12.0 * (-100.0 * d).exp() {
        flags.push("alpha_prime_below_validity_region".into());
    }
    if (n as f64) < m * d.ln() {
        flags.push("n_below_m_log_d".into());
    }
    flags
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSet {
    pub ball: FrobeniusBall,
    pub verdict: TestVerdict,
}

/// Two-valued set: center `clip(soft_threshold_estimator(data, lambda), a)`,
/// squared radius `K^2 rate(k) / (m1 m2)` when the test rejects rank `k0` and
/// `K^2 rate(k0) / (m1 m2)` otherwise. `lambda = None` uses
/// [`lambda_noise_level`] at scale 1.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_ci<R: Rng + ?Sized>(
    data: &BernoulliDataset,
    test: &LowRankTest,
    k: usize,
    big_k: f64,
    alpha: f64,
    lambda: Option<f64>,
    rng: &mut R,
) -> Result<AdaptiveSet> {
    if test.k0 >= k {
        return Err(UqError::Domain(format!(
            "need k0 < k, got k0 = {}, k = {k}",
            test.k0
        )));
    }
    if !(big_k > 0.0) {
        return Err(UqError::Domain(format!("K must be positive, got {big_k}")));
    }
    let (m1, m2) = data.shape();
    let lambda = lambda.unwrap_or_else(|| lambda_noise_level(data, test.sigma, 1.0));
    let center = clip_entries(&soft_threshold_estimator(data, lambda), test.a);
    let verdict = test.run(data, rng)?;
    let rank = if verdict.reject { k } else { test.k0 };
    let radius_sq = big_k * big_k * minimax_rate_sq(m1, m2, rank, data.n) / (m1 * m2) as f64;
    let mut flags = Vec::new();
    if verdict.gap_flag {
        flags.push("search_gap".into());
    }
    if test.mode == ThresholdMode::Theoretical {
        flags.extend(validity_flags((m1, m2), data.n, alpha));
    }
    Ok(AdaptiveSet {
        ball: FrobeniusBall {
            center,
            radius_sq,
            entry_bound: None,
            meta: BallMeta {
                construction: Construction::Adaptive,
                alpha,
                sample_count: data.n,
                flags,
            },
        },
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::synth::{make_low_rank, sample_bernoulli, NoiseKind};
    use approx::assert_abs_diff_eq;

    #[test]
    fn theoretical_threshold_examples() {
        assert_abs_diff_eq!(
            u_alpha_theoretical(0.05, 1.0, 2.0).unwrap(),
            90f64.sqrt(),
            epsilon = 1e-12
        );
        assert_eq!(u_alpha_theoretical(0.2, 0.7, 0.7).unwrap(), 0.0);
        let a = u_alpha_theoretical(0.1, 0.5, 1.5).unwrap();
        let b = u_alpha_theoretical(0.05, 0.5, 1.5).unwrap();
        assert_abs_diff_eq!(b / a, 2f64.sqrt(), epsilon = 1e-12);
        assert!(u_alpha_theoretical(0.1, 0.0, 1.0).is_err());
        assert!(u_alpha_theoretical(1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn noiseless_member_gives_zero() {
        let mut rng = rng_from_seed(21);
        let m = make_low_rank(10, 8, 2, 1.0, &mut rng).unwrap();
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let data = sample_bernoulli(&m, 60, &noise, &mut rng).unwrap();
        let r = infimum_stat(&data, 2, 1.0, 0.0, &SearchOptions::default(), &mut rng).unwrap();
        assert!(r.statistic <= 1e-6, "T = {}", r.statistic);
        assert!(r.statistic <= centered_rss(&data, &m, 0.0).abs() + 1e-12);
    }

    #[test]
    fn rank_zero_is_direct() {
        let mut rng = rng_from_seed(5);
        let noise = NoiseSpec::new(NoiseKind::Uniform, 0.5, 1.0).unwrap();
        let data = sample_bernoulli(&DenseMatrix::zeros(6, 7), 30, &noise, &mut rng).unwrap();
        let direct: f64 = data.observed().map(|(_, _, y)| y * y - 0.25).sum::<f64>() / 60f64.sqrt();
        let r = infimum_stat(&data, 0, 1.0, 0.5, &SearchOptions::default(), &mut rng).unwrap();
        assert_abs_diff_eq!(r.statistic, direct.abs(), epsilon = 1e-12);
        assert_eq!(r.minimizer, DenseMatrix::zeros(6, 7));
    }

    #[test]
    fn certified_zero_has_vanishing_objective() {
        let mut rng = rng_from_seed(13);
        let m = make_low_rank(12, 12, 1, 1.0, &mut rng).unwrap();
        let noise = NoiseSpec::new(NoiseKind::Uniform, 0.4, 1.0).unwrap();
        let data = sample_bernoulli(&m, 100, &noise, &mut rng).unwrap();
        let r = infimum_stat(&data, 1, 1.0, 0.4, &SearchOptions::default(), &mut rng).unwrap();
        assert!(r.zero_certified);
        assert_eq!(r.statistic, 0.0);
        assert!(centered_rss(&data, &r.minimizer, 0.4).abs() < 1e-9);
        assert!(RankClassSpec::new(1.0, 1).unwrap().contains(&r.minimizer));
    }

    #[test]
    fn rademacher_calibration_is_zero() {
        let mut rng = rng_from_seed(2);
        let noise = NoiseSpec::rademacher(0.8, 0.8).unwrap();
        assert_eq!(
            u_alpha_calibrated(0.1, 0.8, &noise, (10, 10), 50, 200, &mut rng).unwrap(),
            0.0
        );
        assert!(u_alpha_calibrated(0.1, 0.8, &noise, (10, 10), 50, 99, &mut rng).is_err());
    }

    #[test]
    fn adaptive_radius_is_two_valued() {
        let mut rng = rng_from_seed(17);
        let m = make_low_rank(10, 10, 1, 1.0, &mut rng).unwrap();
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let data = sample_bernoulli(&m, 80, &noise, &mut rng).unwrap();
        let mut test = LowRankTest {
            k0: 1,
            a: 1.0,
            sigma: 0.0,
            threshold: 0.0,
            mode: ThresholdMode::Calibrated,
            search: SearchOptions::default(),
        };
        let accept = adaptive_ci(&data, &test, 3, 2.0, 0.1, None, &mut rng).unwrap();
        assert!(!accept.verdict.reject);
        assert_abs_diff_eq!(
            accept.ball.radius_sq,
            4.0 * 1.0 * 20.0 / 80.0,
            epsilon = 1e-12
        );
        test.threshold = -1.0;
        let reject = adaptive_ci(&data, &test, 3, 2.0, 0.1, None, &mut rng).unwrap();
        assert!(reject.verdict.reject);
        assert!(reject.ball.radius_sq >= accept.ball.radius_sq);
        assert_abs_diff_eq!(
            reject.ball.radius_sq,
            3.0 * accept.ball.radius_sq,
            epsilon = 1e-12
        );
    }

    #[test]
    fn verdict_json_keys() {
        let v = TestVerdict {
            statistic: 1.5,
            threshold: 1.0,
            reject: true,
            mode: ThresholdMode::Calibrated,
            restarts: 8,
            gap_flag: false,
            minimizer: DenseMatrix::zeros(1, 1),
        };
        let json = serde_json::to_value(&v).unwrap();
        assert_eq!(json["T_n"], 1.5);
        assert_eq!(json["u_alpha"], 1.0);
        assert_eq!(json["mode"], "calibrated");
        assert!(json.get("minimizer").is_none());
    }
}
