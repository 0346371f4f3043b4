//! Lower-bound prior for unknown-variance testing and an empirical
//! indistinguishability experiment.
//!
//! Under `H1` the truth is `M_ij = u U_i^{K_j} V_j` with `u = 2 rho` and the
//! noise at `(i, j)` takes the values `1 - M_ij` and `-1 - M_ij`, so every
//! observation is `+-1` exactly as under `H0` (`M = 0`, Rademacher noise).
//! The signal only shows up as a variance deficit `4 rho^2`, which a tester
//! who does not know the variance cannot see.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bernoulli_uq::{infimum_stat, SearchOptions};
use crate::error::{Result, UqError};
use crate::matrix::DenseMatrix;
use crate::rng::{stream_rng, Purpose, UqRng};
use crate::stats::quantile;
use crate::synth::{
    sample_bernoulli, sample_bernoulli_with, two_point_draw, BernoulliDataset, NoiseSpec,
};

/// `rho = v k^{1/4} sqrt(m) / sqrt(n)`.
pub fn rho_for(v: f64, k: usize, m: usize, n: usize) -> f64 {
    v * (k as f64).powf(0.25) * (m as f64).sqrt() / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorDraw {
    pub matrix: DenseMatrix,
    pub rho: f64,
    /// `2 rho`.
    pub u: f64,
    /// Group of each column, `0..k`.
    pub labels: Vec<usize>,
    /// `m x k` matrix of row signs `U_i^kappa`.
    pub row_signs: DMatrix<f64>,
    pub col_signs: Vec<f64>,
    /// `m` was not a multiple of `k` and was reduced to `k floor(m / k)`.
    pub trimmed: bool,
}

impl PriorDraw {
    pub fn size(&self) -> usize {
        self.col_signs.len()
    }

    /// Bernoulli observation with the matched two-point noise.
    ///
    /// `M_ij + eps_ij` is `+-1`; it is formed as `M_ij + eps_ij` rounded to
    /// the sign so that the values are exactly `+-1` in floating point.
    pub fn observe<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<BernoulliDataset> {
        let m = &self.matrix;
        let zero = DenseMatrix::zeros(self.size(), self.size());
        sample_bernoulli_with(&zero, n, rng, |i, j, rng| {
            let shift = m[(i, j)];
            (shift + two_point_draw(shift, rng)).signum()
        })
    }
}

fn rademacher<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Draw `M` from the prior on an `m x m` grid split into `k` equal groups.
pub fn sample_h1<R: Rng + ?Sized>(m: usize, k: usize, rho: f64, rng: &mut R) -> Result<PriorDraw> {
    if !(rho > 0.0 && rho < 0.5) {
        return Err(UqError::Domain(format!(
            "rho must lie in (0, 1/2), got {rho}"
        )));
    }
    if k == 0 || k > m {
        return Err(UqError::Domain(format!(
            "need 1 <= k <= m, got k = {k}, m = {m}"
        )));
    }
    let size = k * (m / k);
    let trimmed = size != m;
    if trimmed {
        log::warn!("m = {m} is not a multiple of k = {k}; using m = {size}");
    }
    let group = size / k;
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(rng);
    let mut labels = vec![0; size];
    for (slot, &col) in order.iter().enumerate() {
        labels[col] = slot / group;
    }
    let row_signs = DMatrix::from_fn(size, k, |_, _| rademacher(rng));
    let col_signs: Vec<f64> = (0..size).map(|_| rademacher(rng)).collect();
    let u = 2.0 * rho;
    let matrix = DenseMatrix::from_fn(size, size, |i, j| {
        u * row_signs[(i, labels[j])] * col_signs[j]
    });
    Ok(PriorDraw {
        matrix,
        rho,
        u,
        labels,
        row_signs,
        col_signs,
        trimmed,
    })
}

/// `M = 0` with Rademacher noise of scale `sigma`.
pub fn sample_h0(m: usize, sigma: f64) -> Result<(DenseMatrix, NoiseSpec)> {
    Ok((
        DenseMatrix::zeros(m, m),
        NoiseSpec::rademacher(sigma, sigma.max(1.0))?,
    ))
}

/// Exact mean and variance of the two-point law centered at `shift`.
pub fn two_point_moments(shift: f64) -> (f64, f64) {
    let (hi, lo) = (1.0 - shift, -1.0 - shift);
    let (p_hi, p_lo) = ((1.0 + shift) / 2.0, (1.0 - shift) / 2.0);
    let mean = hi * p_hi + lo * p_lo;
    let var = (hi - mean).powi(2) * p_hi + (lo - mean).powi(2) * p_lo;
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparationCheck {
    pub passes: bool,
    /// `sigma_min(R / sqrt(m))^2` for the `m x k` matrix `R` of group sign vectors.
    pub sigma_min_sq: f64,
    /// `m^2 u^2 (k - k0) sigma_min_sq / k`, a lower bound on `||M - A(a, k0)||_F^2`.
    pub certified_dist_sq: f64,
}

/// Certify that the draw is far from rank `k0`: passes when
/// `sigma_min(R / sqrt(m))^2 >= 1/2` and `k - k0 >= k / 2`, in which case
/// `||M - A(a, k0)||_F^2 >= m^2 rho^2` for every `a`.
pub fn separation_check(draw: &PriorDraw, k0: usize) -> Result<SeparationCheck> {
    let k = draw.row_signs.ncols();
    if k0 >= k {
        return Err(UqError::Domain(format!(
            "need k0 < k, got k0 = {k0}, k = {k}"
        )));
    }
    let m = draw.size() as f64;
    let r = DenseMatrix::from(draw.row_signs.scale(1.0 / m.sqrt()));
    let smin = r.singular_values().last().copied().unwrap_or(0.0);
    let sigma_min_sq = smin * smin;
    let certified_dist_sq = m * m * draw.u * draw.u * (k - k0) as f64 * sigma_min_sq / k as f64;
    Ok(SeparationCheck {
        passes: sigma_min_sq >= 0.5 && 2 * (k - k0) >= k,
        sigma_min_sq,
        certified_dist_sq,
    })
}

/// A test of `M = 0` against the prior; larger statistics speak for `H1`.
/// Thresholds are calibrated on simulated `H0` data by the experiment.
pub trait LbTest: Send + Sync {
    fn name(&self) -> &str;
    /// `sigma_sq` is the noise variance the test assumes.
    fn statistic(&self, data: &BernoulliDataset, sigma_sq: f64, rng: &mut UqRng) -> Result<f64>;
}

fn observed_second_moment(data: &BernoulliDataset) -> f64 {
    if data.n_hat == 0 {
        return 0.0;
    }
    data.observed().map(|(_, _, y)| y * y).sum::<f64>() / data.n_hat as f64
}

/// `|mean(Y^2 | B = 1) - sigma^2|`.
pub struct SecondMomentTest;

impl LbTest for SecondMomentTest {
    fn name(&self) -> &str {
        "second-moment"
    }

    fn statistic(&self, data: &BernoulliDataset, sigma_sq: f64, _: &mut UqRng) -> Result<f64> {
        Ok((observed_second_moment(data) - sigma_sq).abs())
    }
}

/// `|var(Y | B = 1) - sigma^2|` with the sample variance of observed entries.
pub struct ObservedVarianceTest;

impl LbTest for ObservedVarianceTest {
    fn name(&self) -> &str {
        "observed-variance"
    }

    fn statistic(&self, data: &BernoulliDataset, sigma_sq: f64, _: &mut UqRng) -> Result<f64> {
        let ys: Vec<f64> = data.observed().map(|(_, _, y)| y).collect();
        if ys.len() < 2 {
            return Ok(0.0);
        }
        Ok((crate::stats::variance(&ys) - sigma_sq).abs())
    }
}

/// The infimum statistic for rank `k0` with the assumed variance.
pub struct InfimumTest {
    pub k0: usize,
    pub a: f64,
    pub search: SearchOptions,
}

impl LbTest for InfimumTest {
    fn name(&self) -> &str {
        "infimum"
    }

    fn statistic(&self, data: &BernoulliDataset, sigma_sq: f64, rng: &mut UqRng) -> Result<f64> {
        Ok(infimum_stat(data, self.k0, self.a, sigma_sq.sqrt(), &self.search, rng)?.statistic)
    }
}

/// Energy in the top `k` singular values of the zero-filled observation,
/// per observed entry.
pub struct RankEnergyTest {
    pub k: usize,
}

impl LbTest for RankEnergyTest {
    fn name(&self) -> &str {
        "rank-energy"
    }

    fn statistic(&self, data: &BernoulliDataset, _: f64, _: &mut UqRng) -> Result<f64> {
        let energy: f64 = data
            .values
            .singular_values()
            .iter()
            .take(self.k)
            .map(|s| s * s)
            .sum();
        Ok(energy / data.n_hat.max(1) as f64)
    }
}

/// Second-moment, observed-variance, infimum (rank `k0`, box `a`) and
/// rank-energy (top `k`) tests.
pub fn builtin_family(k: usize, k0: usize, a: f64, search: SearchOptions) -> Vec<Box<dyn LbTest>> {
    vec![
        Box::new(SecondMomentTest),
        Box::new(ObservedVarianceTest),
        Box::new(InfimumTest { k0, a, search }),
        Box::new(RankEnergyTest { k }),
    ]
}

/// Search budget for the infimum test at lower-bound scale.
pub fn lbdemo_search() -> SearchOptions {
    SearchOptions {
        restarts: 0,
        max_iter: 25,
        tol: 1e-6,
        projection_iter: 5,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbSettings {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub k0: usize,
    pub v: f64,
    pub reps: usize,
    /// Simulated `H0` draws per threshold.
    pub calibration_reps: usize,
    /// Level each test is calibrated to.
    pub test_alpha: f64,
    /// Tell the tests the `H1` noise variance and use it for `H0` as well.
    pub reveal_variance: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LbRow {
    pub test_name: String,
    pub type1: f64,
    pub type2: f64,
    pub error_sum: f64,
    pub v: f64,
    pub rho: f64,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LbReplicate {
    pub index: usize,
    pub h0_stats: Vec<f64>,
    pub h1_stats: Vec<f64>,
    pub separation: SeparationCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LbReport {
    pub rows: Vec<LbRow>,
    pub thresholds: Vec<f64>,
    pub replicates: Vec<LbReplicate>,
    pub rho: f64,
    /// Noise variance of the `H0` data and the variance the tests assume.
    pub sigma_sq: f64,
    pub flags: Vec<String>,
}

impl LbReport {
    /// Smallest error sum over the family, `None` for an empty report.
    pub fn min_error_sum(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.error_sum).min_by(f64::total_cmp)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record([
                "test_name",
                "type1",
                "type2",
                "error_sum",
                "v",
                "rho",
                "m",
                "n",
                "k",
                "reps",
            ])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn h0_data(settings: &LbSettings, sigma: f64, rng: &mut UqRng) -> Result<BernoulliDataset> {
    let (zero, noise) = sample_h0(settings.m, sigma)?;
    sample_bernoulli(&zero, settings.n, &noise, rng)
}

fn all_stats(
    family: &[Box<dyn LbTest>],
    data: &BernoulliDataset,
    sigma_sq: f64,
    rng: &mut UqRng,
) -> Result<Vec<f64>> {
    family
        .iter()
        .map(|t| t.statistic(data, sigma_sq, rng))
        .collect()
}

/// Calibrate every test on simulated `H0` data, then estimate its type I and
/// type II errors over `reps` fresh `H0` and `H1` draws.
pub fn indistinguishability_experiment(
    settings: &LbSettings,
    family: &[Box<dyn LbTest>],
) -> Result<LbReport> {
    if family.is_empty() {
        return Err(UqError::Domain("test family is empty".into()));
    }
    let LbSettings {
        m,
        n,
        k,
        k0,
        v,
        reps,
        seed,
        ..
    } = *settings;
    if !(v > 0.0 && v <= 1.0) {
        return Err(UqError::Domain(format!("v must lie in (0, 1], got {v}")));
    }
    if k0 >= k {
        return Err(UqError::Domain(format!(
            "need k0 < k, got k0 = {k0}, k = {k}"
        )));
    }
    let rho = rho_for(v, k, m, n);
    if !(rho < 0.5) {
        return Err(UqError::Domain(format!("rho = {rho} must be below 1/2")));
    }
    let mut flags = Vec::new();
    if (k as f64) > (m as f64).cbrt() {
        log::warn!("k = {k} exceeds m^(1/3)");
        flags.push("k_above_m_cube_root".into());
    }
    if m % k != 0 {
        flags.push("m_trimmed_to_multiple_of_k".into());
    }
    let sigma_sq = if settings.reveal_variance {
        1.0 - 4.0 * rho * rho
    } else {
        1.0
    };
    let sigma = sigma_sq.sqrt();
    if reps == 0 {
        return Ok(LbReport {
            rows: vec![],
            thresholds: vec![],
            replicates: vec![],
            rho,
            sigma_sq,
            flags,
        });
    }

    let null_stats: Vec<Vec<f64>> = (0..settings.calibration_reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64, Purpose::Calibration);
            let data = h0_data(settings, sigma, &mut rng)?;
            all_stats(family, &data, sigma_sq, &mut rng)
        })
        .collect::<Result<_>>()?;
    let thresholds: Vec<f64> = (0..family.len())
        .map(|t| {
            let column: Vec<f64> = null_stats.iter().map(|s| s[t]).collect();
            quantile(&column, 1.0 - settings.test_alpha)
        })
        .collect();

    let replicates: Vec<LbReplicate> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut null_rng = stream_rng(seed, r as u64, Purpose::Null);
            let h0 = h0_data(settings, sigma, &mut null_rng)?;
            let h0_stats = all_stats(family, &h0, sigma_sq, &mut null_rng)?;
            let mut prior_rng = stream_rng(seed, r as u64, Purpose::Prior);
            let draw = sample_h1(m, k, rho, &mut prior_rng)?;
            let mut alt_rng = stream_rng(seed, r as u64, Purpose::Alternative);
            let h1 = draw.observe(n, &mut alt_rng)?;
            let h1_stats = all_stats(family, &h1, sigma_sq, &mut alt_rng)?;
            Ok(LbReplicate {
                index: r,
                h0_stats,
                h1_stats,
                separation: separation_check(&draw, k0)?,
            })
        })
        .collect::<Result<_>>()?;

    let rows = family
        .iter()
        .enumerate()
        .map(|(t, test)| {
            let type1 = replicates
                .iter()
                .filter(|r| r.h0_stats[t] > thresholds[t])
                .count() as f64
                / reps as f64;
            let type2 = replicates
                .iter()
                .filter(|r| r.h1_stats[t] <= thresholds[t])
                .count() as f64
                / reps as f64;
            LbRow {
                test_name: test.name().to_string(),
                type1,
                type2,
                error_sum: type1 + type2,
                v,
                rho,
                m: k * (m / k),
                n,
                k,
                reps,
            }
        })
        .collect();
    Ok(LbReport {
        rows,
        thresholds,
        replicates,
        rho,
        sigma_sq,
        flags,
    })
}
