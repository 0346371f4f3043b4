//! Monte Carlo experiment harness behind the `uq` command.
//!
//! An [`ExperimentConfig`] expands into cells (truth rank, sample size, noise
//! level or separation); every cell runs `reps` replicates. Replicate `r`
//! draws its truth and data from streams keyed by `(seed, r)`, so all cells
//! see the same randomness for the same replicate and the output never
//! depends on scheduling. Records are written in `(cell, replicate)` order.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernoulli_uq::{
    adaptive_ci, adaptive_test_level, validity_flags, LowRankTest, SearchOptions, ThresholdMode,
};
use crate::error::{Result, UqError};
use crate::estimate::{
    estimator_risk, lambda_noise_level, lambda_oracle, lasso_lambda, matrix_lasso,
    soft_threshold_estimator,
};
use crate::lbdemo::{
    builtin_family, indistinguishability_experiment, lbdemo_search, rho_for, LbRow, LbSettings,
};
use crate::matrix::{clip_entries, minimax_rate_sq, DenseMatrix, ENTRY_TOL};
use crate::rng::{stream_rng, Purpose};
use crate::stats::{log_log_slope, median, proportion_se, quantile};
use crate::synth::{
    make_truth, sample_bernoulli, sample_trace, BernoulliDataset, NoiseSpec, Spectrum,
};
use crate::trace_uq::{rss_ci, u_ci, CenterSolver, Construction, TraceSetOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Coverage,
    Diameter,
    Risk,
    TestPower,
    Lbdemo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Trace,
    Bernoulli,
}

/// Tuning rule for the soft-thresholding estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    /// Threshold at the estimated operator norm of the noise, see [`lambda_noise_level`].
    #[default]
    NoiseLevel,
    /// Closed-form theory tuning with constant `C_op`, see [`lambda_oracle`].
    Oracle,
}

fn default_k_truth() -> Vec<usize> {
    vec![1]
}
fn default_one() -> usize {
    1
}
fn default_two() -> usize {
    2
}
fn default_unit() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    0.1
}
fn default_alpha_prime() -> f64 {
    0.05
}
fn default_mode() -> ThresholdMode {
    ThresholdMode::Calibrated
}
fn default_restarts() -> usize {
    SearchOptions::default().restarts
}
fn default_calibration_reps() -> usize {
    1000
}
fn default_pilot_reps() -> usize {
    50
}
fn default_v() -> f64 {
    0.05
}
fn default_lb_alpha() -> f64 {
    0.05
}

/// Everything an experiment depends on. See `docs/config.md` for the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: Model,
    #[serde(default)]
    pub construction: Option<Construction>,
    pub m1: usize,
    pub m2: usize,
    pub n: usize,
    #[serde(default = "default_k_truth")]
    pub k_truth: Vec<usize>,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub sigma_grid: Vec<f64>,
    #[serde(default)]
    pub spectrum: Spectrum,
    #[serde(default = "default_one")]
    pub k0: usize,
    #[serde(default = "default_two")]
    pub k: usize,
    #[serde(default = "default_unit")]
    pub a: f64,
    pub noise: NoiseSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_alpha_prime")]
    pub alpha_prime: f64,
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub threshold_mode: ThresholdMode,
    #[serde(default = "default_unit")]
    pub z: f64,
    #[serde(default, rename = "K")]
    pub big_k: Option<f64>,
    #[serde(default = "default_unit", rename = "C_op")]
    pub c_op: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    #[serde(default = "default_unit")]
    pub lambda_scale: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_calibration_reps")]
    pub calibration_reps: usize,
    #[serde(default = "default_pilot_reps")]
    pub pilot_reps: usize,
    #[serde(default)]
    pub separation_grid: Vec<f64>,
    #[serde(default)]
    pub separation: Option<f64>,
    #[serde(default = "default_v")]
    pub v: f64,
    #[serde(default)]
    pub reveal_variance: bool,
    #[serde(default = "default_lb_alpha")]
    pub lb_test_alpha: f64,
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn check(ok: bool, field: &str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(UqError::config(field, reason()))
    }
}

fn in_unit_interval(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| UqError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UqError::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn sigmas(&self) -> Vec<f64> {
        if self.sigma_grid.is_empty() {
            vec![self.noise.sigma]
        } else {
            self.sigma_grid.clone()
        }
    }

    fn ns(&self) -> Vec<usize> {
        if self.n_grid.is_empty() {
            vec![self.n]
        } else {
            self.n_grid.clone()
        }
    }

    fn noise_at(&self, sigma: f64) -> Result<NoiseSpec> {
        NoiseSpec::new(self.noise.kind, sigma, self.noise.bound)
    }

    fn search(&self) -> SearchOptions {
        SearchOptions {
            restarts: self.restarts,
            ..SearchOptions::default()
        }
    }

    /// Field-level checks of everything the chosen experiment will use.
    pub fn validate(&self) -> Result<()> {
        let (m1, m2) = (self.m1, self.m2);
        check(m1 >= 2, "m1", || format!("must be at least 2, got {m1}"))?;
        check(m2 >= 2, "m2", || format!("must be at least 2, got {m2}"))?;
        let min_dim = m1.min(m2);
        let bernoulli = self.model == Model::Bernoulli;
        for (field, n) in
            std::iter::once(("n", self.n)).chain(self.n_grid.iter().map(|&n| ("n_grid", n)))
        {
            check(n >= 2, field, || format!("must be at least 2, got {n}"))?;
            if bernoulli {
                check(n <= m1 * m2, field, || {
                    format!("{n} exceeds m1 m2 = {} in the Bernoulli model", m1 * m2)
                })?;
            }
        }
        check(!self.k_truth.is_empty(), "k_truth", || {
            "must not be empty".into()
        })?;
        for &k in &self.k_truth {
            check(k >= 1 && k <= min_dim, "k_truth", || {
                format!("rank {k} outside 1..={min_dim}")
            })?;
        }
        check(self.k0 < self.k, "k0", || {
            format!("must be below k = {}, got {}", self.k, self.k0)
        })?;
        check(self.k <= min_dim, "k", || {
            format!("must be at most min(m1, m2) = {min_dim}, got {}", self.k)
        })?;
        check(self.a > 0.0 && self.a.is_finite(), "a", || {
            format!("must be positive, got {}", self.a)
        })?;
        check(in_unit_interval(self.alpha), "alpha", || {
            format!("must lie in (0, 1), got {}", self.alpha)
        })?;
        check(in_unit_interval(self.alpha_prime), "alpha_prime", || {
            format!("must lie in (0, 1), got {}", self.alpha_prime)
        })?;
        for sigma in self.sigmas() {
            self.noise_at(sigma)
                .map_err(|e| UqError::config("noise", e.to_string()))?;
        }
        check(self.z > 0.0, "z", || {
            format!("must be positive, got {}", self.z)
        })?;
        if let Some(k) = self.big_k {
            check(k > 0.0, "K", || format!("must be positive, got {k}"))?;
        }
        check(self.c_op > 0.0, "C_op", || {
            format!("must be positive, got {}", self.c_op)
        })?;
        if let Some(l) = self.lambda {
            check(l >= 0.0, "lambda", || {
                format!("must be non-negative, got {l}")
            })?;
        }
        check(self.lambda_scale > 0.0, "lambda_scale", || {
            format!("must be positive, got {}", self.lambda_scale)
        })?;
        if let Some(t) = self.threads {
            check(t >= 1, "threads", || "must be at least 1".into())?;
        }
        if let Some(s) = self.separation {
            check(s >= 0.0, "separation", || {
                format!("must be non-negative, got {s}")
            })?;
        }
        for &s in &self.separation_grid {
            check(s >= 0.0 && s.is_finite(), "separation_grid", || {
                format!("must be non-negative, got {s}")
            })?;
        }

        let uses_test = matches!(self.experiment, ExperimentKind::TestPower)
            || self.construction == Some(Construction::Adaptive);
        if uses_test {
            match self.threshold_mode {
                ThresholdMode::Calibrated => {
                    check(self.calibration_reps >= 100, "calibration_reps", || {
                        format!("must be at least 100, got {}", self.calibration_reps)
                    })?
                }
                ThresholdMode::Theoretical => {
                    for sigma in self.sigmas() {
                        check(sigma > 0.0, "noise", || {
                            "theoretical threshold needs sigma > 0".into()
                        })?;
                    }
                }
            }
        }

        match self.experiment {
            ExperimentKind::Coverage | ExperimentKind::Diameter => {
                let construction = self.construction.ok_or_else(|| {
                    UqError::config("construction", "required for coverage and diameter")
                })?;
                let fits = match construction {
                    Construction::UStatistic | Construction::Rss => !bernoulli,
                    Construction::Adaptive => bernoulli,
                };
                check(fits, "construction", || {
                    format!(
                        "{construction:?} is not available in the {:?} model",
                        self.model
                    )
                })?;
                if construction == Construction::Adaptive && self.big_k.is_none() {
                    check(self.pilot_reps >= 1, "pilot_reps", || {
                        "must be positive when K is not given".into()
                    })?;
                }
            }
            ExperimentKind::Risk => {}
            ExperimentKind::TestPower => {
                check(bernoulli, "model", || {
                    "test_power runs in the Bernoulli model".into()
                })?;
            }
            ExperimentKind::Lbdemo => {
                check(bernoulli, "model", || {
                    "lbdemo runs in the Bernoulli model".into()
                })?;
                check(m1 == m2, "m2", || {
                    format!("lbdemo needs a square grid, got {m1} x {m2}")
                })?;
                check(self.v > 0.0 && self.v <= 1.0, "v", || {
                    format!("must lie in (0, 1], got {}", self.v)
                })?;
                let rho = rho_for(self.v, self.k, m1, self.n);
                check(rho < 0.5, "v", || {
                    format!("gives rho = {rho}, which must be below 1/2")
                })?;
                check(
                    in_unit_interval(self.lb_test_alpha),
                    "lb_test_alpha",
                    || format!("must lie in (0, 1), got {}", self.lb_test_alpha),
                )?;
                check(self.calibration_reps >= 1, "calibration_reps", || {
                    "must be positive".into()
                })?;
            }
        }
        Ok(())
    }
}

/// One point of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub index: usize,
    pub k_truth: usize,
    pub n: usize,
    pub sigma: f64,
    /// Distance of the truth from rank `k0` in units of `sqrt(m1 m2 k0 d / n)`.
    pub separation: Option<f64>,
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    let mut push = |k_truth, n, sigma, separation| {
        out.push(Cell {
            index: out.len(),
            k_truth,
            n,
            sigma,
            separation,
        })
    };
    match cfg.experiment {
        ExperimentKind::Coverage | ExperimentKind::Diameter => {
            for &k in &cfg.k_truth {
                for sigma in cfg.sigmas() {
                    push(k, cfg.n, sigma, cfg.separation.filter(|_| k > cfg.k0));
                }
            }
        }
        ExperimentKind::Risk => {
            for &k in &cfg.k_truth {
                for n in cfg.ns() {
                    for sigma in cfg.sigmas() {
                        push(k, n, sigma, None);
                    }
                }
            }
        }
        ExperimentKind::TestPower => {
            let grid = if cfg.separation_grid.is_empty() {
                vec![0.0]
            } else {
                cfg.separation_grid.clone()
            };
            for s in grid {
                let k = if s > 0.0 { cfg.k } else { cfg.k0 };
                push(k, cfg.n, cfg.noise.sigma, Some(s));
            }
        }
        ExperimentKind::Lbdemo => push(cfg.k, cfg.n, 1.0, None),
    }
    out
}

/// `sqrt(m1 m2 k0 d / n)`, with `k0` raised to 1 so that the unit is positive.
pub fn separation_unit(m1: usize, m2: usize, k0: usize, n: usize) -> f64 {
    minimax_rate_sq(m1, m2, k0.max(1), n).sqrt()
}

/// Truth for `(cell, replicate)`. A positive separation rescales a rank
/// `k_truth > k0` draw so that its Eckart-Young distance to rank `k0` equals
/// `separation * unit`; this distance is a lower bound on the distance to
/// `A(a, k0)` for every `a`.
fn cell_truth(
    cfg: &ExperimentConfig,
    cell: &Cell,
    replicate: usize,
    purpose: Purpose,
) -> Result<(DenseMatrix, Vec<String>)> {
    let mut rng = stream_rng(cfg.seed, replicate as u64, purpose);
    let mut flags = Vec::new();
    if cell.k_truth == 0 {
        return Ok((DenseMatrix::zeros(cfg.m1, cfg.m2), flags));
    }
    let base = make_truth(cfg.m1, cfg.m2, cell.k_truth, cfg.a, cfg.spectrum, &mut rng)?;
    let truth = match cell.separation {
        Some(s) if s > 0.0 && cell.k_truth > cfg.k0 => {
            let tail: f64 = base
                .singular_values()
                .iter()
                .skip(cfg.k0)
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            let target = s * separation_unit(cfg.m1, cfg.m2, cfg.k0, cell.n);
            base.scaled(target / tail)
        }
        _ => base,
    };
    if truth.max_abs() > cfg.a * (1.0 + ENTRY_TOL) {
        flags.push("truth_outside_class".into());
    }
    Ok((truth, flags))
}

/// One line of `records.csv`. Fields that do not apply to the experiment
/// are left empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub cell: usize,
    pub replicate: usize,
    pub k_truth: usize,
    pub n: usize,
    pub sigma: f64,
    pub separation: Option<f64>,
    pub covered: Option<bool>,
    pub radius_sq: Option<f64>,
    pub risk: Option<f64>,
    pub pairs: Option<usize>,
    pub statistic: Option<f64>,
    pub threshold: Option<f64>,
    pub reject: Option<bool>,
    pub test_name: Option<String>,
    pub h0_statistic: Option<f64>,
    pub h0_reject: Option<bool>,
    /// `;`-separated; entries starting with `failure:` count as numerical failures.
    pub flags: String,
}

impl ReplicateRecord {
    fn new(cell: &Cell, replicate: usize) -> Self {
        ReplicateRecord {
            cell: cell.index,
            replicate,
            k_truth: cell.k_truth,
            n: cell.n,
            sigma: cell.sigma,
            separation: cell.separation,
            covered: None,
            radius_sq: None,
            risk: None,
            pairs: None,
            statistic: None,
            threshold: None,
            reject: None,
            test_name: None,
            h0_statistic: None,
            h0_reject: None,
            flags: String::new(),
        }
    }

    fn add_flags(&mut self, flags: impl IntoIterator<Item = String>) {
        for f in flags {
            if !self.flags.is_empty() {
                self.flags.push(';');
            }
            self.flags.push_str(&f);
        }
    }

    pub fn is_failure(&self) -> bool {
        let nonfinite = [self.radius_sq, self.risk, self.statistic]
            .iter()
            .any(|v| v.is_some_and(|x| !x.is_finite()));
        nonfinite || self.flags.split(';').any(|f| f.starts_with("failure:"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    #[serde(flatten)]
    pub cell: Cell,
    pub reps: usize,
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
    pub radius_sq_q10: Option<f64>,
    pub radius_sq_median: Option<f64>,
    pub radius_sq_q90: Option<f64>,
    pub median_risk: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub rejection_se: Option<f64>,
    /// Fraction of replicates where the adaptive set took its small radius.
    pub small_radius_freq: Option<f64>,
    pub small_radius_se: Option<f64>,
    pub threshold: Option<f64>,
    pub flagged: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Fits {
    /// Log-log slope of median risk against `k_truth`.
    pub slope_k: Option<f64>,
    /// Log-log slope of median risk against `1 / n`.
    pub slope_inv_n: Option<f64>,
    /// Median radius at the largest `k_truth` over the median at the smallest.
    pub adaptivity_ratio: Option<f64>,
    /// Largest `median risk / (k d / n)` over cells.
    pub oracle_constant: Option<f64>,
    #[serde(rename = "K")]
    pub big_k: Option<f64>,
    /// Rejection rates do not decrease along the separation grid by more than
    /// three standard errors.
    pub power_monotone: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellSummary>,
    pub fits: Fits,
    pub lbdemo: Option<Vec<LbRow>>,
    pub lbdemo_min_error_sum: Option<f64>,
    pub failures: usize,
    pub flags: Vec<String>,
    pub wall_time_s: f64,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentReport {
    pub fn write_records<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `records.csv` and `report.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_records(fs::File::create(dir.join("records.csv"))?)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn rate_ratio(m1: usize, m2: usize, k: usize, n: usize) -> f64 {
    minimax_rate_sq(m1, m2, k, n) / (m1 * m2) as f64
}

fn soft_threshold_lambda(cfg: &ExperimentConfig, data: &BernoulliDataset, sigma: f64) -> f64 {
    if let Some(l) = cfg.lambda {
        return l;
    }
    match cfg.lambda_rule {
        LambdaRule::NoiseLevel => lambda_noise_level(data, sigma, cfg.lambda_scale),
        LambdaRule::Oracle => {
            cfg.lambda_scale
                * lambda_oracle(sigma, cfg.noise.bound, cfg.m1.min(cfg.m2), data.n, cfg.c_op)
        }
    }
}

fn bernoulli_center(cfg: &ExperimentConfig, data: &BernoulliDataset, sigma: f64) -> DenseMatrix {
    clip_entries(
        &soft_threshold_estimator(data, soft_threshold_lambda(cfg, data, sigma)),
        cfg.a,
    )
}

fn bernoulli_data(
    cfg: &ExperimentConfig,
    cell: &Cell,
    truth: &DenseMatrix,
    replicate: usize,
    purpose: Purpose,
) -> Result<BernoulliDataset> {
    let noise = cfg.noise_at(cell.sigma)?;
    sample_bernoulli(
        truth,
        cell.n,
        &noise,
        &mut stream_rng(cfg.seed, replicate as u64, purpose),
    )
}

fn trace_set_replicate(cfg: &ExperimentConfig, cell: &Cell, r: usize) -> Result<ReplicateRecord> {
    let (truth, flags) = cell_truth(cfg, cell, r, Purpose::Truth)?;
    let noise = cfg.noise_at(cell.sigma)?;
    let data = sample_trace(
        &truth,
        cell.n,
        &noise,
        &mut stream_rng(cfg.seed, r as u64, Purpose::Data),
    )?;
    let options = TraceSetOptions {
        lambda: cfg.lambda,
        lambda_scale: cfg.lambda_scale,
        solver: CenterSolver::default(),
    };
    let ball = match cfg.construction {
        Some(Construction::Rss) => rss_ci(
            &data,
            cfg.alpha,
            cell.sigma,
            cfg.noise.bound,
            cfg.z,
            cfg.a,
            &options,
        )?,
        _ => u_ci(&data, cfg.alpha, cfg.a, cfg.noise.bound, &options)?,
    };
    let mut rec = ReplicateRecord::new(cell, r);
    rec.covered = Some(ball.contains(&truth)?);
    rec.radius_sq = Some(ball.radius_sq);
    rec.risk = Some(estimator_risk(&ball.center, &truth)?);
    rec.pairs = Some(ball.meta.sample_count);
    rec.add_flags(flags);
    rec.add_flags(ball.meta.flags);
    Ok(rec)
}

fn build_test(cfg: &ExperimentConfig, cell: &Cell, level: f64) -> Result<LowRankTest> {
    let noise = cfg.noise_at(cell.sigma)?;
    match cfg.threshold_mode {
        ThresholdMode::Theoretical => LowRankTest::theoretical(
            cfg.k0,
            cfg.a,
            cell.sigma,
            cfg.noise.bound,
            level,
            cfg.search(),
        ),
        ThresholdMode::Calibrated => {
            let mut rng = stream_rng(cfg.seed, cell.index as u64, Purpose::Calibration);
            LowRankTest::calibrated(
                cfg.k0,
                cfg.a,
                &noise,
                level,
                (cfg.m1, cfg.m2),
                cell.n,
                cfg.calibration_reps,
                cfg.search(),
                &mut rng,
            )
        }
    }
}

/// `K = 2 sqrt(C)` with `C` the largest `median risk / (k d / n)` over pilot
/// runs, where `k` is the rank the set would use for that cell's truth.
fn pilot_constant(cfg: &ExperimentConfig, cells: &[Cell]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for cell in cells {
        let risks = (0..cfg.pilot_reps)
            .into_par_iter()
            .map(|r| {
                let (truth, _) = cell_truth(cfg, cell, r, Purpose::Pilot)?;
                let data = bernoulli_data(cfg, cell, &truth, r, Purpose::Pilot)?;
                estimator_risk(&bernoulli_center(cfg, &data, cell.sigma), &truth)
            })
            .collect::<Result<Vec<f64>>>()?;
        let rank = if cell.k_truth > cfg.k0 {
            cfg.k
        } else {
            cfg.k0.max(1)
        };
        worst = worst.max(median(&risks) / rate_ratio(cfg.m1, cfg.m2, rank, cell.n));
    }
    Ok(2.0 * worst.sqrt())
}

fn adaptive_replicate(
    cfg: &ExperimentConfig,
    cell: &Cell,
    test: &LowRankTest,
    big_k: f64,
    r: usize,
) -> Result<ReplicateRecord> {
    let (truth, flags) = cell_truth(cfg, cell, r, Purpose::Truth)?;
    let data = bernoulli_data(cfg, cell, &truth, r, Purpose::Data)?;
    let lambda = soft_threshold_lambda(cfg, &data, cell.sigma);
    let mut rng = stream_rng(cfg.seed, r as u64, Purpose::Search);
    let set = adaptive_ci(&data, test, cfg.k, big_k, cfg.alpha, Some(lambda), &mut rng)?;
    let mut rec = ReplicateRecord::new(cell, r);
    rec.covered = Some(set.ball.contains(&truth)?);
    rec.radius_sq = Some(set.ball.radius_sq);
    rec.risk = Some(estimator_risk(&set.ball.center, &truth)?);
    rec.statistic = Some(set.verdict.statistic);
    rec.threshold = Some(set.verdict.threshold);
    rec.reject = Some(set.verdict.reject);
    rec.add_flags(flags);
    rec.add_flags(set.ball.meta.flags);
    Ok(rec)
}

fn risk_replicate(cfg: &ExperimentConfig, cell: &Cell, r: usize) -> Result<ReplicateRecord> {
    let (truth, flags) = cell_truth(cfg, cell, r, Purpose::Truth)?;
    let mut rec = ReplicateRecord::new(cell, r);
    let estimate = match cfg.model {
        Model::Bernoulli => {
            let data = bernoulli_data(cfg, cell, &truth, r, Purpose::Data)?;
            bernoulli_center(cfg, &data, cell.sigma)
        }
        Model::Trace => {
            let noise = cfg.noise_at(cell.sigma)?;
            let data = sample_trace(
                &truth,
                cell.n,
                &noise,
                &mut stream_rng(cfg.seed, r as u64, Purpose::Data),
            )?;
            let lambda = cfg.lambda.unwrap_or_else(|| {
                lasso_lambda(cell.sigma, cfg.m1, cfg.m2, cell.n, cfg.lambda_scale)
            });
            let solver = CenterSolver::default();
            let fit = matrix_lasso(&data, lambda, cfg.a, solver.max_iter, solver.tol);
            if !fit.estimate.is_finite() {
                rec.add_flags(["failure:nonfinite_estimate".to_string()]);
            }
            fit.estimate
        }
    };
    rec.risk = Some(estimator_risk(&estimate, &truth)?);
    rec.add_flags(flags);
    Ok(rec)
}

fn power_replicate(
    cfg: &ExperimentConfig,
    cell: &Cell,
    test: &LowRankTest,
    r: usize,
) -> Result<ReplicateRecord> {
    let (truth, flags) = cell_truth(cfg, cell, r, Purpose::Truth)?;
    let data = bernoulli_data(cfg, cell, &truth, r, Purpose::Data)?;
    let verdict = test.run(&data, &mut stream_rng(cfg.seed, r as u64, Purpose::Search))?;
    let mut rec = ReplicateRecord::new(cell, r);
    rec.statistic = Some(verdict.statistic);
    rec.threshold = Some(verdict.threshold);
    rec.reject = Some(verdict.reject);
    rec.add_flags(flags);
    if verdict.gap_flag {
        rec.add_flags(["search_gap".to_string()]);
    }
    Ok(rec)
}

fn replicates<F>(cfg: &ExperimentConfig, f: F) -> Result<Vec<ReplicateRecord>>
where
    F: Fn(usize) -> Result<ReplicateRecord> + Sync + Send,
{
    (0..cfg.reps).into_par_iter().map(f).collect()
}

fn opt_median(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| median(xs))
}

fn rate(hits: &[bool]) -> Option<(f64, f64)> {
    if hits.is_empty() {
        return None;
    }
    let p = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    Some((p, proportion_se(p, hits.len())))
}

fn summarize(
    cell: Cell,
    records: &[ReplicateRecord],
    threshold: Option<f64>,
    small_radius: Option<f64>,
) -> CellSummary {
    let covered: Vec<bool> = records.iter().filter_map(|r| r.covered).collect();
    let rejects: Vec<bool> = records.iter().filter_map(|r| r.reject).collect();
    let radii: Vec<f64> = records.iter().filter_map(|r| r.radius_sq).collect();
    let risks: Vec<f64> = records.iter().filter_map(|r| r.risk).collect();
    let small: Option<Vec<bool>> =
        small_radius.map(|s| radii.iter().map(|&r| r <= s * (1.0 + 1e-12)).collect());
    let coverage = rate(&covered);
    let rejection = rate(&rejects);
    let small_rate = small.as_deref().and_then(rate);
    CellSummary {
        cell,
        reps: records.len(),
        coverage: coverage.map(|c| c.0),
        coverage_se: coverage.map(|c| c.1),
        radius_sq_q10: (!radii.is_empty()).then(|| quantile(&radii, 0.1)),
        radius_sq_median: opt_median(&radii),
        radius_sq_q90: (!radii.is_empty()).then(|| quantile(&radii, 0.9)),
        median_risk: opt_median(&risks),
        rejection_rate: rejection.map(|c| c.0),
        rejection_se: rejection.map(|c| c.1),
        small_radius_freq: small_rate.map(|c| c.0),
        small_radius_se: small_rate.map(|c| c.1),
        threshold,
        flagged: records.iter().filter(|r| !r.flags.is_empty()).count(),
        failures: records.iter().filter(|r| r.is_failure()).count(),
    }
}

fn fit_slopes(cfg: &ExperimentConfig, summaries: &[CellSummary], fits: &mut Fits) {
    let sigma0 = cfg.sigmas()[0];
    let n0 = cfg.ns()[0];
    let k_first = cfg.k_truth[0];
    let by_k: Vec<(f64, f64)> = summaries
        .iter()
        .filter(|s| s.cell.n == n0 && s.cell.sigma == sigma0)
        .filter_map(|s| s.median_risk.map(|r| (s.cell.k_truth as f64, r)))
        .collect();
    if by_k.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = by_k.into_iter().unzip();
        fits.slope_k = Some(log_log_slope(&xs, &ys));
    }
    let by_n: Vec<(f64, f64)> = summaries
        .iter()
        .filter(|s| s.cell.k_truth == k_first && s.cell.sigma == sigma0)
        .filter_map(|s| s.median_risk.map(|r| (1.0 / s.cell.n as f64, r)))
        .collect();
    if by_n.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = by_n.into_iter().unzip();
        fits.slope_inv_n = Some(log_log_slope(&xs, &ys));
    }
    fits.oracle_constant = summaries
        .iter()
        .filter_map(|s| {
            s.median_risk
                .map(|r| r / rate_ratio(cfg.m1, cfg.m2, s.cell.k_truth, s.cell.n))
        })
        .max_by(f64::total_cmp);
}

fn adaptivity_ratio(cfg: &ExperimentConfig, summaries: &[CellSummary]) -> Option<f64> {
    let sigma0 = cfg.sigmas()[0];
    let at = |k: usize| {
        summaries
            .iter()
            .find(|s| s.cell.k_truth == k && s.cell.sigma == sigma0)
            .and_then(|s| s.radius_sq_median)
    };
    let lo = *cfg.k_truth.iter().min()?;
    let hi = *cfg.k_truth.iter().max()?;
    if lo == hi {
        return None;
    }
    Some(at(hi)? / at(lo)?)
}

fn run_cells<F>(
    cfg: &ExperimentConfig,
    cells: &[Cell],
    mut per_cell: F,
) -> Result<(Vec<ReplicateRecord>, Vec<CellSummary>)>
where
    F: FnMut(&Cell) -> Result<(Vec<ReplicateRecord>, Option<f64>, Option<f64>)>,
{
    let mut records = Vec::with_capacity(cells.len() * cfg.reps);
    let mut summaries = Vec::with_capacity(cells.len());
    for cell in cells {
        log::info!("cell {} of {}: {:?}", cell.index + 1, cells.len(), cell);
        let (recs, threshold, small) = per_cell(cell)?;
        summaries.push(summarize(*cell, &recs, threshold, small));
        records.extend(recs);
    }
    Ok((records, summaries))
}

struct Outcome {
    records: Vec<ReplicateRecord>,
    cells: Vec<CellSummary>,
    fits: Fits,
    lbdemo: Option<(Vec<LbRow>, Option<f64>)>,
    flags: Vec<String>,
}

fn finish(cfg: &ExperimentConfig, outcome: Outcome, started: Instant) -> ExperimentReport {
    let failures = outcome.records.iter().filter(|r| r.is_failure()).count();
    let (lbdemo, lbdemo_min_error_sum) = match outcome.lbdemo {
        Some((rows, min)) => (Some(rows), min),
        None => (None, None),
    };
    ExperimentReport {
        config: cfg.clone(),
        cells: outcome.cells,
        fits: outcome.fits,
        lbdemo,
        lbdemo_min_error_sum,
        failures,
        flags: outcome.flags,
        wall_time_s: started.elapsed().as_secs_f64(),
        records: outcome.records,
    }
}

/// Coverage and radius of the configured confidence set over the grid of
/// truth ranks and noise levels.
pub fn run_coverage(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let outcome = run_sets(cfg)?;
    Ok(finish(cfg, outcome, started))
}

/// Same replicates as [`run_coverage`]; the report's focus is the radius
/// distribution and the adaptivity ratio.
pub fn run_diameter(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_coverage(cfg)
}

fn run_sets(cfg: &ExperimentConfig) -> Result<Outcome> {
    let grid = cells(cfg);
    let mut fits = Fits::default();
    let mut flags = Vec::new();
    let (records, summaries) = if cfg.construction == Some(Construction::Adaptive) {
        let big_k = match cfg.big_k {
            Some(k) => k,
            None => pilot_constant(cfg, &grid)?,
        };
        fits.big_k = Some(big_k);
        let level = adaptive_test_level(cfg.alpha, cfg.alpha_prime);
        if cfg.threshold_mode == ThresholdMode::Theoretical {
            flags.extend(validity_flags((cfg.m1, cfg.m2), cfg.n, cfg.alpha_prime));
        }
        run_cells(cfg, &grid, |cell| {
            let test = build_test(cfg, cell, level)?;
            let recs = replicates(cfg, |r| adaptive_replicate(cfg, cell, &test, big_k, r))?;
            let small = big_k * big_k * rate_ratio(cfg.m1, cfg.m2, cfg.k0, cell.n);
            Ok((recs, Some(test.threshold), Some(small)))
        })?
    } else {
        run_cells(cfg, &grid, |cell| {
            Ok((
                replicates(cfg, |r| trace_set_replicate(cfg, cell, r))?,
                None,
                None,
            ))
        })?
    };
    fits.adaptivity_ratio = adaptivity_ratio(cfg, &summaries);
    Ok(Outcome {
        records,
        cells: summaries,
        fits,
        lbdemo: None,
        flags,
    })
}

/// Median risk of the estimator over the `(k, n, sigma)` grid with log-log
/// slope fits in `k` and `1 / n`.
pub fn run_risk(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let grid = cells(cfg);
    let (records, summaries) = run_cells(cfg, &grid, |cell| {
        Ok((
            replicates(cfg, |r| risk_replicate(cfg, cell, r))?,
            None,
            None,
        ))
    })?;
    let mut fits = Fits::default();
    fit_slopes(cfg, &summaries, &mut fits);
    let outcome = Outcome {
        records,
        cells: summaries,
        fits,
        lbdemo: None,
        flags: vec![],
    };
    Ok(finish(cfg, outcome, started))
}

/// Rejection rate of the low-rank test along the separation grid; a zero
/// separation cell measures the size.
pub fn run_test_power(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let grid = cells(cfg);
    let mut flags = Vec::new();
    if cfg.threshold_mode == ThresholdMode::Theoretical {
        flags.extend(validity_flags((cfg.m1, cfg.m2), cfg.n, cfg.alpha));
    }
    let (records, summaries) = run_cells(cfg, &grid, |cell| {
        let test = build_test(cfg, cell, cfg.alpha)?;
        let recs = replicates(cfg, |r| power_replicate(cfg, cell, &test, r))?;
        Ok((recs, Some(test.threshold), None))
    })?;
    let mut sorted: Vec<&CellSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| {
        a.cell
            .separation
            .unwrap_or(0.0)
            .total_cmp(&b.cell.separation.unwrap_or(0.0))
    });
    let monotone = sorted.windows(2).all(|w| {
        let (p0, p1) = (
            w[0].rejection_rate.unwrap_or(0.0),
            w[1].rejection_rate.unwrap_or(0.0),
        );
        let se = w[0]
            .rejection_se
            .unwrap_or(0.0)
            .hypot(w[1].rejection_se.unwrap_or(0.0));
        p1 >= p0 - 3.0 * se
    });
    let fits = Fits {
        power_monotone: Some(monotone),
        ..Fits::default()
    };
    let outcome = Outcome {
        records,
        cells: summaries,
        fits,
        lbdemo: None,
        flags,
    };
    Ok(finish(cfg, outcome, started))
}

/// Indistinguishability experiment with the built-in test family.
pub fn run_lbdemo(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let settings = LbSettings {
        m: cfg.m1,
        n: cfg.n,
        k: cfg.k,
        k0: cfg.k0,
        v: cfg.v,
        reps: cfg.reps,
        calibration_reps: cfg.calibration_reps,
        test_alpha: cfg.lb_test_alpha,
        reveal_variance: cfg.reveal_variance,
        seed: cfg.seed,
    };
    let family = builtin_family(cfg.k, cfg.k0, cfg.a, lbdemo_search());
    let report = indistinguishability_experiment(&settings, &family)?;
    let cell = cells(cfg)[0];
    let mut records = Vec::with_capacity(report.replicates.len() * family.len());
    for rep in &report.replicates {
        for (t, test) in family.iter().enumerate() {
            let mut rec = ReplicateRecord::new(&cell, rep.index);
            rec.sigma = report.sigma_sq.sqrt();
            rec.test_name = Some(test.name().to_string());
            rec.statistic = Some(rep.h1_stats[t]);
            rec.h0_statistic = Some(rep.h0_stats[t]);
            rec.threshold = Some(report.thresholds[t]);
            rec.reject = Some(rep.h1_stats[t] > report.thresholds[t]);
            rec.h0_reject = Some(rep.h0_stats[t] > report.thresholds[t]);
            if !rep.separation.passes {
                rec.add_flags(["separation_not_certified".to_string()]);
            }
            records.push(rec);
        }
    }
    let min = report.min_error_sum();
    let outcome = Outcome {
        records,
        cells: vec![],
        fits: Fits::default(),
        lbdemo: Some((report.rows, min)),
        flags: report.flags,
    };
    Ok(finish(cfg, outcome, started))
}

/// Validate and run the configured experiment on `threads` workers
/// (default: all cores).
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| UqError::config("threads", e.to_string()))?;
    pool.install(|| match cfg.experiment {
        ExperimentKind::Coverage => run_coverage(cfg),
        ExperimentKind::Diameter => run_diameter(cfg),
        ExperimentKind::Risk => run_risk(cfg),
        ExperimentKind::TestPower => run_test_power(cfg),
        ExperimentKind::Lbdemo => run_lbdemo(cfg),
    })
}
