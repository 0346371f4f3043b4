//! Ground-truth generation and the two sampling models (trace regression and
//! Bernoulli masking) with bounded homoscedastic noise.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};
use crate::matrix::{DenseMatrix, RankClassSpec};

const MAX_GENERATION_RETRIES: usize = 10;

/// Noise families satisfying mean zero, variance `sigma^2`, `|eps| <= U`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `+-sigma` with probability 1/2 each.
    ScaledRademacher,
    /// Uniform on `[-sqrt(3) sigma, sqrt(3) sigma]`.
    Uniform,
    /// Centered Gaussian conditioned on `[-U, U]`, scale solved so the
    /// truncated law has variance `sigma^2`.
    TruncatedGaussian,
    /// Two-point law `1 - s` w.p. `(1 + s)/2`, `-1 - s` w.p. `(1 - s)/2`
    /// with `s = sqrt(1 - sigma^2)`.
    TwoPointSkewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    /// Almost-sure bound `U`.
    #[serde(rename = "U")]
    pub bound: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, sigma: f64, bound: f64) -> Result<Self> {
        let spec = NoiseSpec { kind, sigma, bound };
        spec.sampler()?;
        Ok(spec)
    }

    pub fn rademacher(sigma: f64, bound: f64) -> Result<Self> {
        Self::new(NoiseKind::ScaledRademacher, sigma, bound)
    }

    pub fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    /// Validate and build a reusable sampler.
    pub fn sampler(&self) -> Result<NoiseSampler> {
        let (sigma, bound) = (self.sigma, self.bound);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(UqError::Domain(format!(
                "noise sigma must be finite and >= 0, got {sigma}"
            )));
        }
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(UqError::Domain(format!(
                "noise bound U must be positive, got {bound}"
            )));
        }
        if sigma > bound {
            return Err(UqError::Domain(format!(
                "sigma = {sigma} exceeds the bound U = {bound}"
            )));
        }
        match self.kind {
            NoiseKind::ScaledRademacher => Ok(NoiseSampler::Rademacher { sigma }),
            NoiseKind::Uniform => {
                let half_width = 3f64.sqrt() * sigma;
                if half_width > bound {
                    return Err(UqError::Domain(format!(
                        "uniform noise with sigma = {sigma} needs U >= {half_width}"
                    )));
                }
                Ok(NoiseSampler::Uniform { half_width })
            }
            NoiseKind::TruncatedGaussian => {
                if sigma == 0.0 {
                    return Ok(NoiseSampler::Rademacher { sigma: 0.0 });
                }
                if 3.0 * sigma * sigma >= bound * bound {
                    return Err(UqError::Domain(format!(
                        "truncated Gaussian on [-{bound}, {bound}] cannot reach sigma = {sigma}"
                    )));
                }
                let scale = truncated_gaussian_scale(sigma, bound);
                Ok(NoiseSampler::TruncatedGaussian { scale, bound })
            }
            NoiseKind::TwoPointSkewed => {
                if sigma > 1.0 {
                    return Err(UqError::Domain(format!(
                        "two-point skewed noise needs sigma <= 1, got {sigma}"
                    )));
                }
                let shift = (1.0 - sigma * sigma).sqrt();
                if 1.0 + shift > bound {
                    return Err(UqError::Domain(format!(
                        "two-point skewed noise with sigma = {sigma} reaches {}, above U = {bound}",
                        1.0 + shift
                    )));
                }
                Ok(NoiseSampler::TwoPoint { shift })
            }
        }
    }
}

/// Validated noise sampler.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSampler {
    Rademacher { sigma: f64 },
    Uniform { half_width: f64 },
    TruncatedGaussian { scale: f64, bound: f64 },
    TwoPoint { shift: f64 },
}

impl NoiseSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseSampler::Rademacher { sigma } => {
                if rng.random::<bool>() {
                    sigma
                } else {
                    -sigma
                }
            }
            NoiseSampler::Uniform { half_width } => {
                if half_width == 0.0 {
                    0.0
                } else {
                    rng.random_range(-half_width..=half_width)
                }
            }
            NoiseSampler::TruncatedGaussian { scale, bound } => loop {
                let z: f64 = StandardNormal.sample(rng);
                let x = scale * z;
                if x.abs() <= bound {
                    break x;
                }
            },
            NoiseSampler::TwoPoint { shift } => two_point_draw(shift, rng),
        }
    }
}

/// One draw of the two-point law with values `1 - shift` w.p. `(1 + shift)/2`
/// and `-1 - shift` w.p. `(1 - shift)/2`. Mean zero, variance `1 - shift^2`.
pub fn two_point_draw<R: Rng + ?Sized>(shift: f64, rng: &mut R) -> f64 {
    let up = rng.random::<f64>() < (1.0 + shift) / 2.0;
    if up {
        1.0 - shift
    } else {
        -1.0 - shift
    }
}

/// Variance of `N(0, scale^2)` conditioned on `[-bound, bound]`.
fn truncated_gaussian_variance(scale: f64, bound: f64) -> f64 {
    let c = bound / scale;
    let mass = statrs::function::erf::erf(c / std::f64::consts::SQRT_2);
    let density = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    scale * scale * (1.0 - 2.0 * c * density / mass)
}

/// Scale whose truncation to `[-bound, bound]` has standard deviation `sigma`.
/// The truncated variance increases with the scale towards `bound^2 / 3`.
fn truncated_gaussian_scale(sigma: f64, bound: f64) -> f64 {
    let target = sigma * sigma;
    let mut lo = sigma;
    let mut hi = sigma * 2.0;
    while truncated_gaussian_variance(hi, bound) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if truncated_gaussian_variance(mid, bound) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `count` i.i.d. draws from `noise`.
pub fn draw_noise<R: Rng + ?Sized>(
    noise: &NoiseSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sampler = noise.sampler()?;
    Ok((0..count).map(|_| sampler.sample(rng)).collect())
}

/// Truth container for one replicate.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub matrix: DenseMatrix,
    pub spec: RankClassSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Singular spectrum of generated truths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spectrum {
    /// `L R^T` with standard normal factors.
    #[default]
    Gaussian,
    /// `Q_L Q_R^T` with orthonormal factors: all `k` singular values equal.
    Flat,
}

/// Rank-`k` matrix `L R^T` with standard normal factors, rescaled so that the
/// largest absolute entry equals `a` exactly.
pub fn make_low_rank<R: Rng + ?Sized>(
    m1: usize,
    m2: usize,
    k: usize,
    a: f64,
    rng: &mut R,
) -> Result<DenseMatrix> {
    make_truth(m1, m2, k, a, Spectrum::Gaussian, rng)
}

/// Rank-`k` truth with the given spectrum shape and `||M||_inf == a`.
pub fn make_truth<R: Rng + ?Sized>(
    m1: usize,
    m2: usize,
    k: usize,
    a: f64,
    spectrum: Spectrum,
    rng: &mut R,
) -> Result<DenseMatrix> {
    if m1 == 0 || m2 == 0 {
        return Err(UqError::Domain("matrix dimensions must be positive".into()));
    }
    if k == 0 || k > m1.min(m2) {
        return Err(UqError::Domain(format!(
            "rank {k} outside 1..={}",
            m1.min(m2)
        )));
    }
    if !(a > 0.0 && a.is_finite()) {
        return Err(UqError::Domain(format!(
            "entry bound must be positive, got {a}"
        )));
    }
    for _ in 0..MAX_GENERATION_RETRIES {
        let l = nalgebra::DMatrix::<f64>::from_fn(m1, k, |_, _| StandardNormal.sample(rng));
        let r = nalgebra::DMatrix::<f64>::from_fn(m2, k, |_, _| StandardNormal.sample(rng));
        let product: DenseMatrix = match spectrum {
            Spectrum::Gaussian => (l * r.transpose()).into(),
            Spectrum::Flat => (l.qr().q() * r.qr().q().transpose()).into(),
        };
        let peak = product.max_abs();
        if !(peak > 0.0 && peak.is_finite()) {
            continue;
        }
        let mut m = product.scaled(a / peak).into_inner();
        // pin the extreme entry so that ||M||_inf == a holds bit-exactly
        let (idx, _) = m.iter().enumerate().fold((0, 0.0_f64), |(bi, bv), (i, v)| {
            if v.abs() > bv {
                (i, v.abs())
            } else {
                (bi, bv)
            }
        });
        m[idx] = a.copysign(m[idx]);
        let m = DenseMatrix::from(m);
        if m.numerical_rank() == k && m.max_abs() == a {
            return Ok(m);
        }
    }
    Err(UqError::Generation(format!(
        "no rank-{k} draw after {MAX_GENERATION_RETRIES} attempts"
    )))
}

/// One trace-regression observation `y = M[row, col] + eps` (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceSample {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Ordered trace-regression sample; positions may repeat.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub m1: usize,
    pub m2: usize,
    pub samples: Vec<TraceSample>,
}

impl TraceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Write `i,j,y` rows (1-based indices) after a `# m1=.. m2=.. n=..` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# m1={} m2={} n={}",
            self.m1,
            self.m2,
            self.samples.len()
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "y"])?;
        for s in &self.samples {
            w.write_record([
                (s.row + 1).to_string(),
                (s.col + 1).to_string(),
                s.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let (header, rows) = read_indexed_csv(input)?;
        let m1 = header_usize(&header, "m1")?;
        let m2 = header_usize(&header, "m2")?;
        let samples = rows
            .into_iter()
            .map(|(row, col, value)| TraceSample { row, col, value })
            .collect::<Vec<_>>();
        check_positions(m1, m2, samples.iter().map(|s| (s.row, s.col)))?;
        Ok(TraceDataset { m1, m2, samples })
    }
}

/// Draw `n` positions uniformly with replacement and add noise to each.
pub fn sample_trace<R: Rng + ?Sized>(
    m: &DenseMatrix,
    n: usize,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<TraceDataset> {
    if n == 0 {
        return Err(UqError::Domain(
            "trace sample size must be at least 1".into(),
        ));
    }
    let sampler = noise.sampler()?;
    let (m1, m2) = m.shape();
    let samples = (0..n)
        .map(|_| {
            let pos = rng.random_range(0..m1 * m2);
            let (row, col) = (pos / m2, pos % m2);
            let value = m[(row, col)] + sampler.sample(rng);
            TraceSample { row, col, value }
        })
        .collect();
    Ok(TraceDataset { m1, m2, samples })
}

/// Bernoulli-masked observation `Y = B o (M + E)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliDataset {
    /// 0/1 entries.
    pub mask: DenseMatrix,
    /// `Y_ij`, zero wherever the mask is zero.
    pub values: DenseMatrix,
    /// Expected number of observations `n`; `p = n / (m1 m2)`.
    pub n: usize,
    pub p: f64,
    /// Realized number of observations.
    pub n_hat: usize,
}

impl BernoulliDataset {
    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    /// Assemble from parts, recomputing `n_hat`.
    pub fn from_parts(mask: DenseMatrix, values: DenseMatrix, n: usize) -> Result<Self> {
        if mask.shape() != values.shape() {
            return Err(UqError::Dimension(format!(
                "{:?} vs {:?}",
                mask.shape(),
                values.shape()
            )));
        }
        let (m1, m2) = mask.shape();
        if n == 0 || n > m1 * m2 {
            return Err(UqError::Domain(format!("n = {n} outside 1..={}", m1 * m2)));
        }
        let n_hat = mask.iter().filter(|&&b| b != 0.0).count();
        Ok(BernoulliDataset {
            mask,
            values,
            n,
            p: n as f64 / (m1 * m2) as f64,
            n_hat,
        })
    }

    /// Observed entries `(row, col, y)` in row-major order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (m1, m2) = self.shape();
        (0..m1)
            .flat_map(move |i| (0..m2).map(move |j| (i, j)))
            .filter(move |&(i, j)| self.mask[(i, j)] != 0.0)
            .map(move |(i, j)| (i, j, self.values[(i, j)]))
    }

    /// Write `i,j,y` rows for observed entries (1-based) after a
    /// `# m1=.. m2=.. p=.. n=..` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let (m1, m2) = self.shape();
        writeln!(out, "# m1={m1} m2={m2} p={} n={}", self.p, self.n)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "y"])?;
        for (i, j, y) in self.observed() {
            w.write_record([(i + 1).to_string(), (j + 1).to_string(), y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let (header, rows) = read_indexed_csv(input)?;
        let m1 = header_usize(&header, "m1")?;
        let m2 = header_usize(&header, "m2")?;
        let n = match header.iter().find(|(k, _)| k == "n") {
            Some(_) => header_usize(&header, "n")?,
            None => {
                let p: f64 = header_value(&header, "p")?
                    .parse()
                    .map_err(|_| UqError::Parse("header field p is not a number".into()))?;
                (p * (m1 * m2) as f64).round() as usize
            }
        };
        check_positions(m1, m2, rows.iter().map(|&(i, j, _)| (i, j)))?;
        let mut mask = DenseMatrix::zeros(m1, m2).into_inner();
        let mut values = DenseMatrix::zeros(m1, m2).into_inner();
        for (i, j, y) in rows {
            if mask[(i, j)] != 0.0 {
                return Err(UqError::Parse(format!(
                    "entry ({}, {}) listed twice",
                    i + 1,
                    j + 1
                )));
            }
            mask[(i, j)] = 1.0;
            values[(i, j)] = y;
        }
        BernoulliDataset::from_parts(mask.into(), values.into(), n)
    }
}

/// Observe each entry independently with probability `p = n / (m1 m2)`.
pub fn sample_bernoulli<R: Rng + ?Sized>(
    m: &DenseMatrix,
    n: usize,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<BernoulliDataset> {
    let sampler = noise.sampler()?;
    sample_bernoulli_with(m, n, rng, |_, _, rng| sampler.sample(rng))
}

/// Bernoulli sampling with an entry-dependent noise law.
pub fn sample_bernoulli_with<R, F>(
    m: &DenseMatrix,
    n: usize,
    rng: &mut R,
    mut noise: F,
) -> Result<BernoulliDataset>
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize, &mut R) -> f64,
{
    let (m1, m2) = m.shape();
    if n == 0 || n > m1 * m2 {
        return Err(UqError::Domain(format!("n = {n} outside 1..={}", m1 * m2)));
    }
    let p = n as f64 / (m1 * m2) as f64;
    let mut mask = nalgebra::DMatrix::<f64>::zeros(m1, m2);
    let mut values = nalgebra::DMatrix::<f64>::zeros(m1, m2);
    for i in 0..m1 {
        for j in 0..m2 {
            let observed = p >= 1.0 || rng.random::<f64>() < p;
            if observed {
                mask[(i, j)] = 1.0;
                values[(i, j)] = m[(i, j)] + noise(i, j, rng);
            }
        }
    }
    BernoulliDataset::from_parts(mask.into(), values.into(), n)
}

type Header = Vec<(String, String)>;

type Entry = (usize, usize, f64);

fn read_indexed_csv<R: BufRead>(mut input: R) -> Result<(Header, Vec<Entry>)> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    let header_line = first
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| UqError::Parse("missing `# m1=.. m2=..` header line".into()))?;
    let header = header_line
        .split_whitespace()
        .filter_map(|tok| {
            tok.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect::<Vec<_>>();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(UqError::Parse(format!(
                "expected 3 columns, got {}",
                rec.len()
            )));
        }
        let parse_idx = |s: &str| -> Result<usize> {
            let v: usize = s
                .trim()
                .parse()
                .map_err(|_| UqError::Parse(format!("bad index `{s}`")))?;
            v.checked_sub(1)
                .ok_or_else(|| UqError::Parse("indices are 1-based".into()))
        };
        let y: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| UqError::Parse(format!("bad value `{}`", &rec[2])))?;
        rows.push((parse_idx(&rec[0])?, parse_idx(&rec[1])?, y));
    }
    Ok((header, rows))
}

fn header_value<'a>(header: &'a Header, key: &str) -> Result<&'a str> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| UqError::Parse(format!("header is missing `{key}`")))
}

fn header_usize(header: &Header, key: &str) -> Result<usize> {
    header_value(header, key)?
        .parse()
        .map_err(|_| UqError::Parse(format!("header field `{key}` is not an integer")))
}

fn check_positions(
    m1: usize,
    m2: usize,
    mut positions: impl Iterator<Item = (usize, usize)>,
) -> Result<()> {
    if m1 == 0 || m2 == 0 {
        return Err(UqError::Parse("matrix dimensions must be positive".into()));
    }
    match positions.find(|&(i, j)| i >= m1 || j >= m2) {
        Some((i, j)) => Err(UqError::Parse(format!(
            "entry ({}, {}) outside {m1}x{m2}",
            i + 1,
            j + 1
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn low_rank_has_requested_rank_and_peak() {
        let mut rng = rng_from_seed(1);
        let m = make_low_rank(7, 5, 1, 0.8, &mut rng).unwrap();
        assert_eq!(m.numerical_rank(), 1);
        assert_eq!(m.max_abs(), 0.8);

        let m = make_low_rank(6, 6, 3, 1.0, &mut rng).unwrap();
        let s = m.singular_values();
        assert_eq!(s.iter().filter(|&&x| x > 1e-10 * s[0]).count(), 3);
    }

    #[test]
    fn flat_spectrum_has_equal_singular_values() {
        let m = make_truth(10, 8, 3, 1.0, Spectrum::Flat, &mut rng_from_seed(6)).unwrap();
        let s = m.singular_values();
        assert_eq!(m.max_abs(), 1.0);
        assert!((s[0] - s[2]).abs() < 1e-12 * s[0]);
        assert!(s[3] < 1e-10 * s[0]);
    }

    #[test]
    fn low_rank_is_deterministic() {
        let a = make_low_rank(8, 9, 2, 1.0, &mut rng_from_seed(42)).unwrap();
        let b = make_low_rank(8, 9, 2, 1.0, &mut rng_from_seed(42)).unwrap();
        assert_eq!(a.to_row_major(), b.to_row_major());
    }

    #[test]
    fn low_rank_rejects_bad_rank() {
        assert!(make_low_rank(3, 3, 4, 1.0, &mut rng_from_seed(0)).is_err());
        assert!(make_low_rank(3, 3, 0, 1.0, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn rademacher_values() {
        let spec = NoiseSpec::rademacher(1.0, 2.0).unwrap();
        let xs = draw_noise(&spec, 1000, &mut rng_from_seed(3)).unwrap();
        assert!(xs.iter().all(|&x| x == 1.0 || x == -1.0));
    }

    #[test]
    fn sigma_above_bound_is_rejected() {
        for kind in [
            NoiseKind::ScaledRademacher,
            NoiseKind::Uniform,
            NoiseKind::TruncatedGaussian,
        ] {
            assert!(matches!(
                NoiseSpec::new(kind, 2.0, 1.0),
                Err(UqError::Domain(_))
            ));
        }
    }

    #[test]
    fn noise_moments_over_a_million_draws() {
        let mut rng = rng_from_seed(9);
        for spec in [
            NoiseSpec::new(NoiseKind::ScaledRademacher, 0.7, 1.0).unwrap(),
            NoiseSpec::new(NoiseKind::Uniform, 0.5, 1.0).unwrap(),
            NoiseSpec::new(NoiseKind::TruncatedGaussian, 0.5, 1.0).unwrap(),
            NoiseSpec::new(NoiseKind::TwoPointSkewed, 0.8, 2.0).unwrap(),
        ] {
            let xs = draw_noise(&spec, 1_000_000, &mut rng).unwrap();
            let (mean, var) = mean_var(&xs);
            assert!(mean.abs() < 4.0 * spec.sigma / 1e3, "{spec:?}: mean {mean}");
            assert!(
                (var / spec.variance() - 1.0).abs() < 0.01,
                "{spec:?}: var {var}"
            );
            assert!(xs.iter().all(|x| x.abs() <= spec.bound));
        }
    }

    #[test]
    fn truncated_gaussian_scale_hits_target_variance() {
        for (sigma, bound) in [(0.1, 1.0), (0.5, 1.0), (0.57, 1.0), (1.0, 4.0)] {
            let s = truncated_gaussian_scale(sigma, bound);
            let v = truncated_gaussian_variance(s, bound);
            assert!((v / (sigma * sigma) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn noiseless_trace_sampling_is_exact() {
        let mut rng = rng_from_seed(5);
        let m = make_low_rank(4, 6, 2, 1.0, &mut rng).unwrap();
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let data = sample_trace(&m, 200, &noise, &mut rng).unwrap();
        assert_eq!(data.len(), 200);
        assert!(data.samples.iter().all(|s| s.value == m[(s.row, s.col)]));
    }

    #[test]
    fn trace_positions_are_uniform() {
        // multinomial oracle: each of 25 cells has frequency 1/25
        let n = 100_000;
        let m = DenseMatrix::zeros(5, 5);
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let data = sample_trace(&m, n, &noise, &mut rng_from_seed(11)).unwrap();
        let mut counts = [0usize; 25];
        for s in &data.samples {
            counts[s.row * 5 + s.col] += 1;
        }
        let p = 1.0 / 25.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * se, "{c}");
        }
    }

    #[test]
    fn trace_sampling_is_deterministic_and_repeats_occur() {
        let m = make_low_rank(3, 3, 1, 1.0, &mut rng_from_seed(0)).unwrap();
        let noise = NoiseSpec::rademacher(0.3, 1.0).unwrap();
        let a = sample_trace(&m, 50, &noise, &mut rng_from_seed(8)).unwrap();
        let b = sample_trace(&m, 50, &noise, &mut rng_from_seed(8)).unwrap();
        assert_eq!(a, b);
        let mut seen = std::collections::HashSet::new();
        assert!(a.samples.iter().any(|s| !seen.insert((s.row, s.col))));
        assert!(a
            .samples
            .iter()
            .all(|s| (s.value - m[(s.row, s.col)]).abs() <= noise.bound));
    }

    #[test]
    fn full_bernoulli_observes_everything() {
        let m = make_low_rank(4, 4, 1, 1.0, &mut rng_from_seed(2)).unwrap();
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let data = sample_bernoulli(&m, 16, &noise, &mut rng_from_seed(2)).unwrap();
        assert_eq!(data.p, 1.0);
        assert_eq!(data.n_hat, 16);
        assert_eq!(data.values, m);
    }

    #[test]
    fn bernoulli_rejects_oversampling() {
        let m = DenseMatrix::zeros(3, 3);
        let noise = NoiseSpec::rademacher(0.1, 1.0).unwrap();
        assert!(matches!(
            sample_bernoulli(&m, 10, &noise, &mut rng_from_seed(0)),
            Err(UqError::Domain(_))
        ));
    }

    #[test]
    fn bernoulli_count_is_unbiased() {
        // binomial oracle: E[n_hat] = n, sd = sqrt(n (1 - p))
        let m = DenseMatrix::zeros(10, 10);
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let n = 30;
        let p = 0.3;
        let reps = 10_000;
        let mut rng = rng_from_seed(17);
        let total: usize = (0..reps)
            .map(|_| sample_bernoulli(&m, n, &noise, &mut rng).unwrap().n_hat)
            .sum();
        let mean = total as f64 / reps as f64;
        let tol = 3.0 * (n as f64 * (1.0 - p)).sqrt() / 100.0;
        assert!((mean - n as f64).abs() < tol, "{mean}");
    }

    #[test]
    fn noiseless_bernoulli_masks_truth() {
        let m = make_low_rank(6, 5, 2, 1.0, &mut rng_from_seed(4)).unwrap();
        let noise = NoiseSpec::rademacher(0.0, 1.0).unwrap();
        let data = sample_bernoulli(&m, 12, &noise, &mut rng_from_seed(4)).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert_eq!(data.values[(i, j)], data.mask[(i, j)] * m[(i, j)]);
            }
        }
        assert_eq!(data.n_hat, data.observed().count());
    }

    #[test]
    fn csv_rejects_out_of_range_index() {
        let text = "# m1=2 m2=2 n=1\ni,j,y\n3,1,0.5\n";
        assert!(TraceDataset::read_csv(text.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn trace_csv_round_trip(seed in 0u64..1000, n in 1usize..60) {
            let mut rng = rng_from_seed(seed);
            let m = make_low_rank(4, 3, 2, 1.5, &mut rng).unwrap();
            let noise = NoiseSpec::new(NoiseKind::Uniform, 0.2, 1.0).unwrap();
            let data = sample_trace(&m, n, &noise, &mut rng).unwrap();
            let mut buf = Vec::new();
            data.write_csv(&mut buf).unwrap();
            prop_assert_eq!(TraceDataset::read_csv(buf.as_slice()).unwrap(), data);
        }

        #[test]
        fn bernoulli_csv_round_trip(seed in 0u64..1000, n in 1usize..20) {
            let mut rng = rng_from_seed(seed);
            let m = make_low_rank(5, 4, 2, 1.0, &mut rng).unwrap();
            let noise = NoiseSpec::new(NoiseKind::TruncatedGaussian, 0.3, 1.0).unwrap();
            let data = sample_bernoulli(&m, n, &noise, &mut rng).unwrap();
            let mut buf = Vec::new();
            data.write_csv(&mut buf).unwrap();
            prop_assert_eq!(BernoulliDataset::read_csv(buf.as_slice()).unwrap(), data);
        }
    }
}
