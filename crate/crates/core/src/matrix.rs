//! Dense matrix primitives, the rank/box parameter class, and minimax rate
//! formulas shared by every confidence-set construction.
//!
//! Singular value decompositions are always returned with singular values in
//! non-increasing order. Each left singular vector is sign-normalized so that
//! its largest-magnitude entry is non-negative, which makes reconstructions and
//! truncations bit-reproducible across runs.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};

/// Singular values at or below `RANK_REL_TOL * sigma_1` count as zero.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Slack allowed on the entrywise bound when testing class membership.
pub const ENTRY_TOL: f64 = 1e-10;

/// Iteration cap for alternating rank/box projection.
pub const PROJECTION_MAX_ITER: usize = 500;

/// Movement threshold (relative to `max(1, ||A||_F)`) that ends alternating
/// projection.
pub const PROJECTION_TOL: f64 = 1e-10;

/// Real `m1 x m2` matrix. Thin wrapper over `nalgebra::DMatrix<f64>` that
/// guarantees a non-empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix shape must be at least 1x1");
        DenseMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix shape must be at least 1x1");
        DenseMatrix(DMatrix::from_fn(rows, cols, f))
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(UqError::Dimension(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(DenseMatrix(DMatrix::from_row_slice(rows, cols, data)))
    }

    pub fn from_diagonal(rows: usize, cols: usize, diag: &[f64]) -> Self {
        Self::from_fn(rows, cols, |i, j| {
            if i == j && i < diag.len() {
                diag[i]
            } else {
                0.0
            }
        })
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// `(m1, m2)`.
    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    /// Largest absolute entry, `||A||_inf` in entrywise sense.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> DenseMatrix {
        DenseMatrix(&self.0 * factor)
    }

    pub fn map(&self, f: impl FnMut(f64) -> f64) -> DenseMatrix {
        DenseMatrix(self.0.map(f))
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        let (r, c) = self.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn svd(&self) -> Svd {
        Svd::compute(self)
    }

    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.0.clone().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Number of singular values above `RANK_REL_TOL * sigma_1`.
    pub fn numerical_rank(&self) -> usize {
        rank_from_singular_values(&self.singular_values())
    }
}

impl Deref for DenseMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

impl From<DMatrix<f64>> for DenseMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        assert!(
            m.nrows() >= 1 && m.ncols() >= 1,
            "matrix shape must be at least 1x1"
        );
        DenseMatrix(m)
    }
}

pub(crate) fn rank_from_singular_values(sorted_desc: &[f64]) -> usize {
    match sorted_desc.first() {
        Some(&s1) if s1 > 0.0 => sorted_desc
            .iter()
            .filter(|&&s| s > RANK_REL_TOL * s1)
            .count(),
        _ => 0,
    }
}

/// Thin SVD `A = U diag(s) V^T` with sorted, sign-normalized factors.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    fn compute(a: &DenseMatrix) -> Svd {
        let raw = a.0.clone().svd(true, true);
        let u = raw.u.expect("left singular vectors requested");
        let v_t = raw.v_t.expect("right singular vectors requested");
        let s = raw.singular_values;

        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));

        let r = order.len();
        let mut su = DMatrix::zeros(u.nrows(), r);
        let mut sv = DMatrix::zeros(r, v_t.ncols());
        let mut ss = DVector::zeros(r);
        for (dst, &src) in order.iter().enumerate() {
            let col = u.column(src);
            let mut pivot = 0.0_f64;
            for &x in col.iter() {
                if x.abs() > pivot.abs() {
                    pivot = x;
                }
            }
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            su.set_column(dst, &(col * sign));
            sv.set_row(dst, &(v_t.row(src) * sign));
            ss[dst] = s[src];
        }
        Svd {
            u: su,
            singular_values: ss,
            v_t: sv,
        }
    }

    pub fn rank(&self) -> usize {
        rank_from_singular_values(self.singular_values.as_slice())
    }

    /// Rebuild `sum_i f(s_i) u_i v_i^T` over the first `keep` components.
    pub fn reconstruct_with(&self, keep: usize, mut f: impl FnMut(f64) -> f64) -> DenseMatrix {
        let keep = keep.min(self.singular_values.len());
        let mut out = DMatrix::zeros(self.u.nrows(), self.v_t.ncols());
        for i in 0..keep {
            let s = f(self.singular_values[i]);
            if s != 0.0 {
                out += self.u.column(i) * self.v_t.row(i) * s;
            }
        }
        DenseMatrix(out)
    }
}

fn check_same_shape(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(UqError::Dimension(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `sum_ij (A_ij - B_ij)^2`.
pub fn frobenius_sq_dist(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.0
        .iter()
        .zip(b.0.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Best rank-`k` approximation in Frobenius norm (top-`k` SVD reconstruction).
pub fn truncate_rank(a: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let (m1, m2) = a.shape();
    if k > m1.min(m2) {
        return Err(UqError::Domain(format!("rank {k} exceeds min({m1}, {m2})")));
    }
    if k == 0 {
        return Ok(DenseMatrix::zeros(m1, m2));
    }
    Ok(a.svd().reconstruct_with(k, |s| s))
}

/// Entrywise projection onto `[-bound, bound]`.
pub fn clip_entries(a: &DenseMatrix, bound: f64) -> DenseMatrix {
    a.map(|x| x.clamp(-bound, bound))
}

/// Soft-threshold the singular values of `a` at level `t`, keeping singular
/// vectors.
pub fn singular_value_soft_threshold(a: &DenseMatrix, t: f64) -> DenseMatrix {
    let svd = a.svd();
    let keep = svd.singular_values.iter().filter(|&&s| s > t).count();
    svd.reconstruct_with(keep, |s| (s - t).max(0.0))
}

/// Squared (unnormalized) minimax Frobenius rate `m1 m2 k (m1 + m2) / n`.
pub fn minimax_rate_sq(m1: usize, m2: usize, k: usize, n: usize) -> f64 {
    let (m1, m2) = (m1 as f64, m2 as f64);
    m1 * m2 * k as f64 * (m1 + m2) / n as f64
}

/// Parameter class `A(a, k)`: entries bounded by `a`, rank at most `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankClassSpec {
    pub a: f64,
    pub k: usize,
}

impl RankClassSpec {
    pub fn new(a: f64, k: usize) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(UqError::Domain(format!(
                "entry bound must be positive, got {a}"
            )));
        }
        Ok(RankClassSpec { a, k })
    }

    pub fn contains(&self, m: &DenseMatrix) -> bool {
        m.max_abs() <= self.a + ENTRY_TOL * self.a.max(1.0) && m.numerical_rank() <= self.k
    }
}

/// Outcome of the alternating rank/box projection.
#[derive(Debug, Clone)]
pub struct ClassProjection {
    /// A certified member of the class.
    pub point: DenseMatrix,
    /// `||A - point||_F`, an upper bound on the distance to the class.
    pub dist: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternate rank truncation and entry clipping starting from `a`.
///
/// The returned point always lies in the class: each truncated iterate is
/// shrunk towards zero until it satisfies the entry bound, and the closest
/// such candidate seen is kept. When clipping is inactive the first candidate
/// is the Eckart–Young truncation, so the distance is exact.
pub fn project_rank_class(
    a: &DenseMatrix,
    spec: &RankClassSpec,
    max_iter: usize,
    tol: f64,
) -> Result<ClassProjection> {
    let (m1, m2) = a.shape();
    if spec.k > m1.min(m2) {
        return Err(UqError::Domain(format!(
            "rank {} exceeds min({m1}, {m2})",
            spec.k
        )));
    }
    if spec.contains(a) {
        return Ok(ClassProjection {
            point: a.clone(),
            dist: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let scale = a.frobenius_sq().sqrt().max(1.0);
    let mut y = a.clone();
    let mut best: Option<(f64, DenseMatrix)> = None;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter.max(1) {
        iterations = it + 1;
        let x = truncate_rank(&y, spec.k)?;
        let peak = x.max_abs();
        let candidate = if peak > spec.a {
            x.scaled(spec.a / peak)
        } else {
            x.clone()
        };
        let d = frobenius_sq_dist(a, &candidate)?.sqrt();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, candidate));
        }
        let next = clip_entries(&x, spec.a);
        let movement = frobenius_sq_dist(&next, &y)?.sqrt();
        y = next;
        if movement < tol * scale {
            converged = true;
            break;
        }
    }
    let (dist, point) = best.expect("at least one projection iteration");
    Ok(ClassProjection {
        point,
        dist,
        iterations,
        converged,
    })
}

/// Distance from `a` to the class `A(spec.a, spec.k)` with the default
/// projection budget. `converged == false` marks a best-effort bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDistance {
    pub dist: f64,
    pub converged: bool,
}

pub fn dist_to_rank_class(a: &DenseMatrix, spec: &RankClassSpec) -> Result<ClassDistance> {
    let proj = project_rank_class(a, spec, PROJECTION_MAX_ITER, PROJECTION_TOL)?;
    if !proj.converged {
        log::warn!(
            "rank-class projection stopped after {} iterations without converging",
            proj.iterations
        );
    }
    Ok(ClassDistance {
        dist: proj.dist,
        converged: proj.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        // xorshift is enough for fixture data
        let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        DenseMatrix::from_fn(rows, cols, |_, _| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn frobenius_identity_and_arithmetic() {
        let a = rand_matrix(3, 4, 1);
        assert_eq!(frobenius_sq_dist(&a, &a).unwrap(), 0.0);
        let ones = DenseMatrix::from_fn(2, 2, |_, _| 1.0);
        assert_eq!(
            frobenius_sq_dist(&ones, &DenseMatrix::zeros(2, 2)).unwrap(),
            4.0
        );
    }

    #[test]
    fn frobenius_matches_singular_values() {
        let a = rand_matrix(5, 5, 7);
        let b = rand_matrix(5, 5, 8);
        let diff: DenseMatrix = (&*a - &*b).into();
        let via_svd: f64 = diff.singular_values().iter().map(|s| s * s).sum();
        assert_abs_diff_eq!(frobenius_sq_dist(&a, &b).unwrap(), via_svd, epsilon = 1e-12);
    }

    #[test]
    fn frobenius_shape_mismatch() {
        let err = frobenius_sq_dist(&DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(3, 2));
        assert!(matches!(err, Err(UqError::Dimension(_))));
    }

    #[test]
    fn svd_is_sorted_and_sign_normalized() {
        let a = rand_matrix(6, 4, 3);
        let svd = a.svd();
        let s = svd.singular_values.as_slice();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..svd.u.ncols() {
            let col = svd.u.column(i);
            let pivot = col
                .iter()
                .copied()
                .fold(0.0_f64, |p, x| if x.abs() > p.abs() { x } else { p });
            assert!(pivot >= 0.0);
        }
        let back = svd.reconstruct_with(4, |s| s);
        assert!(frobenius_sq_dist(&a, &back).unwrap() < 1e-24);
    }

    #[test]
    fn truncate_full_rank_is_identity() {
        let a = rand_matrix(4, 6, 11);
        let t = truncate_rank(&a, 4).unwrap();
        assert!(frobenius_sq_dist(&a, &t).unwrap() < 1e-24);
    }

    #[test]
    fn truncate_rank_one_and_diagonal() {
        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 1.0];
        let a = DenseMatrix::from_fn(3, 2, |i, j| u[i] * v[j]);
        let t = truncate_rank(&a, 1).unwrap();
        assert!(frobenius_sq_dist(&a, &t).unwrap() < 1e-24);

        let d = DenseMatrix::from_diagonal(2, 2, &[3.0, 1.0]);
        let t = truncate_rank(&d, 1).unwrap();
        let expect = DenseMatrix::from_diagonal(2, 2, &[3.0, 0.0]);
        assert!(frobenius_sq_dist(&t, &expect).unwrap() < 1e-24);

        assert_eq!(truncate_rank(&d, 0).unwrap(), DenseMatrix::zeros(2, 2));
        assert!(matches!(truncate_rank(&d, 3), Err(UqError::Domain(_))));
    }

    #[test]
    fn clip_examples() {
        let a = 0.7;
        let inside = DenseMatrix::from_row_slice(1, 3, &[-0.7, 0.1, 0.7]).unwrap();
        assert_eq!(clip_entries(&inside, a), inside);
        let big = DenseMatrix::from_row_slice(1, 2, &[2.0 * a, -3.0 * a]).unwrap();
        let c = clip_entries(&big, a);
        assert_eq!(c[(0, 0)], a);
        assert_eq!(c[(0, 1)], -a);
    }

    #[test]
    fn minimax_rate_examples() {
        assert_eq!(minimax_rate_sq(10, 10, 2, 100), 40.0);
        assert_eq!(minimax_rate_sq(7, 3, 0, 9), 0.0);
        assert_eq!(
            minimax_rate_sq(8, 5, 6, 30),
            2.0 * minimax_rate_sq(8, 5, 3, 30)
        );
    }

    #[test]
    fn distance_examples() {
        let spec = RankClassSpec::new(3.0, 1).unwrap();
        let d = DenseMatrix::from_diagonal(2, 2, &[3.0, 1.0]);
        assert_abs_diff_eq!(
            dist_to_rank_class(&d, &spec).unwrap().dist,
            1.0,
            epsilon = 1e-12
        );

        let member =
            DenseMatrix::from_fn(3, 3, |i, j| 0.5 * (i as f64 - 1.0) * (j as f64 + 1.0) / 3.0);
        let spec = RankClassSpec::new(1.0, 1).unwrap();
        assert_eq!(dist_to_rank_class(&member, &spec).unwrap().dist, 0.0);
    }

    #[test]
    fn distance_matches_eckart_young_when_clipping_inactive() {
        // rank-3 6x6 matrix with entries in [-1, 1]
        let l = rand_matrix(6, 3, 21);
        let r = rand_matrix(6, 3, 22);
        let m: DenseMatrix = (&*l * r.transpose()).into();
        let m = m.scaled(0.9 / m.max_abs());
        let s = m.singular_values();
        let oracle = (s[1] * s[1] + s[2] * s[2]).sqrt();
        let spec = RankClassSpec::new(1.0, 1).unwrap();
        let got = dist_to_rank_class(&m, &spec).unwrap();
        assert!(got.converged);
        assert_abs_diff_eq!(got.dist, oracle, epsilon = 1e-9);
    }

    #[test]
    fn projection_point_is_certified_member_when_clipping_binds() {
        let m = rand_matrix(5, 5, 5).scaled(4.0);
        let spec = RankClassSpec::new(1.0, 2).unwrap();
        let proj = project_rank_class(&m, &spec, PROJECTION_MAX_ITER, PROJECTION_TOL).unwrap();
        assert!(spec.contains(&proj.point));
        let s = m.singular_values();
        let eckart_young: f64 = s[2..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(proj.dist >= eckart_young - 1e-9);
    }

    proptest! {
        #[test]
        fn eckart_young_tail(seed in 0u64..10_000, rows in 1usize..7, cols in 1usize..7, k in 0usize..7) {
            let a = rand_matrix(rows, cols, seed);
            let k = k.min(rows.min(cols));
            let t = truncate_rank(&a, k).unwrap();
            let s = a.singular_values();
            let tail: f64 = s[k..].iter().map(|x| x * x).sum();
            prop_assert!((frobenius_sq_dist(&a, &t).unwrap() - tail).abs() < 1e-10);
            prop_assert!(t.numerical_rank() <= k);
        }

        #[test]
        fn clip_idempotent_and_lipschitz(seed in 0u64..10_000, bound in 0.05f64..2.0) {
            let a = rand_matrix(4, 3, seed).scaled(3.0);
            let b = rand_matrix(4, 3, seed + 1).scaled(3.0);
            let ca = clip_entries(&a, bound);
            prop_assert_eq!(clip_entries(&ca, bound), ca.clone());
            let cb = clip_entries(&b, bound);
            for i in 0..a.len() {
                prop_assert!((ca[i] - cb[i]).abs() <= (a[i] - b[i]).abs() + 1e-15);
            }
        }

        #[test]
        fn rate_monotone(m1 in 1usize..50, m2 in 1usize..50, k in 0usize..10, n in 1usize..1000) {
            let base = minimax_rate_sq(m1, m2, k, n);
            prop_assert!(minimax_rate_sq(m1, m2, k + 1, n) >= base);
            prop_assert!(minimax_rate_sq(m1 + 1, m2, k, n) >= base);
            prop_assert!(minimax_rate_sq(m1, m2 + 1, k, n) >= base);
            prop_assert!(minimax_rate_sq(m1, m2, k, n + 1) <= base);
        }

        #[test]
        fn zero_distance_iff_member(seed in 0u64..5_000, k in 0usize..4, a in 0.2f64..1.5) {
            let l = rand_matrix(5, 2, seed);
            let r = rand_matrix(4, 2, seed + 3);
            let m: DenseMatrix = (&*l * r.transpose()).into();
            let spec = RankClassSpec::new(a, k).unwrap();
            let d = dist_to_rank_class(&m, &spec).unwrap().dist;
            prop_assert_eq!(d == 0.0, spec.contains(&m));
        }
    }
}
