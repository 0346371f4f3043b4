//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use uq_core::trace_uq::RssRadiusParams;
use uq_core::{BernoulliDataset, DenseMatrix};

/// Exhaustive minimum of the masked residual sum over rank-one `u v^T` with
/// `u` on a grid of step `step` in `[-1, 1]^m1` and `v` profiled out exactly.
pub fn grid_min_rss(data: &BernoulliDataset, step: f64) -> f64 {
    let (m1, m2) = data.shape();
    let levels: Vec<f64> = (0..=(2.0 / step).round() as usize)
        .map(|i| -1.0 + i as f64 * step)
        .collect();
    let mut idx = vec![0usize; m1];
    let mut best = f64::INFINITY;
    loop {
        let u: Vec<f64> = idx.iter().map(|&i| levels[i]).collect();
        let mut rss = 0.0;
        for j in 0..m2 {
            let (mut num, mut den, mut yy) = (0.0, 0.0, 0.0);
            for (i, &ui) in u.iter().enumerate() {
                if data.mask[(i, j)] != 0.0 {
                    let y = data.values[(i, j)];
                    num += ui * y;
                    den += ui * ui;
                    yy += y * y;
                }
            }
            rss += if den > 0.0 { yy - num * num / den } else { yy };
        }
        best = best.min(rss);
        let mut pos = 0;
        loop {
            if pos == m1 {
                return best;
            }
            idx[pos] += 1;
            if idx[pos] < levels.len() {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Slack of the RSS-set inequality at squared radius `x`:
/// `2 (R + z d/n + (z_bar(x) + xi) / sqrt(n)) - x`.
pub fn rss_slack(x: f64, r_hat: f64, p: &RssRadiusParams) -> f64 {
    let n = p.n as f64;
    let z_alpha = (3.0 / p.alpha).ln();
    let xi = 2f64.sqrt() * p.sigma * p.bound * z_alpha;
    let floor = 4.0 * p.z * p.d as f64 / n;
    let z_bar = (z_alpha * p.sigma * p.sigma * (3.0 * x).max(floor)).sqrt();
    2.0 * (r_hat + p.z * p.d as f64 / n + (z_bar + xi) / n.sqrt()) - x
}

/// Largest feasible squared radius by scanning for the last feasible grid
/// point and bisecting the boundary after it.
pub fn rss_radius_bisection(r_hat: f64, p: &RssRadiusParams) -> f64 {
    let n = p.n as f64;
    let z_alpha = (3.0 / p.alpha).ln().max(0.0);
    // slack < 0 beyond this point: x > 2|R| + ... dominates the sqrt term
    let lin = 2.0
        * (r_hat.abs()
            + p.z * p.d as f64 / n
            + 2f64.sqrt() * p.sigma * p.bound * z_alpha / n.sqrt());
    let quad = 2.0 * (3.0 * z_alpha).sqrt() * p.sigma / n.sqrt();
    let hi = 4.0 * (lin + quad * quad + 4.0 * p.z * p.d as f64 / n) + 1.0;
    let steps = 200_000;
    let mut last = None;
    for i in 0..=steps {
        let x = hi * i as f64 / steps as f64;
        if rss_slack(x, r_hat, p) >= 0.0 {
            last = Some(i);
        }
    }
    let Some(i) = last else { return 0.0 };
    let (mut lo, mut up) = (
        hi * i as f64 / steps as f64,
        hi * (i + 1) as f64 / steps as f64,
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + up);
        if rss_slack(mid, r_hat, p) >= 0.0 {
            lo = mid;
        } else {
            up = mid;
        }
    }
    lo
}

/// Proximal gradient on `||A||_F^2 / (m1 m2) - (2/n) <Y, A> + lambda ||A||_*`
/// with its own SVD-based shrinkage, run to a fixed point.
pub fn prox_gradient_soft_threshold(
    y: &DenseMatrix,
    n: usize,
    lambda: f64,
    iters: usize,
) -> DenseMatrix {
    let (m1, m2) = y.shape();
    let mm = (m1 * m2) as f64;
    let step = mm / 4.0;
    let mut a = nalgebra::DMatrix::<f64>::zeros(m1, m2);
    for _ in 0..iters {
        let grad = a.scale(2.0 / mm) - (**y).scale(2.0 / n as f64);
        let x = &a - grad.scale(step);
        let svd = x.svd(true, true);
        let u = svd.u.unwrap();
        let v_t = svd.v_t.unwrap();
        let shrunk = svd.singular_values.map(|s| (s - step * lambda).max(0.0));
        a = &u * nalgebra::DMatrix::from_diagonal(&shrunk) * &v_t;
    }
    a.into()
}
