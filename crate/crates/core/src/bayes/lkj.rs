//! LKJ correlation matrices through canonical partial correlations (C-vine).
//!
//! A `d × d` correlation matrix is carried as its `d(d-1)/2` partial
//! correlations `z[k][i]` (`k < i`), stored row by row. Under LKJ(η) these
//! are independent with `(z + 1) / 2 ~ Beta(β_k, β_k)`,
//! `β_k = η + (d - 2 - k) / 2` for zero-based `k`.

use nalgebra::DMatrix;
use rand_distr::{Beta, Distribution};
use statrs::function::gamma::ln_gamma;

use crate::error::{DemandError, Result};
use crate::rng::DemandRng;

pub fn cpc_len(dimension: usize) -> usize {
    dimension * dimension.saturating_sub(1) / 2
}

fn beta_parameter(dimension: usize, k: usize, eta: f64) -> f64 {
    eta + (dimension as f64 - 2.0 - k as f64) / 2.0
}

/// Correlation matrix from partial correlations.
pub fn cpc_to_correlation(dimension: usize, cpc: &[f64]) -> DMatrix<f64> {
    assert_eq!(cpc.len(), cpc_len(dimension), "partial correlation count");
    let p = |k: usize, i: usize| cpc[index(dimension, k, i)];
    let mut r = DMatrix::identity(dimension, dimension);
    for k in 0..dimension {
        for i in k + 1..dimension {
            let mut v = p(k, i);
            for l in (0..k).rev() {
                v = v * ((1.0 - p(l, k).powi(2)) * (1.0 - p(l, i).powi(2))).sqrt() + p(l, k) * p(l, i);
            }
            r[(k, i)] = v;
            r[(i, k)] = v;
        }
    }
    r
}

/// Partial correlations of a correlation matrix; inverse of
/// [`cpc_to_correlation`].
pub fn correlation_to_cpc(r: &DMatrix<f64>) -> Vec<f64> {
    let d = r.nrows();
    let mut m = r.clone();
    let mut out = vec![0.0; cpc_len(d)];
    for l in 0..d {
        for i in l + 1..d {
            out[index(d, l, i)] = m[(l, i)];
        }
        let mut next = m.clone();
        for a in l + 1..d {
            for b in l + 1..d {
                if a == b {
                    continue;
                }
                let denom = ((1.0 - m[(l, a)].powi(2)) * (1.0 - m[(l, b)].powi(2))).sqrt();
                next[(a, b)] = (m[(a, b)] - m[(l, a)] * m[(l, b)]) / denom;
            }
        }
        m = next;
    }
    out
}

fn index(d: usize, k: usize, i: usize) -> usize {
    // Rows 0..k hold d-1, d-2, ... entries.
    k * (2 * d - k - 1) / 2 + (i - k - 1)
}

pub fn correlation_ln_det(dimension: usize, cpc: &[f64]) -> f64 {
    debug_assert_eq!(cpc.len(), cpc_len(dimension));
    cpc.iter().map(|z| (1.0 - z * z).ln()).sum()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log of the normalizing constant `c_d(η)` with `p(R) = det(R)^{η-1} / c_d(η)`.
pub fn lkj_ln_normalizer(dimension: usize, eta: f64) -> f64 {
    (0..dimension.saturating_sub(1))
        .map(|k| {
            let b = beta_parameter(dimension, k, eta);
            (dimension - 1 - k) as f64 * ((2.0 * b - 1.0) * std::f64::consts::LN_2 + ln_beta(b, b))
        })
        .sum()
}

/// LKJ log density of the correlation matrix with partial correlations `cpc`.
pub fn lkj_ln_density(dimension: usize, cpc: &[f64], eta: f64) -> f64 {
    if eta <= 0.0 || cpc.iter().any(|z| z.abs() >= 1.0) {
        return f64::NEG_INFINITY;
    }
    (eta - 1.0) * correlation_ln_det(dimension, cpc) - lkj_ln_normalizer(dimension, eta)
}

/// Joint log density of the partial correlations themselves, which are
/// independent scaled Betas under LKJ(η).
pub fn cpc_ln_density(dimension: usize, cpc: &[f64], eta: f64) -> f64 {
    if eta <= 0.0 || cpc.iter().any(|z| z.abs() >= 1.0) {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for k in 0..dimension.saturating_sub(1) {
        let b = beta_parameter(dimension, k, eta);
        let norm = (2.0 * b - 1.0) * std::f64::consts::LN_2 + ln_beta(b, b);
        for i in k + 1..dimension {
            let z = cpc[index(dimension, k, i)];
            total += (b - 1.0) * (1.0 - z * z).ln() - norm;
        }
    }
    total
}

/// Partial correlations of one LKJ(η) draw.
pub fn sample_lkj_cpc(dimension: usize, eta: f64, rng: &mut DemandRng) -> Result<Vec<f64>> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(DemandError::Domain(format!("LKJ concentration {eta} must be positive")));
    }
    let mut out = vec![0.0; cpc_len(dimension)];
    for k in 0..dimension.saturating_sub(1) {
        let b = beta_parameter(dimension, k, eta);
        let beta = Beta::new(b, b).map_err(|e| DemandError::Domain(e.to_string()))?;
        for i in k + 1..dimension {
            // Keep strictly inside (-1, 1) for tiny η.
            let z: f64 = 2.0 * beta.sample(rng) - 1.0;
            out[index(dimension, k, i)] = z.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        }
    }
    Ok(out)
}

/// One LKJ(η) correlation matrix.
pub fn sample_lkj(dimension: usize, eta: f64, rng: &mut DemandRng) -> Result<DMatrix<f64>> {
    if dimension < 2 {
        return Err(DemandError::Domain(format!(
            "LKJ dimension {dimension} must be at least 2"
        )));
    }
    let cpc = sample_lkj_cpc(dimension, eta, rng)?;
    Ok(cpc_to_correlation(dimension, &cpc))
}

/// Symmetric, unit diagonal and positive definite.
pub fn is_correlation_matrix(r: &DMatrix<f64>, tolerance: f64) -> bool {
    let d = r.nrows();
    if r.ncols() != d {
        return false;
    }
    for a in 0..d {
        if (r[(a, a)] - 1.0).abs() > tolerance {
            return false;
        }
        for b in 0..a {
            if (r[(a, b)] - r[(b, a)]).abs() > tolerance {
                return false;
            }
        }
    }
    r.clone().cholesky().is_some()
}
