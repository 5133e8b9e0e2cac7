//! Multivariate normals with covariance `diag(s) · R · diag(s)`, optionally
//! truncated to the non-negative orthant.

use nalgebra::{DMatrix, DVector};

use super::lkj::{correlation_ln_det, cpc_to_correlation};
use crate::dist::{normal_cdf, normal_quantile, sample_truncated_standard_normal};
use crate::error::{DemandError, Result};
use crate::rng::DemandRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const GHK_POINTS: usize = 4096;
const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

#[derive(Debug, Clone)]
pub struct ScaledNormal {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Lower Cholesky factor of the covariance.
    chol: DMatrix<f64>,
    ln_det: f64,
    truncated: bool,
    ln_mass: f64,
}

impl ScaledNormal {
    pub fn new(mean: &[f64], scale: &[f64], cpc: &[f64], truncated: bool) -> Result<Self> {
        let d = mean.len();
        if scale.len() != d {
            return Err(DemandError::Configuration(format!(
                "prior mean has {d} entries, scale has {}",
                scale.len()
            )));
        }
        if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(DemandError::Domain("prior scales must be positive".into()));
        }
        let r = cpc_to_correlation(d, cpc);
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(scale));
        let cov = &s * r * &s;
        let chol = cov
            .cholesky()
            .ok_or_else(|| DemandError::Domain("prior covariance is not positive definite".into()))?
            .l();
        let ln_det = correlation_ln_det(d, cpc) + 2.0 * scale.iter().map(|v| v.ln()).sum::<f64>();
        let ln_mass = if truncated && d > 0 {
            orthant_ln_probability(mean, &chol)
        } else {
            0.0
        };
        Ok(Self { mean: mean.to_vec(), scale: scale.to_vec(), chol, ln_det, truncated, ln_mass })
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Log of the prior mass of the non-negative orthant (0 when untruncated).
    pub fn ln_mass(&self) -> f64 {
        self.ln_mass
    }

    pub fn ln_pdf(&self, v: &[f64]) -> f64 {
        let d = self.dimension();
        if d == 0 {
            return 0.0;
        }
        if self.truncated && v.iter().any(|x| *x < 0.0) {
            return f64::NEG_INFINITY;
        }
        let diff = DVector::from_iterator(d, v.iter().zip(&self.mean).map(|(a, b)| a - b));
        let w = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        -0.5 * (d as f64 * LN_2PI + self.ln_det + w.norm_squared()) - self.ln_mass
    }

    /// One draw; truncated draws use rejection, then Gibbs when the orthant
    /// is rarely hit.
    pub fn sample(&self, rng: &mut DemandRng) -> Vec<f64> {
        let d = self.dimension();
        let draw = |rng: &mut DemandRng| {
            let e = DVector::from_iterator(d, (0..d).map(|_| rng.standard_normal()));
            let x = &self.chol * e;
            x.iter().zip(&self.mean).map(|(a, m)| a + m).collect::<Vec<_>>()
        };
        if !self.truncated {
            return draw(rng);
        }
        if d == 1 {
            let s = self.chol[(0, 0)];
            let m = self.mean[0];
            return vec![m + s * sample_truncated_standard_normal(-m / s, rng)];
        }
        for _ in 0..2_000 {
            let x = draw(rng);
            if x.iter().all(|v| *v >= 0.0) {
                return x;
            }
        }
        self.gibbs_orthant(rng, 500)
    }

    fn gibbs_orthant(&self, rng: &mut DemandRng, sweeps: usize) -> Vec<f64> {
        let d = self.dimension();
        let cov = &self.chol * self.chol.transpose();
        let precision = cov.try_inverse().expect("covariance is positive definite");
        let mut x: Vec<f64> = self.mean.iter().map(|m| m.max(0.0)).collect();
        for _ in 0..sweeps {
            for i in 0..d {
                let q = precision[(i, i)];
                let shift: f64 = (0..d)
                    .filter(|&k| k != i)
                    .map(|k| precision[(i, k)] * (x[k] - self.mean[k]))
                    .sum();
                let m = self.mean[i] - shift / q;
                let s = 1.0 / q.sqrt();
                x[i] = m + s * sample_truncated_standard_normal(-m / s, rng);
            }
        }
        x
    }
}

fn radical_inverse(mut n: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while n > 0 {
        out += (n % base as u64) as f64 * inv;
        n /= base as u64;
        inv /= b;
    }
    out
}

/// `ln P(X ≥ 0)` for `X ~ N(mean, L Lᵀ)`.
///
/// Exact for one dimension; otherwise the GHK recursion over a fixed Halton
/// point set, so the value is a deterministic function of its inputs.
pub fn orthant_ln_probability(mean: &[f64], chol: &DMatrix<f64>) -> f64 {
    let d = mean.len();
    if d == 0 {
        return 0.0;
    }
    if d == 1 {
        return normal_cdf(mean[0] / chol[(0, 0)]).ln();
    }
    assert!(d <= PRIMES.len(), "orthant probability supports up to {} dimensions", PRIMES.len());
    let mut total = 0.0;
    let mut e = vec![0.0; d];
    for n in 1..=GHK_POINTS {
        let mut weight = 1.0;
        for i in 0..d {
            let partial: f64 = (0..i).map(|k| chol[(i, k)] * e[k]).sum();
            let lower = (-mean[i] - partial) / chol[(i, i)];
            let p_low = normal_cdf(lower);
            let mass = 1.0 - p_low;
            weight *= mass;
            if mass <= 0.0 {
                break;
            }
            let u = radical_inverse(n as u64, PRIMES[i]);
            let target = (p_low + u * mass).clamp(1e-300, 1.0 - 1e-16);
            e[i] = normal_quantile(target).max(lower);
        }
        total += weight;
    }
    (total / GHK_POINTS as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_density() {
        let n = ScaledNormal::new(&[0.0], &[1.0], &[], false).unwrap();
        assert!((n.ln_pdf(&[0.0]) + 0.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn half_normal_density_doubles() {
        let n = ScaledNormal::new(&[0.0], &[2.0], &[], true).unwrap();
        let full = ScaledNormal::new(&[0.0], &[2.0], &[], false).unwrap();
        assert!((n.ln_pdf(&[1.3]) - full.ln_pdf(&[1.3]) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(n.ln_pdf(&[-0.1]), f64::NEG_INFINITY);
    }

    #[test]
    fn bivariate_orthant_matches_closed_form() {
        // P(X>0, Y>0) = 1/4 + asin(ρ)/(2π) for centred unit normals.
        for rho in [-0.6, 0.0, 0.3, 0.9] {
            let n = ScaledNormal::new(&[0.0, 0.0], &[1.0, 1.0], &[rho], true).unwrap();
            let exact = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
            assert!((n.ln_mass().exp() - exact).abs() < 2e-3, "rho {rho}");
        }
    }

    #[test]
    fn truncated_draws_stay_in_orthant() {
        let mut rng = DemandRng::seed_from(4);
        let n = ScaledNormal::new(&[-3.0, -2.0, 0.5], &[1.0, 0.5, 1.0], &[0.4, -0.2, 0.1], true)
            .unwrap();
        for _ in 0..200 {
            assert!(n.sample(&mut rng).iter().all(|v| *v >= 0.0));
        }
    }
}
