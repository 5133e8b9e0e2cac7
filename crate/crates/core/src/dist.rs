//! Count distributions shared by the frequentist and Bayesian layers.
//!
//! Negative-Binomial is parameterized by mean `mu` and dispersion `omega`:
//! variance `mu + mu^2 / omega`.

use rand_distr::{Distribution, Gamma, Poisson};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::rng::DemandRng;

pub fn ln_factorial(k: u64) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

pub fn poisson_ln_pmf(y: u64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    y as f64 * mu.ln() - mu - ln_factorial(y)
}

pub fn negbin_ln_pmf(y: u64, mu: f64, omega: f64) -> f64 {
    if mu <= 0.0 {
        return if y == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let yf = y as f64;
    let log_denom = (omega + mu).ln();
    ln_gamma(yf + omega) - ln_gamma(omega) - ln_factorial(y)
        + omega * (omega.ln() - log_denom)
        + yf * (mu.ln() - log_denom)
}

pub fn poisson_cdf(k: u64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return 1.0;
    }
    gamma_ur(k as f64 + 1.0, mu)
}

pub fn negbin_cdf(k: u64, mu: f64, omega: f64) -> f64 {
    if mu <= 0.0 {
        return 1.0;
    }
    beta_reg(omega, k as f64 + 1.0, omega / (omega + mu))
}

/// Smallest `k` with `cdf(k) >= q`.
pub fn discrete_quantile(q: f64, mean: f64, sd: f64, cdf: impl Fn(u64) -> f64) -> u64 {
    if q <= 0.0 || cdf(0) >= q {
        return 0;
    }
    let mut hi = (mean + 12.0 * sd + 10.0).ceil() as u64;
    while cdf(hi) < q {
        hi = hi.saturating_mul(2);
    }
    let mut lo = 0u64;
    // Invariant: cdf(lo) < q <= cdf(hi).
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cdf(mid) >= q {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

pub fn poisson_quantile(q: f64, mu: f64) -> u64 {
    discrete_quantile(q, mu, mu.sqrt(), |k| poisson_cdf(k, mu))
}

pub fn negbin_quantile(q: f64, mu: f64, omega: f64) -> u64 {
    let sd = (mu + mu * mu / omega).sqrt();
    discrete_quantile(q, mu, sd, |k| negbin_cdf(k, mu, omega))
}

pub fn sample_poisson(mu: f64, rng: &mut DemandRng) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    Poisson::new(mu).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Gamma-Poisson mixture draw.
pub fn sample_negbin(mu: f64, omega: f64, rng: &mut DemandRng) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    let rate = Gamma::new(omega, mu / omega)
        .map(|g| g.sample(rng))
        .unwrap_or(mu);
    sample_poisson(rate, rng)
}

/// Gamma with shape `alpha` and rate `beta`.
pub fn sample_gamma(alpha: f64, beta: f64, rng: &mut DemandRng) -> f64 {
    Gamma::new(alpha, 1.0 / beta)
        .expect("gamma parameters validated by caller")
        .sample(rng)
}

pub fn gamma_ln_pdf(x: f64, alpha: f64, beta: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    alpha * beta.ln() - ln_gamma(alpha) + (alpha - 1.0) * x.ln() - beta * x
}

pub fn chi_squared_ln_pdf(x: f64, dof: f64) -> f64 {
    gamma_ln_pdf(x, dof / 2.0, 0.5)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Acklam's rational approximation refined by one Halley step.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal quantile needs p in (0, 1)");
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.024_25;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// Standard normal truncated to `[lower, inf)`, by inversion.
pub fn sample_truncated_standard_normal(lower: f64, rng: &mut DemandRng) -> f64 {
    let p_lower = normal_cdf(lower);
    if p_lower > 1.0 - 1e-12 {
        // Deep tail: exponential rejection (Robert 1995).
        let alpha = (lower + (lower * lower + 4.0).sqrt()) / 2.0;
        loop {
            let z = lower - rng.uniform().max(f64::MIN_POSITIVE).ln() / alpha;
            if rng.uniform() <= (-(z - alpha).powi(2) / 2.0).exp() {
                return z;
            }
        }
    }
    let u = p_lower + rng.uniform() * (1.0 - p_lower);
    normal_quantile(u.clamp(1e-300, 1.0 - 1e-16)).max(lower)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_band_for_mean_four() {
        assert_eq!(poisson_quantile(0.05, 4.0), 1);
        assert_eq!(poisson_quantile(0.95, 4.0), 8);
    }

    #[test]
    fn negbin_cdf_matches_pmf_sum() {
        let (mu, omega) = (7.5, 2.3);
        let mut acc = 0.0;
        for k in 0..40 {
            acc += negbin_ln_pmf(k, mu, omega).exp();
            assert!((negbin_cdf(k, mu, omega) - acc).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        for &p in &[1e-10, 0.001, 0.05, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-9] {
            assert!((normal_cdf(normal_quantile(p)) - p).abs() < 1e-12 * p.max(1e-3) + 1e-15);
        }
    }

    #[test]
    fn truncated_normal_respects_bound() {
        let mut rng = DemandRng::seed_from(5);
        for &lower in &[-3.0, 0.0, 2.5, 9.0] {
            for _ in 0..2000 {
                assert!(sample_truncated_standard_normal(lower, &mut rng) >= lower);
            }
        }
    }

    #[test]
    fn negbin_sample_moments() {
        let mut rng = DemandRng::seed_from(6);
        let (mu, omega) = (20.0, 4.0);
        let n = 40_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_negbin(mu, omega, &mut rng) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected_var = mu + mu * mu / omega;
        assert!((mean - mu).abs() < 4.0 * (expected_var / n as f64).sqrt());
        assert!((var / expected_var - 1.0).abs() < 0.05, "var {var}");
    }
}
