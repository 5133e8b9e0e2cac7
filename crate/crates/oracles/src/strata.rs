//! Waiting-time pmf by listing Bernoulli sequences, and a Poisson quantile
//! by summing the pmf term by term.

/// Probability that the `y`-th success lands on trial `n`, summed over every
/// length-`n` success/failure sequence that ends in its `y`-th success.
pub fn strata_pmf_by_sequences(n: u32, y: u32, p: f64) -> f64 {
    assert!(n <= 24, "enumeration limited to 24 trials");
    let mut total = 0.0;
    for mask in 0u32..(1 << n) {
        let last_is_success = mask >> (n - 1) & 1 == 1;
        if !last_is_success || mask.count_ones() != y {
            continue;
        }
        let mut prob = 1.0;
        for k in 0..n {
            prob *= if mask >> k & 1 == 1 { p } else { 1.0 - p };
        }
        total += prob;
    }
    total
}

/// Smallest `k` with `P(X ≤ k) ≥ q` for `X ~ Poisson(mu)`.
pub fn poisson_quantile_by_summation(q: f64, mu: f64) -> u64 {
    let mut term = (-mu).exp();
    let mut cdf = term;
    let mut k = 0u64;
    while cdf < q {
        k += 1;
        term *= mu / k as f64;
        cdf += term;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerations() {
        assert!((strata_pmf_by_sequences(1, 1, 0.3) - 0.3).abs() < 1e-15);
        assert!((strata_pmf_by_sequences(3, 2, 0.5) - 0.25).abs() < 1e-15);
        assert_eq!(strata_pmf_by_sequences(2, 3, 0.5), 0.0);
    }

    #[test]
    fn poisson_four() {
        assert_eq!(poisson_quantile_by_summation(0.05, 4.0), 1);
        assert_eq!(poisson_quantile_by_summation(0.95, 4.0), 8);
    }
}
