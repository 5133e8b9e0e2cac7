//! Exhaustive four-knot envelope search with an explicit design matrix.

use crate::linalg::solve;

/// Level of the envelope through `(0,0)`, `(a, n0)`, `(s, n1)`, `(d, n2)`,
/// `(r, 0)` at week `t`; zero outside `[0, r]`.
pub fn envelope_level(knots: [usize; 4], nodes: [f64; 3], t: f64) -> f64 {
    let xs = [0.0, knots[0] as f64, knots[1] as f64, knots[2] as f64, knots[3] as f64];
    let ys = [0.0, nodes[0], nodes[1], nodes[2], 0.0];
    if t < 0.0 || t > xs[4] {
        return 0.0;
    }
    for k in 0..4 {
        if t <= xs[k + 1] {
            let w = (t - xs[k]) / (xs[k + 1] - xs[k]);
            return ys[k] + w * (ys[k + 1] - ys[k]);
        }
    }
    0.0
}

/// Column `k` of the design matrix at week `t`: the envelope with node `k`
/// set to one and the others to zero.
fn design_row(knots: [usize; 4], t: usize) -> [f64; 3] {
    let unit = |k: usize| {
        let mut n = [0.0; 3];
        n[k] = 1.0;
        envelope_level(knots, n, t as f64)
    };
    [unit(0), unit(1), unit(2)]
}

/// Residual sum of squares and least-squares nodes for fixed knots.
pub fn least_squares(y: &[f64], knots: [usize; 4]) -> Option<(f64, [f64; 3])> {
    let rows: Vec<[f64; 3]> = (0..y.len()).map(|t| design_row(knots, t)).collect();
    let mut xtx = vec![vec![0.0; 3]; 3];
    let mut xty = vec![0.0; 3];
    for (row, &v) in rows.iter().zip(y) {
        for i in 0..3 {
            xty[i] += row[i] * v;
            for j in 0..3 {
                xtx[i][j] += row[i] * row[j];
            }
        }
    }
    let beta = solve(xtx, xty)?;
    let rss = rows
        .iter()
        .zip(y)
        .map(|(row, &v)| {
            let fit: f64 = row.iter().zip(&beta).map(|(p, q)| p * q).sum();
            (v - fit).powi(2)
        })
        .sum();
    Some((rss, [beta[0], beta[1], beta[2]]))
}

/// Every ordered `0 < a < s < d < r ≤ T-1`, scored by RSS. Within
/// `tie_tolerance · (1 + Σy²)` of the minimum the lexicographically first
/// tuple wins.
pub fn best_knots(y: &[f64], tie_tolerance: f64) -> Option<([usize; 4], f64)> {
    let last = y.len().checked_sub(1)?;
    let mut scored = Vec::new();
    for a in 1..=last {
        for s in a + 1..=last {
            for d in s + 1..=last {
                for r in d + 1..=last {
                    if let Some((rss, _)) = least_squares(y, [a, s, d, r]) {
                        scored.push(([a, s, d, r], rss));
                    }
                }
            }
        }
    }
    let min = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let threshold = min + tie_tolerance * (1.0 + yy);
    scored.into_iter().find(|s| s.1 <= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_envelope_has_zero_residual() {
        let knots = [3, 6, 9, 12];
        let nodes = [30.0, 26.0, 8.0];
        let y: Vec<f64> = (0..14).map(|t| envelope_level(knots, nodes, t as f64)).collect();
        let (rss, fit) = least_squares(&y, knots).unwrap();
        assert!(rss < 1e-18);
        for (a, b) in fit.iter().zip(nodes) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(best_knots(&y, 1e-10).unwrap().0, knots);
    }
}
