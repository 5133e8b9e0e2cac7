//! Vertex enumeration for the per-segment budget program
//!
//! ```text
//! max a + θx   s.t.  x ≥ 0,  1ᵀx ≤ B,  0 ≤ a + θx ≤ 1
//! ```
//!
//! The feasible set is a bounded polytope, so the optimum is attained at a
//! vertex. Every choice of `C` active constraints is solved directly.

use crate::linalg::{solve, subsets};

const FEASIBILITY: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub spend: Vec<f64>,
    pub objective: f64,
}

/// Best vertex, or `None` when the polytope is empty.
pub fn best_vertex(theta: &[f64], ambient: f64, budget: f64) -> Option<Vertex> {
    let all = vertices(theta, ambient, budget);
    all.into_iter().fold(None, |best: Option<Vertex>, v| match best {
        Some(b) if b.objective >= v.objective => Some(b),
        _ => Some(v),
    })
}

/// Every feasible vertex.
pub fn vertices(theta: &[f64], ambient: f64, budget: f64) -> Vec<Vertex> {
    let c = theta.len();
    // Rows g·x ≤ h.
    let mut rows: Vec<(Vec<f64>, f64)> = (0..c)
        .map(|k| {
            let mut g = vec![0.0; c];
            g[k] = -1.0;
            (g, 0.0)
        })
        .collect();
    rows.push((vec![1.0; c], budget));
    rows.push((theta.to_vec(), 1.0 - ambient));
    rows.push((theta.iter().map(|t| -t).collect(), ambient));

    let mut out = Vec::new();
    for active in subsets(rows.len(), c) {
        let a: Vec<Vec<f64>> = active.iter().map(|&i| rows[i].0.clone()).collect();
        let b: Vec<f64> = active.iter().map(|&i| rows[i].1).collect();
        let Some(x) = solve(a, b) else { continue };
        let feasible = rows.iter().all(|(g, h)| {
            let lhs: f64 = g.iter().zip(&x).map(|(p, q)| p * q).sum();
            lhs <= h + FEASIBILITY * (1.0 + h.abs())
        });
        if feasible {
            let objective = ambient + theta.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>();
            out.push(Vertex { spend: x, objective });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_channel_example() {
        let v = best_vertex(&[0.6, 0.8], 0.0, 0.5).unwrap();
        assert!((v.objective - 0.4).abs() < 1e-15);
        assert!(v.spend[0].abs() < 1e-15 && (v.spend[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ceiling_binds() {
        let v = best_vertex(&[2.0], 0.5, 1.0).unwrap();
        assert!((v.objective - 1.0).abs() < 1e-15);
        assert!((v.spend[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_when_ambient_exceeds_one() {
        assert!(best_vertex(&[0.3, 0.2], 1.5, 1.0).is_none());
    }
}
