//! Adaptive random-walk proposals.
//!
//! During warmup the step size follows a Robbins-Monro recursion towards
//! [`TARGET_ACCEPTANCE`] and, once enough states are seen, the proposal
//! shape switches to the running state covariance (Haario et al.). After
//! [`AdaptiveWalk::freeze`] nothing changes and acceptance is tallied.

use nalgebra::{DMatrix, DVector};

use crate::rng::DemandRng;

pub const TARGET_ACCEPTANCE: f64 = 0.3;
const COVARIANCE_AFTER: usize = 200;
const REFRESH_EVERY: usize = 50;

#[derive(Debug, Clone)]
pub(crate) struct AdaptiveWalk {
    dim: usize,
    base: Vec<f64>,
    diagonal: bool,
    log_scale: f64,
    seen: usize,
    mean: Vec<f64>,
    comoment: Vec<f64>,
    shape: Option<DMatrix<f64>>,
    adapting: bool,
    steps: usize,
    proposed: usize,
    accepted: usize,
}

impl AdaptiveWalk {
    /// `diagonal` keeps proposals axis-aligned, which reflection needs.
    pub fn new(base: Vec<f64>, diagonal: bool) -> Self {
        let dim = base.len();
        Self {
            dim,
            base,
            diagonal,
            log_scale: 0.0,
            seen: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            shape: None,
            adapting: true,
            steps: 0,
            proposed: 0,
            accepted: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn propose(&self, current: &[f64], rng: &mut DemandRng) -> Vec<f64> {
        let scale = self.log_scale.exp();
        let e: Vec<f64> = (0..self.dim).map(|_| rng.standard_normal()).collect();
        match &self.shape {
            Some(l) => {
                let step = l * DVector::from_column_slice(&e);
                current.iter().zip(step.iter()).map(|(c, s)| c + scale * s).collect()
            }
            None => current
                .iter()
                .zip(&self.base)
                .zip(&e)
                .map(|((c, b), z)| c + scale * b * z)
                .collect(),
        }
    }

    /// Records the outcome of one proposal and the resulting state.
    pub fn record(&mut self, accepted: bool, state: &[f64]) {
        if !self.adapting {
            self.proposed += 1;
            self.accepted += usize::from(accepted);
            return;
        }
        self.steps += 1;
        let gain = (self.steps as f64).powf(-0.6).min(0.5);
        self.log_scale += gain * (f64::from(u8::from(accepted)) - TARGET_ACCEPTANCE);
        self.log_scale = self.log_scale.clamp(-30.0, 10.0);
        self.observe(state);
        if self.seen >= COVARIANCE_AFTER && self.seen.is_multiple_of(REFRESH_EVERY) {
            let switching = self.shape.is_none();
            self.shape = self.empirical_shape();
            if switching && self.shape.is_some() {
                self.log_scale = 0.0;
            }
        }
    }

    fn observe(&mut self, state: &[f64]) {
        self.seen += 1;
        let n = self.seen as f64;
        let delta: Vec<f64> = state.iter().zip(&self.mean).map(|(s, m)| s - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        for a in 0..self.dim {
            for b in 0..self.dim {
                self.comoment[a * self.dim + b] += delta[a] * (state[b] - self.mean[b]);
            }
        }
    }

    fn empirical_shape(&self) -> Option<DMatrix<f64>> {
        let d = self.dim;
        let n = (self.seen - 1) as f64;
        let optimal = 2.38 / (d as f64).sqrt();
        let mut cov = DMatrix::from_fn(d, d, |a, b| self.comoment[a * d + b] / n);
        for a in 0..d {
            // Regularize so a stuck coordinate keeps moving.
            let floor = 1e-8 * self.base[a].powi(2);
            cov[(a, a)] += floor.max(1e-12);
            if self.diagonal {
                for b in 0..d {
                    if a != b {
                        cov[(a, b)] = 0.0;
                    }
                }
            }
        }
        cov.cholesky().map(|c| c.l() * optimal)
    }

    pub fn freeze(&mut self) {
        self.adapting = false;
    }

    /// Post-warmup acceptance rate, `None` before any frozen proposals.
    pub fn acceptance(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

/// Metropolis accept/reject on log densities.
pub(crate) fn accept(log_ratio: f64, rng: &mut DemandRng) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.uniform().ln() < log_ratio
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tunes_towards_target_on_a_gaussian() {
        let mut rng = DemandRng::seed_from(5);
        let mut walk = AdaptiveWalk::new(vec![5.0, 5.0], false);
        let target = |v: &[f64]| -0.5 * (v[0] * v[0] / 0.01 + v[1] * v[1] * 4.0);
        let mut x = vec![0.0, 0.0];
        for i in 0..6000 {
            if i == 3000 {
                walk.freeze();
            }
            let y = walk.propose(&x, &mut rng);
            let ok = accept(target(&y) - target(&x), &mut rng);
            if ok {
                x = y;
            }
            walk.record(ok, &x);
        }
        let rate = walk.acceptance().unwrap();
        assert!((0.2..=0.5).contains(&rate), "{rate}");
    }
}
