//! Four-phase attack/sustain/decay/release envelope for aggregate demand.
//!
//! The mean is continuous and piecewise linear through `(0, 0)`,
//! `(τ_A, μ_A)`, `(τ_S, μ_S)`, `(τ_D, μ_D)` and `(τ_R, 0)`. Fitting runs in
//! two steps: an exhaustive least-squares search over change points, then
//! per-phase Negative-Binomial fits of the node values and covariate effects.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::negbin_ln_pmf;
use crate::error::{DemandError, Result};
use crate::estimation::maximize_profile;
use crate::model::{dot, CovariatePath, DemandCurve};

/// Week indices where the envelope switches phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChangePoints {
    pub attack: usize,
    pub sustain: usize,
    pub decay: usize,
    pub release: usize,
}

impl ChangePoints {
    pub fn new(attack: usize, sustain: usize, decay: usize, release: usize) -> Result<Self> {
        if !(0 < attack && attack < sustain && sustain < decay && decay < release) {
            return Err(DemandError::Domain(format!(
                "change points must satisfy 0 < {attack} < {sustain} < {decay} < {release}"
            )));
        }
        Ok(Self { attack, sustain, decay, release })
    }

    pub fn check_horizon(&self, horizon: usize) -> Result<()> {
        if self.release + 1 > horizon {
            return Err(DemandError::Domain(format!(
                "release week {} beyond horizon {horizon}",
                self.release
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.attack, self.sustain, self.decay, self.release]
    }

    /// Phase owning week `t`; weeks after release count as [`Phase::Release`].
    pub fn phase_of(&self, t: usize) -> Phase {
        if t <= self.attack {
            Phase::Attack
        } else if t <= self.sustain {
            Phase::Sustain
        } else if t <= self.decay {
            Phase::Decay
        } else {
            Phase::Release
        }
    }

    /// Inclusive week range `[first, last]` of a phase within `0..=release`.
    pub fn phase_weeks(&self, phase: Phase) -> (usize, usize) {
        match phase {
            Phase::Attack => (0, self.attack),
            Phase::Sustain => (self.attack + 1, self.sustain),
            Phase::Decay => (self.sustain + 1, self.decay),
            Phase::Release => (self.decay + 1, self.release),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Attack,
    Sustain,
    Decay,
    Release,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Attack, Phase::Sustain, Phase::Decay, Phase::Release];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Attack => "attack",
            Phase::Sustain => "sustain",
            Phase::Decay => "decay",
            Phase::Release => "release",
        }
    }
}

/// Mean demand at the three interior change points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeValues {
    pub attack: f64,
    pub sustain: f64,
    pub decay: f64,
}

/// `α + β t` for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseLine {
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseEffects {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub changepoints: ChangePoints,
    pub nodes: NodeValues,
    /// Phase lines in attack, sustain, decay, release order.
    pub lines: [PhaseLine; 4],
    /// Per-phase covariate effects, same order as `lines`.
    pub effects: [PhaseEffects; 4],
    pub dispersion: Option<f64>,
}

impl EnvelopeFit {
    pub fn new(changepoints: ChangePoints, nodes: NodeValues) -> Self {
        Self {
            changepoints,
            nodes,
            lines: phase_lines(&changepoints, &nodes),
            effects: Default::default(),
            dispersion: None,
        }
    }

    pub fn with_effects(mut self, effects: [PhaseEffects; 4]) -> Self {
        self.effects = effects;
        self
    }

    /// Envelope level at week `t`, zero outside `[0, τ_R]`.
    pub fn level(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.changepoints.release as f64 {
            return 0.0;
        }
        adsr_level(t, &self.changepoints, &self.nodes)
    }

    /// Envelope level scaled by the phase's covariate effects.
    pub fn mean_with_covariates(&self, t: usize, x: &[f64], z: &[f64]) -> f64 {
        let effects = &self.effects[self.changepoints.phase_of(t).index()];
        let eta = if effects.theta.is_empty() && effects.gamma.is_empty() {
            0.0
        } else {
            dot(&effects.theta, x) + dot(&effects.gamma, z)
        };
        self.level(t as f64) * eta.exp()
    }
}

fn phase_lines(cp: &ChangePoints, n: &NodeValues) -> [PhaseLine; 4] {
    let (ta, ts, td, tr) = (
        cp.attack as f64,
        cp.sustain as f64,
        cp.decay as f64,
        cp.release as f64,
    );
    [
        PhaseLine { intercept: 0.0, slope: n.attack / ta },
        PhaseLine {
            intercept: (n.attack * ts - n.sustain * ta) / (ts - ta),
            slope: (n.sustain - n.attack) / (ts - ta),
        },
        PhaseLine {
            intercept: (n.sustain * td - n.decay * ts) / (td - ts),
            slope: (n.decay - n.sustain) / (td - ts),
        },
        PhaseLine {
            intercept: n.decay * tr / (tr - td),
            slope: -n.decay / (tr - td),
        },
    ]
}

fn interpolate(t: f64, (t0, v0): (f64, f64), (t1, v1): (f64, f64)) -> f64 {
    // Convex weights reproduce both node values exactly.
    let w = (t - t0) / (t1 - t0);
    (1.0 - w) * v0 + w * v1
}

pub(crate) fn adsr_level(t: f64, cp: &ChangePoints, n: &NodeValues) -> f64 {
    let knots = [
        (0.0, 0.0),
        (cp.attack as f64, n.attack),
        (cp.sustain as f64, n.sustain),
        (cp.decay as f64, n.decay),
        (cp.release as f64, 0.0),
    ];
    let k = knots[1..]
        .iter()
        .position(|&(tk, _)| t <= tk)
        .unwrap_or(3);
    interpolate(t, knots[k], knots[k + 1]).max(0.0)
}

/// Mean demand of the envelope at week `t` (which may be fractional).
pub fn adsr_mean(t: f64, fit: &EnvelopeFit) -> Result<f64> {
    if !(0.0..=fit.changepoints.release as f64).contains(&t) {
        return Err(DemandError::Domain(format!(
            "week {t} outside [0, {}]",
            fit.changepoints.release
        )));
    }
    Ok(adsr_level(t, &fit.changepoints, &fit.nodes))
}

/// Hat-basis weights `(b_A, b_S, b_D)` of week `t`.
pub fn hat_basis(t: usize, cp: &ChangePoints) -> [f64; 3] {
    let t = t as f64;
    let (ta, ts, td, tr) = (
        cp.attack as f64,
        cp.sustain as f64,
        cp.decay as f64,
        cp.release as f64,
    );
    if t <= ta {
        [t / ta, 0.0, 0.0]
    } else if t <= ts {
        [(ts - t) / (ts - ta), (t - ta) / (ts - ta), 0.0]
    } else if t <= td {
        [0.0, (td - t) / (td - ts), (t - ts) / (td - ts)]
    } else if t <= tr {
        [0.0, 0.0, (tr - t) / (tr - td)]
    } else {
        [0.0; 3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChangepointConfig {
    /// Largest horizon searched exhaustively.
    pub max_horizon: usize,
    /// RSS values within `tie_tolerance * (1 + Σy²)` of the minimum are ties.
    pub tie_tolerance: f64,
    /// Fewest weeks any phase may span; week 0 does not count toward attack.
    pub min_phase_weeks: usize,
}

impl Default for ChangepointConfig {
    fn default() -> Self {
        Self { max_horizon: 200, tie_tolerance: 1e-10, min_phase_weeks: 1 }
    }
}

/// Prefix sums for O(1) per-interval moments.
struct Moments {
    s1: Vec<f64>,
    s2: Vec<f64>,
    y0: Vec<f64>,
    y1: Vec<f64>,
    yy: f64,
}

impl Moments {
    fn new(y: &[f64]) -> Self {
        let n = y.len();
        let mut m = Moments {
            s1: vec![0.0; n + 1],
            s2: vec![0.0; n + 1],
            y0: vec![0.0; n + 1],
            y1: vec![0.0; n + 1],
            yy: y.iter().map(|v| v * v).sum(),
        };
        for (t, &v) in y.iter().enumerate() {
            let tf = t as f64;
            m.s1[t + 1] = m.s1[t] + tf;
            m.s2[t + 1] = m.s2[t] + tf * tf;
            m.y0[t + 1] = m.y0[t] + v;
            m.y1[t + 1] = m.y1[t] + tf * v;
        }
        m
    }

    /// Gram and cross terms of the falling/rising pair on weeks `(l, r]`:
    /// `[ff, fg, gg, fy, gy]` with `f = (r-t)/L`, `g = (t-l)/L`.
    fn interval(&self, l: usize, r: usize) -> [f64; 5] {
        let (lf, rf) = (l as f64, r as f64);
        let s0 = rf - lf;
        let s1 = self.s1[r + 1] - self.s1[l + 1];
        let s2 = self.s2[r + 1] - self.s2[l + 1];
        let y0 = self.y0[r + 1] - self.y0[l + 1];
        let y1 = self.y1[r + 1] - self.y1[l + 1];
        let inv = 1.0 / (s0 * s0);
        [
            (rf * rf * s0 - 2.0 * rf * s1 + s2) * inv,
            (-s2 + (rf + lf) * s1 - rf * lf * s0) * inv,
            (s2 - 2.0 * lf * s1 + lf * lf * s0) * inv,
            (rf * y0 - y1) / s0,
            (y1 - lf * y0) / s0,
        ]
    }

    /// Residual sum of squares of the best continuous envelope for `cp`,
    /// together with the least-squares node values.
    fn fit(&self, cp: &ChangePoints) -> (f64, [f64; 3]) {
        let [_, _, ga, _, ha] = self.interval(0, cp.attack);
        let [aa, as_, ss, hs_a, hs_s] = self.interval(cp.attack, cp.sustain);
        let [ss2, sd, dd, hd_s, hd_d] = self.interval(cp.sustain, cp.decay);
        let [dd2, _, _, hr_d, _] = self.interval(cp.decay, cp.release);
        let g = [
            [ga + aa, as_, 0.0],
            [as_, ss + ss2, sd],
            [0.0, sd, dd + dd2],
        ];
        let h = [ha + hs_a, hs_s + hd_s, hd_d + hr_d];
        let mu = solve_tridiagonal3(g, h);
        let explained = mu[0] * h[0] + mu[1] * h[1] + mu[2] * h[2];
        ((self.yy - explained).max(0.0), mu)
    }
}

fn solve_tridiagonal3(g: [[f64; 3]; 3], h: [f64; 3]) -> [f64; 3] {
    // Thomas algorithm on the symmetric tridiagonal normal equations.
    let c0 = g[0][1] / g[0][0];
    let d0 = h[0] / g[0][0];
    let m1 = g[1][1] - g[1][0] * c0;
    let c1 = g[1][2] / m1;
    let d1 = (h[1] - g[1][0] * d0) / m1;
    let m2 = g[2][2] - g[2][1] * c1;
    let d2 = (h[2] - g[2][1] * d1) / m2;
    let x2 = d2;
    let x1 = d1 - c1 * x2;
    let x0 = d0 - c0 * x1;
    [x0, x1, x2]
}

/// Residual sum of squares and node values of the continuous envelope with
/// change points `cp` fitted to `y` by least squares.
pub fn envelope_least_squares(y: &[f64], cp: &ChangePoints) -> Result<(f64, NodeValues)> {
    cp.check_horizon(y.len())?;
    let moments = Moments::new(y);
    let (rss, mu) = moments.fit(cp);
    Ok((rss, NodeValues { attack: mu[0], sustain: mu[1], decay: mu[2] }))
}

fn is_monotone(y: &[f64]) -> bool {
    y.windows(2).all(|w| w[1] >= w[0]) || y.windows(2).all(|w| w[1] <= w[0])
}

/// Least-squares change points of a release-anchored demand curve.
///
/// Scans every ordered `(τ_A, τ_S, τ_D, τ_R)` with `τ_R ≤ T - 1`; each
/// candidate costs O(1) through prefix sums. Among candidates within the tie
/// tolerance of the minimum, the lexicographically earliest wins.
pub fn fit_changepoints(curve: &DemandCurve, config: &ChangepointConfig) -> Result<ChangePoints> {
    let horizon = curve.horizon();
    if horizon < 8 {
        return Err(DemandError::Domain(format!(
            "change-point search needs at least 8 weeks, got {horizon}"
        )));
    }
    if horizon > config.max_horizon {
        return Err(DemandError::Configuration(format!(
            "horizon {horizon} exceeds exhaustive-search limit {}",
            config.max_horizon
        )));
    }
    if !curve.origin {
        return Err(DemandError::Configuration(
            "curve must be translated to its release week".into(),
        ));
    }
    let y = curve.as_f64();
    if y.iter().all(|&v| v == 0.0) {
        return Err(DemandError::DegenerateFit("demand curve is identically zero".into()));
    }
    if is_monotone(&y) {
        return Err(DemandError::DegenerateFit(
            "monotone demand has no interior peak; fit fewer phases".into(),
        ));
    }
    let moments = Moments::new(&y);
    let last = horizon - 1;
    let m = config.min_phase_weeks.max(1);
    let scan = |attack: usize, visit: &mut dyn FnMut(ChangePoints, f64)| {
        if attack < m {
            return;
        }
        for sustain in attack + m..last.saturating_sub(1) {
            for decay in sustain + m..last {
                for release in decay + m..=last {
                    let cp = ChangePoints { attack, sustain, decay, release };
                    visit(cp, moments.fit(&cp).0);
                }
            }
        }
    };
    let min_rss = (1..last - 2)
        .into_par_iter()
        .map(|attack| {
            let mut best = f64::INFINITY;
            scan(attack, &mut |_, rss| best = best.min(rss));
            best
        })
        .reduce(|| f64::INFINITY, f64::min);
    let threshold = min_rss + config.tie_tolerance * (1.0 + moments.yy);
    let chosen = (1..last - 2)
        .into_par_iter()
        .filter_map(|attack| {
            let mut first = None;
            scan(attack, &mut |cp, rss| {
                if first.is_none() && rss <= threshold {
                    first = Some(cp);
                }
            });
            first
        })
        .min_by_key(|cp| cp.as_array())
        .ok_or_else(|| {
            DemandError::DegenerateFit(format!("{horizon} weeks cannot hold four phases of {m} weeks"))
        })?;
    let (_, mu) = moments.fit(&chosen);
    if mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max) <= 0.0 {
        return Err(DemandError::DegenerateFit(
            "best envelope has no positive node; fit fewer phases".into(),
        ));
    }
    Ok(chosen)
}

/// Log mass of the restricted-uniform change-point prior for horizon `T`.
///
/// `τ_A` is uniform on `{1, …, T-2}` (mass `1/(T-2)`); each later change
/// point is uniform on the weeks after its predecessor up to `T - 1`. The
/// product is renormalized over the ordered tuples that fit in the horizon.
pub fn changepoint_prior_logpmf(cp: &ChangePoints, horizon: usize) -> f64 {
    let valid = 0 < cp.attack
        && cp.attack < cp.sustain
        && cp.sustain < cp.decay
        && cp.decay < cp.release
        && cp.release < horizon;
    if !valid || horizon < 5 {
        return f64::NEG_INFINITY;
    }
    unnormalized_prior_ln(cp, horizon) - prior_normalizer(horizon).ln()
}

/// The `τ_A` factor `1/(T-2)` alone.
pub fn attack_prior_ln(horizon: usize) -> f64 {
    -((horizon - 2) as f64).ln()
}

pub(crate) fn unnormalized_prior_ln(cp: &ChangePoints, horizon: usize) -> f64 {
    let last = (horizon - 1) as f64;
    attack_prior_ln(horizon)
        - (last - cp.attack as f64).ln()
        - (last - cp.sustain as f64).ln()
        - (last - cp.decay as f64).ln()
}

/// Total unnormalized mass of admissible tuples, by backward recursion.
fn prior_normalizer(horizon: usize) -> f64 {
    let last = horizon - 1;
    // tail[k][s]: mass of completing the tuple from stage k given predecessor at s.
    let mut release_mass = vec![0.0; horizon];
    // Release is uniform over the weeks after decay, so each predecessor has unit mass.
    for slot in release_mass.iter_mut().take(last) {
        *slot = 1.0;
    }
    let stage = |next: &Vec<f64>| {
        let mut out = vec![0.0; horizon];
        for s in 0..last {
            let width = (last - s) as f64;
            out[s] = (s + 1..=last).map(|u| next[u]).sum::<f64>() / width;
        }
        out
    };
    let decay_mass = stage(&release_mass);
    let sustain_mass = stage(&decay_mass);
    (1..=horizon - 2).map(|a| sustain_mass[a]).sum::<f64>() / (horizon - 2) as f64
}

/// Options for the per-phase Negative-Binomial fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartiteConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for PartiteConfig {
    fn default() -> Self {
        Self { max_iterations: 200, tolerance: 1e-10 }
    }
}

struct PartiteProblem<'a> {
    y: &'a [u64],
    weeks: Vec<usize>,
    basis: Vec<[f64; 3]>,
    phase: Vec<usize>,
    covariates: Option<&'a CovariatePath>,
    c: usize,
    d: usize,
}

impl PartiteProblem<'_> {
    fn params(&self) -> usize {
        3 + 4 * (self.c + self.d)
    }

    fn effect_offset(&self, phase: usize) -> usize {
        3 + phase * (self.c + self.d)
    }

    /// Mean and its gradient with respect to all parameters, for week index `i`.
    fn mean_and_grad(&self, beta: &[f64], i: usize, grad: &mut [f64]) -> f64 {
        let t = self.weeks[i];
        let b = self.basis[i];
        let level = b[0] * beta[0] + b[1] * beta[1] + b[2] * beta[2];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut eta = 0.0;
        let off = self.effect_offset(self.phase[i]);
        if let Some(cov) = self.covariates {
            let x = cov.x(t);
            let z = cov.z(t);
            eta = dot(&beta[off..off + self.c], x) + dot(&beta[off + self.c..off + self.c + self.d], z);
        }
        let scale = eta.exp();
        let mean = level * scale;
        for k in 0..3 {
            grad[k] = b[k] * scale;
        }
        if let Some(cov) = self.covariates {
            for (k, v) in cov.x(t).iter().chain(cov.z(t)).enumerate() {
                grad[off + k] = mean * v;
            }
        }
        mean
    }

    fn log_lik(&self, beta: &[f64], omega: f64) -> f64 {
        let mut grad = vec![0.0; self.params()];
        let mut total = 0.0;
        for i in 0..self.weeks.len() {
            let m = self.mean_and_grad(beta, i, &mut grad);
            if m <= 0.0 {
                return f64::NEG_INFINITY;
            }
            total += negbin_ln_pmf(self.y[self.weeks[i]], m, omega);
        }
        total
    }

    /// Fisher scoring at fixed dispersion, from `start`.
    fn maximize(&self, start: &[f64], omega: f64, config: &PartiteConfig) -> Option<(Vec<f64>, f64)> {
        let p = self.params();
        let mut beta = start.to_vec();
        let mut ll = self.log_lik(&beta, omega);
        if !ll.is_finite() {
            return None;
        }
        let mut grad = vec![0.0; p];
        for _ in 0..config.max_iterations {
            let mut info = DMatrix::<f64>::zeros(p, p);
            let mut score = DVector::<f64>::zeros(p);
            for i in 0..self.weeks.len() {
                let m = self.mean_and_grad(&beta, i, &mut grad);
                let y = self.y[self.weeks[i]] as f64;
                let v = m * (1.0 + m / omega);
                let g = DVector::from_column_slice(&grad);
                score += &g * ((y - m) / v);
                info += &g * g.transpose() / v;
            }
            let ridge = 1e-10 * info.diagonal().amax().max(1e-12);
            for k in 0..p {
                info[(k, k)] += ridge;
            }
            let step = info.cholesky()?.solve(&score);
            let mut scale = 1.0;
            let mut improved = None;
            for _ in 0..40 {
                let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
                if cand[..3].iter().all(|&m| m > 0.0) {
                    let cand_ll = self.log_lik(&cand, omega);
                    if cand_ll >= ll - 1e-12 * ll.abs() {
                        improved = Some((cand, cand_ll));
                        break;
                    }
                }
                scale *= 0.5;
            }
            let (cand, cand_ll) = improved?;
            let change = (cand_ll - ll).abs() / (ll.abs() + 1e-12);
            beta = cand;
            ll = cand_ll;
            if change < config.tolerance {
                break;
            }
        }
        Some((beta, ll))
    }
}

/// Node values, per-phase lines and per-phase covariate effects given fixed
/// change points, by Negative-Binomial maximum likelihood with a profiled
/// dispersion. Each phase's effects see only that phase's weeks.
pub fn fit_partite(
    curve: &DemandCurve,
    changepoints: &ChangePoints,
    covariates: Option<&CovariatePath>,
    config: &PartiteConfig,
) -> Result<EnvelopeFit> {
    let horizon = curve.horizon();
    changepoints.check_horizon(horizon)?;
    for phase in Phase::ALL {
        let (first, last) = changepoints.phase_weeks(phase);
        // Week 0 carries no information (the envelope is pinned there).
        let weeks = last + 1 - first.max(1);
        if weeks < 2 {
            return Err(DemandError::PhaseSupport { phase: phase.label(), weeks });
        }
    }
    if let Some(cov) = covariates {
        if cov.horizon() != horizon {
            return Err(DemandError::Configuration(format!(
                "curve spans {horizon} weeks, covariates {}",
                cov.horizon()
            )));
        }
    }
    let (c, d) = covariates.map_or((0, 0), |cov| (cov.channels(), cov.ambient()));
    // Weeks where the envelope is pinned at zero carry no parameter information.
    let weeks: Vec<usize> = (1..changepoints.release).collect();
    let problem = PartiteProblem {
        y: &curve.values,
        basis: weeks.iter().map(|&t| hat_basis(t, changepoints)).collect(),
        phase: weeks.iter().map(|&t| changepoints.phase_of(t).index()).collect(),
        weeks,
        covariates,
        c,
        d,
    };

    let (_, ls_nodes) = envelope_least_squares(&curve.as_f64(), changepoints)?;
    let floor = curve.values.iter().copied().max().unwrap_or(0).max(1) as f64 * 1e-3;
    let mut start = vec![0.0; problem.params()];
    start[0] = ls_nodes.attack.max(floor);
    start[1] = ls_nodes.sustain.max(floor);
    start[2] = ls_nodes.decay.max(floor);

    let log_omega = maximize_profile(|lw| {
        problem
            .maximize(&start, lw.exp(), config)
            .map_or(f64::NEG_INFINITY, |(_, ll)| ll)
    });
    let omega = log_omega.exp();
    let (beta, _) = problem
        .maximize(&start, omega, config)
        .ok_or_else(|| DemandError::fit("partite Negative-Binomial fit did not converge"))?;

    let nodes = NodeValues { attack: beta[0], sustain: beta[1], decay: beta[2] };
    let mut effects: [PhaseEffects; 4] = Default::default();
    if covariates.is_some() {
        for (r, e) in effects.iter_mut().enumerate() {
            let off = problem.effect_offset(r);
            e.theta = beta[off..off + c].to_vec();
            e.gamma = beta[off + c..off + c + d].to_vec();
        }
    }
    let mut fit = EnvelopeFit::new(*changepoints, nodes).with_effects(effects);
    fit.dispersion = Some(omega);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Stratum;

    fn cp(a: usize, s: usize, d: usize, r: usize) -> ChangePoints {
        ChangePoints::new(a, s, d, r).unwrap()
    }

    fn fit_of(a: usize, s: usize, d: usize, r: usize, nodes: [f64; 3]) -> EnvelopeFit {
        EnvelopeFit::new(
            cp(a, s, d, r),
            NodeValues { attack: nodes[0], sustain: nodes[1], decay: nodes[2] },
        )
    }

    #[test]
    fn mean_at_nodes() {
        let fit = fit_of(5, 15, 25, 39, [100.0, 90.0, 30.0]);
        assert_eq!(adsr_mean(0.0, &fit).unwrap(), 0.0);
        assert_eq!(adsr_mean(5.0, &fit).unwrap(), 100.0);
        assert_eq!(adsr_mean(15.0, &fit).unwrap(), 90.0);
        assert_eq!(adsr_mean(25.0, &fit).unwrap(), 30.0);
        assert_eq!(adsr_mean(39.0, &fit).unwrap(), 0.0);
        assert!(adsr_mean(39.5, &fit).is_err());
        assert!(adsr_mean(-1.0, &fit).is_err());
    }

    #[test]
    fn lines_match_level() {
        let fit = fit_of(3, 7, 12, 20, [50.0, 60.0, 10.0]);
        for t in 0..=20 {
            let line = fit.lines[fit.changepoints.phase_of(t).index()];
            let v = line.intercept + line.slope * t as f64;
            assert!((v - adsr_mean(t as f64, &fit).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn changepoint_order_is_enforced() {
        assert!(ChangePoints::new(0, 2, 3, 4).is_err());
        assert!(ChangePoints::new(2, 2, 3, 4).is_err());
        assert!(ChangePoints::new(1, 2, 3, 4).is_ok());
    }

    #[test]
    fn prior_attack_factor_and_support() {
        assert!((attack_prior_ln(10) - (1.0f64 / 8.0).ln()).abs() < 1e-15);
        let bad = ChangePoints { attack: 4, sustain: 3, decay: 5, release: 6 };
        assert_eq!(changepoint_prior_logpmf(&bad, 10), f64::NEG_INFINITY);
        assert_eq!(changepoint_prior_logpmf(&cp(1, 2, 3, 10), 10), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_normalizes() {
        for horizon in [5usize, 8, 10, 23] {
            let mut total = 0.0;
            for a in 1..horizon {
                for s in a + 1..horizon {
                    for d in s + 1..horizon {
                        for r in d + 1..horizon {
                            total += changepoint_prior_logpmf(&cp(a, s, d, r), horizon).exp();
                        }
                    }
                }
            }
            assert!((total - 1.0).abs() < 1e-12, "T={horizon}: {total}");
        }
    }

    #[test]
    fn flat_zero_is_degenerate() {
        let curve = DemandCurve::new("s", Stratum::Aggregate, vec![0; 20]);
        assert!(matches!(
            fit_changepoints(&curve, &ChangepointConfig::default()),
            Err(DemandError::DegenerateFit(_))
        ));
        let rising = DemandCurve::new("s", Stratum::Aggregate, (0..20).collect());
        assert!(matches!(
            fit_changepoints(&rising, &ChangepointConfig::default()),
            Err(DemandError::DegenerateFit(_))
        ));
    }

    fn integer_envelope() -> (DemandCurve, ChangePoints) {
        let fit = fit_of(5, 15, 25, 45, [100.0, 80.0, 40.0]);
        let values = (0..46).map(|t| adsr_mean(t as f64, &fit).unwrap().round() as u64).collect();
        (DemandCurve::new("s", Stratum::Aggregate, values), fit.changepoints)
    }

    #[test]
    fn noiseless_knots_recovered() {
        let (curve, truth) = integer_envelope();
        assert_eq!(fit_changepoints(&curve, &ChangepointConfig::default()).unwrap(), truth);
    }

    #[test]
    fn partite_matches_least_squares_without_covariates() {
        let (curve, truth) = integer_envelope();
        let (_, ls) = envelope_least_squares(&curve.as_f64(), &truth).unwrap();
        let fit = fit_partite(&curve, &truth, None, &PartiteConfig::default()).unwrap();
        for (a, b) in [
            (fit.nodes.attack, ls.attack),
            (fit.nodes.sustain, ls.sustain),
            (fit.nodes.decay, ls.decay),
        ] {
            assert!((a / b - 1.0).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(fit.lines[0].slope >= 0.0);
        assert!(fit.lines[2].slope <= 0.0);
    }

    #[test]
    fn short_phase_is_rejected() {
        let (curve, _) = integer_envelope();
        let tight = cp(5, 6, 25, 45);
        assert!(matches!(
            fit_partite(&curve, &tight, None, &PartiteConfig::default()),
            Err(DemandError::PhaseSupport { phase: "sustain", weeks: 1 })
        ));
    }
}
