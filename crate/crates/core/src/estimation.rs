//! Frequentist estimators: logistic affinity, the Negative-Binomial law of
//! strata sizes, and log-link count regression with control charts.
//!
//! Every design matrix carries an always-one pseudo-channel after the
//! `x` and `z` columns; its coefficient is reported as `intercept`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dist::{
    ln_choose, negbin_ln_pmf, negbin_quantile, poisson_ln_pmf, poisson_quantile,
};
use crate::error::{DemandError, Result};
use crate::model::{dot, inv_logit, AffinityModel, CovariatePath, DemandCurve};

const MAX_ITERATIONS: usize = 100;
const REL_TOLERANCE: f64 = 1e-8;
const MIN_DISPERSION: f64 = 1e-3;
const MAX_DISPERSION: f64 = 1e8;

/// Listening probability of a member of `segment` under `model`.
pub fn affinity_predict(model: &AffinityModel, segment: usize, x: &[f64], z: &[f64]) -> Result<f64> {
    model.probability(segment, x, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionLink {
    Logit,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountFamily {
    Poisson,
    Negbin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub intercept: f64,
    /// Standard errors in design order: `theta`, `gamma`, intercept.
    pub std_errors: Vec<f64>,
    /// Negative-Binomial dispersion; `None` for Bernoulli and Poisson fits.
    pub dispersion: Option<f64>,
    pub log_likelihood: f64,
    pub link: RegressionLink,
    pub family: Option<CountFamily>,
    pub segment: Option<u32>,
    pub iterations: usize,
}

impl RegressionFit {
    pub fn coefficients(&self) -> Vec<f64> {
        let mut out = self.theta.clone();
        out.extend_from_slice(&self.gamma);
        out.push(self.intercept);
        out
    }

    pub fn linear_predictor(&self, x: &[f64], z: &[f64]) -> f64 {
        dot(&self.theta, x) + dot(&self.gamma, z) + self.intercept
    }
}

/// One listener-week: covariates and whether the song was streamed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryObservation {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub listened: bool,
}

fn design_row(x: &[f64], z: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(x.len() + z.len() + 1);
    row.extend_from_slice(x);
    row.extend_from_slice(z);
    row.push(1.0);
    row
}

/// IRLS problem description: maps a linear predictor to (log-lik, weight,
/// working-response residual) for one observation.
trait Glm {
    fn log_lik(&self, i: usize, eta: f64) -> f64;
    /// `(w, (y - mu) / (dmu/deta))`.
    fn working(&self, i: usize, eta: f64) -> (f64, f64);
}

struct Irls {
    beta: DVector<f64>,
    log_lik: f64,
    cov: DMatrix<f64>,
    iterations: usize,
    trace: Vec<f64>,
}

fn eta_of(design: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
    design * beta
}

fn total_log_lik(glm: &impl Glm, eta: &DVector<f64>) -> f64 {
    eta.iter().enumerate().map(|(i, &e)| glm.log_lik(i, e)).sum()
}

fn check_rank(design: &DMatrix<f64>) -> Result<()> {
    let gram = design.transpose() * design;
    let scale = gram.diagonal().iter().cloned().fold(0.0, f64::max).max(1.0);
    let svd = gram.clone().svd(false, false);
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_sv > 1e-10 * scale) {
        return Err(DemandError::Configuration(
            "design matrix is rank deficient".into(),
        ));
    }
    Ok(())
}

fn irls(glm: &impl Glm, design: &DMatrix<f64>, start: DVector<f64>) -> Result<Irls> {
    let n = design.nrows();
    let p = design.ncols();
    let mut beta = start;
    let mut eta = eta_of(design, &beta);
    let mut log_lik = total_log_lik(glm, &eta);
    let mut trace = vec![log_lik];
    for iteration in 1..=MAX_ITERATIONS {
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for i in 0..n {
            let (w, resid) = glm.working(i, eta[i]);
            let row = design.row(i);
            let target = eta[i] + resid;
            for a in 0..p {
                xtwz[a] += w * row[a] * target;
                for b in 0..=a {
                    xtwx[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        let chol = xtwx.clone().cholesky().ok_or_else(|| DemandError::Fit {
            message: "weighted normal equations are singular".into(),
            trace: trace.clone(),
        })?;
        let proposal = chol.solve(&xtwz);
        // Step halving keeps the likelihood monotone.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let candidate = &beta + (&proposal - &beta) * step;
            let cand_eta = eta_of(design, &candidate);
            let cand_ll = total_log_lik(glm, &cand_eta);
            if cand_ll.is_finite() && cand_ll >= log_lik - 1e-12 * log_lik.abs() {
                accepted = Some((candidate, cand_eta, cand_ll));
                break;
            }
            step *= 0.5;
        }
        let Some((next_beta, next_eta, next_ll)) = accepted else {
            return Err(DemandError::Fit {
                message: "step halving failed to improve the likelihood".into(),
                trace,
            });
        };
        let change = (next_ll - log_lik).abs() / (log_lik.abs() + REL_TOLERANCE);
        beta = next_beta;
        eta = next_eta;
        log_lik = next_ll;
        trace.push(log_lik);
        if change < REL_TOLERANCE {
            let cov = fisher_inverse(glm, design, &eta)?;
            return Ok(Irls {
                beta,
                log_lik,
                cov,
                iterations: iteration,
                trace,
            });
        }
    }
    Err(DemandError::Fit {
        message: format!("no convergence after {MAX_ITERATIONS} iterations"),
        trace,
    })
}

fn fisher_inverse(glm: &impl Glm, design: &DMatrix<f64>, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let p = design.ncols();
    let mut info = DMatrix::<f64>::zeros(p, p);
    for i in 0..design.nrows() {
        let (w, _) = glm.working(i, eta[i]);
        let row = design.row(i);
        info += w * row.transpose() * row;
    }
    info.try_inverse()
        .ok_or_else(|| DemandError::fit("information matrix is singular"))
}

struct Logistic<'a> {
    y: &'a [bool],
}

impl Glm for Logistic<'_> {
    fn log_lik(&self, i: usize, eta: f64) -> f64 {
        // y*eta - log(1 + e^eta), computed stably.
        let softplus = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        (if self.y[i] { eta } else { 0.0 }) - softplus
    }

    fn working(&self, i: usize, eta: f64) -> (f64, f64) {
        let p = inv_logit(eta);
        let w = (p * (1.0 - p)).max(1e-12);
        let y = if self.y[i] { 1.0 } else { 0.0 };
        (w, (y - p) / w)
    }
}

/// Maximum-likelihood logistic regression of listening on covariates.
pub fn fit_logistic(observations: &[BinaryObservation], segment: Option<u32>) -> Result<RegressionFit> {
    let first = observations
        .first()
        .ok_or_else(|| DemandError::Configuration("no observations".into()))?;
    let (c, d) = (first.x.len(), first.z.len());
    if observations.len() < c + d + 1 {
        return Err(DemandError::Configuration(format!(
            "{} observations cannot identify {} coefficients",
            observations.len(),
            c + d + 1
        )));
    }
    if observations.iter().any(|o| o.x.len() != c || o.z.len() != d) {
        return Err(DemandError::Configuration("ragged observations".into()));
    }
    let y: Vec<bool> = observations.iter().map(|o| o.listened).collect();
    let ones = y.iter().filter(|&&b| b).count();
    if ones == 0 || ones == y.len() {
        return Err(DemandError::fit("complete separation: every response is identical"));
    }
    let rows: Vec<f64> = observations.iter().flat_map(|o| design_row(&o.x, &o.z)).collect();
    let design = DMatrix::from_row_slice(observations.len(), c + d + 1, &rows);
    check_rank(&design)?;
    let fit = irls(&Logistic { y: &y }, &design, DVector::zeros(c + d + 1))?;
    if fit.beta.iter().any(|b| b.abs() > 30.0) {
        return Err(DemandError::Fit {
            message: "coefficients diverge: data are (quasi-)separated".into(),
            trace: fit.trace,
        });
    }
    Ok(assemble(fit, c, d, None, RegressionLink::Logit, None, segment))
}

fn assemble(
    fit: Irls,
    c: usize,
    d: usize,
    dispersion: Option<f64>,
    link: RegressionLink,
    family: Option<CountFamily>,
    segment: Option<u32>,
) -> RegressionFit {
    let beta = fit.beta.as_slice();
    RegressionFit {
        theta: beta[..c].to_vec(),
        gamma: beta[c..c + d].to_vec(),
        intercept: beta[c + d],
        std_errors: fit.cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        dispersion,
        log_likelihood: fit.log_lik,
        link,
        family,
        segment,
        iterations: fit.iterations,
    }
}

/// `P(N_t = n | y_t, p)`: trials needed for `y` listens at affinity `p`.
pub fn negbin_strata_pmf(n: u64, y: u64, p: f64) -> Result<f64> {
    if y == 0 {
        return Err(DemandError::Domain("observed demand must be at least 1".into()));
    }
    if n < y {
        return Err(DemandError::Domain(format!("stratum size {n} below demand {y}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(DemandError::Domain(format!("probability {p} outside (0, 1)")));
    }
    let ln = ln_choose(n - 1, y - 1) + y as f64 * p.ln() + (n - y) as f64 * (-p).ln_1p();
    Ok(ln.exp())
}

struct CountGlm<'a> {
    y: &'a [u64],
    omega: Option<f64>,
}

impl Glm for CountGlm<'_> {
    fn log_lik(&self, i: usize, eta: f64) -> f64 {
        let mu = eta.exp();
        match self.omega {
            None => poisson_ln_pmf(self.y[i], mu),
            Some(omega) => negbin_ln_pmf(self.y[i], mu, omega),
        }
    }

    fn working(&self, i: usize, eta: f64) -> (f64, f64) {
        let mu = eta.exp().max(1e-300);
        let w = match self.omega {
            None => mu,
            Some(omega) => mu / (1.0 + mu / omega),
        };
        (w, (self.y[i] as f64 - mu) / mu)
    }
}

/// Log-link Poisson or Negative-Binomial regression of a demand curve.
pub fn fit_count_regression(
    curve: &DemandCurve,
    covariates: &CovariatePath,
    family: CountFamily,
) -> Result<RegressionFit> {
    let (c, d) = (covariates.channels(), covariates.ambient());
    let horizon = curve.horizon();
    if covariates.horizon() != horizon {
        return Err(DemandError::Configuration(format!(
            "curve spans {horizon} weeks, covariates {}",
            covariates.horizon()
        )));
    }
    if horizon < c + d + 2 {
        return Err(DemandError::Configuration(format!(
            "{horizon} weeks cannot identify {} coefficients",
            c + d + 1
        )));
    }
    if curve.values.iter().all(|&v| v == 0) {
        return Err(DemandError::fit("demand curve is identically zero"));
    }
    let rows: Vec<f64> = (0..horizon)
        .flat_map(|t| design_row(covariates.x(t), covariates.z(t)))
        .collect();
    let design = DMatrix::from_row_slice(horizon, c + d + 1, &rows);
    check_rank(&design)?;
    let mean = curve.values.iter().sum::<u64>() as f64 / horizon as f64;
    let mut start = DVector::zeros(c + d + 1);
    start[c + d] = mean.ln();

    let poisson = irls(&CountGlm { y: &curve.values, omega: None }, &design, start)?;
    if family == CountFamily::Poisson {
        return Ok(assemble(poisson, c, d, None, RegressionLink::Log, Some(family), segment_of(curve)));
    }

    let warm = poisson.beta.clone();
    let profile = |log_omega: f64| -> Option<Irls> {
        irls(
            &CountGlm { y: &curve.values, omega: Some(log_omega.exp()) },
            &design,
            warm.clone(),
        )
        .ok()
    };
    let log_omega = maximize_profile(|lw| profile(lw).map_or(f64::NEG_INFINITY, |f| f.log_lik));
    let best = profile(log_omega).ok_or_else(|| DemandError::fit("negative-binomial refit failed"))?;
    Ok(assemble(
        best,
        c,
        d,
        Some(log_omega.exp()),
        RegressionLink::Log,
        Some(family),
        segment_of(curve),
    ))
}

fn segment_of(curve: &DemandCurve) -> Option<u32> {
    match curve.stratum {
        crate::model::Stratum::Segment(j) => Some(j),
        crate::model::Stratum::Aggregate => None,
    }
}

/// Maximizes a unimodal profile over `log omega`: grid bracket, then golden section.
pub(crate) fn maximize_profile(objective: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = (MIN_DISPERSION.ln(), MAX_DISPERSION.ln());
    let steps = 40;
    let grid: Vec<f64> = (0..=steps)
        .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > values[b] { i } else { b });
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(steps)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while b - a > 1e-6 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = objective(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = objective(x1);
        }
    }
    let mid = (a + b) / 2.0;
    if objective(mid) >= values[best] {
        mid
    } else {
        grid[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlChart {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

/// Conditional demand `e^{θx + γz}` along `proposed`, with family quantile bands.
pub fn conditional_demand_chart(
    fit: &RegressionFit,
    proposed: &CovariatePath,
    level: f64,
) -> Result<ControlChart> {
    if fit.link != RegressionLink::Log {
        return Err(DemandError::Configuration(
            "control charts need a log-link count fit".into(),
        ));
    }
    if proposed.channels() != fit.theta.len() || proposed.ambient() != fit.gamma.len() {
        return Err(DemandError::Configuration(
            "proposed covariates do not match the fit".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(DemandError::Domain(format!("band level {level} outside (0, 1)")));
    }
    let q_lo = (1.0 - level) / 2.0;
    let q_hi = (1.0 + level) / 2.0;
    let mut chart = ControlChart {
        mean: Vec::with_capacity(proposed.horizon()),
        lower: Vec::with_capacity(proposed.horizon()),
        upper: Vec::with_capacity(proposed.horizon()),
        level,
    };
    for t in 0..proposed.horizon() {
        let mu = fit.linear_predictor(proposed.x(t), proposed.z(t)).exp();
        let (lo, hi) = match fit.dispersion {
            Some(omega) => (negbin_quantile(q_lo, mu, omega), negbin_quantile(q_hi, mu, omega)),
            None => (poisson_quantile(q_lo, mu), poisson_quantile(q_hi, mu)),
        };
        chart.mean.push(mu);
        // Discrete quantiles can sit on either side of a tiny mean.
        chart.lower.push((lo as f64).min(mu));
        chart.upper.push((hi as f64).max(mu));
    }
    Ok(chart)
}
