//! The forced hierarchy: a four-phase envelope scaled by per-phase effects.
//!
//! ```text
//! y_t ~ NegBin(level(t) · exp(θ_r·x_t + γ_r·z_t), ω),  r = phase of t
//! ln μ_A, ln μ_S, ln μ_D ~ Normal(m, s)
//! θ_r ~ Normal(μ^x, S_x R^x S_x),  γ_r ~ TruncNormal≥0(μ^z, S_z R^z S_z)
//! R ~ LKJ(η),  η ~ χ²(τ),  ω ~ Gamma(α, β)
//! (τ_A, τ_S, τ_D, τ_R) ~ restricted uniform      (when sampled)
//! ```

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapt::{accept, AdaptiveWalk};
use super::draws::{BlockAcceptance, FittedModel, PosteriorDraws};
use super::lkj::{cpc_len, cpc_ln_density, cpc_to_correlation, lkj_ln_density};
use super::normal::ScaledNormal;
use super::null::{ArtistPrior, CountLikelihood, DEFAULT_ETA_DOF};
use super::{ExpectedPaths, McmcConfig};
use crate::dist::{chi_squared_ln_pdf, gamma_ln_pdf};
use crate::envelope::{
    adsr_level, envelope_least_squares, fit_changepoints, unnormalized_prior_ln, ChangePoints,
    ChangepointConfig, EnvelopeFit, NodeValues, Phase, PhaseEffects,
};
use crate::error::{DemandError, Result};
use crate::model::{dot, CovariatePath, DemandCurve};
use crate::rng::DemandRng;

const LEVEL_FLOOR: f64 = 1e-3;
const INIT_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedModelSpec {
    /// Priors of the per-phase effects and of the dispersion.
    pub effects: ArtistPrior,
    pub eta_dof_x: f64,
    pub eta_dof_z: f64,
    /// Prior mean of the log node values; defaults to `ln(max y + 1)`.
    pub node_log_mean: Option<f64>,
    pub node_log_scale: f64,
}

impl ForcedModelSpec {
    pub fn weakly_informative(channels: usize, ambient: usize) -> Self {
        Self {
            effects: ArtistPrior::weakly_informative(channels, ambient),
            eta_dof_x: DEFAULT_ETA_DOF,
            eta_dof_z: DEFAULT_ETA_DOF,
            node_log_mean: None,
            node_log_scale: 1.5,
        }
    }

    fn validate(&self, channels: usize, ambient: usize) -> Result<()> {
        let as_null = super::null::NullModelSpec {
            artists: vec![self.effects.clone()],
            eta_dof_x: self.eta_dof_x,
            eta_dof_z: self.eta_dof_z,
            intercept: None,
        };
        as_null.validate(1, channels, ambient)?;
        if !(self.node_log_scale > 0.0 && self.node_log_scale.is_finite()) {
            return Err(DemandError::Domain("node prior scale must be positive".into()));
        }
        Ok(())
    }

    fn node_mean(&self, curve: &DemandCurve) -> f64 {
        self.node_log_mean
            .unwrap_or_else(|| (curve.values.iter().copied().max().unwrap_or(0) as f64 + 1.0).ln())
    }
}

/// Posterior over node values, per-phase effects, dispersion and optionally
/// change points. Without `changepoints` they are first estimated by least
/// squares; `config.sample_changepoints` then moves them jointly.
pub fn fit_forced_model_bayes(
    curve: &DemandCurve,
    covariates: &CovariatePath,
    changepoints: Option<ChangePoints>,
    spec: &ForcedModelSpec,
    config: &McmcConfig,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let horizon = curve.horizon();
    if !curve.origin {
        return Err(DemandError::Domain("curve must be translated to its release week".into()));
    }
    if horizon < 8 {
        return Err(DemandError::Domain(format!("horizon {horizon} is shorter than 8 weeks")));
    }
    if covariates.horizon() != horizon {
        return Err(DemandError::Configuration(format!(
            "curve spans {horizon} weeks, covariates {}",
            covariates.horizon()
        )));
    }
    spec.validate(covariates.channels(), covariates.ambient())?;
    if !config.prior_only && curve.values.iter().all(|&v| v == 0) {
        return Err(DemandError::fit("every observed count is zero"));
    }
    let cp = match changepoints {
        Some(cp) => {
            cp.check_horizon(horizon)?;
            cp
        }
        None => fit_changepoints(curve, &ChangepointConfig::default())?,
    };
    let layout = Layout {
        channels: covariates.channels(),
        ambient: covariates.ambient(),
        taus: config.sample_changepoints,
    };
    let base = DemandRng::seed_from(config.seed);
    let results: Vec<Result<(Vec<Vec<f64>>, Vec<BlockAcceptance>)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = base.split(c as u64);
            let mut chain = Chain::new(curve, covariates, cp, spec, config, &layout, &mut rng)?;
            let draws = chain.run(&mut rng);
            Ok((draws, chain.acceptance(c)))
        })
        .collect();
    let mut chains = Vec::new();
    let mut acceptance = Vec::new();
    for r in results {
        let (d, a) = r?;
        chains.push(d);
        acceptance.extend(a);
    }
    Ok(PosteriorDraws::assemble(
        layout.names(),
        chains,
        acceptance,
        FittedModel::Forced {
            curve: curve.clone(),
            covariates: covariates.clone(),
            spec: spec.clone(),
            config: *config,
            changepoints: cp,
        },
    ))
}

struct Layout {
    channels: usize,
    ambient: usize,
    taus: bool,
}

impl Layout {
    fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["attack", "sustain", "decay"]
            .iter()
            .map(|p| format!("node[{p}]"))
            .collect();
        for r in 0..4 {
            out.extend((0..self.channels).map(|c| format!("theta[{r},{c}]")));
            out.extend((0..self.ambient).map(|d| format!("gamma[{r},{d}]")));
        }
        out.push("omega".into());
        if self.taus {
            out.extend(Phase::ALL.iter().map(|p| format!("tau[{}]", p.label())));
        }
        out.push("eta_x".into());
        out.push("eta_z".into());
        for (block, dim) in [("corr_x", self.channels), ("corr_z", self.ambient)] {
            for k in 0..dim {
                out.extend((k + 1..dim).map(|i| format!("{block}[{k},{i}]")));
            }
        }
        out
    }
}

/// Every pooled draw as an envelope.
pub fn envelope_draws(draws: &PosteriorDraws) -> Result<Vec<EnvelopeFit>> {
    let FittedModel::Forced { changepoints, covariates, .. } = &draws.model else {
        return Err(DemandError::Configuration("draws are not from a forced fit".into()));
    };
    let reader = DrawReader::new(&draws.names, *changepoints, covariates.channels(), covariates.ambient());
    draws.pooled().map(|v| reader.read(v)).collect()
}

/// Posterior-mean nodes, effects and dispersion at the modal change points.
pub fn posterior_envelope(draws: &PosteriorDraws) -> Result<EnvelopeFit> {
    let fits = envelope_draws(draws)?;
    let mut counts: BTreeMap<[usize; 4], usize> = BTreeMap::new();
    for f in &fits {
        *counts.entry(f.changepoints.as_array()).or_default() += 1;
    }
    let (mode, _) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .ok_or_else(|| DemandError::fit("no draws"))?;
    let cp = ChangePoints::new(mode[0], mode[1], mode[2], mode[3])?;
    let n = fits.len() as f64;
    let avg = |f: &dyn Fn(&EnvelopeFit) -> f64| fits.iter().map(f).sum::<f64>() / n;
    let nodes = NodeValues {
        attack: avg(&|f| f.nodes.attack),
        sustain: avg(&|f| f.nodes.sustain),
        decay: avg(&|f| f.nodes.decay),
    };
    let effects: [PhaseEffects; 4] = std::array::from_fn(|r| {
        let first = &fits[0].effects[r];
        PhaseEffects {
            theta: (0..first.theta.len()).map(|c| avg(&|f| f.effects[r].theta[c])).collect(),
            gamma: (0..first.gamma.len()).map(|d| avg(&|f| f.effects[r].gamma[d])).collect(),
        }
    });
    let mut fit = EnvelopeFit::new(cp, nodes).with_effects(effects);
    fit.dispersion = Some(avg(&|f| f.dispersion.unwrap_or(f64::NAN)));
    Ok(fit)
}

struct DrawReader {
    fixed: ChangePoints,
    channels: usize,
    ambient: usize,
    node: usize,
    omega: usize,
    tau: Option<usize>,
}

impl DrawReader {
    fn new(names: &[String], fixed: ChangePoints, channels: usize, ambient: usize) -> Self {
        let find = |n: &str| names.iter().position(|x| x == n);
        Self {
            fixed,
            channels,
            ambient,
            node: find("node[attack]").expect("forced draws carry nodes"),
            omega: find("omega").expect("forced draws carry omega"),
            tau: find("tau[attack]"),
        }
    }

    fn read(&self, v: &[f64]) -> Result<EnvelopeFit> {
        let cp = match self.tau {
            Some(k) => ChangePoints::new(
                v[k] as usize,
                v[k + 1] as usize,
                v[k + 2] as usize,
                v[k + 3] as usize,
            )?,
            None => self.fixed,
        };
        let nodes = NodeValues { attack: v[self.node], sustain: v[self.node + 1], decay: v[self.node + 2] };
        let width = self.channels + self.ambient;
        let effects = std::array::from_fn(|r| {
            let off = self.node + 3 + r * width;
            PhaseEffects {
                theta: v[off..off + self.channels].to_vec(),
                gamma: v[off + self.channels..off + width].to_vec(),
            }
        });
        let mut fit = EnvelopeFit::new(cp, nodes).with_effects(effects);
        fit.dispersion = Some(v[self.omega]);
        Ok(fit)
    }
}

pub(crate) fn expected_paths(
    model: &FittedModel,
    names: &[String],
    picked: &[&Vec<f64>],
    proposed: &CovariatePath,
) -> Result<ExpectedPaths> {
    let FittedModel::Forced { changepoints, covariates, .. } = model else {
        return Err(DemandError::Configuration("draws are not from a forced fit".into()));
    };
    if proposed.channels() != covariates.channels() || proposed.ambient() != covariates.ambient() {
        return Err(DemandError::Configuration("proposed covariates do not match the fit".into()));
    }
    let reader = DrawReader::new(names, *changepoints, covariates.channels(), covariates.ambient());
    let mut draws = Vec::with_capacity(picked.len());
    let mut dispersions = Vec::with_capacity(picked.len());
    for v in picked {
        let fit = reader.read(v)?;
        draws.push(vec![(0..proposed.horizon())
            .map(|t| fit.mean_with_covariates(t, proposed.x(t), proposed.z(t)))
            .collect()]);
        dispersions.push(vec![fit.dispersion.unwrap_or(f64::INFINITY)]);
    }
    Ok(ExpectedPaths { labels: vec!["envelope".into()], draws, dispersions })
}

struct Chain<'a> {
    spec: &'a ForcedModelSpec,
    config: &'a McmcConfig,
    layout: &'a Layout,
    covariates: &'a CovariatePath,
    horizon: usize,
    lik: CountLikelihood,
    node_mean: f64,
    log_nodes: Vec<f64>,
    /// Per phase `[θ_r, γ_r]`.
    theta: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    log_omega: f64,
    omega_part: f64,
    cp: ChangePoints,
    log_eta_x: f64,
    log_eta_z: f64,
    cpc_x: Vec<f64>,
    cpc_z: Vec<f64>,
    normal_x: ScaledNormal,
    normal_z: ScaledNormal,
    loglik: f64,
    walks: Walks,
    tau_proposed: usize,
    tau_accepted: usize,
}

struct Walks {
    nodes: AdaptiveWalk,
    theta: Vec<AdaptiveWalk>,
    gamma: Vec<AdaptiveWalk>,
    omega: AdaptiveWalk,
    eta_x: AdaptiveWalk,
    eta_z: AdaptiveWalk,
    corr_x: AdaptiveWalk,
    corr_z: AdaptiveWalk,
}

impl<'a> Chain<'a> {
    fn new(
        curve: &DemandCurve,
        covariates: &'a CovariatePath,
        cp: ChangePoints,
        spec: &'a ForcedModelSpec,
        config: &'a McmcConfig,
        layout: &'a Layout,
        rng: &mut DemandRng,
    ) -> Result<Self> {
        let horizon = curve.horizon();
        let y: Vec<f64> = curve.as_f64();
        let (_, ls) = envelope_least_squares(&y, &cp)?;
        let peak = y.iter().cloned().fold(1.0, f64::max);
        let floor = 1e-2 * peak;
        let log_nodes: Vec<f64> = [ls.attack, ls.sustain, ls.decay]
            .iter()
            .map(|v| v.max(floor).ln() + INIT_JITTER * rng.standard_normal())
            .collect();
        let prior = &spec.effects;
        let (c, d) = (layout.channels, layout.ambient);
        let theta = (0..4)
            .map(|_| prior.mean_x.iter().map(|m| m + INIT_JITTER * rng.standard_normal()).collect())
            .collect();
        let gamma = (0..4)
            .map(|_| {
                prior.mean_z.iter().map(|m| (m.max(0.0) + INIT_JITTER * rng.standard_normal()).abs()).collect()
            })
            .collect();
        let log_omega = (prior.dispersion_shape / prior.dispersion_rate).ln() + INIT_JITTER * rng.standard_normal();
        let lik = CountLikelihood::new(&curve.values[1..], !config.prior_only);
        let omega_part = lik.omega_part(log_omega.exp());
        let mut chain = Self {
            spec,
            config,
            layout,
            covariates,
            horizon,
            node_mean: spec.node_mean(curve),
            lik,
            log_nodes,
            theta,
            gamma,
            log_omega,
            omega_part,
            cp,
            log_eta_x: spec.eta_dof_x.ln(),
            log_eta_z: spec.eta_dof_z.ln(),
            cpc_x: vec![0.0; cpc_len(c)],
            cpc_z: vec![0.0; cpc_len(d)],
            normal_x: ScaledNormal::new(&prior.mean_x, &prior.scale_x, &vec![0.0; cpc_len(c)], false)?,
            normal_z: ScaledNormal::new(&prior.mean_z, &prior.scale_z, &vec![0.0; cpc_len(d)], true)?,
            loglik: 0.0,
            walks: Walks {
                nodes: AdaptiveWalk::new(vec![0.05; 3], false),
                theta: (0..4).map(|_| AdaptiveWalk::new(vec![0.1; c], false)).collect(),
                gamma: (0..4).map(|_| AdaptiveWalk::new(vec![0.1; d], true)).collect(),
                omega: AdaptiveWalk::new(vec![0.3], false),
                eta_x: AdaptiveWalk::new(vec![0.5], false),
                eta_z: AdaptiveWalk::new(vec![0.5], false),
                corr_x: AdaptiveWalk::new(vec![0.2; cpc_len(c)], false),
                corr_z: AdaptiveWalk::new(vec![0.2; cpc_len(d)], false),
            },
            tau_proposed: 0,
            tau_accepted: 0,
        };
        chain.loglik = chain.log_likelihood(&chain.log_nodes, &chain.theta, &chain.gamma, chain.log_omega, chain.omega_part, &chain.cp);
        Ok(chain)
    }

    #[allow(clippy::too_many_arguments)]
    fn log_likelihood(
        &self,
        log_nodes: &[f64],
        theta: &[Vec<f64>],
        gamma: &[Vec<f64>],
        log_omega: f64,
        omega_part: f64,
        cp: &ChangePoints,
    ) -> f64 {
        let nodes = NodeValues { attack: log_nodes[0].exp(), sustain: log_nodes[1].exp(), decay: log_nodes[2].exp() };
        let eta: Vec<f64> = (1..self.horizon)
            .map(|t| {
                let level = if t >= cp.release { 0.0 } else { adsr_level(t as f64, cp, &nodes) };
                let r = cp.phase_of(t).index();
                level.max(LEVEL_FLOOR).ln()
                    + dot(&theta[r], self.covariates.x(t))
                    + dot(&gamma[r], self.covariates.z(t))
            })
            .collect();
        self.lik.ln_likelihood(&eta, log_omega.exp(), omega_part)
    }

    fn node_prior(&self, log_nodes: &[f64]) -> f64 {
        log_nodes
            .iter()
            .map(|v| -0.5 * ((v - self.node_mean) / self.spec.node_log_scale).powi(2))
            .sum()
    }

    fn run(&mut self, rng: &mut DemandRng) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.config.kept());
        for it in 0..self.config.warmup + self.config.samples {
            if it == self.config.warmup {
                self.freeze();
            }
            self.sweep(rng, it >= self.config.warmup);
            if it >= self.config.warmup && (it - self.config.warmup).is_multiple_of(self.config.thin) {
                out.push(self.flatten());
            }
        }
        out
    }

    fn freeze(&mut self) {
        let w = &mut self.walks;
        w.theta.iter_mut().chain(&mut w.gamma).for_each(AdaptiveWalk::freeze);
        for walk in [&mut w.nodes, &mut w.omega, &mut w.eta_x, &mut w.eta_z, &mut w.corr_x, &mut w.corr_z] {
            walk.freeze();
        }
    }

    fn sweep(&mut self, rng: &mut DemandRng, sampling: bool) {
        // Node values on the log scale.
        let proposal = self.walks.nodes.propose(&self.log_nodes, rng);
        let ll = self.log_likelihood(&proposal, &self.theta, &self.gamma, self.log_omega, self.omega_part, &self.cp);
        let ok = accept(ll + self.node_prior(&proposal) - self.loglik - self.node_prior(&self.log_nodes), rng);
        if ok {
            self.log_nodes = proposal;
            self.loglik = ll;
        }
        self.walks.nodes.record(ok, &self.log_nodes);

        for r in 0..4 {
            if self.layout.channels > 0 {
                let mut theta = self.theta.clone();
                theta[r] = self.walks.theta[r].propose(&self.theta[r], rng);
                let ll = self.log_likelihood(&self.log_nodes, &theta, &self.gamma, self.log_omega, self.omega_part, &self.cp);
                let ratio = ll + self.normal_x.ln_pdf(&theta[r]) - self.loglik - self.normal_x.ln_pdf(&self.theta[r]);
                let ok = accept(ratio, rng);
                if ok {
                    self.theta = theta;
                    self.loglik = ll;
                }
                self.walks.theta[r].record(ok, &self.theta[r]);
            }
            if self.layout.ambient > 0 {
                let mut gamma = self.gamma.clone();
                gamma[r] = self.walks.gamma[r].propose(&self.gamma[r], rng).into_iter().map(f64::abs).collect();
                let ll = self.log_likelihood(&self.log_nodes, &self.theta, &gamma, self.log_omega, self.omega_part, &self.cp);
                let ratio = ll + self.normal_z.ln_pdf(&gamma[r]) - self.loglik - self.normal_z.ln_pdf(&self.gamma[r]);
                let ok = accept(ratio, rng);
                if ok {
                    self.gamma = gamma;
                    self.loglik = ll;
                }
                self.walks.gamma[r].record(ok, &self.gamma[r]);
            }
        }

        let prior = &self.spec.effects;
        let proposal = self.walks.omega.propose(&[self.log_omega], rng)[0];
        let omega_part = self.lik.omega_part(proposal.exp());
        let ll = self.log_likelihood(&self.log_nodes, &self.theta, &self.gamma, proposal, omega_part, &self.cp);
        let log_prior = |lw: f64| gamma_ln_pdf(lw.exp(), prior.dispersion_shape, prior.dispersion_rate) + lw;
        let ok = proposal.exp() > 0.0
            && proposal.exp().is_finite()
            && accept(ll + log_prior(proposal) - self.loglik - log_prior(self.log_omega), rng);
        if ok {
            self.log_omega = proposal;
            self.omega_part = omega_part;
            self.loglik = ll;
        }
        self.walks.omega.record(ok, &[self.log_omega]);

        if self.layout.taus {
            for k in 0..4 {
                self.move_tau(k, rng, sampling);
            }
        }
        self.update_eta(true, rng);
        self.update_eta(false, rng);
        self.update_correlation(true, rng);
        self.update_correlation(false, rng);
    }

    /// Draws one change point from its full conditional given the others.
    fn move_tau(&mut self, k: usize, rng: &mut DemandRng, sampling: bool) {
        let taus = self.cp.as_array();
        let low = if k == 0 { 1 } else { taus[k - 1] + 1 };
        let high = if k == 3 { self.horizon - 1 } else { taus[k + 1] - 1 };
        let mut options = Vec::with_capacity(high + 1 - low.min(high + 1));
        for v in low..=high {
            let mut t = taus;
            t[k] = v;
            let Ok(cp) = ChangePoints::new(t[0], t[1], t[2], t[3]) else {
                continue;
            };
            let ll = if v == taus[k] {
                self.loglik
            } else {
                self.log_likelihood(&self.log_nodes, &self.theta, &self.gamma, self.log_omega, self.omega_part, &cp)
            };
            options.push((cp, ll, ll + unnormalized_prior_ln(&cp, self.horizon)));
        }
        if sampling {
            self.tau_proposed += 1;
        }
        let top = options.iter().map(|o| o.2).fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return;
        }
        let weights: Vec<f64> = options.iter().map(|o| (o.2 - top).exp()).collect();
        let mut u = rng.uniform() * weights.iter().sum::<f64>();
        let mut pick = options.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let (cp, ll, _) = options[pick];
        if cp != self.cp {
            self.cp = cp;
            self.loglik = ll;
            if sampling {
                self.tau_accepted += 1;
            }
        }
    }

    fn update_eta(&mut self, x_side: bool, rng: &mut DemandRng) {
        let (dof, dim, current, cpc) = if x_side {
            (self.spec.eta_dof_x, self.layout.channels, self.log_eta_x, &self.cpc_x)
        } else {
            (self.spec.eta_dof_z, self.layout.ambient, self.log_eta_z, &self.cpc_z)
        };
        let target = |le: f64| chi_squared_ln_pdf(le.exp(), dof) + lkj_ln_density(dim, cpc, le.exp()) + le;
        let walk = if x_side { &mut self.walks.eta_x } else { &mut self.walks.eta_z };
        let proposal = walk.propose(&[current], rng)[0];
        let ok = proposal.exp() > 0.0 && accept(target(proposal) - target(current), rng);
        let value = if ok { proposal } else { current };
        walk.record(ok, &[value]);
        if x_side {
            self.log_eta_x = value;
        } else {
            self.log_eta_z = value;
        }
    }

    fn update_correlation(&mut self, x_side: bool, rng: &mut DemandRng) {
        let dim = if x_side { self.layout.channels } else { self.layout.ambient };
        if dim < 2 {
            return;
        }
        let prior = &self.spec.effects;
        let (cpc, eta, normal, effects) = if x_side {
            (&self.cpc_x, self.log_eta_x.exp(), &self.normal_x, &self.theta)
        } else {
            (&self.cpc_z, self.log_eta_z.exp(), &self.normal_z, &self.gamma)
        };
        let target = |z: &[f64], n: &ScaledNormal| {
            cpc_ln_density(dim, z, eta)
                + z.iter().map(|v| (1.0 - v * v).ln()).sum::<f64>()
                + effects.iter().map(|e| n.ln_pdf(e)).sum::<f64>()
        };
        let current_w: Vec<f64> = cpc.iter().map(|z| z.atanh()).collect();
        let walk = if x_side { &self.walks.corr_x } else { &self.walks.corr_z };
        let proposal: Vec<f64> = walk.propose(&current_w, rng).iter().map(|w| w.tanh()).collect();
        let built = if proposal.iter().all(|z| z.abs() < 1.0) {
            if x_side {
                ScaledNormal::new(&prior.mean_x, &prior.scale_x, &proposal, false).ok()
            } else {
                ScaledNormal::new(&prior.mean_z, &prior.scale_z, &proposal, true).ok()
            }
        } else {
            None
        };
        let accepted = built.and_then(|n| accept(target(&proposal, &n) - target(cpc, normal), rng).then_some(n));
        let ok = accepted.is_some();
        if let Some(n) = accepted {
            if x_side {
                self.cpc_x = proposal;
                self.normal_x = n;
            } else {
                self.cpc_z = proposal;
                self.normal_z = n;
            }
        }
        let now: Vec<f64> = if x_side { &self.cpc_x } else { &self.cpc_z }.iter().map(|z| z.atanh()).collect();
        let walk = if x_side { &mut self.walks.corr_x } else { &mut self.walks.corr_z };
        walk.record(ok, &now);
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.log_nodes.iter().map(|v| v.exp()).collect();
        for r in 0..4 {
            out.extend(&self.theta[r]);
            out.extend(&self.gamma[r]);
        }
        out.push(self.log_omega.exp());
        if self.layout.taus {
            out.extend(self.cp.as_array().iter().map(|&t| t as f64));
        }
        out.push(self.log_eta_x.exp());
        out.push(self.log_eta_z.exp());
        for (cpc, dim) in [(&self.cpc_x, self.layout.channels), (&self.cpc_z, self.layout.ambient)] {
            let r = cpc_to_correlation(dim, cpc);
            for k in 0..dim {
                out.extend((k + 1..dim).map(|i| r[(k, i)]));
            }
        }
        out
    }

    fn acceptance(&self, chain: usize) -> Vec<BlockAcceptance> {
        let w = &self.walks;
        let mut out = Vec::new();
        let mut push = |block: String, walk: &AdaptiveWalk| {
            if let Some(rate) = walk.acceptance().filter(|_| walk.dim() > 0) {
                out.push(BlockAcceptance { chain, block, rate });
            }
        };
        push("node".into(), &w.nodes);
        for r in 0..4 {
            push(format!("theta[{r}]"), &w.theta[r]);
            push(format!("gamma[{r}]"), &w.gamma[r]);
        }
        push("omega".into(), &w.omega);
        push("eta_x".into(), &w.eta_x);
        push("eta_z".into(), &w.eta_z);
        push("corr_x".into(), &w.corr_x);
        push("corr_z".into(), &w.corr_z);
        if self.tau_proposed > 0 {
            out.push(BlockAcceptance {
                chain,
                block: "tau".into(),
                rate: self.tau_accepted as f64 / self.tau_proposed as f64,
            });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::sample_negbin;
    use crate::envelope::changepoint_prior_logpmf;
    use crate::model::Stratum;

    fn synthetic(cp: ChangePoints, nodes: NodeValues, horizon: usize, seed: u64) -> DemandCurve {
        let fit = EnvelopeFit::new(cp, nodes);
        let mut rng = DemandRng::seed_from(seed);
        let values = (0..horizon).map(|t| sample_negbin(fit.level(t as f64), 50.0, &mut rng)).collect();
        DemandCurve::new("song", Stratum::Aggregate, values)
    }

    fn config(seed: u64) -> McmcConfig {
        McmcConfig { chains: 2, warmup: 800, samples: 800, thin: 1, seed, ..Default::default() }
    }

    #[test]
    fn recovers_nodes_at_fixed_changepoints() {
        let cp = ChangePoints::new(5, 15, 25, 39).unwrap();
        let nodes = NodeValues { attack: 400.0, sustain: 300.0, decay: 120.0 };
        let curve = synthetic(cp, nodes, 40, 3);
        let spec = ForcedModelSpec::weakly_informative(0, 0);
        let draws = fit_forced_model_bayes(&curve, &CovariatePath::empty(40), Some(cp), &spec, &config(1)).unwrap();
        let fit = posterior_envelope(&draws).unwrap();
        assert_eq!(fit.changepoints, cp);
        for (est, truth) in [(fit.nodes.attack, 400.0), (fit.nodes.sustain, 300.0), (fit.nodes.decay, 120.0)] {
            assert!((est / truth - 1.0).abs() < 0.15, "{est} vs {truth}");
        }
        assert!(draws.max_rhat() < 1.1, "{:?}", draws.warnings);
    }

    #[test]
    fn joint_tau_sampling_finds_the_attack_knot() {
        let cp = ChangePoints::new(6, 15, 25, 39).unwrap();
        let truth = EnvelopeFit::new(cp, NodeValues { attack: 900.0, sustain: 400.0, decay: 150.0 });
        let mut rng = DemandRng::seed_from(4);
        let values = (0..40).map(|t| sample_negbin(truth.level(t as f64), 200.0, &mut rng)).collect();
        let curve = DemandCurve::new("song", Stratum::Aggregate, values);
        let mut spec = ForcedModelSpec::weakly_informative(0, 0);
        spec.effects.dispersion_shape = 200.0;
        spec.effects.dispersion_rate = 1.0;
        let start = ChangePoints::new(3, 12, 28, 38).unwrap();
        let cfg = McmcConfig { sample_changepoints: true, ..config(2) };
        let draws = fit_forced_model_bayes(&curve, &CovariatePath::empty(40), Some(start), &spec, &cfg).unwrap();
        let fit = posterior_envelope(&draws).unwrap();
        assert!(fit.changepoints.attack.abs_diff(6) <= 1, "{:?}", fit.changepoints);
        assert!(fit.changepoints.sustain.abs_diff(15) <= 2, "{:?}", fit.changepoints);
    }

    #[test]
    fn prior_only_taus_follow_the_prior() {
        let horizon = 8;
        let curve = DemandCurve::new("s", Stratum::Aggregate, vec![0, 3, 5, 4, 3, 2, 1, 0]);
        let spec = ForcedModelSpec::weakly_informative(0, 0);
        let cfg = McmcConfig {
            chains: 4,
            warmup: 500,
            samples: 20_000,
            thin: 1,
            seed: 9,
            prior_only: true,
            sample_changepoints: true,
        };
        let start = ChangePoints::new(1, 3, 5, 7).unwrap();
        let draws = fit_forced_model_bayes(&curve, &CovariatePath::empty(horizon), Some(start), &spec, &cfg).unwrap();
        let col = draws.column("tau[attack]").unwrap();
        let n = col.len() as f64;
        // Marginal of τ_A under the prior, by enumeration.
        for a in 1..=horizon - 5 {
            let mut mass = 0.0;
            for s in a + 1..horizon {
                for d in s + 1..horizon {
                    for r in d + 1..horizon {
                        if let Ok(cp) = ChangePoints::new(a, s, d, r) {
                            mass += changepoint_prior_logpmf(&cp, horizon).exp();
                        }
                    }
                }
            }
            let freq = col.iter().filter(|&&v| v as usize == a).count() as f64 / n;
            assert!((freq - mass).abs() < 0.03, "τ_A={a}: {freq} vs {mass}");
        }
    }
}
