//! Bayesian hierarchies fit by adaptive Metropolis-within-Gibbs.
//!
//! The null hierarchy gives each segment time-invariant effects drawn from
//! artist-level correlated normals; the forced hierarchy multiplies the
//! four-phase envelope by per-phase effects. Chains run in parallel, each on
//! its own RNG stream split from the configured seed.

mod adapt;
pub mod draws;
pub mod forced;
pub mod lkj;
pub mod normal;
pub mod null;

use serde::{Deserialize, Serialize};

use crate::dist::sample_negbin;
use crate::error::{DemandError, Result};
use crate::model::CovariatePath;
use crate::rng::DemandRng;

pub use adapt::TARGET_ACCEPTANCE;
pub use draws::{FittedModel, PosteriorDraws, ScalarDiagnostic};
pub use forced::{
    envelope_draws, fit_forced_model_bayes, posterior_envelope, ForcedModelSpec,
};
pub use lkj::sample_lkj;
pub use null::{
    fit_null_model, remove_last_week, sample_prior, simulate_null_data, update_with_new_week,
    ArtistPrior, ArtistSeries, InterceptPrior, NewWeek, NullLayout, NullModelData, NullModelSpec,
    NullParameters, SegmentSeries, WeekObservation,
};

const MAX_PREDICTIVE_DRAWS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    /// Drop the likelihood so the sampler targets the prior.
    pub prior_only: bool,
    /// Forced model only: sample change points instead of fixing them.
    pub sample_changepoints: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 2000,
            samples: 2000,
            thin: 1,
            seed: 0,
            prior_only: false,
            sample_changepoints: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(DemandError::Configuration("at least two chains are required".into()));
        }
        if self.samples == 0 || self.thin == 0 {
            return Err(DemandError::Configuration("samples and thin must be positive".into()));
        }
        if self.samples / self.thin < 4 {
            return Err(DemandError::Configuration("fewer than 4 kept draws per chain".into()));
        }
        Ok(())
    }

    pub(crate) fn kept(&self) -> usize {
        self.samples.div_ceil(self.thin)
    }
}

/// Pointwise quantile curves for one series; `bands[q][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurves {
    pub label: String,
    /// Posterior mean of the expected count per week.
    pub mean: Vec<f64>,
    pub bands: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveBands {
    pub quantiles: Vec<f64>,
    pub horizon: usize,
    pub series: Vec<QuantileCurves>,
    pub aggregate: QuantileCurves,
}

/// Simulated demand under each posterior draw at `proposed` covariates,
/// summarized by the requested pointwise quantiles. Every segment of a null
/// fit receives the same covariate path.
pub fn posterior_predictive(
    draws: &PosteriorDraws,
    proposed: &CovariatePath,
    quantiles: &[f64],
    seed: u64,
) -> Result<PredictiveBands> {
    check_quantiles(quantiles)?;
    let means = expected_paths(draws, proposed)?;
    summarize(means, quantiles, proposed.horizon(), seed)
}

/// Posterior mean of aggregate expected demand per week.
pub fn predictive_mean(draws: &PosteriorDraws, proposed: &CovariatePath) -> Result<Vec<f64>> {
    let paths = expected_paths(draws, proposed)?;
    let horizon = proposed.horizon();
    let n = paths.draws.len() as f64;
    let mut out = vec![0.0; horizon];
    for draw in &paths.draws {
        for series in draw {
            for (o, m) in out.iter_mut().zip(series) {
                *o += m / n;
            }
        }
    }
    Ok(out)
}

/// Per-draw expected counts `draws[d][series][t]` plus each draw's dispersions.
pub(crate) struct ExpectedPaths {
    labels: Vec<String>,
    draws: Vec<Vec<Vec<f64>>>,
    dispersions: Vec<Vec<f64>>,
}

fn expected_paths(draws: &PosteriorDraws, proposed: &CovariatePath) -> Result<ExpectedPaths> {
    let picked = pick_draws(draws);
    match &draws.model {
        FittedModel::Null { data, spec, .. } => {
            let layout = NullLayout::new(data, spec)?;
            null::expected_paths(&layout, &picked, proposed)
        }
        FittedModel::Forced { .. } => {
            forced::expected_paths(&draws.model, &draws.names, &picked, proposed)
        }
    }
}

fn pick_draws(draws: &PosteriorDraws) -> Vec<&Vec<f64>> {
    let all: Vec<&Vec<f64>> = draws.pooled().collect();
    if all.len() <= MAX_PREDICTIVE_DRAWS {
        return all;
    }
    let stride = all.len() as f64 / MAX_PREDICTIVE_DRAWS as f64;
    (0..MAX_PREDICTIVE_DRAWS)
        .map(|i| all[(i as f64 * stride) as usize])
        .collect()
}

fn check_quantiles(quantiles: &[f64]) -> Result<()> {
    if quantiles.is_empty() {
        return Err(DemandError::Domain("no quantiles requested".into()));
    }
    if quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(DemandError::Domain("quantiles must lie in (0, 1)".into()));
    }
    if quantiles.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DemandError::Domain("quantiles must be strictly increasing".into()));
    }
    Ok(())
}

fn summarize(
    paths: ExpectedPaths,
    quantiles: &[f64],
    horizon: usize,
    seed: u64,
) -> Result<PredictiveBands> {
    let mut rng = DemandRng::seed_from(seed);
    let series_count = paths.labels.len();
    let n = paths.draws.len();
    // sims[s][t][d]; the last series is the aggregate.
    let mut sims = vec![vec![Vec::with_capacity(n); horizon]; series_count + 1];
    let mut means = vec![vec![0.0; horizon]; series_count + 1];
    for (draw, omegas) in paths.draws.iter().zip(&paths.dispersions) {
        let mut total = vec![0.0; horizon];
        for (s, (series, omega)) in draw.iter().zip(omegas).enumerate() {
            for t in 0..horizon {
                let y = sample_negbin(series[t], *omega, &mut rng) as f64;
                sims[s][t].push(y);
                total[t] += y;
                means[s][t] += series[t] / n as f64;
                means[series_count][t] += series[t] / n as f64;
            }
        }
        for (t, y) in total.into_iter().enumerate() {
            sims[series_count][t].push(y);
        }
    }
    let mut curves: Vec<QuantileCurves> = sims
        .into_iter()
        .zip(means)
        .enumerate()
        .map(|(s, (mut weeks, mean))| {
            weeks.iter_mut().for_each(|v| v.sort_by(f64::total_cmp));
            let bands = quantiles
                .iter()
                .map(|&q| weeks.iter().map(|v| draws::sorted_quantile(v, q)).collect())
                .collect();
            let label = paths.labels.get(s).cloned().unwrap_or_else(|| "aggregate".into());
            QuantileCurves { label, mean, bands }
        })
        .collect();
    let aggregate = curves.pop().expect("aggregate series present");
    Ok(PredictiveBands { quantiles: quantiles.to_vec(), horizon, series: curves, aggregate })
}
