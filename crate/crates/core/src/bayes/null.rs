//! The null hierarchy.
//!
//! ```text
//! y_t^{j[a]} ~ NegBin(exp(θ^{j[a]}·x_t + γ^{j[a]}·z_t), ω^{j[a]})
//! θ^{j[a]}   ~ Normal(μ_a^x, S_x R_a^x S_x)
//! γ^{j[a]}   ~ Normal(μ_a^z, S_z R_a^z S_z) restricted to γ ≥ 0
//! R_a^x ~ LKJ(η_a^x),  R_a^z ~ LKJ(η_a^z)
//! η_a^x ~ χ²(τ^x),     η_a^z ~ χ²(τ^z)
//! ω^{j[a]} ~ Gamma(α_a, β_a)
//! ```
//!
//! An optional per-segment intercept with its own normal prior can be added
//! to the linear predictor.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::adapt::{accept, AdaptiveWalk};
use super::draws::{BlockAcceptance, FittedModel, PosteriorDraws};
use super::lkj::{correlation_to_cpc, cpc_len, cpc_ln_density, cpc_to_correlation, lkj_ln_density, sample_lkj_cpc};
use super::normal::ScaledNormal;
use super::{ExpectedPaths, McmcConfig};
use crate::dist::{chi_squared_ln_pdf, gamma_ln_pdf, ln_factorial, sample_gamma, sample_negbin};
use crate::error::{DemandError, Result};
use crate::model::{dot, CovariatePath, DemandCurve, Stratum};
use crate::rng::DemandRng;

pub const DEFAULT_ETA_DOF: f64 = 4.0;
pub const DEFAULT_DISPERSION_SHAPE: f64 = 2.0;
pub const DEFAULT_DISPERSION_RATE: f64 = 0.5;
const MIN_HORIZON: usize = 8;
const INIT_JITTER: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSeries {
    pub curve: DemandCurve,
    pub covariates: CovariatePath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtistSeries {
    pub artist_id: String,
    pub segments: Vec<SegmentSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullModelData {
    pub artists: Vec<ArtistSeries>,
}

impl NullModelData {
    pub fn horizon(&self) -> usize {
        self.artists
            .first()
            .and_then(|a| a.segments.first())
            .map_or(0, |s| s.curve.horizon())
    }

    fn segments(&self) -> impl Iterator<Item = &SegmentSeries> {
        self.artists.iter().flat_map(|a| &a.segments)
    }

    fn validate(&self) -> Result<(usize, usize)> {
        if self.artists.is_empty() || self.artists.iter().any(|a| a.segments.is_empty()) {
            return Err(DemandError::Configuration(
                "need at least one artist with at least one segment".into(),
            ));
        }
        let first = &self.artists[0].segments[0];
        let (channels, ambient) = (first.covariates.channels(), first.covariates.ambient());
        let horizon = self.horizon();
        if horizon < MIN_HORIZON {
            return Err(DemandError::Domain(format!(
                "horizon {horizon} is shorter than {MIN_HORIZON} weeks"
            )));
        }
        for s in self.segments() {
            if s.curve.horizon() != horizon || s.covariates.horizon() != horizon {
                return Err(DemandError::Domain(
                    "all curves and covariate paths must share one horizon".into(),
                ));
            }
            if s.covariates.channels() != channels || s.covariates.ambient() != ambient {
                return Err(DemandError::Configuration(
                    "all segments must share covariate dimensions".into(),
                ));
            }
        }
        Ok((channels, ambient))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtistPrior {
    pub mean_x: Vec<f64>,
    pub scale_x: Vec<f64>,
    pub mean_z: Vec<f64>,
    pub scale_z: Vec<f64>,
    /// `α_a`.
    pub dispersion_shape: f64,
    /// `β_a` (a rate).
    pub dispersion_rate: f64,
}

impl ArtistPrior {
    pub fn weakly_informative(channels: usize, ambient: usize) -> Self {
        Self {
            mean_x: vec![0.0; channels],
            scale_x: vec![1.0; channels],
            mean_z: vec![0.0; ambient],
            scale_z: vec![1.0; ambient],
            dispersion_shape: DEFAULT_DISPERSION_SHAPE,
            dispersion_rate: DEFAULT_DISPERSION_RATE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterceptPrior {
    pub mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullModelSpec {
    pub artists: Vec<ArtistPrior>,
    /// `τ^x`.
    pub eta_dof_x: f64,
    /// `τ^z`.
    pub eta_dof_z: f64,
    pub intercept: Option<InterceptPrior>,
}

impl NullModelSpec {
    pub fn weakly_informative(artists: usize, channels: usize, ambient: usize) -> Self {
        Self {
            artists: vec![ArtistPrior::weakly_informative(channels, ambient); artists],
            eta_dof_x: DEFAULT_ETA_DOF,
            eta_dof_z: DEFAULT_ETA_DOF,
            intercept: None,
        }
    }

    pub fn with_intercept(mut self, mean: f64, scale: f64) -> Self {
        self.intercept = Some(InterceptPrior { mean, scale });
        self
    }

    pub fn validate(&self, artists: usize, channels: usize, ambient: usize) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.artists.len() != artists {
            return Err(DemandError::Configuration(format!(
                "{} artist priors for {artists} artists",
                self.artists.len()
            )));
        }
        if !positive(self.eta_dof_x) || !positive(self.eta_dof_z) {
            return Err(DemandError::Domain("χ² degrees of freedom must be positive".into()));
        }
        if let Some(i) = self.intercept {
            if !positive(i.scale) || !i.mean.is_finite() {
                return Err(DemandError::Domain("intercept prior needs a positive scale".into()));
            }
        }
        for p in &self.artists {
            if p.mean_x.len() != channels || p.scale_x.len() != channels {
                return Err(DemandError::Configuration(format!(
                    "θ prior must have {channels} entries"
                )));
            }
            if p.mean_z.len() != ambient || p.scale_z.len() != ambient {
                return Err(DemandError::Configuration(format!(
                    "γ prior must have {ambient} entries"
                )));
            }
            if !p.scale_x.iter().chain(&p.scale_z).all(|s| positive(*s))
                || !positive(p.dispersion_shape)
                || !positive(p.dispersion_rate)
            {
                return Err(DemandError::Domain("prior scales must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentParameters {
    pub intercept: Option<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub omega: f64,
}

impl SegmentParameters {
    pub fn linear_predictor(&self, x: &[f64], z: &[f64]) -> f64 {
        self.intercept.unwrap_or(0.0) + dot(&self.theta, x) + dot(&self.gamma, z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtistParameters {
    pub eta_x: f64,
    pub eta_z: f64,
    /// Partial correlations of `R^x`.
    pub cpc_x: Vec<f64>,
    pub cpc_z: Vec<f64>,
    pub segments: Vec<SegmentParameters>,
}

impl ArtistParameters {
    pub fn correlation_x(&self) -> DMatrix<f64> {
        cpc_to_correlation(dimension_of(self.cpc_x.len()), &self.cpc_x)
    }

    pub fn correlation_z(&self) -> DMatrix<f64> {
        cpc_to_correlation(dimension_of(self.cpc_z.len()), &self.cpc_z)
    }
}

fn dimension_of(cpc: usize) -> usize {
    (1..).find(|d| cpc_len(*d) >= cpc).expect("finite")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullParameters {
    pub artists: Vec<ArtistParameters>,
}

/// Dimensions of a null fit and the scalar order of its draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NullLayout {
    pub segments: Vec<usize>,
    pub channels: usize,
    pub ambient: usize,
    pub intercept: bool,
}

impl NullLayout {
    pub fn new(data: &NullModelData, spec: &NullModelSpec) -> Result<Self> {
        let (channels, ambient) = data.validate()?;
        spec.validate(data.artists.len(), channels, ambient)?;
        Ok(Self {
            segments: data.artists.iter().map(|a| a.segments.len()).collect(),
            channels,
            ambient,
            intercept: spec.intercept.is_some(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (a, &segments) in self.segments.iter().enumerate() {
            for j in 0..segments {
                if self.intercept {
                    out.push(format!("intercept[{a},{j}]"));
                }
                out.extend((0..self.channels).map(|c| format!("theta[{a},{j},{c}]")));
                out.extend((0..self.ambient).map(|d| format!("gamma[{a},{j},{d}]")));
                out.push(format!("omega[{a},{j}]"));
            }
            out.push(format!("eta_x[{a}]"));
            out.push(format!("eta_z[{a}]"));
            for (block, dim) in [("corr_x", self.channels), ("corr_z", self.ambient)] {
                for k in 0..dim {
                    out.extend((k + 1..dim).map(|i| format!("{block}[{a},{k},{i}]")));
                }
            }
        }
        out
    }

    pub fn flatten(&self, p: &NullParameters) -> Vec<f64> {
        let mut out = Vec::new();
        for artist in &p.artists {
            for s in &artist.segments {
                out.extend(s.intercept);
                out.extend(&s.theta);
                out.extend(&s.gamma);
                out.push(s.omega);
            }
            out.push(artist.eta_x);
            out.push(artist.eta_z);
            for r in [artist.correlation_x(), artist.correlation_z()] {
                let d = r.nrows();
                for k in 0..d {
                    out.extend((k + 1..d).map(|i| r[(k, i)]));
                }
            }
        }
        out
    }

    pub fn unflatten(&self, v: &[f64]) -> NullParameters {
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = &v[pos..pos + n];
            pos += n;
            s.to_vec()
        };
        let artists = self
            .segments
            .iter()
            .map(|&count| {
                let segments = (0..count)
                    .map(|_| SegmentParameters {
                        intercept: self.intercept.then(|| take(1)[0]),
                        theta: take(self.channels),
                        gamma: take(self.ambient),
                        omega: take(1)[0],
                    })
                    .collect();
                let eta_x = take(1)[0];
                let eta_z = take(1)[0];
                let cpc_x = cpc_from_upper(self.channels, &take(cpc_len(self.channels)));
                let cpc_z = cpc_from_upper(self.ambient, &take(cpc_len(self.ambient)));
                ArtistParameters { eta_x, eta_z, cpc_x, cpc_z, segments }
            })
            .collect();
        NullParameters { artists }
    }
}

fn cpc_from_upper(dim: usize, upper: &[f64]) -> Vec<f64> {
    let mut r = DMatrix::identity(dim, dim);
    let mut it = upper.iter();
    for k in 0..dim {
        for i in k + 1..dim {
            let v = *it.next().expect("upper triangle length");
            r[(k, i)] = v;
            r[(i, k)] = v;
        }
    }
    correlation_to_cpc(&r)
        .into_iter()
        .map(|z| if z.is_finite() { z.clamp(-0.99, 0.99) } else { 0.0 })
        .collect()
}

/// One joint draw from the prior.
pub fn sample_prior(spec: &NullModelSpec, layout: &NullLayout, rng: &mut DemandRng) -> Result<NullParameters> {
    spec.validate(layout.segments.len(), layout.channels, layout.ambient)?;
    let artists = spec
        .artists
        .iter()
        .zip(&layout.segments)
        .map(|(prior, &count)| {
            let eta_x = sample_gamma(spec.eta_dof_x / 2.0, 0.5, rng);
            let eta_z = sample_gamma(spec.eta_dof_z / 2.0, 0.5, rng);
            let cpc_x = sample_lkj_cpc(layout.channels, eta_x, rng)?;
            let cpc_z = sample_lkj_cpc(layout.ambient, eta_z, rng)?;
            let normal_x = ScaledNormal::new(&prior.mean_x, &prior.scale_x, &cpc_x, false)?;
            let normal_z = ScaledNormal::new(&prior.mean_z, &prior.scale_z, &cpc_z, true)?;
            let segments = (0..count)
                .map(|_| SegmentParameters {
                    intercept: spec.intercept.map(|i| i.mean + i.scale * rng.standard_normal()),
                    theta: normal_x.sample(rng),
                    gamma: normal_z.sample(rng),
                    omega: sample_gamma(prior.dispersion_shape, prior.dispersion_rate, rng),
                })
                .collect();
            Ok(ArtistParameters { eta_x, eta_z, cpc_x, cpc_z, segments })
        })
        .collect::<Result<_>>()?;
    Ok(NullParameters { artists })
}

/// Demand curves drawn from the likelihood at fixed parameters.
/// `covariates[a][j]` is the path of segment `j` of artist `a`.
pub fn simulate_null_data(
    params: &NullParameters,
    covariates: &[Vec<CovariatePath>],
    rng: &mut DemandRng,
) -> Result<NullModelData> {
    if covariates.len() != params.artists.len()
        || covariates.iter().zip(&params.artists).any(|(c, a)| c.len() != a.segments.len())
    {
        return Err(DemandError::Configuration(
            "covariate paths do not match the parameter layout".into(),
        ));
    }
    let artists = params
        .artists
        .iter()
        .zip(covariates)
        .enumerate()
        .map(|(a, (artist, paths))| ArtistSeries {
            artist_id: format!("artist-{a}"),
            segments: artist
                .segments
                .iter()
                .zip(paths)
                .enumerate()
                .map(|(j, (seg, path))| {
                    let values = (0..path.horizon())
                        .map(|t| {
                            let mu = seg.linear_predictor(path.x(t), path.z(t)).exp();
                            sample_negbin(mu, seg.omega, rng)
                        })
                        .collect();
                    SegmentSeries {
                        curve: DemandCurve::new(format!("artist-{a}"), Stratum::Segment(j as u32), values),
                        covariates: path.clone(),
                    }
                })
                .collect(),
        })
        .collect();
    Ok(NullModelData { artists })
}

/// Posterior draws for the null hierarchy.
pub fn fit_null_model(data: &NullModelData, spec: &NullModelSpec, config: &McmcConfig) -> Result<PosteriorDraws> {
    fit_from(data, spec, config, None)
}

fn fit_from(
    data: &NullModelData,
    spec: &NullModelSpec,
    config: &McmcConfig,
    warm: Option<NullParameters>,
) -> Result<PosteriorDraws> {
    config.validate()?;
    let layout = NullLayout::new(data, spec)?;
    if !config.prior_only && data.segments().all(|s| s.curve.values.iter().all(|&v| v == 0)) {
        return Err(DemandError::fit("every observed count is zero"));
    }
    let base = DemandRng::seed_from(config.seed);
    let results: Vec<Result<(Vec<Vec<f64>>, Vec<BlockAcceptance>)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = base.split(c as u64);
            let mut chain = Chain::new(data, spec, &layout, config, warm.as_ref(), &mut rng)?;
            let draws = chain.run(&mut rng);
            let acceptance = chain.acceptance(c);
            Ok((draws, acceptance))
        })
        .collect();
    let mut chains = Vec::with_capacity(config.chains);
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
        FittedModel::Null { data: data.clone(), spec: spec.clone(), config: *config },
    ))
}

/// One new week of counts and covariates, `artists[a][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewWeek {
    pub week: usize,
    pub artists: Vec<Vec<WeekObservation>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekObservation {
    pub count: u64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// Refit after appending one week, starting every chain from the previous
/// posterior means.
pub fn update_with_new_week(draws: &PosteriorDraws, week: &NewWeek) -> Result<PosteriorDraws> {
    let FittedModel::Null { data, spec, config } = &draws.model else {
        return Err(DemandError::Configuration("weekly updates apply to null fits".into()));
    };
    let horizon = data.horizon();
    if week.week != horizon {
        return Err(DemandError::Domain(format!(
            "new week {} does not follow the fitted horizon {horizon}",
            week.week
        )));
    }
    if week.artists.len() != data.artists.len()
        || week.artists.iter().zip(&data.artists).any(|(w, a)| w.len() != a.segments.len())
    {
        return Err(DemandError::Configuration("new week does not match the segment layout".into()));
    }
    let mut next = data.clone();
    for (artist, obs) in next.artists.iter_mut().zip(&week.artists) {
        for (seg, o) in artist.segments.iter_mut().zip(obs) {
            seg.covariates.push(o.x.clone(), o.z.clone())?;
            seg.curve.values.push(o.count);
        }
    }
    let layout = NullLayout::new(data, spec)?;
    let warm = layout.unflatten(&draws.means());
    fit_from(&next, spec, config, Some(warm))
}

/// Cold refit without the last week.
pub fn remove_last_week(draws: &PosteriorDraws) -> Result<PosteriorDraws> {
    let FittedModel::Null { data, spec, config } = &draws.model else {
        return Err(DemandError::Configuration("weekly updates apply to null fits".into()));
    };
    let horizon = data.horizon();
    if horizon <= MIN_HORIZON {
        return Err(DemandError::Domain(format!(
            "cannot drop a week from a {horizon}-week fit"
        )));
    }
    let mut prev = data.clone();
    for seg in prev.artists.iter_mut().flat_map(|a| a.segments.iter_mut()) {
        seg.curve.values.truncate(horizon - 1);
        seg.covariates.truncate(horizon - 1);
    }
    fit_from(&prev, spec, config, None)
}

pub(crate) fn expected_paths(
    layout: &NullLayout,
    picked: &[&Vec<f64>],
    proposed: &CovariatePath,
) -> Result<ExpectedPaths> {
    if proposed.channels() != layout.channels || proposed.ambient() != layout.ambient {
        return Err(DemandError::Configuration(format!(
            "proposed path has {}/{} covariates, fit has {}/{}",
            proposed.channels(),
            proposed.ambient(),
            layout.channels,
            layout.ambient
        )));
    }
    let labels = layout
        .segments
        .iter()
        .enumerate()
        .flat_map(|(a, &n)| (0..n).map(move |j| format!("artist {a} segment {j}")))
        .collect();
    let mut draws = Vec::with_capacity(picked.len());
    let mut dispersions = Vec::with_capacity(picked.len());
    for v in picked {
        let p = layout.unflatten(v);
        let segs: Vec<&SegmentParameters> = p.artists.iter().flat_map(|a| &a.segments).collect();
        draws.push(
            segs.iter()
                .map(|s| {
                    (0..proposed.horizon())
                        .map(|t| s.linear_predictor(proposed.x(t), proposed.z(t)).exp())
                        .collect()
                })
                .collect(),
        );
        dispersions.push(segs.iter().map(|s| s.omega).collect());
    }
    Ok(ExpectedPaths { labels, draws, dispersions })
}

/// `ln Σ` of `ω + e^η` without overflow.
pub(crate) fn ln_omega_plus_exp(ln_omega: f64, eta: f64) -> f64 {
    let (hi, lo) = if ln_omega > eta { (ln_omega, eta) } else { (eta, ln_omega) };
    hi + (lo - hi).exp().ln_1p()
}

/// Count data with the `ω`-only part of the NegBin log likelihood cached.
#[derive(Debug, Clone)]
pub(crate) struct CountLikelihood {
    y: Vec<f64>,
    ln_factorials: f64,
    enabled: bool,
}

impl CountLikelihood {
    pub fn new(y: &[u64], enabled: bool) -> Self {
        Self {
            y: y.iter().map(|&v| v as f64).collect(),
            ln_factorials: y.iter().map(|&v| ln_factorial(v)).sum(),
            enabled,
        }
    }

    /// Terms depending on `ω` alone.
    pub fn omega_part(&self, omega: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let n = self.y.len() as f64;
        self.y.iter().map(|&y| ln_gamma(y + omega)).sum::<f64>() - n * ln_gamma(omega)
            + n * omega * omega.ln()
            - self.ln_factorials
    }

    /// Full log likelihood given linear predictors `eta[t]`.
    pub fn ln_likelihood(&self, eta: &[f64], omega: f64, omega_part: f64) -> f64 {
        if !self.enabled {
            return 0.0;
        }
        let ln_omega = omega.ln();
        let kernel: f64 = self
            .y
            .iter()
            .zip(eta)
            .map(|(&y, &e)| y * e - (omega + y) * ln_omega_plus_exp(ln_omega, e))
            .sum();
        omega_part + kernel
    }
}

struct SegmentState {
    coef: Vec<f64>,
    gamma: Vec<f64>,
    log_omega: f64,
    coef_part: Vec<f64>,
    gamma_part: Vec<f64>,
    omega_part: f64,
    loglik: f64,
}

struct SegmentData {
    lik: CountLikelihood,
    /// Rows `[1?, x_t]`.
    coef_rows: Vec<Vec<f64>>,
    z_rows: Vec<Vec<f64>>,
}

struct ArtistState {
    log_eta_x: f64,
    log_eta_z: f64,
    cpc_x: Vec<f64>,
    cpc_z: Vec<f64>,
    normal_x: ScaledNormal,
    normal_z: ScaledNormal,
    segments: Vec<SegmentState>,
}

struct ArtistWalks {
    coef: Vec<AdaptiveWalk>,
    gamma: Vec<AdaptiveWalk>,
    omega: Vec<AdaptiveWalk>,
    eta_x: AdaptiveWalk,
    eta_z: AdaptiveWalk,
    corr_x: AdaptiveWalk,
    corr_z: AdaptiveWalk,
}

struct Chain<'a> {
    spec: &'a NullModelSpec,
    layout: &'a NullLayout,
    config: &'a McmcConfig,
    data: Vec<Vec<SegmentData>>,
    state: Vec<ArtistState>,
    walks: Vec<ArtistWalks>,
}

fn linear_parts(rows: &[Vec<f64>], coef: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| dot(r, coef)).collect()
}

fn sum_parts(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl<'a> Chain<'a> {
    fn new(
        data: &NullModelData,
        spec: &'a NullModelSpec,
        layout: &'a NullLayout,
        config: &'a McmcConfig,
        warm: Option<&NullParameters>,
        rng: &mut DemandRng,
    ) -> Result<Self> {
        let use_lik = !config.prior_only;
        let seg_data: Vec<Vec<SegmentData>> = data
            .artists
            .iter()
            .map(|a| {
                a.segments
                    .iter()
                    .map(|s| {
                        let t_max = s.curve.horizon();
                        SegmentData {
                            lik: CountLikelihood::new(&s.curve.values, use_lik),
                            coef_rows: (0..t_max)
                                .map(|t| {
                                    let mut row = Vec::with_capacity(layout.channels + 1);
                                    if layout.intercept {
                                        row.push(1.0);
                                    }
                                    row.extend_from_slice(s.covariates.x(t));
                                    row
                                })
                                .collect(),
                            z_rows: (0..t_max).map(|t| s.covariates.z(t).to_vec()).collect(),
                        }
                    })
                    .collect()
            })
            .collect();
        let start = match warm {
            Some(p) => p.clone(),
            None => cold_start(data, spec, layout),
        };
        let mut state = Vec::with_capacity(start.artists.len());
        let mut walks = Vec::with_capacity(start.artists.len());
        for ((artist, prior), segs) in start.artists.iter().zip(&spec.artists).zip(&seg_data) {
            let normal_x = ScaledNormal::new(&prior.mean_x, &prior.scale_x, &artist.cpc_x, false)?;
            let normal_z = ScaledNormal::new(&prior.mean_z, &prior.scale_z, &artist.cpc_z, true)?;
            let segments = artist
                .segments
                .iter()
                .zip(segs)
                .map(|(p, d)| {
                    let mut coef: Vec<f64> = p.intercept.into_iter().chain(p.theta.iter().copied()).collect();
                    coef.iter_mut().for_each(|c| *c += INIT_JITTER * rng.standard_normal());
                    let gamma: Vec<f64> =
                        p.gamma.iter().map(|g| (g + INIT_JITTER * rng.standard_normal()).abs()).collect();
                    let log_omega = p.omega.ln() + INIT_JITTER * rng.standard_normal();
                    let coef_part = linear_parts(&d.coef_rows, &coef);
                    let gamma_part = linear_parts(&d.z_rows, &gamma);
                    let omega = log_omega.exp();
                    let omega_part = d.lik.omega_part(omega);
                    let loglik = d.lik.ln_likelihood(&sum_parts(&coef_part, &gamma_part), omega, omega_part);
                    SegmentState { coef, gamma, log_omega, coef_part, gamma_part, omega_part, loglik }
                })
                .collect::<Vec<_>>();
            let coef_dim = layout.channels + usize::from(layout.intercept);
            walks.push(ArtistWalks {
                coef: (0..segments.len()).map(|_| AdaptiveWalk::new(vec![0.1; coef_dim], false)).collect(),
                gamma: (0..segments.len()).map(|_| AdaptiveWalk::new(vec![0.1; layout.ambient], true)).collect(),
                omega: (0..segments.len()).map(|_| AdaptiveWalk::new(vec![0.3], false)).collect(),
                eta_x: AdaptiveWalk::new(vec![0.5], false),
                eta_z: AdaptiveWalk::new(vec![0.5], false),
                corr_x: AdaptiveWalk::new(vec![0.2; cpc_len(layout.channels)], false),
                corr_z: AdaptiveWalk::new(vec![0.2; cpc_len(layout.ambient)], false),
            });
            state.push(ArtistState {
                log_eta_x: artist.eta_x.ln() + INIT_JITTER * rng.standard_normal(),
                log_eta_z: artist.eta_z.ln() + INIT_JITTER * rng.standard_normal(),
                cpc_x: artist.cpc_x.clone(),
                cpc_z: artist.cpc_z.clone(),
                normal_x,
                normal_z,
                segments,
            });
        }
        Ok(Self { spec, layout, config, data: seg_data, state, walks })
    }

    fn run(&mut self, rng: &mut DemandRng) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.config.kept());
        for it in 0..self.config.warmup + self.config.samples {
            if it == self.config.warmup {
                self.freeze();
            }
            for a in 0..self.state.len() {
                self.sweep_artist(a, rng);
            }
            if it >= self.config.warmup && (it - self.config.warmup).is_multiple_of(self.config.thin) {
                out.push(self.layout.flatten(&self.parameters()));
            }
        }
        out
    }

    fn freeze(&mut self) {
        for w in &mut self.walks {
            w.coef.iter_mut().chain(&mut w.gamma).chain(&mut w.omega).for_each(AdaptiveWalk::freeze);
            for walk in [&mut w.eta_x, &mut w.eta_z, &mut w.corr_x, &mut w.corr_z] {
                walk.freeze();
            }
        }
    }

    fn coef_prior(&self, a: usize, coef: &[f64], normal_x: &ScaledNormal) -> f64 {
        match self.spec.intercept {
            Some(i) => {
                let z = (coef[0] - i.mean) / i.scale;
                -0.5 * z * z - i.scale.ln() + normal_x.ln_pdf(&coef[1..])
            }
            None => {
                let _ = a;
                normal_x.ln_pdf(coef)
            }
        }
    }

    fn theta_of<'s>(&self, coef: &'s [f64]) -> &'s [f64] {
        if self.layout.intercept {
            &coef[1..]
        } else {
            coef
        }
    }

    fn sweep_artist(&mut self, a: usize, rng: &mut DemandRng) {
        let prior = &self.spec.artists[a];
        for j in 0..self.state[a].segments.len() {
            let d = &self.data[a][j];
            // Coefficient block.
            if self.walks[a].coef[j].dim() > 0 {
                let s = &self.state[a].segments[j];
                let proposal = self.walks[a].coef[j].propose(&s.coef, rng);
                let part = linear_parts(&d.coef_rows, &proposal);
                let omega = s.log_omega.exp();
                let ll = d.lik.ln_likelihood(&sum_parts(&part, &s.gamma_part), omega, s.omega_part);
                let normal_x = &self.state[a].normal_x;
                let ratio = ll + self.coef_prior(a, &proposal, normal_x)
                    - s.loglik
                    - self.coef_prior(a, &s.coef, normal_x);
                let ok = accept(ratio, rng);
                let s = &mut self.state[a].segments[j];
                if ok {
                    s.coef = proposal;
                    s.coef_part = part;
                    s.loglik = ll;
                }
                self.walks[a].coef[j].record(ok, &s.coef);
            }
            // Non-negative ambient effects, reflected at zero.
            if self.walks[a].gamma[j].dim() > 0 {
                let s = &self.state[a].segments[j];
                let proposal: Vec<f64> =
                    self.walks[a].gamma[j].propose(&s.gamma, rng).into_iter().map(f64::abs).collect();
                let part = linear_parts(&d.z_rows, &proposal);
                let omega = s.log_omega.exp();
                let ll = d.lik.ln_likelihood(&sum_parts(&s.coef_part, &part), omega, s.omega_part);
                let normal_z = &self.state[a].normal_z;
                let ratio = ll + normal_z.ln_pdf(&proposal) - s.loglik - normal_z.ln_pdf(&s.gamma);
                let ok = accept(ratio, rng);
                let s = &mut self.state[a].segments[j];
                if ok {
                    s.gamma = proposal;
                    s.gamma_part = part;
                    s.loglik = ll;
                }
                self.walks[a].gamma[j].record(ok, &s.gamma);
            }
            // Dispersion on the log scale.
            {
                let s = &self.state[a].segments[j];
                let proposal = self.walks[a].omega[j].propose(&[s.log_omega], rng)[0];
                let omega = proposal.exp();
                let omega_part = d.lik.omega_part(omega);
                let ll = d.lik.ln_likelihood(&sum_parts(&s.coef_part, &s.gamma_part), omega, omega_part);
                let log_prior = |lw: f64| {
                    gamma_ln_pdf(lw.exp(), prior.dispersion_shape, prior.dispersion_rate) + lw
                };
                let ratio = ll + log_prior(proposal) - s.loglik - log_prior(s.log_omega);
                let ok = omega.is_finite() && omega > 0.0 && accept(ratio, rng);
                let s = &mut self.state[a].segments[j];
                if ok {
                    s.log_omega = proposal;
                    s.omega_part = omega_part;
                    s.loglik = ll;
                }
                self.walks[a].omega[j].record(ok, &[s.log_omega]);
            }
        }
        self.update_eta(a, true, rng);
        self.update_eta(a, false, rng);
        self.update_correlation(a, true, rng);
        self.update_correlation(a, false, rng);
    }

    fn update_eta(&mut self, a: usize, x_side: bool, rng: &mut DemandRng) {
        let (dof, dim) = if x_side {
            (self.spec.eta_dof_x, self.layout.channels)
        } else {
            (self.spec.eta_dof_z, self.layout.ambient)
        };
        let st = &self.state[a];
        let (current, cpc) = if x_side {
            (st.log_eta_x, &st.cpc_x)
        } else {
            (st.log_eta_z, &st.cpc_z)
        };
        let target = |le: f64| {
            let eta = le.exp();
            chi_squared_ln_pdf(eta, dof) + lkj_ln_density(dim, cpc, eta) + le
        };
        let walk = if x_side { &mut self.walks[a].eta_x } else { &mut self.walks[a].eta_z };
        let proposal = walk.propose(&[current], rng)[0];
        let ok = proposal.exp() > 0.0 && accept(target(proposal) - target(current), rng);
        let value = if ok { proposal } else { current };
        walk.record(ok, &[value]);
        let st = &mut self.state[a];
        if x_side {
            st.log_eta_x = value;
        } else {
            st.log_eta_z = value;
        }
    }

    fn update_correlation(&mut self, a: usize, x_side: bool, rng: &mut DemandRng) {
        let dim = if x_side { self.layout.channels } else { self.layout.ambient };
        if dim < 2 {
            return;
        }
        let prior = &self.spec.artists[a];
        let st = &self.state[a];
        let (cpc, eta, normal) = if x_side {
            (&st.cpc_x, st.log_eta_x.exp(), &st.normal_x)
        } else {
            (&st.cpc_z, st.log_eta_z.exp(), &st.normal_z)
        };
        let effects: Vec<&[f64]> = st
            .segments
            .iter()
            .map(|s| if x_side { self.theta_of(&s.coef) } else { &s.gamma[..] })
            .collect();
        // Target on w = atanh(z), Jacobian Π(1 - z²).
        let target = |z: &[f64], n: &ScaledNormal| {
            cpc_ln_density(dim, z, eta)
                + z.iter().map(|v| (1.0 - v * v).ln()).sum::<f64>()
                + effects.iter().map(|e| n.ln_pdf(e)).sum::<f64>()
        };
        let current_w: Vec<f64> = cpc.iter().map(|z| z.atanh()).collect();
        let walk = if x_side { &self.walks[a].corr_x } else { &self.walks[a].corr_z };
        let proposal_w = walk.propose(&current_w, rng);
        let proposal: Vec<f64> = proposal_w.iter().map(|w| w.tanh()).collect();
        let built = if proposal.iter().all(|z| z.abs() < 1.0) {
            if x_side {
                ScaledNormal::new(&prior.mean_x, &prior.scale_x, &proposal, false).ok()
            } else {
                ScaledNormal::new(&prior.mean_z, &prior.scale_z, &proposal, true).ok()
            }
        } else {
            None
        };
        let accepted = built.and_then(|n| {
            let ratio = target(&proposal, &n) - target(cpc, normal);
            accept(ratio, rng).then_some(n)
        });
        let ok = accepted.is_some();
        let st = &mut self.state[a];
        if let Some(n) = accepted {
            if x_side {
                st.cpc_x = proposal;
                st.normal_x = n;
            } else {
                st.cpc_z = proposal;
                st.normal_z = n;
            }
        }
        let w_now: Vec<f64> = if x_side { &st.cpc_x } else { &st.cpc_z }.iter().map(|z| z.atanh()).collect();
        let walk = if x_side { &mut self.walks[a].corr_x } else { &mut self.walks[a].corr_z };
        walk.record(ok, &w_now);
    }

    fn parameters(&self) -> NullParameters {
        NullParameters {
            artists: self
                .state
                .iter()
                .map(|st| ArtistParameters {
                    eta_x: st.log_eta_x.exp(),
                    eta_z: st.log_eta_z.exp(),
                    cpc_x: st.cpc_x.clone(),
                    cpc_z: st.cpc_z.clone(),
                    segments: st
                        .segments
                        .iter()
                        .map(|s| SegmentParameters {
                            intercept: self.layout.intercept.then(|| s.coef[0]),
                            theta: self.theta_of(&s.coef).to_vec(),
                            gamma: s.gamma.clone(),
                            omega: s.log_omega.exp(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn acceptance(&self, chain: usize) -> Vec<BlockAcceptance> {
        let mut out = Vec::new();
        for (a, w) in self.walks.iter().enumerate() {
            let mut push = |block: String, walk: &AdaptiveWalk| {
                if let Some(rate) = walk.acceptance().filter(|_| walk.dim() > 0) {
                    out.push(BlockAcceptance { chain, block, rate });
                }
            };
            for j in 0..w.coef.len() {
                push(format!("coef[{a},{j}]"), &w.coef[j]);
                push(format!("gamma[{a},{j}]"), &w.gamma[j]);
                push(format!("omega[{a},{j}]"), &w.omega[j]);
            }
            push(format!("eta_x[{a}]"), &w.eta_x);
            push(format!("eta_z[{a}]"), &w.eta_z);
            push(format!("corr_x[{a}]"), &w.corr_x);
            push(format!("corr_z[{a}]"), &w.corr_z);
        }
        out
    }
}

fn cold_start(data: &NullModelData, spec: &NullModelSpec, layout: &NullLayout) -> NullParameters {
    NullParameters {
        artists: data
            .artists
            .iter()
            .zip(&spec.artists)
            .map(|(artist, prior)| ArtistParameters {
                eta_x: spec.eta_dof_x,
                eta_z: spec.eta_dof_z,
                cpc_x: vec![0.0; cpc_len(layout.channels)],
                cpc_z: vec![0.0; cpc_len(layout.ambient)],
                segments: artist
                    .segments
                    .iter()
                    .map(|s| {
                        let n = s.curve.values.len().max(1) as f64;
                        let mean = s.curve.values.iter().sum::<u64>() as f64 / n;
                        SegmentParameters {
                            intercept: spec.intercept.map(|_| (mean + 0.5).ln()),
                            theta: prior.mean_x.clone(),
                            gamma: prior.mean_z.iter().map(|m| m.max(0.0)).collect(),
                            omega: prior.dispersion_shape / prior.dispersion_rate,
                        }
                    })
                    .collect(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::negbin_ln_pmf;

    fn paths(horizon: usize, segments: usize, rng: &mut DemandRng) -> Vec<Vec<CovariatePath>> {
        vec![(0..segments)
            .map(|_| {
                let x = (0..horizon).map(|_| vec![rng.uniform()]).collect();
                let z = (0..horizon).map(|_| vec![rng.uniform()]).collect();
                CovariatePath::new(x, z).unwrap()
            })
            .collect()]
    }

    fn known(theta: f64, gamma: f64, omega: f64) -> NullParameters {
        let seg = SegmentParameters { intercept: Some(2.0), theta: vec![theta], gamma: vec![gamma], omega };
        NullParameters {
            artists: vec![ArtistParameters {
                eta_x: 4.0,
                eta_z: 4.0,
                cpc_x: vec![],
                cpc_z: vec![],
                segments: vec![seg.clone(), seg],
            }],
        }
    }

    #[test]
    fn cached_likelihood_matches_pmf() {
        let y = [0u64, 3, 17, 250];
        let eta = [0.3, -1.0, 2.5, 5.0];
        let lik = CountLikelihood::new(&y, true);
        let omega = 3.7;
        let direct: f64 = y.iter().zip(&eta).map(|(&v, &e)| negbin_ln_pmf(v, f64::exp(e), omega)).sum();
        let cached = lik.ln_likelihood(&eta, omega, lik.omega_part(omega));
        assert!((direct - cached).abs() < 1e-9, "{direct} vs {cached}");
    }

    #[test]
    fn layout_round_trips() {
        let layout = NullLayout { segments: vec![2, 1], channels: 3, ambient: 2, intercept: true };
        let spec = NullModelSpec::weakly_informative(2, 3, 2).with_intercept(1.0, 1.0);
        let mut rng = DemandRng::seed_from(8);
        let p = sample_prior(&spec, &layout, &mut rng).unwrap();
        let flat = layout.flatten(&p);
        assert_eq!(flat.len(), layout.names().len());
        let back = layout.flatten(&layout.unflatten(&flat));
        for (a, b) in flat.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_draws_respect_truncation_and_gamma_moments() {
        let layout = NullLayout { segments: vec![1], channels: 1, ambient: 2, intercept: false };
        let mut spec = NullModelSpec::weakly_informative(1, 1, 2);
        spec.artists[0].dispersion_shape = 2.0;
        spec.artists[0].dispersion_rate = 1.0;
        let mut rng = DemandRng::seed_from(21);
        let n = 10_000;
        let mut omegas = Vec::with_capacity(n);
        for _ in 0..n {
            let p = sample_prior(&spec, &layout, &mut rng).unwrap();
            let s = &p.artists[0].segments[0];
            assert!(s.gamma.iter().all(|g| *g >= 0.0));
            omegas.push(s.omega);
        }
        let (mean, sd) = super::super::draws::mean_sd(&omegas);
        let se = sd / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn theta_prior_covariance_matches() {
        let layout = NullLayout { segments: vec![1], channels: 2, ambient: 0, intercept: false };
        let mut spec = NullModelSpec::weakly_informative(1, 2, 0);
        spec.artists[0].scale_x = vec![1.0, 2.0];
        let mut rng = DemandRng::seed_from(22);
        let n = 50_000;
        let mut m2 = [[0.0; 2]; 2];
        for _ in 0..n {
            let p = sample_prior(&spec, &layout, &mut rng).unwrap();
            let t = &p.artists[0].segments[0].theta;
            for a in 0..2 {
                for b in 0..2 {
                    m2[a][b] += t[a] * t[b] / n as f64;
                }
            }
        }
        // E[R] = I under LKJ, so the marginal covariance is diag(s²).
        let expected = [[1.0, 0.0], [0.0, 4.0]];
        let err: f64 = (0..2)
            .flat_map(|a| (0..2).map(move |b| (a, b)))
            .map(|(a, b)| (m2[a][b] - expected[a][b]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err / 17f64.sqrt() < 0.1, "{m2:?}");
    }

    fn quick() -> McmcConfig {
        McmcConfig { chains: 2, warmup: 600, samples: 600, thin: 1, seed: 5, ..Default::default() }
    }

    #[test]
    fn same_seed_same_draws() {
        let mut rng = DemandRng::seed_from(1);
        let truth = known(0.7, 0.3, 10.0);
        let data = simulate_null_data(&truth, &paths(60, 2, &mut rng), &mut rng).unwrap();
        let spec = NullModelSpec::weakly_informative(1, 1, 1).with_intercept(2.0, 1.0);
        let a = fit_null_model(&data, &spec, &quick()).unwrap();
        let b = fit_null_model(&data, &spec, &quick()).unwrap();
        assert_eq!(a.chains, b.chains);
        assert_ne!(a.chains[0], a.chains[1]);
        for name in a.names.iter().filter(|n| n.starts_with("gamma")) {
            assert!(a.column(name).unwrap().iter().all(|g| *g >= 0.0));
        }
    }

    #[test]
    fn all_zero_counts_are_rejected() {
        let curve = DemandCurve::new("s", Stratum::Segment(0), vec![0; 10]);
        let data = NullModelData {
            artists: vec![ArtistSeries {
                artist_id: "a".into(),
                segments: vec![SegmentSeries { curve, covariates: CovariatePath::constant(10, vec![0.5], vec![]).unwrap() }],
            }],
        };
        let spec = NullModelSpec::weakly_informative(1, 1, 0);
        assert!(matches!(fit_null_model(&data, &spec, &quick()), Err(DemandError::Fit { .. })));
    }

    #[test]
    fn weekly_update_checks_horizon() {
        let mut rng = DemandRng::seed_from(2);
        let truth = known(0.7, 0.3, 10.0);
        let data = simulate_null_data(&truth, &paths(20, 2, &mut rng), &mut rng).unwrap();
        let spec = NullModelSpec::weakly_informative(1, 1, 1).with_intercept(2.0, 1.0);
        let fit = fit_null_model(&data, &spec, &quick()).unwrap();
        let obs = WeekObservation { count: 5, x: vec![0.5], z: vec![0.5] };
        let wrong = NewWeek { week: 25, artists: vec![vec![obs.clone(), obs.clone()]] };
        assert!(matches!(update_with_new_week(&fit, &wrong), Err(DemandError::Domain(_))));
        let right = NewWeek { week: 20, artists: vec![vec![obs.clone(), obs]] };
        let next = update_with_new_week(&fit, &right).unwrap();
        let back = remove_last_week(&next).unwrap();
        assert_eq!(back.chains, fit.chains);
    }
}
