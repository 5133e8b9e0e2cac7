//! Store mutations shared by the command line, the HTTP service and replay,
//! plus the read-only predictive and what-if queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use songdemand_core::bayes::draws::BlockAcceptance;
use songdemand_core::bayes::{
    fit_forced_model_bayes, fit_null_model, posterior_envelope, posterior_predictive,
    ArtistSeries, ForcedModelSpec, McmcConfig, NullModelData, NullModelSpec, PosteriorDraws,
    PredictiveBands, QuantileCurves, ScalarDiagnostic, SegmentSeries,
};
use songdemand_core::clustering::{kmeans_curves, Clustering, KMeansConfig};
use songdemand_core::dist::{negbin_quantile, poisson_quantile};
use songdemand_core::envelope::{
    envelope_least_squares, fit_changepoints, fit_partite, ChangePoints, ChangepointConfig,
    EnvelopeFit, PartiteConfig,
};
use songdemand_core::optimizer::{
    plan_horizon, AllocationPath, BudgetPolicy, ForcedPlanningModel, NullPlanningModel,
    PlanningModel, Scheme,
};
use songdemand_core::{CovariatePath, DemandCurve};

use crate::config::{json_hash, AppConfig};
use crate::error::{AppError, AppResult};
use crate::ingest::{ingest_csv, songs_from_records, ColumnMapping, Reject};
use crate::store::{check_id, ProjectStore, SongDocument};

/// Length of the content-hash prefix used as a document id.
const ID_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdsrMethod {
    /// Least-squares change points, then per-phase Negative-Binomial fits.
    TwoStep,
    Bayes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Operation {
    Ingest {
        /// Hash of a file already in `inputs/`.
        input: String,
        mapping: Option<ColumnMapping>,
        #[serde(default)]
        replace: bool,
    },
    FitNull {
        songs: Vec<String>,
        mcmc: McmcConfig,
    },
    FitAdsr {
        song: String,
        method: AdsrMethod,
        changepoints: Option<[usize; 4]>,
        search: ChangepointConfig,
        partite: PartiteConfig,
        mcmc: McmcConfig,
    },
    Classify {
        /// Empty means every stored song.
        songs: Vec<String>,
        k: usize,
        seed: u64,
        kmeans: KMeansConfig,
    },
    Optimize {
        fit: String,
        scheme: Scheme,
        policy: BudgetPolicy,
        /// Ambient path; zeros when absent.
        z: Option<Vec<Vec<f64>>>,
    },
}

impl Operation {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Operation::FitNull { mcmc, .. } => Some(mcmc.seed),
            Operation::FitAdsr { method: AdsrMethod::Bayes, mcmc, .. } => Some(mcmc.seed),
            Operation::Classify { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    Null,
    Adsr,
    AdsrBayes,
}

impl FitKind {
    pub fn scheme(self) -> Scheme {
        match self {
            FitKind::Null => Scheme::Null,
            FitKind::Adsr | FitKind::AdsrBayes => Scheme::Forced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub diagnostics: Vec<ScalarDiagnostic>,
    pub acceptance: Vec<BlockAcceptance>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub fit_id: String,
    pub kind: FitKind,
    pub songs: Vec<String>,
    /// Hash of the song documents the fit read.
    pub data_hash: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub horizon: usize,
    pub channels: usize,
    pub ambient: usize,
    /// One label per modelled series: `song/stratum` for null fits.
    pub series: Vec<String>,
    /// Mean observed count of each series, the audience size used in planning.
    pub series_scale: Vec<f64>,
    pub envelope: Option<EnvelopeFit>,
    pub rss: Option<f64>,
    pub posterior: Option<PosteriorSummary>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub plan_id: String,
    pub fit_id: String,
    pub policy: BudgetPolicy,
    pub z: Vec<Vec<f64>>,
    pub plan: AllocationPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDocument {
    pub clustering_id: String,
    pub songs: Vec<String>,
    pub k: usize,
    pub seed: u64,
    pub clustering: Clustering,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub input: String,
    pub songs: Vec<String>,
    pub records: usize,
    pub rejects: Vec<Reject>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    Ingested(IngestSummary),
    Fitted(FitDocument),
    Classified(ClusterDocument),
    Planned(PlanDocument),
}

impl Outcome {
    pub fn produced(&self) -> Vec<String> {
        match self {
            Outcome::Ingested(s) => s.songs.clone(),
            Outcome::Fitted(f) => vec![f.fit_id.clone()],
            Outcome::Classified(c) => vec![c.clustering_id.clone()],
            Outcome::Planned(p) => vec![p.plan_id.clone()],
        }
    }
}

/// Computed results not yet written.
enum Pending {
    Songs(IngestSummary, Vec<SongDocument>, bool),
    Fit(FitDocument, Option<PosteriorDraws>),
    Clusters(ClusterDocument),
    Plan(PlanDocument),
}

fn short_id(prefix: &str, value: &impl Serialize) -> String {
    format!("{prefix}-{}", &json_hash(value)[..ID_LEN])
}

fn data_hash(songs: &[SongDocument]) -> String {
    json_hash(&songs)
}

fn load_songs(store: &ProjectStore, ids: &[String]) -> AppResult<Vec<SongDocument>> {
    if ids.is_empty() {
        return Err(AppError::Validation("no songs selected".into()));
    }
    ids.iter().map(|id| store.song(id)).collect()
}

/// Resolves defaults that depend on store contents so the logged operation
/// replays exactly.
fn normalize(store: &ProjectStore, op: Operation) -> AppResult<Operation> {
    Ok(match op {
        Operation::Classify { songs, k, seed, kmeans } if songs.is_empty() => Operation::Classify {
            songs: store.song_ids()?,
            k,
            seed,
            kmeans,
        },
        other => other,
    })
}

/// Runs `op`, writes its documents and records it in the run log. Only the
/// write phase holds the store's writer lock.
pub fn execute(store: &ProjectStore, op: Operation) -> AppResult<Outcome> {
    let op = normalize(store, op)?;
    let pending = compute(store, &op)?;
    let _guard = store.write_lock();
    let outcome = match pending {
        Pending::Songs(summary, docs, replace) => {
            for d in &docs {
                store.put_song(d, replace)?;
            }
            Outcome::Ingested(summary)
        }
        Pending::Fit(doc, draws) => {
            store.put_fit(&doc, draws.as_ref())?;
            Outcome::Fitted(doc)
        }
        Pending::Clusters(doc) => {
            store.put_clustering(&doc)?;
            Outcome::Classified(doc)
        }
        Pending::Plan(doc) => {
            store.put_plan(&doc)?;
            Outcome::Planned(doc)
        }
    };
    store.append_log(&op, op.seed(), json_hash(&op), outcome.produced())?;
    Ok(outcome)
}

fn compute(store: &ProjectStore, op: &Operation) -> AppResult<Pending> {
    match op {
        Operation::Ingest { input, mapping, replace } => {
            compute_ingest(store, input, mapping.as_ref(), *replace)
        }
        Operation::FitNull { songs, mcmc } => compute_fit_null(store, op, songs, mcmc),
        Operation::FitAdsr { song, method, changepoints, search, partite, mcmc } => {
            compute_fit_adsr(store, op, song, *method, *changepoints, search, partite, mcmc)
        }
        Operation::Classify { songs, k, seed, kmeans } => {
            compute_classify(store, op, songs, *k, *seed, kmeans)
        }
        Operation::Optimize { fit, scheme, policy, z } => {
            compute_optimize(store, op, fit, *scheme, policy, z.as_deref())
        }
    }
}

fn compute_ingest(
    store: &ProjectStore,
    input: &str,
    mapping: Option<&ColumnMapping>,
    replace: bool,
) -> AppResult<Pending> {
    let bytes = store.input(input)?;
    let mut report = ingest_csv(bytes.as_slice(), mapping)?;
    // Bad ids cannot become file names; reject their rows.
    let mut kept = Vec::with_capacity(report.records.len());
    for r in std::mem::take(&mut report.records) {
        match check_id(&r.song_id) {
            Ok(()) => kept.push(r),
            Err(e) => report.rejects.push(Reject { line: 0, reason: e.to_string() }),
        }
    }
    if kept.is_empty() {
        return Err(AppError::Validation(format!(
            "no valid rows ({} rejected)",
            report.rejects.len()
        )));
    }
    let series = songs_from_records(&kept)?;
    let mut warnings = report.warnings;
    for s in &series {
        warnings.extend(s.warnings.iter().map(|w| format!("song {}: {w}", s.song_id)));
    }
    let summary = IngestSummary {
        input: input.to_string(),
        songs: series.iter().map(|s| s.song_id.clone()).collect(),
        records: kept.len(),
        rejects: report.rejects,
        warnings,
    };
    let docs = series
        .into_iter()
        .map(|series| SongDocument { source: input.to_string(), series })
        .collect();
    Ok(Pending::Songs(summary, docs, replace))
}

fn mean_count(curve: &DemandCurve) -> f64 {
    curve.values.iter().sum::<u64>() as f64 / curve.horizon().max(1) as f64
}

fn compute_fit_null(
    store: &ProjectStore,
    op: &Operation,
    ids: &[String],
    mcmc: &McmcConfig,
) -> AppResult<Pending> {
    let songs = load_songs(store, ids)?;
    let horizon = songs.iter().map(|s| s.series.aggregate.horizon()).min().unwrap_or(0);
    let mut warnings = Vec::new();
    if songs.iter().any(|s| s.series.aggregate.horizon() != horizon) {
        warnings.push(format!("curves truncated to the shortest horizon, {horizon} weeks"));
    }
    let mut artists: BTreeMap<String, Vec<SegmentSeries>> = BTreeMap::new();
    let mut labels: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for song in &songs {
        let s = &song.series;
        for (j, curve) in s.curves.iter().enumerate() {
            let mut curve = curve.clone();
            curve.values.truncate(horizon);
            let mut covariates = s.covariates[j].clone();
            covariates.truncate(horizon);
            artists.entry(s.artist_id.clone()).or_default().push(SegmentSeries { curve, covariates });
            labels.entry(s.artist_id.clone()).or_default().push(format!("{}/{}", s.song_id, s.strata[j]));
        }
    }
    let data = NullModelData {
        artists: artists
            .into_iter()
            .map(|(artist_id, segments)| ArtistSeries { artist_id, segments })
            .collect(),
    };
    let first = &data.artists[0].segments[0].covariates;
    let (channels, ambient) = (first.channels(), first.ambient());
    let spec = NullModelSpec::weakly_informative(data.artists.len(), channels, ambient);
    let draws = fit_null_model(&data, &spec, mcmc)?;
    let series_scale = data
        .artists
        .iter()
        .flat_map(|a| a.segments.iter().map(|s| mean_count(&s.curve)))
        .collect();
    let hash = data_hash(&songs);
    let doc = FitDocument {
        fit_id: short_id("fit", &(op, &hash)),
        kind: FitKind::Null,
        songs: ids.to_vec(),
        data_hash: hash,
        seed: Some(mcmc.seed),
        config_hash: json_hash(op),
        horizon,
        channels,
        ambient,
        series: labels.into_values().flatten().collect(),
        series_scale,
        envelope: None,
        rss: None,
        posterior: Some(summarize(&draws)),
        warnings,
    };
    Ok(Pending::Fit(doc, Some(draws)))
}

fn summarize(draws: &PosteriorDraws) -> PosteriorSummary {
    PosteriorSummary {
        chains: draws.chain_count(),
        draws_per_chain: draws.draws_per_chain(),
        diagnostics: draws.diagnostics.clone(),
        acceptance: draws.acceptance.clone(),
        warnings: draws.warnings.clone(),
    }
}

#[allow(clippy::too_many_arguments)]
fn compute_fit_adsr(
    store: &ProjectStore,
    op: &Operation,
    id: &str,
    method: AdsrMethod,
    changepoints: Option<[usize; 4]>,
    search: &ChangepointConfig,
    partite: &PartiteConfig,
    mcmc: &McmcConfig,
) -> AppResult<Pending> {
    let song = store.song(id)?;
    let s = &song.series;
    let curve = &s.aggregate;
    let cov = &s.aggregate_covariates;
    let fixed = changepoints
        .map(|[a, su, d, r]| ChangePoints::new(a, su, d, r))
        .transpose()?;
    let (kind, envelope, draws, seed) = match method {
        AdsrMethod::TwoStep => {
            let cp = match fixed {
                Some(cp) => cp,
                None => fit_changepoints(curve, search)?,
            };
            let covariates = (cov.channels() + cov.ambient() > 0).then_some(cov);
            let env = fit_partite(curve, &cp, covariates, partite)?;
            (FitKind::Adsr, env, None, None)
        }
        AdsrMethod::Bayes => {
            let spec = ForcedModelSpec::weakly_informative(cov.channels(), cov.ambient());
            let draws = fit_forced_model_bayes(curve, cov, fixed, &spec, mcmc)?;
            let env = posterior_envelope(&draws)?;
            (FitKind::AdsrBayes, env, Some(draws), Some(mcmc.seed))
        }
    };
    let (rss, _) = envelope_least_squares(&curve.as_f64(), &envelope.changepoints)?;
    let hash = data_hash(std::slice::from_ref(&song));
    let doc = FitDocument {
        fit_id: short_id("fit", &(op, &hash)),
        kind,
        songs: vec![id.to_string()],
        data_hash: hash,
        seed,
        config_hash: json_hash(op),
        horizon: curve.horizon(),
        channels: cov.channels(),
        ambient: cov.ambient(),
        series: vec![id.to_string()],
        series_scale: vec![mean_count(curve)],
        envelope: Some(envelope),
        rss: Some(rss),
        posterior: draws.as_ref().map(summarize),
        warnings: Vec::new(),
    };
    Ok(Pending::Fit(doc, draws))
}

fn compute_classify(
    store: &ProjectStore,
    op: &Operation,
    ids: &[String],
    k: usize,
    seed: u64,
    kmeans: &KMeansConfig,
) -> AppResult<Pending> {
    let songs = load_songs(store, ids)?;
    let curves: Vec<(String, Vec<f64>)> = songs
        .iter()
        .map(|s| (s.series.song_id.clone(), s.series.aggregate.as_f64()))
        .collect();
    let mut warnings = Vec::new();
    let k_used = k.min(curves.len());
    if k_used < k {
        warnings.push(format!("k reduced from {k} to the {} available curves", curves.len()));
    }
    let clustering = kmeans_curves(&curves, k_used, seed, kmeans)?;
    let hash = data_hash(&songs);
    Ok(Pending::Clusters(ClusterDocument {
        clustering_id: short_id("clusters", &(op, &hash)),
        songs: ids.to_vec(),
        k: k_used,
        seed,
        clustering,
        warnings,
    }))
}

fn ambient_path(z: Option<&[Vec<f64>]>, horizon: usize, ambient: usize) -> AppResult<Vec<Vec<f64>>> {
    match z {
        None => Ok(vec![vec![0.0; ambient]; horizon]),
        Some(z) => {
            if z.len() != horizon || z.iter().any(|row| row.len() != ambient) {
                return Err(AppError::Validation(format!(
                    "ambient path must be {horizon} weeks of {ambient} value(s)"
                )));
            }
            Ok(z.to_vec())
        }
    }
}

/// Planning inputs derived from a stored fit.
pub fn planning_model(store: &ProjectStore, fit: &FitDocument, z: Vec<Vec<f64>>) -> AppResult<PlanningModel> {
    let horizon = z.len();
    match fit.kind {
        FitKind::Null => {
            let draws = load_draws(store, fit)?;
            let mut theta = Vec::new();
            let mut gamma = Vec::new();
            let mean = |name: String| {
                draws
                    .mean(&name)
                    .ok_or_else(|| AppError::Internal(format!("fit lacks {name}")))
            };
            let FittedModelShape { segments } = shape(&draws)?;
            for (a, &count) in segments.iter().enumerate() {
                for j in 0..count {
                    theta.push((0..fit.channels).map(|c| mean(format!("theta[{a},{j},{c}]"))).collect::<AppResult<Vec<_>>>()?);
                    gamma.push((0..fit.ambient).map(|d| mean(format!("gamma[{a},{j},{d}]"))).collect::<AppResult<Vec<_>>>()?);
                }
            }
            Ok(PlanningModel::Null(NullPlanningModel {
                theta,
                gamma,
                sizes: vec![fit.series_scale.clone(); horizon],
                z,
            }))
        }
        FitKind::Adsr | FitKind::AdsrBayes => {
            let env = fit
                .envelope
                .clone()
                .ok_or_else(|| AppError::Internal("envelope fit without an envelope".into()))?;
            Ok(PlanningModel::Forced(ForcedPlanningModel { envelopes: vec![env], channels: fit.channels, z }))
        }
    }
}

struct FittedModelShape {
    segments: Vec<usize>,
}

fn shape(draws: &PosteriorDraws) -> AppResult<FittedModelShape> {
    match &draws.model {
        songdemand_core::bayes::FittedModel::Null { data, .. } => Ok(FittedModelShape {
            segments: data.artists.iter().map(|a| a.segments.len()).collect(),
        }),
        _ => Err(AppError::Internal("expected a null-model fit".into())),
    }
}

pub fn load_draws(store: &ProjectStore, fit: &FitDocument) -> AppResult<PosteriorDraws> {
    let acceptance = fit
        .posterior
        .as_ref()
        .map(|p| p.acceptance.clone())
        .ok_or_else(|| AppError::Validation(format!("fit {} has no posterior draws", fit.fit_id)))?;
    store.fit_draws(&fit.fit_id, acceptance)
}

fn compute_optimize(
    store: &ProjectStore,
    op: &Operation,
    fit_id: &str,
    scheme: Scheme,
    policy: &BudgetPolicy,
    z: Option<&[Vec<f64>]>,
) -> AppResult<Pending> {
    let fit = store.fit(fit_id)?;
    if fit.kind.scheme() != scheme {
        return Err(AppError::Validation(format!(
            "fit {fit_id} supports the {:?} scheme, not {scheme:?}",
            fit.kind.scheme()
        )));
    }
    let z = ambient_path(z, policy.horizon(), fit.ambient)?;
    let model = planning_model(store, &fit, z.clone())?;
    let plan = plan_horizon(policy, &model)?;
    Ok(Pending::Plan(PlanDocument {
        plan_id: short_id("plan", &(op, &fit.data_hash)),
        fit_id: fit_id.to_string(),
        policy: policy.clone(),
        z,
        plan,
    }))
}

/// Replays `source`'s run log into `target`, copying raw inputs as needed.
/// Returns the number of operations applied.
pub fn replay(source: &ProjectStore, target: &ProjectStore) -> AppResult<usize> {
    let log = source.log()?;
    for entry in &log {
        if let Operation::Ingest { input, .. } = &entry.operation {
            target.put_input(&source.input(input)?)?;
        }
        execute(target, entry.operation.clone())?;
    }
    Ok(log.len())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictiveRequest {
    pub horizon: Option<usize>,
    pub quantiles: Option<Vec<f64>>,
    /// Endogenous path, `x[t][c]`; zeros when absent.
    pub x: Option<Vec<Vec<f64>>>,
    pub z: Option<Vec<Vec<f64>>>,
    pub seed: Option<u64>,
}

fn zeros_or(path: Option<&[Vec<f64>]>, horizon: usize, width: usize, what: &str) -> AppResult<Vec<Vec<f64>>> {
    match path {
        None => Ok(vec![vec![0.0; width]; horizon]),
        Some(p) if p.len() == horizon && p.iter().all(|r| r.len() == width) => Ok(p.to_vec()),
        Some(_) => Err(AppError::Validation(format!(
            "{what} path must be {horizon} weeks of {width} value(s)"
        ))),
    }
}

/// Pointwise predictive quantiles of a stored fit along a proposed path.
pub fn predictive(
    store: &ProjectStore,
    fit: &FitDocument,
    req: &PredictiveRequest,
    config: &AppConfig,
) -> AppResult<PredictiveBands> {
    let horizon = req
        .horizon
        .or(req.x.as_ref().map(Vec::len))
        .or(req.z.as_ref().map(Vec::len))
        .unwrap_or(fit.horizon);
    if horizon == 0 {
        return Err(AppError::Validation("horizon must be positive".into()));
    }
    let quantiles = req.quantiles.clone().unwrap_or_else(|| config.quantiles.clone());
    if quantiles.is_empty() || quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(AppError::Validation("quantiles must lie in (0, 1)".into()));
    }
    let x = zeros_or(req.x.as_deref(), horizon, fit.channels, "x")?;
    let z = zeros_or(req.z.as_deref(), horizon, fit.ambient, "z")?;
    let path = CovariatePath::new(x, z)?;
    let seed = req.seed.unwrap_or(config.mcmc.seed);
    match fit.kind {
        FitKind::Null | FitKind::AdsrBayes => {
            let draws = load_draws(store, fit)?;
            Ok(posterior_predictive(&draws, &path, &quantiles, seed)?)
        }
        FitKind::Adsr => {
            let env = fit
                .envelope
                .as_ref()
                .ok_or_else(|| AppError::Internal("envelope fit without an envelope".into()))?;
            Ok(plug_in_bands(env, &path, &quantiles, &fit.songs[0]))
        }
    }
}

/// Quantiles of the fitted count law at the point estimate.
fn plug_in_bands(env: &EnvelopeFit, path: &CovariatePath, quantiles: &[f64], label: &str) -> PredictiveBands {
    let horizon = path.horizon();
    let mean: Vec<f64> = (0..horizon).map(|t| env.mean_with_covariates(t, path.x(t), path.z(t))).collect();
    let bands = quantiles
        .iter()
        .map(|&q| {
            mean.iter()
                .map(|&mu| {
                    if mu <= 0.0 {
                        0.0
                    } else {
                        match env.dispersion {
                            Some(w) => negbin_quantile(q, mu, w) as f64,
                            None => poisson_quantile(q, mu) as f64,
                        }
                    }
                })
                .collect()
        })
        .collect();
    let curves = QuantileCurves { label: label.to_string(), mean, bands };
    PredictiveBands {
        quantiles: quantiles.to_vec(),
        horizon,
        series: vec![curves.clone()],
        aggregate: curves,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub fit: String,
    pub policy: BudgetPolicy,
    /// A drafted spend path `x[t][c]`; when absent the optimized plan's
    /// per-channel totals are used.
    #[serde(default)]
    pub x: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub z: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub quantiles: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub plan: AllocationPath,
    pub x: Vec<Vec<f64>>,
    pub predictive: PredictiveBands,
    /// The same fit with no endogenous spend.
    pub baseline: PredictiveBands,
    /// Total predictive mean minus the baseline's.
    pub objective_delta: f64,
}

pub fn what_if(store: &ProjectStore, req: &WhatIfRequest, config: &AppConfig) -> AppResult<WhatIfResponse> {
    let fit = store.fit(&req.fit)?;
    let horizon = req.policy.horizon();
    let z = ambient_path(req.z.as_deref(), horizon, fit.ambient)?;
    let model = planning_model(store, &fit, z.clone())?;
    let plan = plan_horizon(&req.policy, &model)?;
    let x = match &req.x {
        Some(x) => zeros_or(Some(x), horizon, fit.channels, "x")?,
        None => plan
            .spend
            .iter()
            .map(|week| {
                (0..fit.channels)
                    .map(|c| week.iter().map(|segment| segment[c]).sum())
                    .collect()
            })
            .collect(),
    };
    if x.iter().flatten().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(AppError::Validation("spend must be non-negative".into()));
    }
    let base = PredictiveRequest {
        horizon: Some(horizon),
        quantiles: req.quantiles.clone(),
        x: None,
        z: Some(z),
        seed: req.seed,
    };
    let proposed = PredictiveRequest { x: Some(x.clone()), ..base.clone() };
    let predictive = predictive(store, &fit, &proposed, config)?;
    let baseline = self::predictive(store, &fit, &base, config)?;
    let total = |b: &PredictiveBands| b.aggregate.mean.iter().sum::<f64>();
    let objective_delta = total(&predictive) - total(&baseline);
    Ok(WhatIfResponse { plan, x, predictive, baseline, objective_delta })
}
