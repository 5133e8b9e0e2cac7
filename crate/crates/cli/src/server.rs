//! JSON API over a project store. Fits run as background jobs so health
//! checks and reads never wait on a sampler.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use songdemand_core::bayes::McmcConfig;
use songdemand_core::optimizer::{BudgetPolicy, Scheme};

use crate::config::AppConfig;
use crate::error::{AppError, AppResult};
use crate::ingest::ColumnMapping;
use crate::ops::{self, AdsrMethod, Operation, Outcome, PredictiveRequest, WhatIfRequest};
use crate::store::ProjectStore;

pub struct AppState {
    pub store: ProjectStore,
    pub config: AppConfig,
    jobs: Mutex<BTreeMap<String, JobStatus>>,
    next_job: AtomicU64,
}

impl AppState {
    pub fn new(store: ProjectStore, config: AppConfig) -> Arc<Self> {
        Arc::new(Self { store, config, jobs: Mutex::new(BTreeMap::new()), next_job: AtomicU64::new(1) })
    }

    fn set_job(&self, status: JobStatus) {
        self.jobs
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(status.job_id.clone(), status);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub fit_id: Option<String>,
    pub error: Option<String>,
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.public_message() }))).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> AppResult<T> {
    serde_json::from_slice(body).map_err(|e| AppError::Validation(format!("invalid request body: {e}")))
}

async fn blocking<T, F>(f: F) -> AppResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> AppResult<T> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::Internal(format!("worker panicked: {e}")))?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/ingest", post(ingest))
        .route("/songs", get(songs))
        .route("/songs/{id}/curves", get(curves))
        .route("/fit/null", post(fit_null))
        .route("/fit/forced", post(fit_forced))
        .route("/classify", post(classify))
        .route("/fits/{id}", get(fit))
        .route("/fits/{id}/predictive", get(predictive))
        .route("/optimize/null", post(optimize_null))
        .route("/optimize/forced", post(optimize_forced))
        .route("/optimize/whatif", post(what_if))
        .route("/jobs/{id}", get(job))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestBody {
    csv: String,
    #[serde(default)]
    mapping: Option<ColumnMapping>,
    #[serde(default)]
    replace: bool,
}

async fn ingest(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<Outcome>> {
    let req: IngestBody = parse(&body)?;
    blocking(move || {
        let input = state.store.put_input(req.csv.as_bytes())?;
        ops::execute(&state.store, Operation::Ingest { input, mapping: req.mapping, replace: req.replace })
    })
    .await
    .map(Json)
}

#[derive(Serialize)]
struct SongListing {
    song_id: String,
    artist_id: String,
    release_date: String,
    horizon: usize,
    strata: Vec<String>,
}

async fn songs(State(state): State<Arc<AppState>>) -> AppResult<Json<Vec<SongListing>>> {
    blocking(move || {
        let mut out = Vec::new();
        for id in state.store.song_ids()? {
            let s = state.store.song(&id)?.series;
            out.push(SongListing {
                song_id: s.song_id,
                artist_id: s.artist_id,
                release_date: s.release_date.to_string(),
                horizon: s.aggregate.horizon(),
                strata: s.strata,
            });
        }
        Ok(out)
    })
    .await
    .map(Json)
}

async fn curves(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<serde_json::Value>> {
    blocking(move || {
        let doc = state.store.song(&id)?;
        serde_json::to_value(doc).map_err(|e| AppError::Internal(e.to_string()))
    })
    .await
    .map(Json)
}

fn start_job(state: Arc<AppState>, op: Operation) -> (StatusCode, Json<JobStatus>) {
    let job_id = format!("job-{}", state.next_job.fetch_add(1, Ordering::Relaxed));
    let queued = JobStatus { job_id: job_id.clone(), state: JobState::Queued, fit_id: None, error: None };
    state.set_job(queued.clone());
    tokio::task::spawn_blocking(move || {
        state.set_job(JobStatus { state: JobState::Running, ..queued.clone() });
        let finished = match ops::execute(&state.store, op) {
            Ok(outcome) => JobStatus {
                state: JobState::Done,
                fit_id: outcome.produced().into_iter().next(),
                ..queued
            },
            Err(e) => {
                tracing::warn!(job = %queued.job_id, error = %e, "fit job failed");
                JobStatus { state: JobState::Failed, error: Some(e.public_message()), ..queued }
            }
        };
        state.set_job(finished);
    });
    (StatusCode::ACCEPTED, Json(JobStatus { job_id, state: JobState::Queued, fit_id: None, error: None }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitNullBody {
    songs: Vec<String>,
    #[serde(default)]
    mcmc: Option<McmcConfig>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn fit_null(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<(StatusCode, Json<JobStatus>)> {
    let req: FitNullBody = parse(&body)?;
    let mut mcmc = req.mcmc.unwrap_or(state.config.mcmc);
    if let Some(seed) = req.seed {
        mcmc.seed = seed;
    }
    mcmc.validate()?;
    for id in &req.songs {
        state.store.song(id)?;
    }
    Ok(start_job(state, Operation::FitNull { songs: req.songs, mcmc }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitForcedBody {
    song: String,
    #[serde(default)]
    method: Option<AdsrMethod>,
    #[serde(default)]
    changepoints: Option<[usize; 4]>,
    #[serde(default)]
    mcmc: Option<McmcConfig>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn fit_forced(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<(StatusCode, Json<JobStatus>)> {
    let req: FitForcedBody = parse(&body)?;
    let mut mcmc = req.mcmc.unwrap_or(state.config.mcmc);
    if let Some(seed) = req.seed {
        mcmc.seed = seed;
    }
    let method = req.method.unwrap_or(AdsrMethod::TwoStep);
    if method == AdsrMethod::Bayes {
        mcmc.validate()?;
    }
    state.store.song(&req.song)?;
    let op = Operation::FitAdsr {
        song: req.song,
        method,
        changepoints: req.changepoints,
        search: state.config.changepoints,
        partite: state.config.partite,
        mcmc,
    };
    Ok(start_job(state, op))
}

async fn job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<JobStatus>> {
    let jobs = state.jobs.lock().unwrap_or_else(|p| p.into_inner());
    jobs.get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| AppError::NotFound(format!("job {id}")))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ClassifyBody {
    #[serde(default)]
    songs: Vec<String>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<Outcome>> {
    let req: ClassifyBody = if body.is_empty() { ClassifyBody::default() } else { parse(&body)? };
    blocking(move || {
        let op = Operation::Classify {
            songs: req.songs,
            k: req.k.unwrap_or(state.config.clusters),
            seed: req.seed.unwrap_or(state.config.mcmc.seed),
            kmeans: state.config.kmeans.clone(),
        };
        ops::execute(&state.store, op)
    })
    .await
    .map(Json)
}

async fn fit(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> AppResult<Json<ops::FitDocument>> {
    blocking(move || state.store.fit(&id)).await.map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictiveQuery {
    horizon: Option<usize>,
    /// Comma-separated, e.g. `0.05,0.5,0.95`.
    quantiles: Option<String>,
    seed: Option<u64>,
}

async fn predictive(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PredictiveQuery>,
) -> AppResult<Json<songdemand_core::bayes::PredictiveBands>> {
    let quantiles = q
        .quantiles
        .map(|s| {
            s.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| AppError::Validation(format!("bad quantile `{v}`"))))
                .collect::<AppResult<Vec<f64>>>()
        })
        .transpose()?;
    blocking(move || {
        let fit = state.store.fit(&id)?;
        let req = PredictiveRequest { horizon: q.horizon, quantiles, x: None, z: None, seed: q.seed };
        ops::predictive(&state.store, &fit, &req, &state.config)
    })
    .await
    .map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizeBody {
    fit: String,
    policy: BudgetPolicy,
    #[serde(default)]
    z: Option<Vec<Vec<f64>>>,
}

async fn optimize(state: Arc<AppState>, body: Bytes, scheme: Scheme) -> AppResult<Json<Outcome>> {
    let req: OptimizeBody = parse(&body)?;
    blocking(move || {
        ops::execute(&state.store, Operation::Optimize { fit: req.fit, scheme, policy: req.policy, z: req.z })
    })
    .await
    .map(Json)
}

async fn optimize_null(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<Outcome>> {
    optimize(state, body, Scheme::Null).await
}

async fn optimize_forced(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<Outcome>> {
    optimize(state, body, Scheme::Forced).await
}

async fn what_if(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<ops::WhatIfResponse>> {
    let req: WhatIfRequest = parse(&body)?;
    blocking(move || ops::what_if(&state.store, &req, &state.config)).await.map(Json)
}

/// Serves until interrupted.
pub async fn serve(state: Arc<AppState>, port: u16) -> AppResult<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!(port, store = %state.store.root().display(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
