//! HTTP front end for steering infills.
//!
//! A session starts from an uploaded MIDI file (version 0). Each infill
//! request masks some `(bar, track)` cells of a parent version, optionally
//! rewrites control bins in the encoder input, decodes with the shared model
//! and stores the result as a new version. Every version can be exported as
//! MIDI. Sessions persist under `data_dir` and are reloaded on start.

pub mod api;
pub mod config;
pub mod engine;
pub mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use musfill_core::codec::{decode_tokens, encode_song};
use musfill_core::controls::compute_control_set;
use musfill_core::midi::{read_song, write_midi};
use musfill_core::model::{read_checkpoint, ModelParams};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::api::{
    track_infos, ErrorBody, InfillRequest, InfillResponse, TestsetResponse, UploadResponse, VersionResponse,
    API_VERSION,
};
use crate::config::ServiceConfig;
use crate::engine::{run_infill, InfillError};
use crate::store::{Store, StoreError, Version};

pub const MIDI_CONTENT_TYPE: &str = "audio/midi";
const SESSIONS_DIR: &str = "sessions";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no checkpoint configured")]
    NoCheckpoint,
    #[error("cannot load checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shared by all handlers. Model parameters never change after start-up.
#[derive(Clone)]
pub struct AppState {
    pub params: Arc<ModelParams<f32>>,
    pub store: Arc<Store>,
    pub decodes: Arc<Semaphore>,
    pub config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig, params: ModelParams<f32>) -> Result<Self, ServiceError> {
        config.validate()?;
        let store = Store::open(&config.data_dir.join(SESSIONS_DIR))?;
        Ok(Self {
            params: Arc::new(params),
            store: Arc::new(store),
            decodes: Arc::new(Semaphore::new(config.max_concurrent_decodes)),
            config: Arc::new(config),
        })
    }

    /// Load the configured checkpoint and open the store.
    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        let path = config.checkpoint.clone().ok_or(ServiceError::NoCheckpoint)?;
        let params = read_checkpoint(&path).map_err(|e| ServiceError::Checkpoint {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Self::new(config, params)
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        log::error!("{e}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            api: API_VERSION.into(),
            error: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

impl From<InfillError> for ApiError {
    fn from(e: InfillError) -> Self {
        if e.is_client_error() {
            Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        } else {
            Self::internal(e)
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn midi_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, MIDI_CONTENT_TYPE)], bytes).into_response()
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/v1/songs", post(upload).layer(DefaultBodyLimit::max(limit)))
        .route("/v1/songs/{id}", get(summary))
        .route("/v1/songs/{id}/infill", post(infill))
        .route("/v1/songs/{id}/versions/{vid}", get(version))
        .route("/v1/songs/{id}/versions/{vid}/midi", get(export))
        .route("/v1/testset", get(testset))
        .route("/v1/testset/{name}", get(testset_file))
        .with_state(state)
}

async fn upload(State(state): State<AppState>, body: Result<Bytes, BytesRejection>) -> ApiResult<Json<UploadResponse>> {
    let bytes = body?;
    let (song, report) = read_song(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let controls = compute_control_set(&song).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let tokens = encode_song(&song, Some(&controls)).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let response = UploadResponse {
        api: API_VERSION.into(),
        song_id: String::new(),
        version_id: 0,
        controls: controls.clone(),
        tokens: tokens.to_text(),
        bars: song.bars,
        time_signature: song.time_signature,
        tempo_bpm: song.tempo_bpm,
        tracks: track_infos(&song),
        truncated: report.truncated_from_bars.is_some(),
        truncated_from_bars: report.truncated_from_bars,
    };
    let v0 = Version {
        id: 0,
        parent: None,
        tokens,
        controls,
        request: None,
        matched: BTreeMap::new(),
        truncated: false,
    };
    let store = state.store.clone();
    let handle = tokio::task::spawn_blocking(move || store.create(&bytes, song, report.truncated_from_bars, v0))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    let song_id = handle.lock().await.song_id.clone();
    log::info!("session {song_id}: uploaded {} bars", response.bars);
    Ok(Json(UploadResponse { song_id, ..response }))
}

fn session(state: &AppState, id: &str) -> ApiResult<store::SessionHandle> {
    state
        .store
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown song {id}")))
}

async fn summary(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<api::SessionSummary>> {
    Ok(Json(session(&state, &id)?.lock().await.summary()))
}

async fn infill(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<InfillRequest>, JsonRejection>,
) -> ApiResult<Json<InfillResponse>> {
    let Json(req) = body?;
    let handle = session(&state, &id)?;
    // Held until the new version is stored: one request per session at a time.
    let mut s = handle.lock().await;
    let parent_id = req.parent_version.unwrap_or(s.versions.len() - 1);
    let parent = s
        .versions
        .get(parent_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown version {parent_id} of song {id}")))?
        .clone();
    let outcome = {
        let _permit = state.decodes.acquire().await.map_err(ApiError::internal)?;
        let params = state.params.clone();
        let req = req.clone();
        tokio::task::spawn_blocking(move || run_infill(&params, &parent.tokens, &parent.controls, &req))
            .await
            .map_err(ApiError::internal)??
    };
    let version_id = s.versions.len();
    s.versions.push(Version {
        id: version_id,
        parent: Some(parent_id),
        tokens: outcome.tokens.clone(),
        controls: outcome.actual.clone(),
        request: Some(req.clone()),
        matched: outcome.matched.clone(),
        truncated: outcome.truncated,
    });
    if let Err(e) = state.store.persist(&s) {
        s.versions.pop();
        return Err(ApiError::internal(e));
    }
    log::info!("session {id}: version {version_id} from {parent_id} (seed {})", req.seed);
    Ok(Json(InfillResponse {
        api: API_VERSION.into(),
        song_id: id,
        version_id,
        parent_version: parent_id,
        seed: req.seed,
        tokens: outcome.tokens.to_text(),
        controls: outcome.actual,
        requested_controls: outcome.requested,
        matched: outcome.matched,
        truncated: outcome.truncated,
        tracks: track_infos(&outcome.song),
    }))
}

async fn stored_version(state: &AppState, id: &str, vid: usize) -> ApiResult<Version> {
    let handle = session(state, id)?;
    let s = handle.lock().await;
    s.versions
        .get(vid)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown version {vid} of song {id}")))
}

async fn version(
    State(state): State<AppState>,
    UrlPath((id, vid)): UrlPath<(String, usize)>,
) -> ApiResult<Json<VersionResponse>> {
    let v = stored_version(&state, &id, vid).await?;
    let song = decode_tokens(&v.tokens).map_err(ApiError::internal)?;
    Ok(Json(VersionResponse {
        api: API_VERSION.into(),
        song_id: id,
        version_id: v.id,
        parent_version: v.parent,
        tokens: v.tokens.to_text(),
        controls: v.controls,
        tracks: track_infos(&song),
    }))
}

async fn export(State(state): State<AppState>, UrlPath((id, vid)): UrlPath<(String, usize)>) -> ApiResult<Response> {
    let v = stored_version(&state, &id, vid).await?;
    let song = decode_tokens(&v.tokens).map_err(ApiError::internal)?;
    Ok(midi_response(write_midi(&song).map_err(ApiError::internal)?))
}

/// Sorted `.mid`/`.midi` file names in the configured sample directory.
pub fn list_testset(dir: Option<&Path>) -> std::io::Result<Vec<String>> {
    let Some(dir) = dir else {
        return Ok(vec![]);
    };
    let mut names = vec![];
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_midi = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if is_midi && path.is_file() {
            names.extend(path.file_name().and_then(|n| n.to_str()).map(String::from));
        }
    }
    names.sort();
    Ok(names)
}

async fn testset(State(state): State<AppState>) -> ApiResult<Json<TestsetResponse>> {
    let samples = list_testset(state.config.testset_dir.as_deref()).map_err(ApiError::internal)?;
    Ok(Json(TestsetResponse {
        api: API_VERSION.into(),
        samples,
    }))
}

async fn testset_file(State(state): State<AppState>, UrlPath(name): UrlPath<String>) -> ApiResult<Response> {
    let dir = state.config.testset_dir.as_deref();
    // Only listed names are served, which rules out path tricks.
    if !list_testset(dir).map_err(ApiError::internal)?.contains(&name) {
        return Err(ApiError::not_found(format!("unknown sample {name}")));
    }
    let bytes = std::fs::read(dir.expect("listed").join(&name)).map_err(ApiError::internal)?;
    Ok(midi_response(bytes))
}

/// Bind and serve until ctrl-c.
pub async fn serve(state: AppState) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", state.config.host, state.config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind { addr: addr.clone(), source })?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
