//! REST control surface. Every route lives under `/api/`.
//!
//! | route | |
//! |---|---|
//! | `POST /api/upload` | binary body: ingest one request; multipart: stage `trace`, `payloads` or `config` |
//! | `POST /api/startProcess` | start an experiment (extension) |
//! | `POST /api/stopProcess?drain=` | stop and summarize |
//! | `GET /api/downloadData?id=` | tar of `new_logs`, `final_metrics` and the config |
//! | `GET /api/latest_metrics_data?n=` | newest `final_metrics` docs |
//! | `GET /api/latest_logs?n=` | newest `new_logs` docs |
//! | `POST /api/changeKnowledge` | replace the adaptation rules |
//! | `GET /api/status` | lifecycle and live counters (extension) |

use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use switchboard_core::domain::{ClockMode, ExperimentConfig, PayloadSpec, StrategySpec};
use switchboard_core::knowledge::{IndexName, KnowledgeError};
use switchboard_core::loadgen::{parse_trace, read_tar, IngestTarget, TraceSpec};
use switchboard_core::orchestrator::{Orchestrator, OrchestratorError};

use crate::http_target::HttpTarget;

pub const DEFAULT_LATEST: usize = 50;
const BODY_LIMIT: usize = 512 * 1024 * 1024;

/// Staged upload file names inside the orchestrator's upload directory.
pub const STAGED_TRACE: &str = "trace.csv";
pub const STAGED_PAYLOADS: &str = "payloads.tar";
pub const STAGED_CONFIG: &str = "config.toml";

#[derive(Clone)]
pub struct AppState {
    pub orchestrator: Arc<Orchestrator>,
    /// Base config for `startProcess` when neither the request nor the
    /// uploads provide one.
    pub default_config: Option<ExperimentConfig>,
    /// Real-time replays post to this ingestion URL when set, else they
    /// feed the backlog directly.
    pub replay_url: Option<String>,
}

impl AppState {
    pub fn new(orchestrator: Arc<Orchestrator>) -> Self {
        Self {
            orchestrator,
            default_config: None,
            replay_url: None,
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/upload", post(upload))
        .route("/api/startProcess", post(start_process))
        .route("/api/stopProcess", post(stop_process))
        .route("/api/downloadData", get(download_data))
        .route("/api/latest_metrics_data", get(latest_metrics))
        .route("/api/latest_logs", get(latest_logs))
        .route("/api/changeKnowledge", post(change_knowledge))
        .route("/api/status", get(status))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Ingestion URL of a server bound to `addr`.
pub fn upload_url(addr: std::net::SocketAddr) -> String {
    let mut addr = addr;
    if addr.ip().is_unspecified() {
        addr.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
    }
    format!("http://{addr}/api/upload")
}

pub struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn bad_request(message: impl std::fmt::Display) -> Self {
        ApiError(
            StatusCode::BAD_REQUEST,
            json!({ "error": message.to_string() }),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        let code = match &e {
            OrchestratorError::AlreadyRunning | OrchestratorError::NotRunning => {
                StatusCode::CONFLICT
            }
            OrchestratorError::InvalidConfig(_) | OrchestratorError::Rejected(_) => {
                StatusCode::BAD_REQUEST
            }
            OrchestratorError::UnknownExperiment(_) => StatusCode::NOT_FOUND,
            OrchestratorError::Dropped => StatusCode::TOO_MANY_REQUESTS,
            OrchestratorError::Knowledge(
                KnowledgeError::InvalidSpec(_) | KnowledgeError::UnknownModel(_),
            ) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": e.to_string() });
        if let OrchestratorError::InvalidConfig(errors) = &e {
            body["details"] = errors.iter().map(ToString::to_string).collect();
        }
        ApiError(code, body)
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({ "error": e.to_string() }),
        )
    })?
}

async fn upload(
    State(state): State<AppState>,
    headers: HeaderMap,
    req: Request,
) -> ApiResult<Response> {
    let multipart = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if multipart {
        let form = Multipart::from_request(req, &state)
            .await
            .map_err(ApiError::bad_request)?;
        return stage_uploads(state, form)
            .await
            .map(IntoResponse::into_response);
    }
    let body = Bytes::from_request(req, &state)
        .await
        .map_err(ApiError::bad_request)?;
    let orch = state.orchestrator.clone();
    let id = blocking(move || Ok(orch.ingest(body.to_vec())?)).await?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "request_id": id }))).into_response())
}

async fn stage_uploads(state: AppState, mut form: Multipart) -> ApiResult<Json<serde_json::Value>> {
    let dir = state.orchestrator.upload_dir();
    let mut staged = serde_json::Map::new();
    while let Some(field) = form.next_field().await.map_err(ApiError::bad_request)? {
        let name = field.name().unwrap_or_default().to_string();
        let file = match name.as_str() {
            "trace" => STAGED_TRACE,
            "payloads" => STAGED_PAYLOADS,
            "config" => STAGED_CONFIG,
            other => {
                return Err(ApiError::bad_request(format!(
                    "unknown upload field {other:?} (expected trace, payloads or config)"
                )))
            }
        };
        let data = field.bytes().await.map_err(ApiError::bad_request)?;
        let path = dir.join(file);
        staged.insert(name.clone(), json!(path));
        let dir = dir.clone();
        blocking(move || {
            check_upload(&name, &data)?;
            std::fs::create_dir_all(&dir)
                .and_then(|_| std::fs::write(&path, &data))
                .map_err(|e| {
                    ApiError(
                        StatusCode::INTERNAL_SERVER_ERROR,
                        json!({ "error": e.to_string() }),
                    )
                })
        })
        .await?;
    }
    if staged.is_empty() {
        return Err(ApiError::bad_request("multipart upload carried no fields"));
    }
    Ok(Json(json!({ "staged": staged })))
}

/// Rejects an artifact that a later start would fail on.
fn check_upload(field: &str, data: &[u8]) -> ApiResult<()> {
    let text = || {
        std::str::from_utf8(data)
            .map_err(|_| ApiError::bad_request(format!("{field} is not UTF-8 text")))
    };
    match field {
        "trace" => parse_trace(text()?, "upload")
            .map(drop)
            .map_err(ApiError::bad_request),
        "config" => ExperimentConfig::from_toml(text()?)
            .map(drop)
            .map_err(ApiError::bad_request),
        _ => match read_tar(data) {
            Ok(items) if !items.is_empty() => Ok(()),
            Ok(_) => Err(ApiError::bad_request("payload archive holds no files")),
            Err(e) => Err(ApiError::bad_request(format!("payload archive: {e}"))),
        },
    }
}

/// Body of `startProcess`. With `config` the run uses it as given. Without
/// it the base is the staged config, else the server default, and a staged
/// trace or payload archive replaces the base's.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    #[serde(default)]
    pub config: Option<ExperimentConfig>,
    #[serde(default)]
    pub experiment_id: Option<String>,
    #[serde(default)]
    pub strategy: Option<StrategySpec>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub clock_mode: Option<ClockMode>,
}

impl StartRequest {
    pub fn resolve(
        self,
        uploads: &Path,
        default: Option<&ExperimentConfig>,
    ) -> Result<ExperimentConfig, String> {
        let staged = |name: &str| Some(uploads.join(name)).filter(|p| p.is_file());
        let mut config = match self.config {
            Some(c) => c,
            None => {
                let trace = staged(STAGED_TRACE);
                let mut base = if let Some(path) = staged(STAGED_CONFIG) {
                    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
                    ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?
                } else if let Some(d) = default {
                    d.clone()
                } else if let Some(t) = &trace {
                    ExperimentConfig::new("experiment", TraceSpec::file(t))
                } else {
                    return Err("no config: send one, upload one, or upload a trace".into());
                };
                if let Some(t) = trace {
                    base.trace = TraceSpec::file(t);
                }
                if let Some(p) = staged(STAGED_PAYLOADS) {
                    base.payload = PayloadSpec::Files { path: p };
                }
                base
            }
        };
        if let Some(id) = self.experiment_id {
            config.experiment_id = id;
        }
        if let Some(s) = self.strategy {
            config.strategy = s;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(m) = self.clock_mode {
            config.clock_mode = m;
        }
        Ok(config)
    }
}

async fn start_process(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: StartRequest = if body.iter().all(u8::is_ascii_whitespace) {
        StartRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(ApiError::bad_request)?
    };
    let report = blocking(move || {
        let orch = &state.orchestrator;
        let config = request
            .resolve(&orch.upload_dir(), state.default_config.as_ref())
            .map_err(ApiError::bad_request)?;
        let target = match (&state.replay_url, config.clock_mode) {
            (Some(url), ClockMode::RealTime) => {
                Some(Arc::new(HttpTarget::new(url.clone())) as Arc<dyn IngestTarget>)
            }
            _ => None,
        };
        Ok(orch.start_with_target(config, target)?)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(report)).into_response())
}

#[derive(Debug, Deserialize)]
struct StopQuery {
    #[serde(default = "yes")]
    drain: bool,
}

fn yes() -> bool {
    true
}

async fn stop_process(
    State(state): State<AppState>,
    Query(q): Query<StopQuery>,
) -> ApiResult<Response> {
    let orch = state.orchestrator.clone();
    let summary = blocking(move || Ok(orch.stop_experiment(q.drain)?)).await?;
    Ok(Json(summary).into_response())
}

#[derive(Debug, Deserialize)]
struct DownloadQuery {
    id: Option<String>,
}

async fn download_data(
    State(state): State<AppState>,
    Query(q): Query<DownloadQuery>,
) -> ApiResult<Response> {
    let orch = state.orchestrator.clone();
    let (id, archive) = blocking(move || {
        let id = q.id.or_else(|| orch.current_id()).ok_or_else(|| {
            ApiError(
                StatusCode::NOT_FOUND,
                json!({ "error": "no experiment has run" }),
            )
        })?;
        let archive = orch.export(&id)?;
        Ok((id, archive))
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-tar".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{id}.tar\""),
            ),
        ],
        archive,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct LatestQuery {
    n: Option<usize>,
}

fn latest(state: &AppState, index: IndexName, q: LatestQuery) -> ApiResult<Response> {
    let n = q.n.unwrap_or(DEFAULT_LATEST);
    if n == 0 {
        return Err(ApiError::bad_request("n must be at least 1"));
    }
    Ok(Json(state.orchestrator.latest(index, n)).into_response())
}

async fn latest_metrics(
    State(state): State<AppState>,
    Query(q): Query<LatestQuery>,
) -> ApiResult<Response> {
    latest(&state, IndexName::FinalMetrics, q)
}

async fn latest_logs(
    State(state): State<AppState>,
    Query(q): Query<LatestQuery>,
) -> ApiResult<Response> {
    latest(&state, IndexName::NewLogs, q)
}

async fn change_knowledge(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let spec: StrategySpec = serde_json::from_slice(&body).map_err(ApiError::bad_request)?;
    let orch = state.orchestrator.clone();
    let kind = spec.kind.clone();
    blocking(move || Ok(orch.change_knowledge(spec)?)).await?;
    Ok(Json(json!({ "strategy": kind })).into_response())
}

async fn status(
    State(state): State<AppState>,
) -> Json<switchboard_core::orchestrator::StatusReport> {
    Json(state.orchestrator.status())
}
