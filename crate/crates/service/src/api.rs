//! HTTP API. Every response body is a JSON object carrying `schema_version`.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router as HttpRouter};
use expert_router::executor::{ExecError, Executor, TaskInstruction};
use expert_router::registry::{DescriptionStyle, NewExpert, Registry, RegistryError};
use expert_router::router::{RouteError, RoutingSnapshot, Strategy};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Components, ServiceConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Shared service state. The routing snapshot is swapped atomically on
/// registration so `/route` never waits on adapter swaps.
pub struct AppState {
    executor: Arc<Executor>,
    snapshot: RwLock<Arc<RoutingSnapshot>>,
    register_lock: tokio::sync::Mutex<()>,
    default_strategy: Strategy,
    default_style: DescriptionStyle,
    persist_to: Option<PathBuf>,
}

impl AppState {
    pub fn new(components: Components, cfg: &ServiceConfig) -> Result<Self, RouteError> {
        let snapshot = components.executor.router().snapshot(components.registry)?;
        Ok(AppState {
            executor: components.executor,
            snapshot: RwLock::new(Arc::new(snapshot)),
            register_lock: tokio::sync::Mutex::new(()),
            default_strategy: cfg.strategy,
            default_style: cfg.style,
            persist_to: if cfg.persist_registry { cfg.registry.clone() } else { None },
        })
    }

    pub fn executor(&self) -> &Arc<Executor> {
        &self.executor
    }

    pub fn snapshot(&self) -> Arc<RoutingSnapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError { status, code: code.into(), message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

pub fn exec_status(e: &ExecError) -> StatusCode {
    match e {
        ExecError::Validation(_) => StatusCode::BAD_REQUEST,
        ExecError::NoExpertSelected(_) | ExecError::Serving(_) => StatusCode::SERVICE_UNAVAILABLE,
        ExecError::RoutingTransport(_) | ExecError::DispatchTransport(_) | ExecError::Protocol(_) => {
            StatusCode::BAD_GATEWAY
        }
    }
}

impl From<ExecError> for ApiError {
    fn from(e: ExecError) -> Self {
        ApiError::new(exec_status(&e), e.code(), e.to_string())
    }
}

impl From<RouteError> for ApiError {
    fn from(e: RouteError) -> Self {
        ExecError::from(e).into()
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::DuplicateName(_) => ApiError::new(StatusCode::CONFLICT, "duplicate_name", e.to_string()),
            other => ApiError::bad_request(other.to_string()),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": {"code": self.code, "message": self.message},
        });
        (self.status, Json(body)).into_response()
    }
}

/// Serializes `body` and adds `schema_version`. `body` must serialize to an object.
fn envelope<T: Serialize>(body: &T) -> Result<Json<Value>, ApiError> {
    let mut v = serde_json::to_value(body).map_err(|e| ApiError::internal(e.to_string()))?;
    let obj = v.as_object_mut().ok_or_else(|| ApiError::internal("response is not an object"))?;
    obj.insert("schema_version".into(), SCHEMA_VERSION.into());
    Ok(Json(v))
}

type ApiResult = Result<Json<Value>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))
}

async fn register_expert(State(app): State<Arc<AppState>>, body: Result<Json<NewExpert>, JsonRejection>) -> ApiResult {
    let Json(expert) = body?;
    let _guard = app.register_lock.lock().await;
    let app2 = app.clone();
    let expert_id = blocking(move || -> Result<usize, ApiError> {
        let current = app2.snapshot();
        let mut registry: Registry = current.registry().clone();
        let size = expert.adapter_size_bytes;
        let id = registry.register(expert)?;
        let snapshot = app2.executor.router().snapshot(registry)?;
        app2.executor
            .manager()
            .add_adapter(id, size)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "serving", e.to_string()))?;
        if let Some(path) = &app2.persist_to {
            if let Err(e) = std::fs::write(path, snapshot.registry().to_json()) {
                log::warn!("could not persist registry to {}: {e}", path.display());
            }
        }
        *app2.snapshot.write().expect("snapshot lock poisoned") = Arc::new(snapshot);
        Ok(id)
    })
    .await??;
    envelope(&json!({ "expert_id": expert_id }))
}

async fn list_experts(State(app): State<Arc<AppState>>) -> ApiResult {
    let snap = app.snapshot();
    let reg = snap.registry();
    envelope(&json!({
        "experts": reg.experts(),
        "catalog": {
            "simple": reg.catalog(DescriptionStyle::Simple).map(|c| c.entries).unwrap_or_default(),
            "abstract": reg.catalog(DescriptionStyle::Abstract).map(|c| c.entries).unwrap_or_default(),
        },
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteRequest {
    text: String,
    strategy: Option<Strategy>,
    style: Option<DescriptionStyle>,
}

async fn route(State(app): State<Arc<AppState>>, body: Result<Json<RouteRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    let strategy = req.strategy.unwrap_or(app.default_strategy);
    let style = req.style.unwrap_or(app.default_style);
    let snap = app.snapshot();
    let app2 = app.clone();
    let decision = blocking(move || app2.executor.router().route(&snap, &req.text, strategy, style)).await??;
    envelope(&decision)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExecuteRequest {
    task_id: String,
    text: String,
    #[serde(default)]
    truth_label: Option<String>,
    strategy: Option<Strategy>,
    style: Option<DescriptionStyle>,
}

async fn execute(State(app): State<Arc<AppState>>, body: Result<Json<ExecuteRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    if req.task_id.trim().is_empty() {
        return Err(ApiError::bad_request("task_id is empty"));
    }
    let strategy = req.strategy.unwrap_or(app.default_strategy);
    let style = req.style.unwrap_or(app.default_style);
    let task = TaskInstruction { task_id: req.task_id, text: req.text, truth_label: req.truth_label };
    let snap = app.snapshot();
    let app2 = app.clone();
    let result = blocking(move || app2.executor.execute(&snap, &task, strategy, style)).await??;
    envelope(&result)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchRequest {
    tasks: Vec<TaskInstruction>,
    #[serde(default)]
    batching: bool,
    strategy: Option<Strategy>,
    style: Option<DescriptionStyle>,
}

async fn execute_batch(State(app): State<Arc<AppState>>, body: Result<Json<BatchRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    let strategy = req.strategy.unwrap_or(app.default_strategy);
    let style = req.style.unwrap_or(app.default_style);
    let snap = app.snapshot();
    let app2 = app.clone();
    let out = blocking(move || app2.executor.execute_batch(&snap, &req.tasks, strategy, style, req.batching)).await?;
    let results: Vec<Value> = out
        .into_iter()
        .map(|r| match r {
            Ok(res) => json!({"task_id": res.task_id.clone(), "status": "ok", "result": res}),
            Err(e) => json!({
                "task_id": e.task_id,
                "status": "error",
                "error": {"code": e.error.code(), "message": e.error.to_string()},
            }),
        })
        .collect();
    envelope(&json!({ "batching": req.batching, "results": results }))
}

async fn serving_state(State(app): State<Arc<AppState>>) -> ApiResult {
    let manager = app.executor.manager();
    let s = manager.snapshot();
    let mut body = serde_json::to_value(&s).map_err(|e| ApiError::internal(e.to_string()))?;
    body["memory_used_bytes"] = s.memory_used().into();
    body["n_experts"] = app.snapshot().registry().len().into();
    body["now_ms"] = manager.clock().now_ms().into();
    envelope(&body)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn app(state: Arc<AppState>) -> HttpRouter {
    HttpRouter::new()
        .route("/experts", post(register_expert).get(list_experts))
        .route("/route", post(route))
        .route("/execute", post(execute))
        .route("/execute_batch", post(execute_batch))
        .route("/state", get(serving_state))
        .fallback(not_found)
        .with_state(state)
}

/// Binds `cfg.listen` and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, listen: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
