//! The HTTP/JSON service boundary: create queues, submit tasks, inspect
//! task and queue state.
//!
//! Error responses all carry the same JSON shape,
//! `{"code", "message", "field"?}`, with `code` drawn from a closed set:
//! `duplicate_name`, `unknown_queue`, `unknown_task`, `validation_failed`,
//! `store_unavailable`.

use std::net::SocketAddr;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::manager::{QueueError, SubmitError, TaskQueueManager};
use crate::store::{open_store, StoreConfig};
use crate::task::{AttemptRecord, Task, TaskId, TaskState, TaskSubmission};
use crate::worker::WorkerPoolConfig;

/// Wire shape of every error response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            field: None,
        }
    }

    fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }
}

struct ErrorResponse(StatusCode, ApiError);

impl IntoResponse for ErrorResponse {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn queue_error(err: QueueError) -> ErrorResponse {
    match err {
        QueueError::DuplicateName(name) => ErrorResponse(
            StatusCode::CONFLICT,
            ApiError::new("duplicate_name", format!("queue {name:?} already exists")),
        ),
        QueueError::InvalidConfig(message) => ErrorResponse(
            StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::new("validation_failed", message),
        ),
        QueueError::UnknownQueue(name) => unknown_queue(&name),
        QueueError::NotEnqueueable => ErrorResponse(
            StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::new("validation_failed", "task is not enqueueable"),
        ),
        QueueError::Store(e) => store_unavailable(&e.to_string()),
    }
}

fn unknown_queue(name: &str) -> ErrorResponse {
    ErrorResponse(
        StatusCode::NOT_FOUND,
        ApiError::new("unknown_queue", format!("no queue named {name:?}")),
    )
}

fn store_unavailable(message: &str) -> ErrorResponse {
    ErrorResponse(
        StatusCode::SERVICE_UNAVAILABLE,
        ApiError::new("store_unavailable", message),
    )
}

fn bad_json(rejection: JsonRejection) -> ErrorResponse {
    ErrorResponse(
        StatusCode::UNPROCESSABLE_ENTITY,
        ApiError::new("validation_failed", rejection.body_text()),
    )
}

#[derive(Debug, Deserialize)]
struct CreateQueueBody {
    name: Option<String>,
    capacity: Option<i64>,
    refill_interval_ms: Option<i64>,
}

#[derive(Debug, Deserialize)]
struct SubmitTaskBody {
    name: Option<String>,
    destination: Option<String>,
    method: Option<String>,
    payload_base64: Option<String>,
    content_type: Option<String>,
    max_retries: Option<i64>,
    backoff_ms: Option<i64>,
    ack_timeout_ms: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitTaskResponse {
    pub task_id: TaskId,
}

/// Response of `GET /v1/tasks/{id}`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TaskView {
    pub task: Task,
    pub state: TaskState,
    pub attempts_used: u32,
    pub attempt_history: Vec<AttemptRecord>,
}

/// Builds the v1 API router around a running manager.
pub fn router(manager: TaskQueueManager) -> Router {
    Router::new()
        .route("/v1/queues", post(create_queue).get(list_queues))
        .route("/v1/queues/{name}/tasks", post(submit_task))
        .route("/v1/queues/{name}/stats", get(queue_stats))
        .route("/v1/tasks/{id}", get(get_task))
        .with_state(manager)
}

async fn create_queue(
    State(manager): State<TaskQueueManager>,
    body: Result<Json<CreateQueueBody>, JsonRejection>,
) -> Result<impl IntoResponse, ErrorResponse> {
    let Json(body) = body.map_err(bad_json)?;
    let name = body.name.unwrap_or_default();
    if name.is_empty() {
        return Err(ErrorResponse(
            StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::new("validation_failed", "queue name must be non-empty").with_field("name"),
        ));
    }
    let capacity = positive_u32("capacity", body.capacity)?;
    let refill_interval_ms = positive_u64("refill_interval_ms", body.refill_interval_ms)?;
    let config = manager
        .create_queue(&name, capacity, refill_interval_ms)
        .await
        .map_err(queue_error)?;
    Ok((StatusCode::CREATED, Json(config)))
}

fn positive_u32(field: &str, value: Option<i64>) -> Result<u32, ErrorResponse> {
    match value {
        Some(v) if v >= 1 => u32::try_from(v).map_err(|_| range_error(field)),
        _ => Err(range_error(field)),
    }
}

fn positive_u64(field: &str, value: Option<i64>) -> Result<u64, ErrorResponse> {
    match value {
        Some(v) if v >= 1 => Ok(v as u64),
        _ => Err(range_error(field)),
    }
}

fn range_error(field: &str) -> ErrorResponse {
    ErrorResponse(
        StatusCode::UNPROCESSABLE_ENTITY,
        ApiError::new("validation_failed", format!("{field} must be a positive integer"))
            .with_field(field),
    )
}

async fn list_queues(State(manager): State<TaskQueueManager>) -> impl IntoResponse {
    Json(manager.list_queues())
}

async fn submit_task(
    State(manager): State<TaskQueueManager>,
    Path(queue): Path<String>,
    body: Result<Json<SubmitTaskBody>, JsonRejection>,
) -> Result<impl IntoResponse, ErrorResponse> {
    // Queue existence first: submissions to unknown queues are 404 even
    // when the body is also malformed.
    if manager.queue_stats(&queue).is_err() {
        return Err(unknown_queue(&queue));
    }
    let Json(body) = body.map_err(bad_json)?;
    let payload = match &body.payload_base64 {
        None => Vec::new(),
        Some(encoded) => BASE64.decode(encoded).map_err(|e| {
            ErrorResponse(
                StatusCode::UNPROCESSABLE_ENTITY,
                ApiError::new("validation_failed", format!("invalid base64: {e}"))
                    .with_field("payload_base64"),
            )
        })?,
    };

    let submission = TaskSubmission {
        queue,
        name: body.name,
        destination: body.destination,
        method: body.method,
        content_type: body.content_type,
        payload,
        max_retries: body.max_retries,
        backoff_ms: body.backoff_ms,
        ack_timeout_ms: body.ack_timeout_ms,
    };

    match manager.submit(submission).await {
        Ok(task_id) => Ok((StatusCode::ACCEPTED, Json(SubmitTaskResponse { task_id }))),
        Err(SubmitError::UnknownQueue(name)) => Err(unknown_queue(&name)),
        Err(SubmitError::Validation(e)) => Err(ErrorResponse(
            StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::new("validation_failed", e.message.clone()).with_field(e.field),
        )),
        Err(SubmitError::Store(e)) => Err(store_unavailable(&e.to_string())),
    }
}

async fn queue_stats(
    State(manager): State<TaskQueueManager>,
    Path(name): Path<String>,
) -> Result<impl IntoResponse, ErrorResponse> {
    let stats = manager.queue_stats(&name).map_err(queue_error)?;
    Ok(Json(stats))
}

async fn get_task(
    State(manager): State<TaskQueueManager>,
    Path(id): Path<String>,
) -> Result<impl IntoResponse, ErrorResponse> {
    let not_found = || {
        ErrorResponse(
            StatusCode::NOT_FOUND,
            ApiError::new("unknown_task", format!("no task {id:?}")),
        )
    };
    let task_id: TaskId = id.parse().map_err(|_| not_found())?;
    let task = manager.store().get_task(task_id).ok_or_else(not_found)?;
    let attempt_history = manager.store().attempt_history(task_id);
    Ok(Json(TaskView {
        state: task.state,
        attempts_used: task.attempts_used,
        task,
        attempt_history,
    }))
}

/// Everything needed to run the service process.
#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub listen: String,
    pub store: StoreConfig,
    pub pool: WorkerPoolConfig,
}

/// Binds the API router on an ephemeral port for in-process use (tests,
/// the benchmark harness). Returns the bound address.
pub async fn spawn_app(manager: TaskQueueManager) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let app = router(manager);
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok((addr, handle))
}

/// Opens the store, starts the engine (recovery included), and serves the
/// API until SIGINT/SIGTERM, then shuts down gracefully.
pub async fn serve(config: ServeConfig) -> Result<(), Box<dyn std::error::Error>> {
    let store = open_store(&config.store)?;
    let (manager, report) = TaskQueueManager::start(store, config.pool).await?;
    tracing::info!(
        queues = report.queues_restored,
        requeued = report.requeued,
        retried = report.retried,
        failed = report.failed,
        "recovery complete"
    );
    if let Some(corruption) = &report.corruption {
        tracing::warn!(
            records_recovered = corruption.records_recovered,
            bytes_dropped = corruption.bytes_dropped,
            "log had a corrupt tail; recovered the clean prefix"
        );
    }

    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    let addr = listener.local_addr()?;
    // The startup line is the contract for wrappers that need the port.
    println!("taskq listening on http://{addr}");

    let app = router(manager.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    manager.shutdown().await;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    let terminate = async {
        let mut sig = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("sigterm handler");
        sig.recv().await;
    };
    tokio::select! {
        _ = ctrl_c => {}
        _ = terminate => {}
    }
}
