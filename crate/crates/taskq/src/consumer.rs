//! Mock consumer: a configurable downstream service for tests and
//! benchmarks. It accepts task deliveries on any path, applies scripted
//! latency and failure behavior, and records every arrival for later
//! assertions.
//!
//! Reserved paths (never treated as task intake): `GET /arrivals` returns
//! the arrival log, `POST /reset` clears the log and the per-task failure
//! counters.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::clock::now_ms;

/// Scripted behavior for the consumer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsumerScript {
    /// Sleep before responding.
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub failure_mode: FailureMode,
    /// Status used when the script says "fail".
    #[serde(default = "default_status_on_fail")]
    pub status_on_fail: u16,
}

fn default_status_on_fail() -> u16 {
    500
}

impl Default for ConsumerScript {
    fn default() -> Self {
        Self {
            latency_ms: 0,
            failure_mode: FailureMode::None,
            status_on_fail: 500,
        }
    }
}

/// How deliveries fail, if at all.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FailureMode {
    /// Everything acks with 200.
    #[default]
    None,
    /// The first `k` deliveries of each task id fail; later ones ack.
    FailFirstK { k: u32 },
    /// Each delivery independently fails with probability `p`.
    FailRate { p: f64 },
    AlwaysFail,
    /// Hold the connection open without ever responding (drives upstream
    /// ack timeouts).
    BlackHole,
}

/// One received delivery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    /// `X-Task-Id` header, empty if missing.
    pub task_id: String,
    /// `X-Task-Attempt` header, 0 if missing or unparsable.
    pub attempt: u32,
    /// `X-Queue-Name` header, empty if missing.
    pub queue: String,
    pub received_at_ms: u64,
    /// In-flight handler count at receipt, this request included.
    pub concurrent: i64,
    /// Status the consumer responded with; absent for black-holed requests.
    pub responded_status: Option<u16>,
}

/// Shared state behind the consumer's router.
#[derive(Debug)]
pub struct ConsumerState {
    script: Mutex<ConsumerScript>,
    arrivals: Mutex<Vec<Arrival>>,
    deliveries_per_task: Mutex<HashMap<String, u32>>,
    concurrent: AtomicI64,
}

impl ConsumerState {
    pub fn new(script: ConsumerScript) -> Arc<Self> {
        Arc::new(Self {
            script: Mutex::new(script),
            arrivals: Mutex::new(Vec::new()),
            deliveries_per_task: Mutex::new(HashMap::new()),
            concurrent: AtomicI64::new(0),
        })
    }

    /// Replaces the script (tests flip behavior between phases).
    pub fn set_script(&self, script: ConsumerScript) {
        *self.script.lock().expect("script lock") = script;
    }

    pub fn script(&self) -> ConsumerScript {
        *self.script.lock().expect("script lock")
    }

    /// Snapshot of the arrival log.
    pub fn arrivals(&self) -> Vec<Arrival> {
        self.arrivals.lock().expect("arrival log lock").clone()
    }

    /// Highest concurrent-connection count seen across all arrivals.
    pub fn max_concurrent(&self) -> i64 {
        self.arrivals()
            .iter()
            .map(|a| a.concurrent)
            .max()
            .unwrap_or(0)
    }

    pub fn reset(&self) {
        self.arrivals.lock().expect("arrival log lock").clear();
        self.deliveries_per_task
            .lock()
            .expect("delivery counters lock")
            .clear();
    }

    /// Delivery ordinal for this task id (1 = first delivery seen).
    fn next_delivery_number(&self, task_id: &str) -> u32 {
        let mut counters = self.deliveries_per_task.lock().expect("delivery counters lock");
        let n = counters.entry(task_id.to_string()).or_insert(0);
        *n += 1;
        *n
    }

    fn log(&self, arrival: Arrival) {
        self.arrivals.lock().expect("arrival log lock").push(arrival);
    }

    fn set_responded(&self, task_id: &str, received_at_ms: u64, status: u16) {
        let mut log = self.arrivals.lock().expect("arrival log lock");
        if let Some(arrival) = log
            .iter_mut()
            .rev()
            .find(|a| a.task_id == task_id && a.received_at_ms == received_at_ms)
        {
            arrival.responded_status = Some(status);
        }
    }
}

struct ConcurrencyGuard(Arc<ConsumerState>);

impl ConcurrencyGuard {
    fn enter(state: &Arc<ConsumerState>) -> (Self, i64) {
        let now = state.concurrent.fetch_add(1, Ordering::SeqCst) + 1;
        (Self(state.clone()), now)
    }
}

impl Drop for ConcurrencyGuard {
    fn drop(&mut self) {
        self.0.concurrent.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Builds the consumer router around shared state.
pub fn router(state: Arc<ConsumerState>) -> Router {
    Router::new()
        .route("/arrivals", get(get_arrivals))
        .route("/reset", post(reset))
        .fallback(intake)
        .with_state(state)
}

async fn get_arrivals(State(state): State<Arc<ConsumerState>>) -> Json<Vec<Arrival>> {
    Json(state.arrivals())
}

async fn reset(State(state): State<Arc<ConsumerState>>) -> StatusCode {
    state.reset();
    StatusCode::NO_CONTENT
}

async fn intake(State(state): State<Arc<ConsumerState>>, request: Request) -> impl IntoResponse {
    // Guard lives for the whole handler, including the latency sleep and
    // any black-hole wait, so the counter tracks open connections.
    let (_guard, concurrent) = ConcurrencyGuard::enter(&state);
    let received_at_ms = now_ms();

    fn header(request: &Request, name: &str) -> Option<String> {
        request
            .headers()
            .get(name)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string)
    }
    let task_id = header(&request, "x-task-id");
    let attempt = header(&request, "x-task-attempt").and_then(|v| v.parse::<u32>().ok());
    let queue = header(&request, "x-queue-name").unwrap_or_default();
    drop(request);

    let (Some(task_id), Some(attempt)) = (task_id, attempt) else {
        state.log(Arrival {
            task_id: String::new(),
            attempt: 0,
            queue,
            received_at_ms,
            concurrent,
            responded_status: Some(400),
        });
        return StatusCode::BAD_REQUEST;
    };

    state.log(Arrival {
        task_id: task_id.clone(),
        attempt,
        queue,
        received_at_ms,
        concurrent,
        responded_status: None,
    });
    let delivery_number = state.next_delivery_number(&task_id);
    let script = state.script();

    if script.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(script.latency_ms)).await;
    }

    let fail = match script.failure_mode {
        FailureMode::None => false,
        FailureMode::FailFirstK { k } => delivery_number <= k,
        FailureMode::FailRate { p } => rand::random::<f64>() < p,
        FailureMode::AlwaysFail => true,
        FailureMode::BlackHole => {
            // Hold the connection until the client gives up; the guard
            // releases when the connection drops.
            tokio::time::sleep(Duration::from_secs(3_600)).await;
            return StatusCode::OK;
        }
    };

    let status = if fail { script.status_on_fail } else { 200 };
    state.set_responded(&task_id, received_at_ms, status);
    StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
}

/// A spawned consumer bound to an ephemeral local port.
pub struct ConsumerHandle {
    pub addr: SocketAddr,
    pub state: Arc<ConsumerState>,
    server: tokio::task::JoinHandle<()>,
}

impl ConsumerHandle {
    /// URL tasks should be addressed to.
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn stop(self) {
        self.server.abort();
    }
}

/// Spawns a consumer on `127.0.0.1:0` for in-process tests and benchmarks.
pub async fn spawn(script: ConsumerScript) -> std::io::Result<ConsumerHandle> {
    let state = ConsumerState::new(script);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let app = router(state.clone());
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(ConsumerHandle {
        addr,
        state,
        server,
    })
}

/// Runs a consumer on a fixed address until the process stops. Used by the
/// `taskq consumer` subcommand.
pub async fn run(listen: &str, script: ConsumerScript) -> std::io::Result<()> {
    let state = ConsumerState::new(script);
    let listener = tokio::net::TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    println!("taskq consumer listening on http://{addr}");
    axum::serve(listener, router(state)).await
}

#[cfg(test)]
mod tests {
    use super::*;

    async fn deliver(handle: &ConsumerHandle, task_id: &str, attempt: u32) -> u16 {
        reqwest::Client::new()
            .post(handle.url("/run"))
            .header("X-Task-Id", task_id)
            .header("X-Task-Attempt", attempt)
            .header("X-Queue-Name", "q")
            .send()
            .await
            .unwrap()
            .status()
            .as_u16()
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn acks_by_default_and_logs_arrivals() {
        let handle = spawn(ConsumerScript::default()).await.unwrap();
        assert_eq!(deliver(&handle, "t1", 1).await, 200);
        assert_eq!(deliver(&handle, "t1", 2).await, 200);
        let arrivals = handle.state.arrivals();
        assert_eq!(arrivals.len(), 2);
        assert_eq!(arrivals[0].task_id, "t1");
        assert_eq!(arrivals[0].attempt, 1);
        assert_eq!(arrivals[1].attempt, 2);
        assert!(arrivals[1].received_at_ms >= arrivals[0].received_at_ms);
        handle.stop();
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn fail_first_k_counts_per_task_id() {
        let handle = spawn(ConsumerScript {
            failure_mode: FailureMode::FailFirstK { k: 2 },
            ..Default::default()
        })
        .await
        .unwrap();

        // Interleaved tasks get independent counters.
        assert_eq!(deliver(&handle, "a", 1).await, 500);
        assert_eq!(deliver(&handle, "b", 1).await, 500);
        assert_eq!(deliver(&handle, "a", 2).await, 500);
        assert_eq!(deliver(&handle, "a", 3).await, 200);
        assert_eq!(deliver(&handle, "b", 2).await, 500);
        assert_eq!(deliver(&handle, "b", 3).await, 200);
        handle.stop();
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn custom_fail_status_and_always_fail() {
        let handle = spawn(ConsumerScript {
            failure_mode: FailureMode::AlwaysFail,
            status_on_fail: 503,
            ..Default::default()
        })
        .await
        .unwrap();
        for attempt in 1..=3 {
            assert_eq!(deliver(&handle, "t", attempt).await, 503);
        }
        handle.stop();
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn missing_headers_are_logged_and_rejected() {
        let handle = spawn(ConsumerScript::default()).await.unwrap();
        let status = reqwest::Client::new()
            .post(handle.url("/run"))
            .send()
            .await
            .unwrap()
            .status();
        assert_eq!(status.as_u16(), 400);
        let arrivals = handle.state.arrivals();
        assert_eq!(arrivals.len(), 1);
        assert_eq!(arrivals[0].task_id, "");
        assert_eq!(arrivals[0].responded_status, Some(400));
        handle.stop();
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn reset_clears_log_and_counters() {
        let handle = spawn(ConsumerScript {
            failure_mode: FailureMode::FailFirstK { k: 1 },
            ..Default::default()
        })
        .await
        .unwrap();
        assert_eq!(deliver(&handle, "t", 1).await, 500);
        assert_eq!(deliver(&handle, "t", 2).await, 200);

        reqwest::Client::new()
            .post(handle.url("/reset"))
            .send()
            .await
            .unwrap();
        assert!(handle.state.arrivals().is_empty());
        // Counter restarted: the "first" delivery fails again.
        assert_eq!(deliver(&handle, "t", 3).await, 500);
        handle.stop();
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn black_hole_never_responds() {
        let handle = spawn(ConsumerScript {
            failure_mode: FailureMode::BlackHole,
            ..Default::default()
        })
        .await
        .unwrap();
        let result = reqwest::Client::new()
            .post(handle.url("/run"))
            .header("X-Task-Id", "t")
            .header("X-Task-Attempt", "1")
            .timeout(Duration::from_millis(300))
            .send()
            .await;
        assert!(result.unwrap_err().is_timeout());
        // The arrival was still logged, with no response recorded.
        let arrivals = handle.state.arrivals();
        assert_eq!(arrivals.len(), 1);
        assert_eq!(arrivals[0].responded_status, None);
        handle.stop();
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn arrivals_endpoint_serves_the_log() {
        let handle = spawn(ConsumerScript::default()).await.unwrap();
        deliver(&handle, "t", 1).await;
        let fetched: Vec<Arrival> = reqwest::Client::new()
            .get(handle.url("/arrivals"))
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap();
        assert_eq!(fetched.len(), 1);
        assert_eq!(fetched[0].task_id, "t");
        handle.stop();
    }
}
