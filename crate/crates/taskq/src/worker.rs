//! Worker pool: a fixed set of concurrent workers that turn dispatched
//! tasks into HTTP requests, enforce ack timeouts, classify outcomes, and
//! drive tasks to terminal states.
//!
//! Every delivery is one HTTP request built from the task: its method,
//! destination URL, and payload, plus `X-Task-Id`, `X-Task-Attempt`, and
//! `X-Queue-Name` headers. Any response with status in `[200, 299]` acks
//! the task; other statuses (3xx included — redirects are not followed)
//! are NACKs, no response within the ack timeout is a timeout, and
//! connection or DNS failures are transport errors. The response body is
//! ignored.

use std::panic::AssertUnwindSafe;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use futures::FutureExt;
use tokio::sync::mpsc;

use crate::clock::now_ms;
use crate::manager::{Inner, RetryRequest};
use crate::task::{
    transition, AttemptOutcome, AttemptRecord, HttpMethod, LifecycleEvent, Task, TaskState,
};

/// Sizing of the worker pool and its intake buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerPoolConfig {
    /// Concurrent workers; also the ceiling on in-flight attempts.
    pub worker_count: usize,
    /// Bounded handoff between dispatch loops and workers. When full, the
    /// dispatch loops block.
    pub handoff_buffer: usize,
}

impl Default for WorkerPoolConfig {
    fn default() -> Self {
        Self {
            worker_count: 16,
            handoff_buffer: 256,
        }
    }
}

/// Classified result of one delivery attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryResult {
    pub outcome: AttemptOutcome,
    /// Present iff a response was received.
    pub response_status: Option<u16>,
    pub latency_ms: u64,
}

/// Whether a failed attempt is retried, and when.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryDecision {
    Retry { after_ms: u64 },
    Fail,
}

/// Pure retry decision for a failed attempt: retry while the attempt
/// budget (`1 + max_retries`) is not exhausted, after the fixed backoff.
pub fn decide_retry(task: &Task, now_ms: u64) -> RetryDecision {
    if task.attempts_used <= task.retry_policy.max_retries {
        RetryDecision::Retry {
            after_ms: now_ms + task.retry_policy.backoff_ms,
        }
    } else {
        RetryDecision::Fail
    }
}

fn method_for(method: HttpMethod) -> reqwest::Method {
    match method {
        HttpMethod::Get => reqwest::Method::GET,
        HttpMethod::Post => reqwest::Method::POST,
        HttpMethod::Put => reqwest::Method::PUT,
        HttpMethod::Patch => reqwest::Method::PATCH,
        HttpMethod::Delete => reqwest::Method::DELETE,
    }
}

/// Sends one delivery request and classifies the outcome. Never errors:
/// every failure mode maps to a [`DeliveryResult`].
pub(crate) async fn deliver(client: &reqwest::Client, task: &Task) -> DeliveryResult {
    let started = now_ms();
    let content_type = task
        .content_type
        .as_deref()
        .unwrap_or("application/octet-stream");
    let request = client
        .request(method_for(task.method), task.destination.clone())
        .header("X-Task-Id", task.id.to_string())
        .header("X-Task-Attempt", task.attempts_used)
        .header("X-Queue-Name", &task.queue)
        .header(reqwest::header::CONTENT_TYPE, content_type)
        .body(task.payload.clone())
        .timeout(Duration::from_millis(task.retry_policy.ack_timeout_ms));

    let (outcome, response_status) = match request.send().await {
        Ok(response) => {
            let status = response.status().as_u16();
            if (200..=299).contains(&status) {
                (AttemptOutcome::Acked, Some(status))
            } else {
                (AttemptOutcome::Nacked, Some(status))
            }
        }
        Err(e) if e.is_timeout() => (AttemptOutcome::TimedOut, None),
        Err(_) => (AttemptOutcome::TransportError, None),
    };

    DeliveryResult {
        outcome,
        response_status,
        latency_ms: now_ms() - started,
    }
}

/// One worker: drain the shared intake until shutdown. A panic while
/// processing a task is contained — the task is settled as a transport
/// error and the worker keeps going.
pub(crate) async fn worker_loop(
    inner: Arc<Inner>,
    intake: Arc<tokio::sync::Mutex<mpsc::Receiver<Task>>>,
) {
    let mut shutdown = inner.shutdown_tx.subscribe();
    loop {
        if *shutdown.borrow() {
            return;
        }
        let task = tokio::select! {
            _ = shutdown.changed() => return,
            received = async { intake.lock().await.recv().await } => {
                match received {
                    Some(task) => task,
                    None => return,
                }
            }
        };
        run_one(&inner, task).await;
    }
}

/// Executes one attempt end to end, containing panics.
pub(crate) async fn run_one(inner: &Arc<Inner>, task: Task) {
    let backup = task.clone();
    let attempt = AssertUnwindSafe(process_task(inner, task)).catch_unwind().await;
    if attempt.is_err() {
        tracing::error!(task = %backup.id, "worker panicked; settling attempt as transport error");
        settle_panicked(inner, backup).await;
    }
}

/// The normal attempt pipeline. Preconditions: state is `DISPATCHED` and
/// `attempts_used` already counts this attempt (incremented at dispatch).
async fn process_task(inner: &Arc<Inner>, mut task: Task) {
    let attempt_number = task.attempts_used;
    let started = now_ms();

    task.state =
        transition(task.state, LifecycleEvent::RequestSent).expect("worker tasks are DISPATCHED");
    // In-flight is observability only: recovery treats it exactly like
    // DISPATCHED, so it skips the log.
    inner.store.note_transient_state(task.id, task.state, started);

    let result = deliver(&inner.http, &task).await;
    let ended = now_ms();

    let record = AttemptRecord {
        task_id: task.id,
        attempt_number,
        started_at_ms: started,
        ended_at_ms: ended,
        outcome: result.outcome,
        response_status: result.response_status,
    };
    if let Err(e) = inner.store.record_attempt(&record).await {
        inner.raise_alarm("attempt record", &e);
    }

    if result.outcome == AttemptOutcome::Acked {
        task.state = transition(task.state, LifecycleEvent::AckReceived).expect("in flight");
        task.updated_at_ms = ended;
        if let Err(e) = inner
            .store
            .record_state(task.id, task.state, task.attempts_used, ended)
            .await
        {
            inner.raise_alarm("finish state", &e);
        }
        if let Some(queue) = inner.queue(&task.queue) {
            queue.counters.finished.fetch_add(1, Ordering::Relaxed);
        }
    } else {
        settle_failure(inner, task, ended).await;
    }
}

/// Applies the retry decision to a failed attempt: schedule the backoff or
/// fail the task.
async fn settle_failure(inner: &Arc<Inner>, mut task: Task, now: u64) {
    match decide_retry(&task, now) {
        RetryDecision::Retry { after_ms } => {
            task.state = transition(task.state, LifecycleEvent::AttemptFailedRetryAllowed)
                .expect("in flight");
            task.updated_at_ms = now;
            if let Err(e) = inner
                .store
                .record_state(task.id, task.state, task.attempts_used, now)
                .await
            {
                inner.raise_alarm("retry wait state", &e);
            }
            let _ = inner
                .retry_tx
                .send(RetryRequest {
                    task,
                    due_ms: after_ms,
                })
                .await;
        }
        RetryDecision::Fail => {
            task.state = transition(task.state, LifecycleEvent::AttemptFailedRetriesExhausted)
                .expect("in flight");
            task.updated_at_ms = now;
            if let Err(e) = inner
                .store
                .record_state(task.id, task.state, task.attempts_used, now)
                .await
            {
                inner.raise_alarm("fail state", &e);
            }
            if let Some(queue) = inner.queue(&task.queue) {
                queue.counters.failed.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

/// Bookkeeping for a panicked attempt. Best effort: the attempt may have
/// progressed arbitrarily far before panicking, so duplicate records are
/// tolerated (the store rejects them) and the task is settled from the
/// pre-attempt snapshot.
async fn settle_panicked(inner: &Arc<Inner>, mut task: Task) {
    let now = now_ms();
    let record = AttemptRecord {
        task_id: task.id,
        attempt_number: task.attempts_used,
        started_at_ms: now,
        ended_at_ms: now,
        outcome: AttemptOutcome::TransportError,
        response_status: None,
    };
    let _ = inner.store.record_attempt(&record).await;
    if task.state == TaskState::Dispatched {
        if let Ok(next) = transition(task.state, LifecycleEvent::RequestSent) {
            task.state = next;
        }
    }
    if task.state == TaskState::InFlight {
        settle_failure(inner, task, now).await;
    } else {
        // Not even dispatched properly; fail it outright so it is not lost.
        task.state = TaskState::Failed;
        task.updated_at_ms = now;
        if let Err(e) = inner
            .store
            .record_state(task.id, task.state, task.attempts_used, now)
            .await
        {
            inner.raise_alarm("panic fail state", &e);
        }
        if let Some(queue) = inner.queue(&task.queue) {
            queue.counters.failed.fetch_add(1, Ordering::Relaxed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manager::TaskQueueManager;
    use crate::store::{MemoryStore, Store};
    use crate::task::{validate_task, RetryPolicy, TaskSubmission};
    use axum::extract::Request;
    use axum::routing::any;
    use axum::Router;
    use std::net::SocketAddr;

    fn task_to(url: &str, ack_timeout_ms: u64) -> Task {
        let mut task = validate_task(
            TaskSubmission {
                queue: "q".into(),
                destination: Some(url.into()),
                method: Some("POST".into()),
                payload: b"hello".to_vec(),
                ack_timeout_ms: Some(ack_timeout_ms as i64),
                ..Default::default()
            },
            0,
        )
        .unwrap();
        task.attempts_used = 1;
        task.state = TaskState::Dispatched;
        task
    }

    fn client() -> reqwest::Client {
        reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .unwrap()
    }

    async fn serve(app: Router) -> SocketAddr {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, app).await.unwrap();
        });
        addr
    }

    #[test]
    fn retry_decision_table() {
        let mut task = task_to("http://127.0.0.1:1/x", 100);
        task.retry_policy = RetryPolicy {
            max_retries: 3,
            backoff_ms: 1_000,
            ack_timeout_ms: 100,
        };

        task.attempts_used = 1;
        assert_eq!(
            decide_retry(&task, 10_000),
            RetryDecision::Retry { after_ms: 11_000 }
        );
        task.attempts_used = 3;
        assert!(matches!(decide_retry(&task, 0), RetryDecision::Retry { .. }));
        task.attempts_used = 4;
        assert_eq!(decide_retry(&task, 0), RetryDecision::Fail);

        // max_retries = 0: exactly one attempt total.
        task.retry_policy.max_retries = 0;
        task.attempts_used = 1;
        assert_eq!(decide_retry(&task, 0), RetryDecision::Fail);
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn classifies_status_codes() {
        let app = Router::new()
            .route("/ok", any(|| async { axum::http::StatusCode::OK }))
            .route(
                "/no-content",
                any(|| async { axum::http::StatusCode::NO_CONTENT }),
            )
            .route(
                "/boom",
                any(|| async { axum::http::StatusCode::INTERNAL_SERVER_ERROR }),
            )
            .route(
                "/redirect",
                any(|| async {
                    (
                        axum::http::StatusCode::FOUND,
                        [(axum::http::header::LOCATION, "/ok")],
                    )
                }),
            );
        let addr = serve(app).await;
        let client = client();

        let cases = [
            ("ok", AttemptOutcome::Acked, Some(200)),
            ("no-content", AttemptOutcome::Acked, Some(204)),
            ("boom", AttemptOutcome::Nacked, Some(500)),
            // Redirects are not followed; 3xx is a NACK.
            ("redirect", AttemptOutcome::Nacked, Some(302)),
        ];
        for (path, outcome, status) in cases {
            let task = task_to(&format!("http://{addr}/{path}"), 2_000);
            let result = deliver(&client, &task).await;
            assert_eq!(result.outcome, outcome, "{path}");
            assert_eq!(result.response_status, status, "{path}");
        }
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn classifies_timeout_and_transport_error() {
        let app = Router::new().route(
            "/hang",
            any(|| async {
                tokio::time::sleep(Duration::from_secs(30)).await;
                axum::http::StatusCode::OK
            }),
        );
        let addr = serve(app).await;
        let client = client();

        let started = now_ms();
        let task = task_to(&format!("http://{addr}/hang"), 300);
        let result = deliver(&client, &task).await;
        assert_eq!(result.outcome, AttemptOutcome::TimedOut);
        assert_eq!(result.response_status, None);
        let waited = now_ms() - started;
        assert!((250..2_000).contains(&waited), "waited {waited} ms");

        // Nothing listens on port 1.
        let task = task_to("http://127.0.0.1:1/x", 300);
        let result = deliver(&client, &task).await;
        assert_eq!(result.outcome, AttemptOutcome::TransportError);
        assert_eq!(result.response_status, None);
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn sends_the_documented_headers_and_body() {
        let (tx, mut rx) = mpsc::channel::<(String, String, String, String, Vec<u8>)>(4);
        let app = Router::new().route(
            "/{*path}",
            any(move |request: Request| {
                let tx = tx.clone();
                async move {
                    fn header(request: &Request, name: &str) -> String {
                        request
                            .headers()
                            .get(name)
                            .map(|v| v.to_str().unwrap_or_default().to_string())
                            .unwrap_or_default()
                    }
                    let meta = (
                        header(&request, "x-task-id"),
                        header(&request, "x-task-attempt"),
                        header(&request, "x-queue-name"),
                        header(&request, "content-type"),
                    );
                    let body = axum::body::to_bytes(request.into_body(), 1 << 20)
                        .await
                        .unwrap()
                        .to_vec();
                    tx.send((meta.0, meta.1, meta.2, meta.3, body)).await.unwrap();
                    axum::http::StatusCode::OK
                }
            }),
        );
        let addr = serve(app).await;
        let client = client();

        let mut task = task_to(&format!("http://{addr}/run"), 2_000);
        task.attempts_used = 2;
        deliver(&client, &task).await;
        let (id, attempt, queue, content_type, body) = rx.recv().await.unwrap();
        assert_eq!(id, task.id.to_string());
        assert_eq!(attempt, "2");
        assert_eq!(queue, "q");
        assert_eq!(content_type, "application/octet-stream");
        assert_eq!(body, b"hello");

        task.content_type = Some("application/json".into());
        deliver(&client, &task).await;
        let (_, _, _, content_type, _) = rx.recv().await.unwrap();
        assert_eq!(content_type, "application/json");
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn panicking_attempt_is_contained_and_settled() {
        let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
        let (manager, _) = TaskQueueManager::start(store.clone(), WorkerPoolConfig::default())
            .await
            .unwrap();
        manager.create_queue("q", 1, 1).await.unwrap();

        // A task in the wrong state trips the worker's precondition check,
        // standing in for an arbitrary panic mid-attempt.
        let mut task = task_to("http://127.0.0.1:1/x", 100);
        task.retry_policy.max_retries = 0;
        task.state = TaskState::Queued;
        task.attempts_used = 1;
        store.persist_task(&task).await.unwrap();

        run_one(&manager.inner, task.clone()).await;

        let stored = store.get_task(task.id).unwrap();
        assert_eq!(stored.state, TaskState::Failed);
        let history = store.attempt_history(task.id);
        assert_eq!(history.len(), 1);
        assert_eq!(history[0].outcome, AttemptOutcome::TransportError);
        manager.shutdown().await;
    }
}
