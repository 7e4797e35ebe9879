//! Task model: identity, retry policy, lifecycle state machine, validation.
//!
//! Everything here is an immutable value object; [`transition`] is a pure
//! function. Values can be copied or shared across concurrent contexts
//! without coordination.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use url::Url;
use uuid::Uuid;

/// Retry budget applied when a submission omits `max_retries`.
pub const DEFAULT_MAX_RETRIES: u32 = 3;
/// Backoff applied when a submission omits `backoff_ms`.
pub const DEFAULT_BACKOFF_MS: u64 = 1_000;
/// Ack timeout applied when a submission omits `ack_timeout_ms`.
pub const DEFAULT_ACK_TIMEOUT_MS: u64 = 5_000;

/// Unique task identity, rendered as canonical hyphenated hex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(Uuid);

impl TaskId {
    /// Generates a fresh random id (never nil).
    pub fn generate() -> Self {
        Self(Uuid::new_v4())
    }

    /// Wraps an existing UUID, rejecting the nil value.
    pub fn from_uuid(id: Uuid) -> Option<Self> {
        if id.is_nil() {
            None
        } else {
            Some(Self(id))
        }
    }

    pub fn as_uuid(&self) -> Uuid {
        self.0
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        self.0.as_bytes()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.as_hyphenated())
    }
}

impl FromStr for TaskId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let id = Uuid::parse_str(s)?;
        // Nil parses fine as a UUID but is not a valid task id.
        TaskId::from_uuid(id).ok_or_else(|| Uuid::parse_str("nil").unwrap_err())
    }
}

/// How a task is retried: budget, fixed backoff, and ack timeout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Re-attempts allowed after the first attempt. Total attempts never
    /// exceed `1 + max_retries`.
    pub max_retries: u32,
    /// Fixed wait between a failed attempt and the next one.
    pub backoff_ms: u64,
    /// How long to wait for the consumer's response before classifying the
    /// attempt as timed out. Always positive.
    pub ack_timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            backoff_ms: DEFAULT_BACKOFF_MS,
            ack_timeout_ms: DEFAULT_ACK_TIMEOUT_MS,
        }
    }
}

/// HTTP methods a task may use for delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HttpMethod {
    Get,
    Post,
    Put,
    Patch,
    Delete,
}

impl HttpMethod {
    pub const ALL: [HttpMethod; 5] = [
        HttpMethod::Get,
        HttpMethod::Post,
        HttpMethod::Put,
        HttpMethod::Patch,
        HttpMethod::Delete,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            HttpMethod::Get => "GET",
            HttpMethod::Post => "POST",
            HttpMethod::Put => "PUT",
            HttpMethod::Patch => "PATCH",
            HttpMethod::Delete => "DELETE",
        }
    }
}

impl FromStr for HttpMethod {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Ok(HttpMethod::Get),
            "POST" => Ok(HttpMethod::Post),
            "PUT" => Ok(HttpMethod::Put),
            "PATCH" => Ok(HttpMethod::Patch),
            "DELETE" => Ok(HttpMethod::Delete),
            _ => Err(()),
        }
    }
}

impl fmt::Display for HttpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lifecycle states of a task.
///
/// `Finished` and `Failed` are terminal; no event leaves them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    /// Accepted and persisted, not yet in a queue's pending sequence.
    Queued,
    /// In its queue's FIFO, waiting for a token.
    AwaitingToken,
    /// Token consumed (or backoff elapsed); owned by the dispatch/worker
    /// handoff.
    Dispatched,
    /// Request sent; waiting for the consumer's response.
    InFlight,
    /// Attempt failed; waiting out the fixed backoff.
    RetryWait,
    /// Acknowledged with a 2xx response.
    Finished,
    /// Retries exhausted or unroutable.
    Failed,
}

impl TaskState {
    pub const ALL: [TaskState; 7] = [
        TaskState::Queued,
        TaskState::AwaitingToken,
        TaskState::Dispatched,
        TaskState::InFlight,
        TaskState::RetryWait,
        TaskState::Finished,
        TaskState::Failed,
    ];

    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Finished | TaskState::Failed)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskState::Queued => "QUEUED",
            TaskState::AwaitingToken => "AWAITING_TOKEN",
            TaskState::Dispatched => "DISPATCHED",
            TaskState::InFlight => "IN_FLIGHT",
            TaskState::RetryWait => "RETRY_WAIT",
            TaskState::Finished => "FINISHED",
            TaskState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Events that drive [`transition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    EnqueuedToBucketGate,
    TokenGranted,
    HandedToWorker,
    RequestSent,
    AckReceived,
    AttemptFailedRetryAllowed,
    AttemptFailedRetriesExhausted,
    BackoffElapsed,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 8] = [
        LifecycleEvent::EnqueuedToBucketGate,
        LifecycleEvent::TokenGranted,
        LifecycleEvent::HandedToWorker,
        LifecycleEvent::RequestSent,
        LifecycleEvent::AckReceived,
        LifecycleEvent::AttemptFailedRetryAllowed,
        LifecycleEvent::AttemptFailedRetriesExhausted,
        LifecycleEvent::BackoffElapsed,
    ];
}

/// Error for a `(state, event)` pair outside the lifecycle graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no transition from {from:?} on {event:?}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub event: LifecycleEvent,
}

/// Advances the task lifecycle by one event.
///
/// The legal edges:
///
/// ```text
/// QUEUED         --enqueued_to_bucket_gate-->          AWAITING_TOKEN
/// AWAITING_TOKEN --token_granted-->                    DISPATCHED
/// DISPATCHED     --request_sent-->                     IN_FLIGHT
/// IN_FLIGHT      --ack_received-->                     FINISHED
/// IN_FLIGHT      --attempt_failed_retry_allowed-->     RETRY_WAIT
/// IN_FLIGHT      --attempt_failed_retries_exhausted--> FAILED
/// RETRY_WAIT     --backoff_elapsed-->                  DISPATCHED
/// ```
///
/// `RETRY_WAIT`'s only successor is `DISPATCHED`: a retry re-enters the
/// worker pool directly and never waits for a token again. Every other
/// pair, including anything on a terminal state, is an [`IllegalTransition`].
pub fn transition(state: TaskState, event: LifecycleEvent) -> Result<TaskState, IllegalTransition> {
    use LifecycleEvent as E;
    use TaskState as S;

    match (state, event) {
        (S::Queued, E::EnqueuedToBucketGate) => Ok(S::AwaitingToken),
        (S::AwaitingToken, E::TokenGranted) => Ok(S::Dispatched),
        (S::Dispatched, E::RequestSent) => Ok(S::InFlight),
        (S::InFlight, E::AckReceived) => Ok(S::Finished),
        (S::InFlight, E::AttemptFailedRetryAllowed) => Ok(S::RetryWait),
        (S::InFlight, E::AttemptFailedRetriesExhausted) => Ok(S::Failed),
        (S::RetryWait, E::BackoffElapsed) => Ok(S::Dispatched),
        (from, event) => Err(IllegalTransition { from, event }),
    }
}

/// How one delivery attempt ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttemptOutcome {
    /// Response with status in `[200, 299]`.
    Acked,
    /// No response within the task's ack timeout.
    TimedOut,
    /// Connection, DNS, or protocol failure before any response.
    TransportError,
    /// Response received with a status outside `[200, 299]`.
    Nacked,
}

/// One delivery attempt, as persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub task_id: TaskId,
    /// 1 = first attempt.
    pub attempt_number: u32,
    pub started_at_ms: u64,
    pub ended_at_ms: u64,
    pub outcome: AttemptOutcome,
    /// Present iff a response was received. `Acked` iff it is in `[200, 299]`.
    pub response_status: Option<u16>,
}

/// The unit of work moved by the service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    /// Non-empty label; not required to be unique.
    pub name: String,
    /// Name of the queue the task was written into.
    pub queue: String,
    /// Absolute http/https URL of the consuming service.
    pub destination: Url,
    pub method: HttpMethod,
    /// Content type sent with the delivery request, when the submission
    /// supplied one.
    pub content_type: Option<String>,
    /// Opaque bytes; the queue never inspects them.
    #[serde(with = "base64_bytes")]
    pub payload: Vec<u8>,
    pub retry_policy: RetryPolicy,
    pub state: TaskState,
    /// Attempts consumed so far; incremented when an attempt is dispatched.
    pub attempts_used: u32,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(de)?;
        STANDARD.decode(text).map_err(serde::de::Error::custom)
    }
}

/// A raw task submission, before validation.
///
/// Fields mirror the JSON accepted by `POST /v1/queues/{name}/tasks`;
/// retry settings are optional and fall back to the documented defaults.
#[derive(Debug, Clone, Default)]
pub struct TaskSubmission {
    pub queue: String,
    /// Optional label; defaults to the generated task id.
    pub name: Option<String>,
    pub destination: Option<String>,
    pub method: Option<String>,
    pub content_type: Option<String>,
    pub payload: Vec<u8>,
    pub max_retries: Option<i64>,
    pub backoff_ms: Option<i64>,
    pub ack_timeout_ms: Option<i64>,
}

/// Rejected submission, pointing at the offending field.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid {field}: {message}")]
pub struct ValidationError {
    pub field: &'static str,
    pub message: String,
}

impl ValidationError {
    fn new(field: &'static str, message: impl Into<String>) -> Self {
        Self {
            field,
            message: message.into(),
        }
    }
}

/// Validates a raw submission into a `QUEUED` task with a fresh id.
///
/// Rejects malformed input without side effects: bad or relative URLs,
/// methods outside the allowed set, negative retry counts, zero ack
/// timeouts. Absent retry fields take the defaults.
pub fn validate_task(sub: TaskSubmission, now_ms: u64) -> Result<Task, ValidationError> {
    if sub.queue.is_empty() {
        return Err(ValidationError::new("queue", "queue name must be non-empty"));
    }

    let raw_dest = sub
        .destination
        .as_deref()
        .ok_or_else(|| ValidationError::new("destination", "destination is required"))?;
    let destination = Url::parse(raw_dest)
        .map_err(|e| ValidationError::new("destination", format!("not an absolute URL: {e}")))?;
    if !matches!(destination.scheme(), "http" | "https") {
        return Err(ValidationError::new(
            "destination",
            format!("scheme must be http or https, got {:?}", destination.scheme()),
        ));
    }
    if destination.host_str().is_none() {
        return Err(ValidationError::new("destination", "URL has no host"));
    }

    let raw_method = sub
        .method
        .as_deref()
        .ok_or_else(|| ValidationError::new("method", "method is required"))?;
    let method = raw_method
        .parse::<HttpMethod>()
        .map_err(|_| ValidationError::new("method", format!("unknown method {raw_method:?}")))?;

    let max_retries = match sub.max_retries {
        None => DEFAULT_MAX_RETRIES,
        Some(n) if n < 0 => {
            return Err(ValidationError::new("max_retries", "must be non-negative"))
        }
        Some(n) => u32::try_from(n)
            .map_err(|_| ValidationError::new("max_retries", "value too large"))?,
    };
    let backoff_ms = match sub.backoff_ms {
        None => DEFAULT_BACKOFF_MS,
        Some(n) if n < 0 => return Err(ValidationError::new("backoff_ms", "must be non-negative")),
        Some(n) => n as u64,
    };
    let ack_timeout_ms = match sub.ack_timeout_ms {
        None => DEFAULT_ACK_TIMEOUT_MS,
        Some(n) if n <= 0 => {
            return Err(ValidationError::new("ack_timeout_ms", "must be positive"))
        }
        Some(n) => n as u64,
    };

    if let Some(ct) = &sub.content_type {
        if ct.is_empty() || ct.chars().any(|c| c.is_control()) {
            return Err(ValidationError::new("content_type", "not a valid header value"));
        }
    }

    let id = TaskId::generate();
    let name = match sub.name {
        Some(n) if n.is_empty() => {
            return Err(ValidationError::new("name", "name must be non-empty"))
        }
        Some(n) => n,
        None => id.to_string(),
    };

    Ok(Task {
        id,
        name,
        queue: sub.queue,
        destination,
        method,
        content_type: sub.content_type,
        payload: sub.payload,
        retry_policy: RetryPolicy {
            max_retries,
            backoff_ms,
            ack_timeout_ms,
        },
        state: TaskState::Queued,
        attempts_used: 0,
        created_at_ms: now_ms,
        updated_at_ms: now_ms,
    })
}
