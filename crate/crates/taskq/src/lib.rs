//! Reliable, rate-limited, asynchronous task delivery between services.
//!
//! `taskq` accepts task submissions over HTTP (or directly through
//! [`manager::TaskQueueManager`]), persists them, gates first delivery
//! attempts per queue with a token bucket, and pushes each task to its
//! destination as an HTTP request. A response with a 2xx status code
//! acknowledges the task; anything else is retried on a fixed backoff
//! until the retry budget is exhausted.
//!
//! The crate is usable three ways:
//!
//! - embedded as a library (see the `examples/` directory — one runnable
//!   example per capability),
//! - as a standalone service via the thin `taskq` binary (`taskq serve`),
//! - through the benchmark harness (`taskq bench run` / `compare-stores`).

pub mod bucket;
pub mod clock;
pub mod consumer;
pub mod harness;
pub mod manager;
pub mod service;
pub mod store;
pub mod task;
pub mod worker;

pub use bucket::TokenBucket;
pub use consumer::{Arrival, ConsumerScript, FailureMode};
pub use harness::{BenchConfig, BenchReport, CompareReport};
pub use manager::{
    QueueConfig, QueueError, QueueStats, RecoveryReport, SubmitError, TaskQueueManager,
};
pub use store::{
    open_store, Backend, FileStore, MemoryStore, Recovered, Store, StoreConfig, StoreError,
};
pub use task::{
    transition, validate_task, AttemptOutcome, AttemptRecord, HttpMethod, IllegalTransition,
    LifecycleEvent, RetryPolicy, Task, TaskId, TaskState, TaskSubmission, ValidationError,
};
pub use worker::{decide_retry, DeliveryResult, RetryDecision, WorkerPoolConfig};
