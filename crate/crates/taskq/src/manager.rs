//! The queue manager: owns the named queues, runs one dispatch loop per
//! queue (FIFO order, token-bucket gated), and hands dispatched tasks to
//! the worker pool over a bounded channel.
//!
//! Concurrency model: each queue's pending sequence and bucket live behind
//! one mutex with a single dispatching loop; enqueues only append. Distinct
//! queues proceed fully in parallel. The handoff to the worker pool is
//! bounded — when every worker is busy and the buffer is full, the dispatch
//! loop blocks (backpressure, never task dropping).

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch, Notify};
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::bucket::TokenBucket;
use crate::clock::{deadline_to_instant, now_ms};
use crate::store::{Corruption, Store, StoreError};
use crate::task::{
    transition, validate_task, LifecycleEvent, Task, TaskId, TaskState, TaskSubmission,
    ValidationError,
};
use crate::worker::{self, WorkerPoolConfig};

/// Most dispatches persisted into one shared fsync batch per loop turn.
const DISPATCH_BATCH: usize = 32;
/// How long a queue stays parked after a persistence failure during
/// dispatch before probing again.
const PARK_RETRY_MS: u64 = 1_000;

/// Configuration of one named queue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub id: Uuid,
    /// Service-wide unique key.
    pub name: String,
    /// Token bucket capacity.
    pub capacity: u32,
    /// One token regenerates per interval.
    pub refill_interval_ms: u64,
}

/// Errors from queue management operations.
#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("queue {0:?} already exists")]
    DuplicateName(String),
    #[error("invalid queue config: {0}")]
    InvalidConfig(String),
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("task is not in a state that can be enqueued")]
    NotEnqueueable,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Errors from [`TaskQueueManager::submit`].
#[derive(Debug, thiserror::Error)]
pub enum SubmitError {
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("store rejected the task: {0}")]
    Store(#[from] StoreError),
}

/// Consistent snapshot of one queue. Counters never decrease.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueStats {
    /// Tasks waiting for a token.
    pub depth: u64,
    /// Tokens available right now (after refill accounting).
    pub tokens: u32,
    /// Tasks that entered this queue (submissions plus recovery).
    pub accepted_total: u64,
    /// First attempts handed to the worker pool (each consumed one token).
    pub dispatched_total: u64,
    pub finished_total: u64,
    pub failed_total: u64,
}

/// What recovery did at startup.
#[derive(Debug, Clone, Default)]
pub struct RecoveryReport {
    pub queues_restored: usize,
    /// Tasks returned to their queue's FIFO in original order.
    pub requeued: usize,
    /// Tasks fed straight to the retry path (interrupted or mid-backoff).
    pub retried: usize,
    /// Tasks failed during recovery (retries exhausted or unknown queue).
    pub failed: usize,
    pub corruption: Option<Corruption>,
}

#[derive(Debug, Default)]
pub(crate) struct QueueCounters {
    pub accepted: AtomicU64,
    pub dispatched: AtomicU64,
    pub finished: AtomicU64,
    pub failed: AtomicU64,
}

/// Mutable heart of a queue: its bucket and FIFO.
pub(crate) struct QueueCore {
    pub bucket: TokenBucket,
    pub pending: VecDeque<Task>,
}

/// What the dispatch loop should do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum DispatchDecision {
    /// Head popped, token consumed, task marked `DISPATCHED` with its
    /// attempt counted. The caller persists the change and hands the task
    /// to the worker pool.
    Dispatch(Task),
    /// Pending tasks exist but no token; earliest useful wake-up time.
    Wait { until_ms: u64 },
    /// Nothing pending.
    Idle,
}

impl QueueCore {
    /// One step of the dispatch loop. Consumes exactly one token per
    /// `Dispatch`; only first attempts pass through here — retries re-enter
    /// the worker pool through the retry scheduler, bypassing the gate.
    pub fn dispatch_step(&mut self, now_ms: u64) -> DispatchDecision {
        if self.pending.is_empty() {
            return DispatchDecision::Idle;
        }
        if !self.bucket.try_acquire(now_ms) {
            return DispatchDecision::Wait {
                until_ms: self.bucket.next_available(now_ms),
            };
        }
        let mut task = self.pending.pop_front().expect("pending checked non-empty");
        task.state = transition(task.state, LifecycleEvent::TokenGranted)
            .expect("pending tasks are AWAITING_TOKEN");
        task.attempts_used += 1;
        task.updated_at_ms = now_ms;
        DispatchDecision::Dispatch(task)
    }

    /// Returns a dispatched task to the head of the queue, undoing the
    /// token and attempt accounting. Used when persisting the dispatch
    /// failed.
    fn park_front(&mut self, mut task: Task) {
        task.state = TaskState::AwaitingToken;
        task.attempts_used -= 1;
        self.bucket.refund();
        self.pending.push_front(task);
    }
}

pub(crate) struct Queue {
    pub config: QueueConfig,
    pub core: Mutex<QueueCore>,
    pub notify: Notify,
    pub counters: QueueCounters,
}

pub(crate) struct RetryRequest {
    pub task: Task,
    pub due_ms: u64,
}

pub(crate) struct Inner {
    pub store: Arc<dyn Store>,
    pub queues: RwLock<HashMap<String, Arc<Queue>>>,
    pub intake_tx: mpsc::Sender<Task>,
    pub retry_tx: mpsc::Sender<RetryRequest>,
    pub shutdown_tx: watch::Sender<bool>,
    pub paused_tx: watch::Sender<bool>,
    pub handles: Mutex<Vec<JoinHandle<()>>>,
    pub create_lock: tokio::sync::Mutex<()>,
    pub http: reqwest::Client,
    pub alarms: AtomicU64,
}

impl Inner {
    pub fn queue(&self, name: &str) -> Option<Arc<Queue>> {
        self.queues.read().expect("queue registry poisoned").get(name).cloned()
    }

    /// A persistence failure somewhere it cannot be bounced back to the
    /// client. The affected task stays parked or retried; operators watch
    /// this counter.
    pub fn raise_alarm(&self, context: &str, err: &StoreError) {
        self.alarms.fetch_add(1, Ordering::Relaxed);
        tracing::error!(context, error = %err, "persistence failure; task parked for retry");
    }
}

/// Handle to a running task-queue engine: queues, dispatch loops, worker
/// pool, and retry scheduler. Cheap to clone.
#[derive(Clone)]
pub struct TaskQueueManager {
    pub(crate) inner: Arc<Inner>,
}

impl TaskQueueManager {
    /// Starts the engine on an opened store: spawns the worker pool and
    /// retry scheduler, restores persisted queues, then runs recovery so
    /// every interrupted task is either requeued, retried, or failed
    /// before new work is accepted.
    pub async fn start(
        store: Arc<dyn Store>,
        pool: WorkerPoolConfig,
    ) -> Result<(Self, RecoveryReport), QueueError> {
        if pool.worker_count == 0 {
            return Err(QueueError::InvalidConfig("worker_count must be at least 1".into()));
        }

        let (intake_tx, intake_rx) = mpsc::channel::<Task>(pool.handoff_buffer.max(1));
        let (retry_tx, retry_rx) = mpsc::channel::<RetryRequest>(1_024);
        let (shutdown_tx, _) = watch::channel(false);
        let (paused_tx, _) = watch::channel(false);

        let http = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .build()
            .expect("http client");

        let inner = Arc::new(Inner {
            store,
            queues: RwLock::new(HashMap::new()),
            intake_tx,
            retry_tx,
            shutdown_tx,
            paused_tx,
            handles: Mutex::new(Vec::new()),
            create_lock: tokio::sync::Mutex::new(()),
            http,
            alarms: AtomicU64::new(0),
        });

        // Workers first, then the retry scheduler, then dispatch loops:
        // everything recovery feeds must already be draining.
        let intake_rx = Arc::new(tokio::sync::Mutex::new(intake_rx));
        {
            let mut handles = inner.handles.lock().expect("handles poisoned");
            for _ in 0..pool.worker_count {
                handles.push(tokio::spawn(worker::worker_loop(
                    inner.clone(),
                    intake_rx.clone(),
                )));
            }
            handles.push(tokio::spawn(retry_scheduler(inner.clone(), retry_rx)));
        }

        let manager = Self { inner };

        let configs = manager.inner.store.load_queues();
        let queues_restored = configs.len();
        for config in configs {
            manager.register_queue(config)?;
        }

        let recovered = manager.inner.store.load_recoverable().await?;
        let mut report = manager.recover(recovered.tasks).await;
        report.queues_restored = queues_restored;
        report.corruption = recovered.corruption;
        Ok((manager, report))
    }

    pub fn store(&self) -> &Arc<dyn Store> {
        &self.inner.store
    }

    /// Persistence failures that could not be bounced to a client.
    pub fn alarm_count(&self) -> u64 {
        self.inner.alarms.load(Ordering::Relaxed)
    }

    /// Creates and persists a new queue with a freshly generated id and a
    /// full token bucket; its dispatch loop starts immediately.
    pub async fn create_queue(
        &self,
        name: &str,
        capacity: u32,
        refill_interval_ms: u64,
    ) -> Result<QueueConfig, QueueError> {
        if name.is_empty() {
            return Err(QueueError::InvalidConfig("queue name must be non-empty".into()));
        }
        if !name.bytes().all(|b| (0x21..=0x7e).contains(&b)) {
            return Err(QueueError::InvalidConfig(
                "queue name must be printable ASCII without spaces".into(),
            ));
        }
        if capacity == 0 {
            return Err(QueueError::InvalidConfig("capacity must be at least 1".into()));
        }
        if refill_interval_ms == 0 {
            return Err(QueueError::InvalidConfig(
                "refill_interval_ms must be at least 1".into(),
            ));
        }

        // Serializes duplicate checks with persistence so a racing create
        // cannot double-write the queue file.
        let _guard = self.inner.create_lock.lock().await;
        if self.inner.queue(name).is_some() {
            return Err(QueueError::DuplicateName(name.to_string()));
        }
        let config = QueueConfig {
            id: Uuid::new_v4(),
            name: name.to_string(),
            capacity,
            refill_interval_ms,
        };
        self.inner.store.persist_queue(&config).await?;
        self.register_queue(config.clone())?;
        Ok(config)
    }

    fn register_queue(&self, config: QueueConfig) -> Result<(), QueueError> {
        let bucket = TokenBucket::new(config.capacity, config.refill_interval_ms, now_ms())
            .map_err(|e| QueueError::InvalidConfig(e.to_string()))?;
        let queue = Arc::new(Queue {
            config: config.clone(),
            core: Mutex::new(QueueCore {
                bucket,
                pending: VecDeque::new(),
            }),
            notify: Notify::new(),
            counters: QueueCounters::default(),
        });
        {
            let mut queues = self.inner.queues.write().expect("queue registry poisoned");
            if queues.contains_key(&config.name) {
                return Err(QueueError::DuplicateName(config.name));
            }
            queues.insert(config.name.clone(), queue.clone());
        }
        let handle = tokio::spawn(dispatch_loop(self.inner.clone(), queue));
        self.inner.handles.lock().expect("handles poisoned").push(handle);
        Ok(())
    }

    /// Validates, persists, and enqueues a submission. The task id is
    /// returned only after the task is durably recorded
    /// (persist-before-accept).
    pub async fn submit(&self, sub: TaskSubmission) -> Result<TaskId, SubmitError> {
        if self.inner.queue(&sub.queue).is_none() {
            return Err(SubmitError::UnknownQueue(sub.queue));
        }
        let task = validate_task(sub, now_ms())?;
        self.inner.store.persist_task(&task).await?;
        let id = task.id;
        match self.enqueue(task).await {
            Ok(()) => Ok(id),
            Err(QueueError::UnknownQueue(name)) => Err(SubmitError::UnknownQueue(name)),
            Err(QueueError::Store(e)) => Err(SubmitError::Store(e)),
            // Queues are create-only, and the task was validated above.
            Err(other) => unreachable!("enqueue after submit checks: {other}"),
        }
    }

    /// Appends a validated, already-persisted `QUEUED` task to its queue.
    pub async fn enqueue(&self, mut task: Task) -> Result<(), QueueError> {
        let queue = self
            .inner
            .queue(&task.queue)
            .ok_or_else(|| QueueError::UnknownQueue(task.queue.clone()))?;
        task.state = transition(task.state, LifecycleEvent::EnqueuedToBucketGate)
            .map_err(|_| QueueError::NotEnqueueable)?;
        let now = now_ms();
        task.updated_at_ms = now;
        if let Err(e) = self
            .inner
            .store
            .record_state(task.id, task.state, task.attempts_used, now)
            .await
        {
            // The task is already durable as QUEUED, which recovers
            // identically to AWAITING_TOKEN; rejecting now would break the
            // accepted-means-kept promise, so proceed and alarm.
            self.inner.raise_alarm("enqueue state change", &e);
        }
        queue.counters.accepted.fetch_add(1, Ordering::Relaxed);
        queue
            .core
            .lock()
            .expect("queue core poisoned")
            .pending
            .push_back(task);
        queue.notify.notify_one();
        Ok(())
    }

    pub fn list_queues(&self) -> Vec<QueueConfig> {
        let mut configs: Vec<QueueConfig> = self
            .inner
            .queues
            .read()
            .expect("queue registry poisoned")
            .values()
            .map(|q| q.config.clone())
            .collect();
        configs.sort_by(|a, b| a.name.cmp(&b.name));
        configs
    }

    pub fn queue_stats(&self, name: &str) -> Result<QueueStats, QueueError> {
        let queue = self
            .inner
            .queue(name)
            .ok_or_else(|| QueueError::UnknownQueue(name.to_string()))?;
        let core = queue.core.lock().expect("queue core poisoned");
        Ok(QueueStats {
            depth: core.pending.len() as u64,
            tokens: core.bucket.tokens_at(now_ms()),
            accepted_total: queue.counters.accepted.load(Ordering::Relaxed),
            dispatched_total: queue.counters.dispatched.load(Ordering::Relaxed),
            finished_total: queue.counters.finished.load(Ordering::Relaxed),
            failed_total: queue.counters.failed.load(Ordering::Relaxed),
        })
    }

    /// Stops dispatch loops from starting new first attempts. In-flight
    /// work and retries are unaffected. Used by the benchmark harness to
    /// pre-fill queues before starting the clock.
    pub fn pause_dispatch(&self) {
        // send_replace stores the value even when no loop has subscribed
        // yet, which send() would not.
        self.inner.paused_tx.send_replace(true);
    }

    /// Releases [`pause_dispatch`](Self::pause_dispatch).
    pub fn resume_dispatch(&self) {
        self.inner.paused_tx.send_replace(false);
    }

    /// Graceful shutdown: workers finish their in-flight attempts and
    /// persist final states; dispatch loops, scheduler, and workers stop.
    pub async fn shutdown(&self) {
        self.inner.shutdown_tx.send_replace(true);
        let handles: Vec<JoinHandle<()>> =
            std::mem::take(&mut *self.inner.handles.lock().expect("handles poisoned"));
        for handle in handles {
            let _ = handle.await;
        }
    }

    /// Startup recovery. Non-terminal tasks re-enter the pipeline:
    ///
    /// - `QUEUED` / `AWAITING_TOKEN`: back into their queue's FIFO in
    ///   original enqueue order.
    /// - `DISPATCHED` / `IN_FLIGHT`: the interrupted attempt counts as
    ///   consumed (it was already counted at dispatch). If the attempt has
    ///   no record, one is synthesized as a transport error so histories
    ///   stay gapless. Retry immediately if budget remains, else fail.
    /// - `RETRY_WAIT`: remaining backoff is treated as elapsed — retry
    ///   immediately.
    /// - Tasks referencing a queue that no longer exists are failed.
    async fn recover(&self, tasks: Vec<Task>) -> RecoveryReport {
        let mut report = RecoveryReport::default();
        let now = now_ms();
        for mut task in tasks {
            let Some(queue) = self.inner.queue(&task.queue) else {
                tracing::warn!(task = %task.id, queue = %task.queue, "recovered task references unknown queue; failing it");
                task.state = TaskState::Failed;
                if let Err(e) = self
                    .inner
                    .store
                    .record_state(task.id, TaskState::Failed, task.attempts_used, now)
                    .await
                {
                    self.inner.raise_alarm("recovery fail-out", &e);
                }
                report.failed += 1;
                continue;
            };

            queue.counters.accepted.fetch_add(1, Ordering::Relaxed);
            match task.state {
                TaskState::Queued | TaskState::AwaitingToken => {
                    if task.state == TaskState::Queued {
                        task.state = transition(task.state, LifecycleEvent::EnqueuedToBucketGate)
                            .expect("QUEUED enqueues");
                        task.updated_at_ms = now;
                        if let Err(e) = self
                            .inner
                            .store
                            .record_state(task.id, task.state, task.attempts_used, now)
                            .await
                        {
                            self.inner.raise_alarm("recovery requeue", &e);
                        }
                    }
                    queue
                        .core
                        .lock()
                        .expect("queue core poisoned")
                        .pending
                        .push_back(task);
                    queue.notify.notify_one();
                    report.requeued += 1;
                }
                TaskState::Dispatched | TaskState::InFlight => {
                    // The crash interrupted attempt number `attempts_used`.
                    let interrupted = task.attempts_used;
                    let recorded = self.inner.store.attempt_history(task.id).len() as u32;
                    if recorded + 1 == interrupted {
                        let synthesized = crate::task::AttemptRecord {
                            task_id: task.id,
                            attempt_number: interrupted,
                            started_at_ms: now,
                            ended_at_ms: now,
                            outcome: crate::task::AttemptOutcome::TransportError,
                            response_status: None,
                        };
                        if let Err(e) = self.inner.store.record_attempt(&synthesized).await {
                            self.inner.raise_alarm("recovery attempt synthesis", &e);
                        }
                    }
                    let mut state = task.state;
                    if state == TaskState::Dispatched {
                        state = transition(state, LifecycleEvent::RequestSent)
                            .expect("DISPATCHED sends");
                    }
                    if task.attempts_used <= task.retry_policy.max_retries {
                        task.state = transition(state, LifecycleEvent::AttemptFailedRetryAllowed)
                            .expect("IN_FLIGHT may retry");
                        task.updated_at_ms = now;
                        if let Err(e) = self
                            .inner
                            .store
                            .record_state(task.id, task.state, task.attempts_used, now)
                            .await
                        {
                            self.inner.raise_alarm("recovery retry state", &e);
                        }
                        report.retried += 1;
                        let _ = self.inner.retry_tx.send(RetryRequest { task, due_ms: now }).await;
                    } else {
                        task.state =
                            transition(state, LifecycleEvent::AttemptFailedRetriesExhausted)
                                .expect("IN_FLIGHT may fail");
                        task.updated_at_ms = now;
                        if let Err(e) = self
                            .inner
                            .store
                            .record_state(task.id, task.state, task.attempts_used, now)
                            .await
                        {
                            self.inner.raise_alarm("recovery fail state", &e);
                        }
                        queue.counters.failed.fetch_add(1, Ordering::Relaxed);
                        report.failed += 1;
                    }
                }
                TaskState::RetryWait => {
                    report.retried += 1;
                    let _ = self.inner.retry_tx.send(RetryRequest { task, due_ms: now }).await;
                }
                TaskState::Finished | TaskState::Failed => {
                    // load_recoverable filters terminals; nothing to do.
                }
            }
        }
        report
    }
}

/// One queue's dispatch loop: pop the head, take a token, persist the
/// dispatch, hand the task over. Sleeps precisely until the bucket can
/// grant again instead of polling.
async fn dispatch_loop(inner: Arc<Inner>, queue: Arc<Queue>) {
    let mut shutdown = inner.shutdown_tx.subscribe();
    let mut paused = inner.paused_tx.subscribe();

    loop {
        if *shutdown.borrow() {
            return;
        }
        if *paused.borrow() {
            tokio::select! {
                _ = paused.changed() => {}
                _ = shutdown.changed() => {}
            }
            continue;
        }

        let now = now_ms();
        let mut batch: Vec<Task> = Vec::new();
        let blocked = {
            let mut core = queue.core.lock().expect("queue core poisoned");
            loop {
                if batch.len() >= DISPATCH_BATCH {
                    break None;
                }
                match core.dispatch_step(now) {
                    DispatchDecision::Dispatch(task) => batch.push(task),
                    other => break Some(other),
                }
            }
        };

        if !batch.is_empty() {
            // Persist all dispatches concurrently; the store batches them
            // into a shared fsync.
            let writes = futures::future::join_all(batch.iter().map(|t| {
                inner
                    .store
                    .record_state(t.id, TaskState::Dispatched, t.attempts_used, now)
            }))
            .await;

            let failed_at = writes.iter().position(|r| r.is_err());
            if let Some(idx) = failed_at {
                if let Some(Err(e)) = writes.into_iter().nth(idx) {
                    inner.raise_alarm("dispatch state change", &e);
                }
                // Everything from the first failure back to the head, in
                // order; the successfully persisted prefix proceeds.
                let mut core = queue.core.lock().expect("queue core poisoned");
                for task in batch.drain(idx..).rev() {
                    core.park_front(task);
                }
            }

            for task in batch {
                queue.counters.dispatched.fetch_add(1, Ordering::Relaxed);
                if inner.intake_tx.send(task).await.is_err() {
                    // Worker pool gone; shutdown is in progress.
                    return;
                }
            }

            if failed_at.is_some() {
                // Queue parks until persistence recovers.
                tokio::select! {
                    _ = tokio::time::sleep(std::time::Duration::from_millis(PARK_RETRY_MS)) => {}
                    _ = shutdown.changed() => {}
                }
            }
            continue;
        }

        match blocked {
            Some(DispatchDecision::Wait { until_ms }) => {
                tokio::select! {
                    _ = tokio::time::sleep_until(deadline_to_instant(until_ms)) => {}
                    _ = shutdown.changed() => {}
                    _ = paused.changed() => {}
                }
            }
            _ => {
                tokio::select! {
                    _ = queue.notify.notified() => {}
                    _ = shutdown.changed() => {}
                }
            }
        }
    }
}

/// Central retry timer: an ordered schedule of `RETRY_WAIT` tasks. When a
/// deadline fires the task re-enters the worker pool directly — no token —
/// with its attempt counted and persisted. Waiting tasks never occupy a
/// worker.
async fn retry_scheduler(inner: Arc<Inner>, mut rx: mpsc::Receiver<RetryRequest>) {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    struct Due {
        due_ms: u64,
        seq: u64,
        task: Task,
    }
    impl PartialEq for Due {
        fn eq(&self, other: &Self) -> bool {
            self.due_ms == other.due_ms && self.seq == other.seq
        }
    }
    impl Eq for Due {}
    impl PartialOrd for Due {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Due {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            (self.due_ms, self.seq).cmp(&(other.due_ms, other.seq))
        }
    }

    let mut shutdown = inner.shutdown_tx.subscribe();
    let mut heap: BinaryHeap<Reverse<Due>> = BinaryHeap::new();
    let mut seq = 0u64;

    loop {
        if *shutdown.borrow() {
            return;
        }
        let next_due = heap.peek().map(|Reverse(d)| d.due_ms);
        tokio::select! {
            _ = shutdown.changed() => return,
            req = rx.recv() => {
                match req {
                    Some(RetryRequest { task, due_ms }) => {
                        seq += 1;
                        heap.push(Reverse(Due { due_ms, seq, task }));
                    }
                    None => return,
                }
            }
            _ = async {
                tokio::time::sleep_until(deadline_to_instant(next_due.unwrap())).await
            }, if next_due.is_some() => {
                let now = now_ms();
                while heap.peek().is_some_and(|Reverse(d)| d.due_ms <= now) {
                    let Reverse(Due { mut task, .. }) = heap.pop().expect("peeked");
                    task.state = transition(task.state, LifecycleEvent::BackoffElapsed)
                        .expect("scheduled tasks are RETRY_WAIT");
                    task.attempts_used += 1;
                    task.updated_at_ms = now;
                    match inner
                        .store
                        .record_state(task.id, task.state, task.attempts_used, now)
                        .await
                    {
                        Ok(()) => {
                            if inner.intake_tx.send(task).await.is_err() {
                                return;
                            }
                        }
                        Err(e) => {
                            inner.raise_alarm("retry dispatch state", &e);
                            task.state = TaskState::RetryWait;
                            task.attempts_used -= 1;
                            seq += 1;
                            heap.push(Reverse(Due { due_ms: now + PARK_RETRY_MS, seq, task }));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryStore;

    fn awaiting_task(queue: &str) -> Task {
        let mut task = crate::task::validate_task(
            TaskSubmission {
                queue: queue.into(),
                destination: Some("http://127.0.0.1:1/x".into()),
                method: Some("POST".into()),
                ..Default::default()
            },
            0,
        )
        .unwrap();
        task.state = TaskState::AwaitingToken;
        task
    }

    fn core(capacity: u32, interval_ms: u64, now: u64) -> QueueCore {
        QueueCore {
            bucket: TokenBucket::new(capacity, interval_ms, now).unwrap(),
            pending: VecDeque::new(),
        }
    }

    #[test]
    fn dispatch_step_pops_and_counts() {
        let mut core = core(1, 500, 0);
        let task = awaiting_task("q");
        let id = task.id;
        core.pending.push_back(task);

        match core.dispatch_step(0) {
            DispatchDecision::Dispatch(t) => {
                assert_eq!(t.id, id);
                assert_eq!(t.state, TaskState::Dispatched);
                assert_eq!(t.attempts_used, 1);
            }
            other => panic!("expected Dispatch, got {other:?}"),
        }
        assert_eq!(core.bucket.tokens(), 0);
        assert!(core.pending.is_empty());
    }

    #[test]
    fn dispatch_step_waits_for_exactly_the_next_token() {
        let mut core = core(1, 500, 0);
        assert!(core.bucket.try_acquire(0));
        core.pending.push_back(awaiting_task("q"));

        // 200 ms since last refill, interval 500 ms: wake at 500.
        match core.dispatch_step(200) {
            DispatchDecision::Wait { until_ms } => assert_eq!(until_ms, 500),
            other => panic!("expected Wait, got {other:?}"),
        }
        assert_eq!(core.pending.len(), 1);
    }

    #[test]
    fn dispatch_step_idles_on_empty_queue() {
        let mut core = core(1, 500, 0);
        assert_eq!(core.dispatch_step(0), DispatchDecision::Idle);
    }

    #[test]
    fn dispatch_preserves_fifo() {
        let mut core = core(10, 1, 0);
        let tasks: Vec<Task> = (0..5).map(|_| awaiting_task("q")).collect();
        let ids: Vec<TaskId> = tasks.iter().map(|t| t.id).collect();
        core.pending.extend(tasks);
        let mut popped = Vec::new();
        while let DispatchDecision::Dispatch(t) = core.dispatch_step(0) {
            popped.push(t.id);
        }
        assert_eq!(popped, ids);
    }

    #[test]
    fn park_front_restores_everything() {
        let mut core = core(2, 500, 0);
        core.pending.push_back(awaiting_task("q"));
        let task = match core.dispatch_step(0) {
            DispatchDecision::Dispatch(t) => t,
            other => panic!("{other:?}"),
        };
        assert_eq!(core.bucket.tokens(), 1);
        core.park_front(task);
        assert_eq!(core.bucket.tokens(), 2);
        let head = core.pending.front().unwrap();
        assert_eq!(head.state, TaskState::AwaitingToken);
        assert_eq!(head.attempts_used, 0);
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn create_queue_validation_and_duplicates() {
        let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
        let (manager, report) = TaskQueueManager::start(store, WorkerPoolConfig::default())
            .await
            .unwrap();
        assert_eq!(report.queues_restored, 0);

        let config = manager.create_queue("high", 10, 100).await.unwrap();
        assert_eq!(config.name, "high");
        assert!(!config.id.is_nil());

        assert!(matches!(
            manager.create_queue("high", 1, 1).await,
            Err(QueueError::DuplicateName(_))
        ));
        assert!(matches!(
            manager.create_queue("x", 0, 1).await,
            Err(QueueError::InvalidConfig(_))
        ));
        assert!(matches!(
            manager.create_queue("x", 1, 0).await,
            Err(QueueError::InvalidConfig(_))
        ));
        assert!(matches!(
            manager.create_queue("", 1, 1).await,
            Err(QueueError::InvalidConfig(_))
        ));
        manager.shutdown().await;
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn submit_to_unknown_queue_is_rejected() {
        let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
        let (manager, _) = TaskQueueManager::start(store.clone(), WorkerPoolConfig::default())
            .await
            .unwrap();
        let err = manager
            .submit(TaskSubmission {
                queue: "nope".into(),
                destination: Some("http://127.0.0.1:1/x".into()),
                method: Some("POST".into()),
                ..Default::default()
            })
            .await
            .unwrap_err();
        assert!(matches!(err, SubmitError::UnknownQueue(_)));
        // Rejected before persistence: nothing to recover.
        assert!(store.load_recoverable().await.unwrap().tasks.is_empty());
        manager.shutdown().await;
    }

    #[tokio::test(flavor = "multi_thread")]
    async fn fresh_queue_stats() {
        let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
        let (manager, _) = TaskQueueManager::start(store, WorkerPoolConfig::default())
            .await
            .unwrap();
        manager.create_queue("q", 7, 50).await.unwrap();
        let stats = manager.queue_stats("q").unwrap();
        assert_eq!(stats.depth, 0);
        assert_eq!(stats.tokens, 7);
        assert_eq!(stats.accepted_total, 0);
        assert_eq!(stats.dispatched_total, 0);
        assert_eq!(stats.finished_total, 0);
        assert_eq!(stats.failed_total, 0);
        assert!(matches!(
            manager.queue_stats("missing"),
            Err(QueueError::UnknownQueue(_))
        ));
        manager.shutdown().await;
    }
}
