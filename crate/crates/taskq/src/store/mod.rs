//! Pluggable persistence for tasks and attempt records.
//!
//! The storage backend is an interface ([`Store`]) with two shipped
//! implementations: [`MemoryStore`] (volatile, index only) and
//! [`FileStore`] (the same index plus an append-only log that survives
//! crashes). Both maintain identical queryable state, so the rest of the
//! service behaves the same on either — only durability differs.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::manager::QueueConfig;
use crate::task::{AttemptRecord, Task, TaskId, TaskState};

mod codec;
mod file;
mod memory;

pub use codec::{DecodeError, StoreRecord};
pub use file::FileStore;
pub use memory::MemoryStore;

/// Errors from storage operations.
#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown task {0}")]
    NotFound(TaskId),
    #[error("attempt {got} for task {task_id} is out of order (expected {expected})")]
    OutOfOrder {
        task_id: TaskId,
        expected: u32,
        got: u32,
    },
    #[error("log corruption: {0}")]
    Corrupt(DecodeError),
    #[error("store unavailable: {0}")]
    Unavailable(&'static str),
}

/// Which backend to open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Memory,
    File,
}

/// Backend selection plus file-backend settings.
#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub backend: Backend,
    /// Directory holding `tasks.log` and `queues.json` (file backend only).
    pub directory: Option<PathBuf>,
    /// When true, a write is acknowledged only after fsync. Defaults on.
    pub fsync_each_write: bool,
}

impl StoreConfig {
    pub fn memory() -> Self {
        Self {
            backend: Backend::Memory,
            directory: None,
            fsync_each_write: true,
        }
    }

    pub fn file(directory: impl Into<PathBuf>, fsync_each_write: bool) -> Self {
        Self {
            backend: Backend::File,
            directory: Some(directory.into()),
            fsync_each_write,
        }
    }
}

/// Opens the configured backend.
pub fn open_store(config: &StoreConfig) -> Result<Arc<dyn Store>, StoreError> {
    match config.backend {
        Backend::Memory => Ok(Arc::new(MemoryStore::new())),
        Backend::File => {
            let dir = config.directory.clone().ok_or(StoreError::Unavailable(
                "file backend requires a directory",
            ))?;
            Ok(Arc::new(FileStore::open(dir, config.fsync_each_write)?))
        }
    }
}

/// Tail corruption found while replaying a log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    /// Whole records recovered before the corrupt tail.
    pub records_recovered: u64,
    /// Bytes discarded from the tail (at least one record).
    pub bytes_dropped: u64,
    pub error: DecodeError,
}

/// Result of [`Store::load_recoverable`].
#[derive(Debug, Clone, Default)]
pub struct Recovered {
    /// Every task whose last recorded state is non-terminal, carrying that
    /// state and attempt count, in original enqueue order.
    pub tasks: Vec<Task>,
    /// Present when the log had a corrupt tail; recovery used the clean
    /// prefix.
    pub corruption: Option<Corruption>,
}

/// Storage interface the rest of the service is written against.
///
/// Writes are serialized internally; callers may invoke them from any
/// number of concurrent contexts. `load_recoverable` runs at startup
/// before dispatching begins and must not overlap `compact`.
#[async_trait]
pub trait Store: Send + Sync {
    /// Durably records a full task snapshot. After `Ok`, a restart followed
    /// by `load_recoverable` reproduces the task (file backend; the memory
    /// backend only guarantees it within the process lifetime). On `Err`
    /// the caller must reject the submission.
    async fn persist_task(&self, task: &Task) -> Result<(), StoreError>;

    /// Durably records a state/attempt-count change for an existing task.
    async fn record_state(
        &self,
        id: TaskId,
        state: TaskState,
        attempts_used: u32,
        at_ms: u64,
    ) -> Result<(), StoreError>;

    /// Durably records one delivery attempt. `attempt_number` must be the
    /// successor of the last recorded attempt for the task.
    async fn record_attempt(&self, attempt: &AttemptRecord) -> Result<(), StoreError>;

    /// Updates the queryable state without writing the log. Used for
    /// observability-only states (a task going in flight) whose loss in a
    /// crash changes nothing about recovery.
    fn note_transient_state(&self, id: TaskId, state: TaskState, at_ms: u64);

    /// Returns every non-terminal task with its latest persisted state,
    /// ordered by original enqueue sequence.
    async fn load_recoverable(&self) -> Result<Recovered, StoreError>;

    /// Rewrites the log keeping only what reconstructs non-terminal tasks.
    /// `load_recoverable` output is identical before and after; on failure
    /// the original log is intact.
    async fn compact(&self) -> Result<(), StoreError>;

    /// Current snapshot of a task, if known.
    fn get_task(&self, id: TaskId) -> Option<Task>;

    /// Recorded attempts for a task, in attempt-number order.
    fn attempt_history(&self, id: TaskId) -> Vec<AttemptRecord>;

    /// Durably records a queue definition so queues survive restart.
    async fn persist_queue(&self, config: &QueueConfig) -> Result<(), StoreError>;

    /// Queue definitions known to the store.
    fn load_queues(&self) -> Vec<QueueConfig>;
}

/// In-memory fold of the log: latest task snapshots plus attempt history.
/// Shared by both backends; the file backend rebuilds it by replay.
#[derive(Debug, Default)]
pub(crate) struct Index {
    tasks: HashMap<TaskId, TaskEntry>,
    next_seq: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct TaskEntry {
    pub task: Task,
    pub attempts: Vec<AttemptRecord>,
    /// Sequence of the task's first upsert; recovery orders by this.
    pub enqueue_seq: u64,
}

impl Index {
    pub fn new() -> Self {
        Self {
            tasks: HashMap::new(),
            next_seq: 1,
        }
    }

    pub fn next_sequence(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    pub fn set_next_sequence(&mut self, next: u64) {
        self.next_seq = next;
    }


    pub fn entry(&self, id: TaskId) -> Option<&TaskEntry> {
        self.tasks.get(&id)
    }

    pub fn upsert(&mut self, seq: u64, task: Task) {
        match self.tasks.get_mut(&task.id) {
            Some(entry) => entry.task = task,
            None => {
                self.tasks.insert(
                    task.id,
                    TaskEntry {
                        task,
                        attempts: Vec::new(),
                        enqueue_seq: seq,
                    },
                );
            }
        }
    }

    pub fn remove(&mut self, id: TaskId) {
        self.tasks.remove(&id);
    }

    /// Validates a state change against the index. Returns the previous
    /// `(state, attempts_used, updated_at_ms)` for rollback on write failure.
    pub fn apply_state(
        &mut self,
        id: TaskId,
        state: TaskState,
        attempts_used: u32,
        at_ms: u64,
    ) -> Result<(TaskState, u32, u64), StoreError> {
        let entry = self.tasks.get_mut(&id).ok_or(StoreError::NotFound(id))?;
        let prev = (
            entry.task.state,
            entry.task.attempts_used,
            entry.task.updated_at_ms,
        );
        entry.task.state = state;
        entry.task.attempts_used = attempts_used;
        entry.task.updated_at_ms = at_ms;
        Ok(prev)
    }

    pub fn revert_state(&mut self, id: TaskId, prev: (TaskState, u32, u64)) {
        if let Some(entry) = self.tasks.get_mut(&id) {
            entry.task.state = prev.0;
            entry.task.attempts_used = prev.1;
            entry.task.updated_at_ms = prev.2;
        }
    }

    pub fn apply_attempt(&mut self, attempt: &AttemptRecord) -> Result<(), StoreError> {
        let entry = self
            .tasks
            .get_mut(&attempt.task_id)
            .ok_or(StoreError::NotFound(attempt.task_id))?;
        let expected = entry.attempts.len() as u32 + 1;
        if attempt.attempt_number != expected {
            return Err(StoreError::OutOfOrder {
                task_id: attempt.task_id,
                expected,
                got: attempt.attempt_number,
            });
        }
        entry.attempts.push(attempt.clone());
        Ok(())
    }

    pub fn revert_attempt(&mut self, id: TaskId) {
        if let Some(entry) = self.tasks.get_mut(&id) {
            entry.attempts.pop();
        }
    }

    /// Fold for replay: records arrive in file order. Records referencing
    /// unknown tasks are skipped (they can only follow a write failure).
    pub fn replay(&mut self, seq: u64, record: StoreRecord) {
        match record {
            StoreRecord::TaskUpsert(task) => self.upsert(seq, task),
            StoreRecord::StateChange {
                task_id,
                state,
                attempts_used,
                at_ms,
            } => {
                let _ = self.apply_state(task_id, state, attempts_used, at_ms);
            }
            StoreRecord::Attempt(attempt) => {
                if let Some(entry) = self.tasks.get_mut(&attempt.task_id) {
                    entry.attempts.push(attempt);
                }
            }
        }
        if seq >= self.next_seq {
            self.next_seq = seq + 1;
        }
    }

    /// Non-terminal tasks in enqueue order.
    pub fn recoverable(&self) -> Vec<Task> {
        let mut live: Vec<&TaskEntry> = self
            .tasks
            .values()
            .filter(|e| !e.task.state.is_terminal())
            .collect();
        live.sort_by_key(|e| e.enqueue_seq);
        live.iter().map(|e| e.task.clone()).collect()
    }

    /// All entries in enqueue order (compaction input).
    pub fn entries_in_order(&self) -> Vec<TaskEntry> {
        let mut all: Vec<TaskEntry> = self.tasks.values().cloned().collect();
        all.sort_by_key(|e| e.enqueue_seq);
        all
    }

    pub fn set_enqueue_seq(&mut self, id: TaskId, seq: u64) {
        if let Some(entry) = self.tasks.get_mut(&id) {
            entry.enqueue_seq = seq;
        }
    }
}
