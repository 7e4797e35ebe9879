//! Volatile backend: the shared index with no log behind it.

use std::sync::Mutex;

use async_trait::async_trait;

use crate::manager::QueueConfig;
use crate::task::{AttemptRecord, Task, TaskId, TaskState};

use super::{Index, Recovered, Store, StoreError};

/// In-memory store. Contents vanish with the process; everything else
/// behaves exactly like the file backend.
#[derive(Debug, Default)]
pub struct MemoryStore {
    inner: Mutex<MemoryInner>,
}

#[derive(Debug, Default)]
struct MemoryInner {
    index: Index,
    queues: Vec<QueueConfig>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MemoryInner> {
        self.inner.lock().expect("memory store poisoned")
    }
}

#[async_trait]
impl Store for MemoryStore {
    async fn persist_task(&self, task: &Task) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let seq = inner.index.next_sequence();
        inner.index.upsert(seq, task.clone());
        Ok(())
    }

    async fn record_state(
        &self,
        id: TaskId,
        state: TaskState,
        attempts_used: u32,
        at_ms: u64,
    ) -> Result<(), StoreError> {
        let mut inner = self.lock();
        inner.index.apply_state(id, state, attempts_used, at_ms)?;
        inner.index.next_sequence();
        Ok(())
    }

    async fn record_attempt(&self, attempt: &AttemptRecord) -> Result<(), StoreError> {
        let mut inner = self.lock();
        inner.index.apply_attempt(attempt)?;
        inner.index.next_sequence();
        Ok(())
    }

    fn note_transient_state(&self, id: TaskId, state: TaskState, at_ms: u64) {
        let mut inner = self.lock();
        if let Some(entry) = inner.index.entry(id) {
            let attempts = entry.task.attempts_used;
            let _ = inner.index.apply_state(id, state, attempts, at_ms);
        }
    }

    async fn load_recoverable(&self) -> Result<Recovered, StoreError> {
        let inner = self.lock();
        Ok(Recovered {
            tasks: inner.index.recoverable(),
            corruption: None,
        })
    }

    async fn compact(&self) -> Result<(), StoreError> {
        // Nothing to rewrite; the index is the whole store.
        Ok(())
    }

    fn get_task(&self, id: TaskId) -> Option<Task> {
        self.lock().index.entry(id).map(|e| e.task.clone())
    }

    fn attempt_history(&self, id: TaskId) -> Vec<AttemptRecord> {
        self.lock()
            .index
            .entry(id)
            .map(|e| e.attempts.clone())
            .unwrap_or_default()
    }

    async fn persist_queue(&self, config: &QueueConfig) -> Result<(), StoreError> {
        self.lock().queues.push(config.clone());
        Ok(())
    }

    fn load_queues(&self) -> Vec<QueueConfig> {
        self.lock().queues.clone()
    }
}
