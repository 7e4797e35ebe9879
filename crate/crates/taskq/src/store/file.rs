//! Durable backend: the shared index plus an append-only log.
//!
//! Layout under the store directory:
//!
//! - `tasks.log` — length-prefixed, CRC-checked record frames (see
//!   `docs/log-format.md`),
//! - `tasks.log.compacting` — temporary file during compaction, renamed
//!   over the log on success,
//! - `queues.json` — queue definitions, rewritten atomically on create.
//!
//! All appends funnel through one writer thread, which batches whatever
//! has queued up and issues a single fsync per batch (group commit).
//! A write is acknowledged to its caller only after the fsync covering it
//! completes, so `fsync_each_write = true` keeps its durability meaning
//! while concurrent writers share the fsync cost. With
//! `fsync_each_write = false` the acknowledgment comes after the
//! `write(2)` alone.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread::JoinHandle;

use async_trait::async_trait;
use crossbeam_channel::{Receiver, Sender};
use tokio::sync::oneshot;

use super::codec::{self, StoreRecord};
use super::{Corruption, Index, Recovered, Store, StoreError};
use crate::manager::QueueConfig;
use crate::task::{AttemptRecord, Task, TaskId, TaskState};

const LOG_FILE: &str = "tasks.log";
const COMPACT_TMP: &str = "tasks.log.compacting";
const QUEUES_FILE: &str = "queues.json";
const MAX_BATCH: usize = 256;

type Done = oneshot::Sender<io::Result<()>>;

enum WriterCmd {
    Append { frame: Vec<u8>, done: Done },
    Rewrite { frames: Vec<Vec<u8>>, done: Done },
}

/// File-backed store. See the module docs for the on-disk layout.
pub struct FileStore {
    inner: Mutex<Shared>,
    tx: Option<Sender<WriterCmd>>,
    writer: Option<JoinHandle<()>>,
    dir: PathBuf,
    corruption: Option<Corruption>,
}

struct Shared {
    index: Index,
    queues: Vec<QueueConfig>,
}

impl FileStore {
    /// Opens (or creates) a store in `dir`, replaying any existing log.
    ///
    /// A corrupt tail is truncated away; what was lost is reported through
    /// [`Store::load_recoverable`].
    pub fn open(dir: impl Into<PathBuf>, fsync_each_write: bool) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;

        let queues = read_queues(&dir.join(QUEUES_FILE))?;

        let log_path = dir.join(LOG_FILE);
        let mut index = Index::new();
        let mut corruption = None;
        let mut valid_len = 0u64;
        if log_path.exists() {
            let mut bytes = Vec::new();
            File::open(&log_path)?.read_to_end(&mut bytes)?;
            let decoded = codec::decode_log(&bytes);
            valid_len = decoded.valid_len as u64;
            if let Some(error) = decoded.error {
                corruption = Some(Corruption {
                    records_recovered: decoded.records.len() as u64,
                    bytes_dropped: bytes.len() as u64 - valid_len,
                    error,
                });
            }
            for (seq, record) in decoded.records {
                index.replay(seq, record);
            }
        }

        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(true)
            .open(&log_path)?;
        if corruption.is_some() {
            // Drop the torn tail so new appends continue from clean bytes.
            file.set_len(valid_len)?;
        }

        let (tx, rx) = crossbeam_channel::unbounded();
        let writer_dir = dir.clone();
        let writer = std::thread::Builder::new()
            .name("taskq-log-writer".into())
            .spawn(move || run_writer(file, fsync_each_write, rx, writer_dir))
            .map_err(StoreError::Io)?;

        Ok(Self {
            inner: Mutex::new(Shared { index, queues }),
            tx: Some(tx),
            writer: Some(writer),
            dir,
            corruption,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Shared> {
        self.inner.lock().expect("file store poisoned")
    }

    fn send(&self, cmd: WriterCmd) -> Result<(), StoreError> {
        self.tx
            .as_ref()
            .ok_or(StoreError::Unavailable("store closed"))?
            .send(cmd)
            .map_err(|_| StoreError::Unavailable("log writer stopped"))
    }

    async fn wait(rx: oneshot::Receiver<io::Result<()>>) -> Result<(), StoreError> {
        match rx.await {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(StoreError::Io(e)),
            Err(_) => Err(StoreError::Unavailable("log writer stopped")),
        }
    }
}

impl Drop for FileStore {
    fn drop(&mut self) {
        // Closing the channel lets the writer drain and exit.
        self.tx.take();
        if let Some(writer) = self.writer.take() {
            let _ = writer.join();
        }
    }
}

#[async_trait]
impl Store for FileStore {
    async fn persist_task(&self, task: &Task) -> Result<(), StoreError> {
        let rx = {
            let mut inner = self.lock();
            let seq = inner.index.next_sequence();
            inner.index.upsert(seq, task.clone());
            let frame = codec::encode_frame(seq, &StoreRecord::TaskUpsert(task.clone()));
            let (done, rx) = oneshot::channel();
            self.send(WriterCmd::Append { frame, done })?;
            rx
        };
        match Self::wait(rx).await {
            Ok(()) => Ok(()),
            Err(e) => {
                self.lock().index.remove(task.id);
                Err(e)
            }
        }
    }

    async fn record_state(
        &self,
        id: TaskId,
        state: TaskState,
        attempts_used: u32,
        at_ms: u64,
    ) -> Result<(), StoreError> {
        let (rx, prev) = {
            let mut inner = self.lock();
            let prev = inner.index.apply_state(id, state, attempts_used, at_ms)?;
            let seq = inner.index.next_sequence();
            let frame = codec::encode_frame(
                seq,
                &StoreRecord::StateChange {
                    task_id: id,
                    state,
                    attempts_used,
                    at_ms,
                },
            );
            let (done, rx) = oneshot::channel();
            self.send(WriterCmd::Append { frame, done })?;
            (rx, prev)
        };
        match Self::wait(rx).await {
            Ok(()) => Ok(()),
            Err(e) => {
                self.lock().index.revert_state(id, prev);
                Err(e)
            }
        }
    }

    async fn record_attempt(&self, attempt: &AttemptRecord) -> Result<(), StoreError> {
        let rx = {
            let mut inner = self.lock();
            inner.index.apply_attempt(attempt)?;
            let seq = inner.index.next_sequence();
            let frame = codec::encode_frame(seq, &StoreRecord::Attempt(attempt.clone()));
            let (done, rx) = oneshot::channel();
            self.send(WriterCmd::Append { frame, done })?;
            rx
        };
        match Self::wait(rx).await {
            Ok(()) => Ok(()),
            Err(e) => {
                self.lock().index.revert_attempt(attempt.task_id);
                Err(e)
            }
        }
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
            corruption: self.corruption.clone(),
        })
    }

    async fn compact(&self) -> Result<(), StoreError> {
        let rx = {
            let mut inner = self.lock();
            let entries = inner.index.entries_in_order();
            let mut frames = Vec::new();
            let mut seq = 0u64;
            for entry in entries.iter().filter(|e| !e.task.state.is_terminal()) {
                seq += 1;
                inner.index.set_enqueue_seq(entry.task.id, seq);
                frames.push(codec::encode_frame(
                    seq,
                    &StoreRecord::TaskUpsert(entry.task.clone()),
                ));
                for attempt in &entry.attempts {
                    seq += 1;
                    frames.push(codec::encode_frame(
                        seq,
                        &StoreRecord::Attempt(attempt.clone()),
                    ));
                }
            }
            inner.index.set_next_sequence(seq + 1);
            let (done, rx) = oneshot::channel();
            self.send(WriterCmd::Rewrite { frames, done })?;
            rx
        };
        Self::wait(rx).await
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
        let mut inner = self.lock();
        inner.queues.push(config.clone());
        match write_queues(&self.dir, &inner.queues) {
            Ok(()) => Ok(()),
            Err(e) => {
                inner.queues.pop();
                Err(StoreError::Io(e))
            }
        }
    }

    fn load_queues(&self) -> Vec<QueueConfig> {
        self.lock().queues.clone()
    }
}

fn read_queues(path: &Path) -> Result<Vec<QueueConfig>, StoreError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| StoreError::Io(io::Error::new(io::ErrorKind::InvalidData, e)))
}

fn write_queues(dir: &Path, queues: &[QueueConfig]) -> io::Result<()> {
    let tmp = dir.join(format!("{QUEUES_FILE}.tmp"));
    let bytes = serde_json::to_vec_pretty(queues).expect("queue configs serialize");
    let mut file = File::create(&tmp)?;
    file.write_all(&bytes)?;
    file.sync_data()?;
    fs::rename(&tmp, dir.join(QUEUES_FILE))?;
    sync_dir(dir)
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    File::open(dir)?.sync_all()
}

fn clone_io_error(e: &io::Error) -> io::Error {
    io::Error::new(e.kind(), e.to_string())
}

fn run_writer(mut file: File, fsync: bool, rx: Receiver<WriterCmd>, dir: PathBuf) {
    // Once an unrecoverable error occurs (for example the log handle was
    // lost during compaction), every later command fails fast.
    let mut dead: Option<io::Error> = None;

    while let Ok(first) = rx.recv() {
        let mut batch = vec![first];
        while batch.len() < MAX_BATCH {
            match rx.try_recv() {
                Ok(cmd) => batch.push(cmd),
                Err(_) => break,
            }
        }

        let mut appends: Vec<(Vec<u8>, Done)> = Vec::new();
        for cmd in batch {
            match cmd {
                WriterCmd::Append { frame, done } => {
                    if let Some(e) = &dead {
                        let _ = done.send(Err(clone_io_error(e)));
                    } else {
                        appends.push((frame, done));
                    }
                }
                WriterCmd::Rewrite { frames, done } => {
                    // Flush queued appends first so the snapshot that
                    // produced `frames` stays ahead of them on disk.
                    flush_appends(&mut file, fsync, std::mem::take(&mut appends));
                    if let Some(e) = &dead {
                        let _ = done.send(Err(clone_io_error(e)));
                        continue;
                    }
                    match rewrite_log(&dir, &frames) {
                        Ok(new_file) => {
                            file = new_file;
                            let _ = done.send(Ok(()));
                        }
                        Err(RewriteError::Recoverable(e)) => {
                            let _ = done.send(Err(e));
                        }
                        Err(RewriteError::Fatal(e)) => {
                            dead = Some(clone_io_error(&e));
                            let _ = done.send(Err(e));
                        }
                    }
                }
            }
        }
        flush_appends(&mut file, fsync, appends);
    }
}

/// Writes a batch of frames and acknowledges them after one shared fsync.
/// On any error the whole batch is rolled back with `set_len`, so the log
/// never keeps a half-acknowledged batch.
fn flush_appends(file: &mut File, fsync: bool, appends: Vec<(Vec<u8>, Done)>) {
    if appends.is_empty() {
        return;
    }
    let batch_start = file.metadata().map(|m| m.len()).unwrap_or(0);
    let mut failure: Option<io::Error> = None;
    let mut written: Vec<Done> = Vec::with_capacity(appends.len());
    for (frame, done) in appends {
        if let Some(e) = &failure {
            let _ = done.send(Err(clone_io_error(e)));
            continue;
        }
        match file.write_all(&frame) {
            Ok(()) => written.push(done),
            Err(e) => {
                let _ = done.send(Err(clone_io_error(&e)));
                failure = Some(e);
            }
        }
    }
    if failure.is_none() && fsync {
        if let Err(e) = file.sync_data() {
            failure = Some(e);
        }
    }
    match failure {
        None => {
            for done in written {
                let _ = done.send(Ok(()));
            }
        }
        Some(e) => {
            let _ = file.set_len(batch_start);
            for done in written {
                let _ = done.send(Err(clone_io_error(&e)));
            }
        }
    }
}

enum RewriteError {
    /// Old log and handle intact; compaction simply failed.
    Recoverable(io::Error),
    /// The log was replaced but could not be reopened; appends must stop.
    Fatal(io::Error),
}

fn rewrite_log(dir: &Path, frames: &[Vec<u8>]) -> Result<File, RewriteError> {
    let tmp_path = dir.join(COMPACT_TMP);
    let log_path = dir.join(LOG_FILE);

    let result = (|| -> io::Result<()> {
        let mut tmp = File::create(&tmp_path)?;
        for frame in frames {
            tmp.write_all(frame)?;
        }
        tmp.sync_all()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp_path);
        return Err(RewriteError::Recoverable(e));
    }

    if let Err(e) = fs::rename(&tmp_path, &log_path) {
        let _ = fs::remove_file(&tmp_path);
        return Err(RewriteError::Recoverable(e));
    }
    let _ = sync_dir(dir);

    OpenOptions::new()
        .write(true)
        .append(true)
        .open(&log_path)
        .map_err(RewriteError::Fatal)
}
