//! Benchmark harness: provisions queues, pre-fills them with generated
//! tasks, releases dispatch, and measures how long until every task has
//! reached a terminal state.
//!
//! Pre-fill works by pausing dispatch, submitting everything through the
//! real HTTP API, then resuming; the clock starts at the resume, so the
//! measured wall time is submission-complete to last-task-finished. Each
//! repetition runs on fresh state (fresh store directory, fresh consumer).

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::now_ms;
use crate::consumer::{self, Arrival, ConsumerScript};
use crate::manager::TaskQueueManager;
use crate::service;
use crate::store::{Backend, FileStore, MemoryStore, Store};
use crate::worker::WorkerPoolConfig;

/// One queue in the benchmark workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchQueueSpec {
    pub name: String,
    pub capacity: u32,
    pub refill_interval_ms: u64,
    /// Tasks pre-filled into this queue.
    pub task_count: usize,
}

/// Retry settings applied to every generated task.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchTaskSpec {
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub ack_timeout_ms: u64,
    /// Payload size per task.
    pub payload_bytes: usize,
}

impl Default for BenchTaskSpec {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_ms: 1_000,
            ack_timeout_ms: 5_000,
            payload_bytes: 32,
        }
    }
}

/// Full benchmark configuration; the JSON config file mirrors this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub queues: Vec<BenchQueueSpec>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_handoff_buffer")]
    pub handoff_buffer: usize,
    #[serde(default = "default_store")]
    pub store: Backend,
    #[serde(default = "default_fsync")]
    pub fsync: bool,
    #[serde(default)]
    pub consumer: ConsumerScript,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Parallel submitters used for the pre-fill.
    #[serde(default = "default_submitters")]
    pub submitters: usize,
    #[serde(default = "default_deadline_s")]
    pub deadline_s: u64,
    #[serde(default)]
    pub task: BenchTaskSpec,
}

fn default_workers() -> usize {
    16
}
fn default_handoff_buffer() -> usize {
    256
}
fn default_store() -> Backend {
    Backend::Memory
}
fn default_fsync() -> bool {
    true
}
fn default_repetitions() -> usize {
    1
}
fn default_submitters() -> usize {
    4
}
fn default_deadline_s() -> u64 {
    120
}

impl BenchConfig {
    pub fn total_tasks(&self) -> usize {
        self.queues.iter().map(|q| q.task_count).sum()
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.queues.is_empty() || self.total_tasks() == 0 {
            return Err(BenchError::InvalidConfig("at least one task required".into()));
        }
        let mut names: Vec<&str> = self.queues.iter().map(|q| q.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.queues.len() {
            return Err(BenchError::InvalidConfig("queue names must be unique".into()));
        }
        if self.repetitions == 0 {
            return Err(BenchError::InvalidConfig("repetitions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("completion deadline exceeded after {elapsed_ms} ms: {finished} finished + {failed} failed of {accepted} accepted")]
    Timeout {
        elapsed_ms: u64,
        finished: u64,
        failed: u64,
        accepted: u64,
    },
    #[error("submission failed: {0}")]
    Submit(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("engine: {0}")]
    Engine(String),
}

/// Latency quantiles in milliseconds (submission to final delivery
/// arrival at the consumer).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencySummary {
    pub median_ms: u64,
    pub p95_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueReport {
    pub name: String,
    pub task_count: usize,
    pub dispatched_total: u64,
    pub finished_total: u64,
    pub failed_total: u64,
    /// First attempts per second over the measured wall time.
    pub first_attempt_rate_tps: f64,
}

/// One repetition's measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Dispatch release to last task terminal.
    pub wall_time_ms: u64,
    /// First submission to last task terminal (includes the pre-fill).
    pub total_time_ms: u64,
    pub attempts_total: u64,
    pub finished_total: u64,
    pub failed_total: u64,
    pub latency: LatencySummary,
    pub per_queue: Vec<QueueReport>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WallSummary {
    pub min_ms: u64,
    pub median_ms: u64,
    pub max_ms: u64,
}

/// Output of [`run_bench`]: config echo plus per-repetition runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub runs: Vec<RunReport>,
    pub wall_time: WallSummary,
}

/// Output of [`compare_stores`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Median wall time of `file+fsync` over `memory`.
    pub file_fsync_over_memory: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub store: String,
    pub wall_time: WallSummary,
    pub wall_times_ms: Vec<u64>,
}

/// Everything one repetition produced, for callers that assert on raw
/// arrivals rather than the summarized report.
pub struct RunArtifacts {
    pub report: RunReport,
    pub arrivals: Vec<Arrival>,
    /// Submission acknowledgment time per task id.
    pub submit_times: HashMap<String, u64>,
    /// When dispatch was released (the wall-time zero).
    pub released_at_ms: u64,
}

/// Runs the configured workload `repetitions` times on fresh state.
pub async fn run_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        runs.push(run_once(config).await?.report);
    }
    let wall_time = summarize(runs.iter().map(|r| r.wall_time_ms).collect());
    Ok(BenchReport {
        config: config.clone(),
        runs,
        wall_time,
    })
}

/// Same workload across the three store variants; reports the wall-time
/// table and the file-over-memory ratio.
pub async fn compare_stores(base: &BenchConfig) -> Result<CompareReport, BenchError> {
    base.validate()?;
    let variants = [
        ("memory", Backend::Memory, true),
        ("file+fsync", Backend::File, true),
        ("file-fsync", Backend::File, false),
    ];
    let mut rows = Vec::new();
    for (label, backend, fsync) in variants {
        let mut config = base.clone();
        config.store = backend;
        config.fsync = fsync;
        let report = run_bench(&config).await?;
        rows.push(CompareRow {
            store: label.to_string(),
            wall_time: report.wall_time,
            wall_times_ms: report.runs.iter().map(|r| r.wall_time_ms).collect(),
        });
    }
    let memory = rows[0].wall_time.median_ms.max(1) as f64;
    let file_fsync = rows[1].wall_time.median_ms as f64;
    Ok(CompareReport {
        rows,
        file_fsync_over_memory: file_fsync / memory,
    })
}

fn summarize(mut walls: Vec<u64>) -> WallSummary {
    walls.sort_unstable();
    WallSummary {
        min_ms: *walls.first().unwrap_or(&0),
        median_ms: walls.get(walls.len() / 2).copied().unwrap_or(0),
        max_ms: *walls.last().unwrap_or(&0),
    }
}

/// Runs one repetition and returns the raw artifacts along with the
/// report.
pub async fn run_once(config: &BenchConfig) -> Result<RunArtifacts, BenchError> {
    config.validate()?;

    // Fresh state per repetition.
    let _store_dir;
    let store: Arc<dyn Store> = match config.store {
        Backend::Memory => Arc::new(MemoryStore::new()),
        Backend::File => {
            let dir = tempfile::tempdir()?;
            let store = FileStore::open(dir.path(), config.fsync).map_err(|e| BenchError::Engine(e.to_string()))?;
            _store_dir = dir;
            Arc::new(store)
        }
    };

    let consumer = consumer::spawn(config.consumer).await?;
    let pool = WorkerPoolConfig {
        worker_count: config.workers,
        handoff_buffer: config.handoff_buffer,
    };
    let (manager, _) = TaskQueueManager::start(store, pool)
        .await
        .map_err(|e| BenchError::Engine(e.to_string()))?;
    let (api_addr, api_handle) = service::spawn_app(manager.clone()).await?;
    let client = reqwest::Client::new();

    // Provision queues through the real API.
    for queue in &config.queues {
        let response = client
            .post(format!("http://{api_addr}/v1/queues"))
            .json(&serde_json::json!({
                "name": queue.name,
                "capacity": queue.capacity,
                "refill_interval_ms": queue.refill_interval_ms,
            }))
            .send()
            .await
            .map_err(|e| BenchError::Submit(e.to_string()))?;
        if response.status().as_u16() != 201 {
            return Err(BenchError::Submit(format!(
                "queue creation returned {}",
                response.status()
            )));
        }
    }

    // Pre-fill with dispatch paused, in parallel.
    manager.pause_dispatch();
    let submit_start = now_ms();
    let mut jobs: Vec<&BenchQueueSpec> = Vec::new();
    for queue in &config.queues {
        for _ in 0..queue.task_count {
            jobs.push(queue);
        }
    }
    let submitters = config.submitters.max(1);
    let chunk = jobs.len().div_ceil(submitters);
    let mut submit_handles = Vec::new();
    for slice in jobs.chunks(chunk.max(1)) {
        let client = client.clone();
        let destination = consumer.url("/run");
        let task = config.task;
        let targets: Vec<String> = slice.iter().map(|q| q.name.clone()).collect();
        submit_handles.push(tokio::spawn(async move {
            let mut accepted = Vec::with_capacity(targets.len());
            for queue_name in targets {
                let body = serde_json::json!({
                    "destination": destination,
                    "method": "POST",
                    "payload_base64": base64_payload(task.payload_bytes),
                    "max_retries": task.max_retries,
                    "backoff_ms": task.backoff_ms,
                    "ack_timeout_ms": task.ack_timeout_ms,
                });
                let response = client
                    .post(format!("http://{api_addr}/v1/queues/{queue_name}/tasks"))
                    .json(&body)
                    .send()
                    .await
                    .map_err(|e| e.to_string())?;
                if response.status().as_u16() != 202 {
                    return Err(format!("submission returned {}", response.status()));
                }
                let accepted_body: serde_json::Value =
                    response.json().await.map_err(|e| e.to_string())?;
                let task_id = accepted_body["task_id"]
                    .as_str()
                    .ok_or("missing task_id")?
                    .to_string();
                accepted.push((task_id, now_ms()));
            }
            Ok::<_, String>(accepted)
        }));
    }
    let mut submit_times: HashMap<String, u64> = HashMap::new();
    for handle in submit_handles {
        let accepted = handle
            .await
            .map_err(|e| BenchError::Submit(e.to_string()))?
            .map_err(BenchError::Submit)?;
        for (id, at) in accepted {
            submit_times.insert(id, at);
        }
    }
    let total = config.total_tasks() as u64;
    debug_assert_eq!(submit_times.len() as u64, total);

    // Release and measure.
    let released_at_ms = now_ms();
    manager.resume_dispatch();

    let deadline = released_at_ms + config.deadline_s * 1_000;
    let (finished, failed) = loop {
        let mut finished = 0u64;
        let mut failed = 0u64;
        for queue in &config.queues {
            let stats = manager
                .queue_stats(&queue.name)
                .map_err(|e| BenchError::Engine(e.to_string()))?;
            finished += stats.finished_total;
            failed += stats.failed_total;
        }
        if finished + failed >= total {
            break (finished, failed);
        }
        if now_ms() > deadline {
            shutdown(&manager, api_handle, consumer).await;
            return Err(BenchError::Timeout {
                elapsed_ms: now_ms() - released_at_ms,
                finished,
                failed,
                accepted: total,
            });
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    };
    let ended_at_ms = now_ms();
    let wall_time_ms = ended_at_ms - released_at_ms;

    let arrivals = consumer.state.arrivals();
    let mut last_arrival: HashMap<&str, u64> = HashMap::new();
    for arrival in &arrivals {
        let entry = last_arrival.entry(arrival.task_id.as_str()).or_insert(0);
        *entry = (*entry).max(arrival.received_at_ms);
    }
    let mut latencies: Vec<u64> = submit_times
        .iter()
        .filter_map(|(id, submitted)| {
            last_arrival
                .get(id.as_str())
                .map(|arrived| arrived.saturating_sub(*submitted))
        })
        .collect();
    latencies.sort_unstable();
    let latency = LatencySummary {
        median_ms: latencies.get(latencies.len() / 2).copied().unwrap_or(0),
        p95_ms: latencies
            .get((latencies.len() * 95) / 100)
            .copied()
            .unwrap_or_else(|| latencies.last().copied().unwrap_or(0)),
    };

    let mut per_queue = Vec::new();
    for queue in &config.queues {
        let stats = manager
            .queue_stats(&queue.name)
            .map_err(|e| BenchError::Engine(e.to_string()))?;
        per_queue.push(QueueReport {
            name: queue.name.clone(),
            task_count: queue.task_count,
            dispatched_total: stats.dispatched_total,
            finished_total: stats.finished_total,
            failed_total: stats.failed_total,
            first_attempt_rate_tps: stats.dispatched_total as f64 * 1_000.0
                / wall_time_ms.max(1) as f64,
        });
    }

    let report = RunReport {
        wall_time_ms,
        total_time_ms: ended_at_ms - submit_start,
        attempts_total: arrivals.len() as u64,
        finished_total: finished,
        failed_total: failed,
        latency,
        per_queue,
    };

    shutdown(&manager, api_handle, consumer).await;
    Ok(RunArtifacts {
        report,
        arrivals,
        submit_times,
        released_at_ms,
    })
}

async fn shutdown(
    manager: &TaskQueueManager,
    api_handle: tokio::task::JoinHandle<()>,
    consumer: consumer::ConsumerHandle,
) {
    manager.shutdown().await;
    api_handle.abort();
    consumer.stop();
}

fn base64_payload(len: usize) -> String {
    use base64::Engine;
    let bytes: Vec<u8> = (0..len).map(|i| (i % 251) as u8).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Writes per-run rows as CSV.
pub fn bench_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "repetition,wall_time_ms,total_time_ms,attempts_total,finished,failed,latency_median_ms,latency_p95_ms\n",
    );
    for (i, run) in report.runs.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            i + 1,
            run.wall_time_ms,
            run.total_time_ms,
            run.attempts_total,
            run.finished_total,
            run.failed_total,
            run.latency.median_ms,
            run.latency.p95_ms
        ));
    }
    out
}

/// Writes the store-comparison table as CSV.
pub fn compare_csv(report: &CompareReport) -> String {
    let mut out = String::from("store,repetition,wall_time_ms\n");
    for row in &report.rows {
        for (i, wall) in row.wall_times_ms.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", row.store, i + 1, wall));
        }
    }
    out.push_str(&format!(
        "# file+fsync / memory (median) = {:.3}\n",
        report.file_fsync_over_memory
    ));
    out
}
