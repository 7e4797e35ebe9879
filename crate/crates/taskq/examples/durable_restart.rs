//! Durability and crash recovery with the file store. Tasks are accepted
//! into a slow queue, the engine stops mid-run (standing in for a crash),
//! and a second engine on the same directory picks up where the first
//! left off — nothing accepted is lost.
//!
//! ```bash
//! cargo run -p taskq --example durable_restart
//! ```

use std::sync::Arc;
use std::time::Duration;

use taskq::consumer::{self, ConsumerScript};
use taskq::{FileStore, Store, TaskQueueManager, TaskSubmission, WorkerPoolConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let downstream = consumer::spawn(ConsumerScript::default()).await?;

    // First life: accept 30 tasks into a deliberately slow queue and let
    // only a few finish before shutting down.
    let total = 30u64;
    {
        let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path(), true)?);
        let (manager, _) = TaskQueueManager::start(store, WorkerPoolConfig::default()).await?;
        manager.create_queue("durable", 3, 300).await?;
        for i in 0..total {
            manager
                .submit(TaskSubmission {
                    queue: "durable".into(),
                    name: Some(format!("job-{i}")),
                    destination: Some(downstream.url("/run")),
                    method: Some("POST".into()),
                    ..Default::default()
                })
                .await?;
        }
        tokio::time::sleep(Duration::from_millis(800)).await;
        let stats = manager.queue_stats("durable")?;
        println!(
            "first life: accepted {}, finished {} before stopping",
            stats.accepted_total, stats.finished_total
        );
        manager.shutdown().await;
    }

    // Second life: reopen the same directory. Recovery restores the queue,
    // requeues pending tasks in their original order, and re-drives any
    // task that was mid-flight.
    let store: Arc<dyn Store> = Arc::new(FileStore::open(dir.path(), true)?);
    let (manager, report) = TaskQueueManager::start(store.clone(), WorkerPoolConfig::default()).await?;
    println!(
        "recovery: {} queue(s), {} requeued, {} retried, {} failed",
        report.queues_restored, report.requeued, report.retried, report.failed
    );

    loop {
        let stats = manager.queue_stats("durable")?;
        let done_before = total - (report.requeued + report.retried + report.failed) as u64;
        if done_before + stats.finished_total + stats.failed_total >= total {
            println!(
                "second life: drained the remaining {} task(s); every accepted task is accounted for",
                stats.finished_total + stats.failed_total
            );
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }

    manager.shutdown().await;
    downstream.stop();
    Ok(())
}
