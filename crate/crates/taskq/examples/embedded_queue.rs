//! Embed the task queue in your own process: open a store, start the
//! engine, create a queue, submit tasks, and wait for completion.
//!
//! ```bash
//! cargo run -p taskq --example embedded_queue
//! ```

use std::sync::Arc;
use std::time::Duration;

use taskq::consumer::{self, ConsumerScript};
use taskq::{MemoryStore, Store, TaskQueueManager, TaskSubmission, WorkerPoolConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    // A scripted downstream service standing in for the real consumer.
    let downstream = consumer::spawn(ConsumerScript::default()).await?;

    let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
    let (manager, _) = TaskQueueManager::start(store.clone(), WorkerPoolConfig::default()).await?;

    manager.create_queue("orders", 5, 100).await?;

    let mut ids = Vec::new();
    for i in 0..10 {
        let id = manager
            .submit(TaskSubmission {
                queue: "orders".into(),
                name: Some(format!("order-{i}")),
                destination: Some(downstream.url("/process")),
                method: Some("POST".into()),
                payload: format!("{{\"order\": {i}}}").into_bytes(),
                content_type: Some("application/json".into()),
                ..Default::default()
            })
            .await?;
        ids.push(id);
    }
    println!("submitted {} tasks", ids.len());

    // Poll queue stats until every task reached a terminal state.
    loop {
        let stats = manager.queue_stats("orders")?;
        if stats.finished_total + stats.failed_total >= ids.len() as u64 {
            println!(
                "done: {} finished, {} failed, {} delivery attempts observed downstream",
                stats.finished_total,
                stats.failed_total,
                downstream.state.arrivals().len()
            );
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    // Inspect one task's journey.
    let sample = store.get_task(ids[0]).expect("task known to the store");
    println!(
        "task {} ({}) ended in state {} after {} attempt(s)",
        sample.id, sample.name, sample.state, sample.attempts_used
    );

    manager.shutdown().await;
    downstream.stop();
    Ok(())
}
