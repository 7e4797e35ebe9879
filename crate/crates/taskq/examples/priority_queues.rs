//! Implicit priority through token regeneration rates. Two saturated
//! queues whose refill intervals differ by 5x complete first attempts at
//! a 5:1 ratio — no explicit priority field involved.
//!
//! ```bash
//! cargo run -p taskq --example priority_queues
//! ```

use std::sync::Arc;
use std::time::Duration;

use taskq::consumer::{self, ConsumerScript};
use taskq::{MemoryStore, Store, TaskQueueManager, TaskSubmission, WorkerPoolConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let downstream = consumer::spawn(ConsumerScript::default()).await?;
    let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
    let (manager, _) = TaskQueueManager::start(store, WorkerPoolConfig::default()).await?;

    // One token per 100 ms vs one per 500 ms.
    manager.create_queue("fast", 1, 100).await?;
    manager.create_queue("slow", 1, 500).await?;

    // Saturate both queues so the token rate is the only limiter.
    manager.pause_dispatch();
    for queue in ["fast", "slow"] {
        for _ in 0..120 {
            manager
                .submit(TaskSubmission {
                    queue: queue.into(),
                    destination: Some(downstream.url("/run")),
                    method: Some("POST".into()),
                    ..Default::default()
                })
                .await?;
        }
    }
    manager.resume_dispatch();

    let window = Duration::from_secs(6);
    println!("running saturated for {window:?}...");
    tokio::time::sleep(window).await;

    let fast = manager.queue_stats("fast")?;
    let slow = manager.queue_stats("slow")?;
    println!(
        "fast queue dispatched {} first attempts, slow queue {} — ratio {:.2} (configured 5.0)",
        fast.dispatched_total,
        slow.dispatched_total,
        fast.dispatched_total as f64 / slow.dispatched_total.max(1) as f64
    );

    manager.shutdown().await;
    downstream.stop();
    Ok(())
}
