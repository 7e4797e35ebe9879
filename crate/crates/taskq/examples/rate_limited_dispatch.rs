//! Token-bucket throughput control. A queue with capacity 5 and one token
//! per 200 ms serves an initial burst of 5, then exactly 5 tasks/second:
//! 20 tasks should take about (20 - 5) * 200 ms = 3 s.
//!
//! ```bash
//! cargo run -p taskq --example rate_limited_dispatch
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

    let capacity = 5u32;
    let interval_ms = 200u64;
    let tasks = 20usize;
    manager.create_queue("limited", capacity, interval_ms).await?;

    // Pre-fill with dispatch paused so the measurement starts cleanly.
    manager.pause_dispatch();
    for _ in 0..tasks {
        manager
            .submit(TaskSubmission {
                queue: "limited".into(),
                destination: Some(downstream.url("/run")),
                method: Some("POST".into()),
                ..Default::default()
            })
            .await?;
    }
    let start = std::time::Instant::now();
    manager.resume_dispatch();

    loop {
        let stats = manager.queue_stats("limited")?;
        if stats.finished_total >= tasks as u64 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let elapsed = start.elapsed();
    let expected_ms = (tasks as u64 - u64::from(capacity)) * interval_ms;
    println!(
        "{tasks} tasks through a capacity-{capacity} bucket ({interval_ms} ms/token): \
         {} ms measured vs {} ms from the token model",
        elapsed.as_millis(),
        expected_ms
    );

    // The arrival log shows the shape: a burst of 5, then one per 200 ms.
    let arrivals = downstream.state.arrivals();
    let t0 = arrivals.iter().map(|a| a.received_at_ms).min().unwrap_or(0);
    let offsets: Vec<u64> = arrivals.iter().map(|a| a.received_at_ms - t0).collect();
    println!("arrival offsets (ms): {offsets:?}");

    manager.shutdown().await;
    downstream.stop();
    Ok(())
}
