//! Retries with fixed backoff. The downstream consumer fails the first
//! two deliveries of every task; the queue retries each after 500 ms, and
//! the third attempt succeeds. Retries bypass the token gate, so the
//! backoff spacing is honored even when the bucket is empty.
//!
//! ```bash
//! cargo run -p taskq --example retries_and_backoff
//! ```

use std::sync::Arc;
use std::time::Duration;

use taskq::consumer::{self, ConsumerScript, FailureMode};
use taskq::{MemoryStore, Store, TaskQueueManager, TaskSubmission, WorkerPoolConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let downstream = consumer::spawn(ConsumerScript {
        failure_mode: FailureMode::FailFirstK { k: 2 },
        ..Default::default()
    })
    .await?;

    let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
    let (manager, _) = TaskQueueManager::start(store.clone(), WorkerPoolConfig::default()).await?;
    manager.create_queue("flaky", 10, 100).await?;

    let id = manager
        .submit(TaskSubmission {
            queue: "flaky".into(),
            name: Some("stubborn".into()),
            destination: Some(downstream.url("/run")),
            method: Some("POST".into()),
            max_retries: Some(3),
            backoff_ms: Some(500),
            ..Default::default()
        })
        .await?;

    loop {
        let task = store.get_task(id).expect("submitted task");
        if task.state.is_terminal() {
            println!("task ended {} after {} attempts", task.state, task.attempts_used);
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }

    println!("attempt history:");
    for attempt in store.attempt_history(id) {
        println!(
            "  #{} -> {:?} (status {:?}) at +{} ms",
            attempt.attempt_number,
            attempt.outcome,
            attempt.response_status,
            attempt.started_at_ms - store.get_task(id).unwrap().created_at_ms,
        );
    }

    let arrivals = downstream.state.arrivals();
    for pair in arrivals.windows(2) {
        println!(
            "gap between attempt {} and {}: {} ms (configured backoff 500 ms)",
            pair[0].attempt,
            pair[1].attempt,
            pair[1].received_at_ms - pair[0].received_at_ms
        );
    }

    manager.shutdown().await;
    downstream.stop();
    Ok(())
}
