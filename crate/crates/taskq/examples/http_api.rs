//! Drive the service through its HTTP/JSON API: create a queue, submit a
//! task, and inspect it — the same surface `taskq serve` exposes.
//!
//! ```bash
//! cargo run -p taskq --example http_api
//! ```

use std::sync::Arc;
use std::time::Duration;

use taskq::consumer::{self, ConsumerScript};
use taskq::{service, MemoryStore, Store, TaskQueueManager, WorkerPoolConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let downstream = consumer::spawn(ConsumerScript {
        latency_ms: 50,
        ..Default::default()
    })
    .await?;

    let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
    let (manager, _) = TaskQueueManager::start(store, WorkerPoolConfig::default()).await?;
    let (api, _server) = service::spawn_app(manager.clone()).await?;
    let base = format!("http://{api}");
    let http = reqwest::Client::new();

    // POST /v1/queues
    let queue: serde_json::Value = http
        .post(format!("{base}/v1/queues"))
        .json(&serde_json::json!({ "name": "emails", "capacity": 10, "refill_interval_ms": 100 }))
        .send()
        .await?
        .json()
        .await?;
    println!("created queue: {queue}");

    // POST /v1/queues/emails/tasks
    let accepted: serde_json::Value = http
        .post(format!("{base}/v1/queues/emails/tasks"))
        .json(&serde_json::json!({
            "name": "welcome-email",
            "destination": downstream.url("/send"),
            "method": "POST",
            "payload_base64": "aGVsbG8=",
            "max_retries": 2,
            "backoff_ms": 250,
            "ack_timeout_ms": 2000
        }))
        .send()
        .await?
        .json()
        .await?;
    let task_id = accepted["task_id"].as_str().unwrap().to_string();
    println!("accepted task {task_id}");

    // GET /v1/tasks/{id} until terminal.
    loop {
        let view: serde_json::Value = http
            .get(format!("{base}/v1/tasks/{task_id}"))
            .send()
            .await?
            .json()
            .await?;
        let state = view["state"].as_str().unwrap_or_default().to_string();
        if state == "FINISHED" || state == "FAILED" {
            println!("task state: {state}");
            println!("attempt history: {}", view["attempt_history"]);
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }

    // GET /v1/queues and stats.
    let queues: serde_json::Value = http.get(format!("{base}/v1/queues")).send().await?.json().await?;
    let stats: serde_json::Value = http
        .get(format!("{base}/v1/queues/emails/stats"))
        .send()
        .await?
        .json()
        .await?;
    println!("queues: {queues}");
    println!("stats: {stats}");

    manager.shutdown().await;
    downstream.stop();
    Ok(())
}
