//! Shared fixtures for the integration suites.

use std::sync::Arc;
use std::time::Duration;

use taskq::consumer::{self, ConsumerHandle, ConsumerScript};
use taskq::{MemoryStore, Store, TaskQueueManager, TaskSubmission, WorkerPoolConfig};

pub struct TestBed {
    pub manager: TaskQueueManager,
    pub consumer: ConsumerHandle,
    pub store: Arc<dyn Store>,
}

/// Engine on a memory store plus a scripted consumer.
pub async fn bed(script: ConsumerScript, pool: WorkerPoolConfig) -> TestBed {
    let store: Arc<dyn Store> = Arc::new(MemoryStore::new());
    bed_with_store(store, script, pool).await
}

pub async fn bed_with_store(
    store: Arc<dyn Store>,
    script: ConsumerScript,
    pool: WorkerPoolConfig,
) -> TestBed {
    let consumer = consumer::spawn(script).await.expect("consumer spawns");
    let (manager, _) = TaskQueueManager::start(store.clone(), pool)
        .await
        .expect("engine starts");
    TestBed {
        manager,
        consumer,
        store,
    }
}

impl TestBed {
    pub fn submission(&self, queue: &str) -> TaskSubmission {
        TaskSubmission {
            queue: queue.into(),
            destination: Some(self.consumer.url("/run")),
            method: Some("POST".into()),
            ..Default::default()
        }
    }

    /// Polls stats until `total` tasks are terminal across `queues`.
    pub async fn wait_terminal(&self, queues: &[&str], total: u64, deadline: Duration) -> (u64, u64) {
        let start = std::time::Instant::now();
        loop {
            let mut finished = 0;
            let mut failed = 0;
            for queue in queues {
                let stats = self.manager.queue_stats(queue).expect("queue exists");
                finished += stats.finished_total;
                failed += stats.failed_total;
            }
            if finished + failed >= total {
                return (finished, failed);
            }
            assert!(
                start.elapsed() < deadline,
                "timed out waiting for {total} terminal tasks ({finished} finished, {failed} failed)"
            );
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub async fn teardown(self) {
        self.manager.shutdown().await;
        self.consumer.stop();
    }
}
