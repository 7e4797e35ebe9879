//! End-to-end engine behavior: delivery, retries, worker-pool semantics,
//! and counter conservation, all against the scripted consumer.

mod common;

use std::time::Duration;

use common::bed;
use taskq::consumer::{ConsumerScript, FailureMode};
use taskq::{AttemptOutcome, TaskState, WorkerPoolConfig};

#[tokio::test(flavor = "multi_thread")]
async fn tasks_reach_finished_with_one_acked_attempt() {
    let bed = bed(ConsumerScript::default(), WorkerPoolConfig::default()).await;
    bed.manager.create_queue("q", 10, 10).await.unwrap();

    let mut ids = Vec::new();
    for _ in 0..5 {
        ids.push(bed.manager.submit(bed.submission("q")).await.unwrap());
    }
    let (finished, failed) = bed.wait_terminal(&["q"], 5, Duration::from_secs(10)).await;
    assert_eq!((finished, failed), (5, 0));

    for id in ids {
        let task = bed.store.get_task(id).unwrap();
        assert_eq!(task.state, TaskState::Finished);
        assert_eq!(task.attempts_used, 1);
        let history = bed.store.attempt_history(id);
        assert_eq!(history.len(), 1);
        assert_eq!(history[0].outcome, AttemptOutcome::Acked);
        assert_eq!(history[0].response_status, Some(200));
    }
    assert_eq!(bed.consumer.state.arrivals().len(), 5);
    bed.teardown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn always_failing_consumer_exhausts_the_retry_budget() {
    let bed = bed(
        ConsumerScript {
            failure_mode: FailureMode::AlwaysFail,
            ..Default::default()
        },
        WorkerPoolConfig::default(),
    )
    .await;
    bed.manager.create_queue("q", 10, 10).await.unwrap();

    let mut sub = bed.submission("q");
    sub.max_retries = Some(2);
    sub.backoff_ms = Some(40);
    let id = bed.manager.submit(sub).await.unwrap();

    let (finished, failed) = bed.wait_terminal(&["q"], 1, Duration::from_secs(10)).await;
    assert_eq!((finished, failed), (0, 1));

    let task = bed.store.get_task(id).unwrap();
    assert_eq!(task.state, TaskState::Failed);
    assert_eq!(task.attempts_used, 3);

    let history = bed.store.attempt_history(id);
    let numbers: Vec<u32> = history.iter().map(|a| a.attempt_number).collect();
    assert_eq!(numbers, vec![1, 2, 3]);
    assert!(history.iter().all(|a| a.outcome == AttemptOutcome::Nacked));

    // The consumer saw exactly the same three attempts.
    let attempts: Vec<u32> = bed
        .consumer
        .state
        .arrivals()
        .iter()
        .map(|a| a.attempt)
        .collect();
    assert_eq!(attempts, vec![1, 2, 3]);
    bed.teardown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn single_worker_serializes_deliveries() {
    let bed = bed(
        ConsumerScript {
            latency_ms: 200,
            ..Default::default()
        },
        WorkerPoolConfig {
            worker_count: 1,
            handoff_buffer: 16,
        },
    )
    .await;
    bed.manager.create_queue("q", 10, 1).await.unwrap();
    bed.manager.submit(bed.submission("q")).await.unwrap();
    bed.manager.submit(bed.submission("q")).await.unwrap();
    bed.wait_terminal(&["q"], 2, Duration::from_secs(10)).await;

    let arrivals = bed.consumer.state.arrivals();
    assert_eq!(arrivals.len(), 2);
    let gap = arrivals[1].received_at_ms - arrivals[0].received_at_ms;
    assert!(gap >= 200, "second delivery started {gap} ms after the first");
    bed.teardown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn eight_workers_deliver_in_parallel() {
    let bed = bed(
        ConsumerScript {
            latency_ms: 200,
            ..Default::default()
        },
        WorkerPoolConfig {
            worker_count: 8,
            handoff_buffer: 16,
        },
    )
    .await;
    bed.manager.create_queue("q", 8, 1).await.unwrap();
    for _ in 0..8 {
        bed.manager.submit(bed.submission("q")).await.unwrap();
    }
    bed.wait_terminal(&["q"], 8, Duration::from_secs(10)).await;

    let arrivals = bed.consumer.state.arrivals();
    assert_eq!(arrivals.len(), 8);
    let first = arrivals.iter().map(|a| a.received_at_ms).min().unwrap();
    let last = arrivals.iter().map(|a| a.received_at_ms).max().unwrap();
    // All eight requests land within one latency window of each other.
    assert!(last - first < 400, "arrival spread was {} ms", last - first);
    bed.teardown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn black_hole_consumer_times_out_and_frees_the_worker() {
    let bed = bed(
        ConsumerScript {
            failure_mode: FailureMode::BlackHole,
            ..Default::default()
        },
        WorkerPoolConfig::default(),
    )
    .await;
    bed.manager.create_queue("q", 10, 10).await.unwrap();

    let mut sub = bed.submission("q");
    sub.max_retries = Some(0);
    sub.ack_timeout_ms = Some(1_000);
    let id = bed.manager.submit(sub).await.unwrap();

    let started = std::time::Instant::now();
    let (_, failed) = bed.wait_terminal(&["q"], 1, Duration::from_secs(10)).await;
    assert_eq!(failed, 1);
    // The worker was blocked for roughly the ack timeout, not forever.
    assert!(started.elapsed() < Duration::from_secs(3));

    let history = bed.store.attempt_history(id);
    assert_eq!(history.len(), 1);
    assert_eq!(history[0].outcome, AttemptOutcome::TimedOut);
    assert_eq!(history[0].response_status, None);
    let waited = history[0].ended_at_ms - history[0].started_at_ms;
    assert!((950..2_500).contains(&waited), "waited {waited} ms");
    bed.teardown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn graceful_shutdown_persists_in_flight_work() {
    let bed = bed(
        ConsumerScript {
            latency_ms: 300,
            ..Default::default()
        },
        WorkerPoolConfig::default(),
    )
    .await;
    bed.manager.create_queue("q", 10, 10).await.unwrap();
    let id = bed.manager.submit(bed.submission("q")).await.unwrap();

    // Let the attempt go in flight, then shut down mid-delivery.
    tokio::time::sleep(Duration::from_millis(100)).await;
    bed.manager.shutdown().await;

    let task = bed.store.get_task(id).unwrap();
    assert_eq!(
        task.state,
        TaskState::Finished,
        "shutdown finishes the in-flight attempt"
    );
    bed.consumer.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn shutdown_keeps_pending_tasks_recoverable() {
    let bed = bed(ConsumerScript::default(), WorkerPoolConfig::default()).await;
    // One token per 10 s: nothing dispatches after the initial burst.
    bed.manager.create_queue("q", 1, 10_000).await.unwrap();
    for _ in 0..4 {
        bed.manager.submit(bed.submission("q")).await.unwrap();
    }
    bed.wait_terminal(&["q"], 1, Duration::from_secs(10)).await;
    bed.manager.shutdown().await;

    let recovered = bed.store.load_recoverable().await.unwrap();
    assert_eq!(recovered.tasks.len(), 3);
    assert!(recovered
        .tasks
        .iter()
        .all(|t| t.state == TaskState::AwaitingToken));
    bed.consumer.stop();
}

#[tokio::test(flavor = "multi_thread")]
async fn counters_conserve_and_never_decrease() {
    let bed = bed(
        ConsumerScript {
            failure_mode: FailureMode::FailRate { p: 0.3 },
            ..Default::default()
        },
        WorkerPoolConfig::default(),
    )
    .await;
    bed.manager.create_queue("q", 20, 5).await.unwrap();

    let total = 40u64;
    for _ in 0..total {
        let mut sub = bed.submission("q");
        sub.max_retries = Some(2);
        sub.backoff_ms = Some(20);
        bed.manager.submit(sub).await.unwrap();
    }

    let mut last_finished = 0u64;
    let mut last_failed = 0u64;
    let deadline = std::time::Instant::now() + Duration::from_secs(20);
    loop {
        let stats = bed.manager.queue_stats("q").unwrap();
        assert_eq!(stats.accepted_total, total);
        assert!(stats.finished_total >= last_finished);
        assert!(stats.failed_total >= last_failed);
        assert!(stats.finished_total + stats.failed_total <= stats.accepted_total);
        last_finished = stats.finished_total;
        last_failed = stats.failed_total;
        if stats.finished_total + stats.failed_total == total {
            break;
        }
        assert!(std::time::Instant::now() < deadline);
        tokio::time::sleep(Duration::from_millis(10)).await;
    }

    // Attempt budget holds for every task regardless of outcome.
    for arrival in bed.consumer.state.arrivals() {
        assert!(arrival.attempt <= 3);
    }
    bed.teardown().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn fail_first_k_tasks_finish_on_the_k_plus_first_attempt() {
    let bed = bed(
        ConsumerScript {
            failure_mode: FailureMode::FailFirstK { k: 2 },
            ..Default::default()
        },
        WorkerPoolConfig::default(),
    )
    .await;
    bed.manager.create_queue("q", 10, 10).await.unwrap();

    let mut sub = bed.submission("q");
    sub.max_retries = Some(3);
    sub.backoff_ms = Some(30);
    let id = bed.manager.submit(sub).await.unwrap();
    let (finished, _) = bed.wait_terminal(&["q"], 1, Duration::from_secs(10)).await;
    assert_eq!(finished, 1);

    let history = bed.store.attempt_history(id);
    assert_eq!(history.len(), 3);
    assert_eq!(history[2].outcome, AttemptOutcome::Acked);
    bed.teardown().await;
}
