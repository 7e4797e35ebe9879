//! Millisecond timestamps, monotonic within a process.

use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

static ANCHOR: OnceLock<(Instant, u64)> = OnceLock::new();

fn anchor() -> (Instant, u64) {
    *ANCHOR.get_or_init(|| {
        let epoch_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before Unix epoch")
            .as_millis() as u64;
        (Instant::now(), epoch_ms)
    })
}

/// Current time as milliseconds since the Unix epoch.
///
/// Anchored to the wall clock once at first use and advanced with the
/// monotonic clock, so successive calls never go backwards even if the
/// system clock is adjusted.
pub fn now_ms() -> u64 {
    let (instant, epoch_ms) = anchor();
    epoch_ms + instant.elapsed().as_millis() as u64
}

/// Converts an epoch-milliseconds deadline into a `tokio` sleep instant.
pub fn deadline_to_instant(deadline_ms: u64) -> tokio::time::Instant {
    let now = now_ms();
    let delta = deadline_ms.saturating_sub(now);
    tokio::time::Instant::now() + std::time::Duration::from_millis(delta)
}
