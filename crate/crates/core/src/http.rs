//! Shared plumbing for the remote embedding and chat clients: retry policy,
//! in-flight request cap, and attempt telemetry.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Exponential backoff schedule for retryable HTTP failures (429 and 5xx).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let raw = self.initial_backoff_ms as f64 * self.multiplier.powi(retry as i32);
        Duration::from_millis(raw.min(self.max_backoff_ms as f64) as u64)
    }
}

/// Whether an HTTP status is worth retrying.
pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || status == 408 || (500..600).contains(&status)
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InflightLimiter {
    cap: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

impl InflightLimiter {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut n = self.in_use.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        InflightPermit { limiter: self }
    }
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut n = self
            .limiter
            .in_use
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Request counters shared by a client.
#[derive(Debug, Default)]
pub struct Telemetry {
    attempts: AtomicU64,
    retries: AtomicU64,
}

impl Telemetry {
    pub fn record_attempt(&self) {
        self.attempts.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_retry(&self) {
        self.retries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }
}

/// Outcome of a single HTTP attempt.
pub(crate) enum Attempt<T> {
    Done(T),
    /// Retryable failure: status (0 for transport errors) and body.
    Retry(u16, String),
}

/// Runs `op` until it succeeds, returns a fatal error, or the retry budget
/// is exhausted. On exhaustion returns the last retryable status and body.
pub(crate) fn with_retries<T, E>(
    policy: &RetryPolicy,
    telemetry: &Telemetry,
    mut op: impl FnMut() -> Result<Attempt<T>, E>,
) -> Result<Result<T, (u16, String)>, E> {
    let mut retry = 0;
    loop {
        telemetry.record_attempt();
        match op()? {
            Attempt::Done(v) => return Ok(Ok(v)),
            Attempt::Retry(status, body) => {
                if retry >= policy.max_retries {
                    return Ok(Err((status, body)));
                }
                tracing::debug!(status, retry, "retrying request");
                std::thread::sleep(policy.backoff(retry));
                telemetry.record_retry();
                retry += 1;
            }
        }
    }
}

/// Best-effort MIME type from magic bytes, for data-URLs.
pub fn sniff_mime(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [0xFF, 0xD8, 0xFF, ..] => "image/jpeg",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        _ => "application/octet-stream",
    }
}

pub fn data_url(bytes: &[u8]) -> String {
    use base64::Engine;
    format!(
        "data:{};base64,{}",
        sniff_mime(bytes),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    )
}
