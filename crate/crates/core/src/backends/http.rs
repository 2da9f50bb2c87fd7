//! Blocking JSON-over-HTTP transport shared by the remote clients.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::header::RETRY_AFTER;
use reqwest::StatusCode;
use serde_json::Value;

use super::BackendError;

/// Exponential backoff with jitter, applied to retryable failures only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): a uniform draw from the
    /// upper half of `base * 2^retry`, capped at `max_delay`.
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32.checked_shl(retry.min(16)).unwrap_or(u32::MAX))
            .min(self.max_delay);
        let factor = rand::thread_rng().gen_range(0.5..=1.0);
        exp.mul_f64(factor)
    }

    /// Runs `op` until it succeeds, fails permanently or exhausts the
    /// attempt budget. `on_retry` is called before each retry.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
        mut on_retry: impl FnMut(&BackendError),
    ) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt + 1 < self.max_attempts.max(1) => {
                    on_retry(&e);
                    let mut wait = self.delay(attempt);
                    if let BackendError::RateLimited {
                        retry_after: Some(after),
                    } = &e
                    {
                        wait = wait.max((*after).min(self.max_delay));
                    }
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Token bucket: `rate` tokens per second, bursting up to `burst`.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate: f64, burst: f64) -> Self {
        let burst = burst.max(1.0);
        TokenBucket {
            rate,
            burst,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket lock poisoned");
                let now = Instant::now();
                let (tokens, last) = *state;
                let refilled = (tokens + now.duration_since(last).as_secs_f64() * self.rate).min(self.burst);
                if refilled >= 1.0 {
                    *state = (refilled - 1.0, now);
                    return;
                }
                *state = (refilled, now);
                Duration::from_secs_f64((1.0 - refilled) / self.rate)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct ConcurrencyLimit {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limit: &'a ConcurrencyLimit,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limit.in_flight.lock().expect("limit lock poisoned");
        *n -= 1;
        self.limit.freed.notify_one();
    }
}

impl ConcurrencyLimit {
    pub fn new(max: usize) -> Self {
        ConcurrencyLimit {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limit lock poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limit lock poisoned");
        }
        *n += 1;
        Permit { limit: self }
    }
}

#[derive(Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Requests per second; `None` disables the token bucket.
    pub rate_limit: Option<f64>,
    pub max_concurrency: usize,
}

impl std::fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("retry", &self.retry)
            .field("rate_limit", &self.rate_limit)
            .field("max_concurrency", &self.max_concurrency)
            .finish()
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            rate_limit: None,
            max_concurrency: 8,
        }
    }
}

#[derive(Debug)]
pub struct HttpTransport {
    client: Client,
    config: EndpointConfig,
    bucket: Option<TokenBucket>,
    limit: ConcurrencyLimit,
    requests: AtomicU64,
    retries: AtomicU64,
}

impl HttpTransport {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpTransport {
            client,
            bucket: config.rate_limit.map(|r| TokenBucket::new(r, r.ceil())),
            limit: ConcurrencyLimit::new(config.max_concurrency),
            config,
            requests: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.config.base_url
    }

    /// HTTP requests sent, including retries.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        self.config.retry.run(
            || self.send_once(&url, body),
            |e| {
                self.retries.fetch_add(1, Ordering::Relaxed);
                log::debug!("retrying {url}: {e}");
            },
        )
    }

    fn send_once(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        if let Some(bucket) = &self.bucket {
            bucket.acquire();
        }
        let _permit = self.limit.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut request = self.client.post(url).json(body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            let retry_after = response
                .headers()
                .get(RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendError::RateLimited { retry_after });
        }
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status.is_server_error() {
            return Err(BackendError::Server {
                status: status.as_u16(),
                body: truncate(&text),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Rejected {
                status: status.as_u16(),
                body: truncate(&text),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

fn truncate(text: &str) -> String {
    text.chars().take(300).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    #[test]
    fn retries_transient_errors_until_success() {
        let mut calls = 0;
        let mut retries = 0;
        let out = fast().run(
            || {
                calls += 1;
                if calls < 3 {
                    Err(BackendError::Transport("reset".into()))
                } else {
                    Ok(calls)
                }
            },
            |_| retries += 1,
        );
        assert_eq!(out, Ok(3));
        assert_eq!(retries, 2);
    }

    #[test]
    fn stops_after_max_attempts() {
        let mut calls = 0;
        let out: Result<(), _> = fast().run(
            || {
                calls += 1;
                Err(BackendError::RateLimited { retry_after: None })
            },
            |_| {},
        );
        assert!(out.is_err());
        assert_eq!(calls, 5);
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        let mut calls = 0;
        let out: Result<(), _> = fast().run(
            || {
                calls += 1;
                Err(BackendError::EmptyCompletion)
            },
            |_| {},
        );
        assert_eq!(out, Err(BackendError::EmptyCompletion));
        assert_eq!(calls, 1);
    }

    #[test]
    fn delay_is_bounded() {
        let p = RetryPolicy::default();
        for retry in 0..40 {
            assert!(p.delay(retry) <= p.max_delay);
        }
        assert!(p.delay(0) >= p.base_delay / 2);
    }

    #[test]
    fn concurrency_limit_caps_in_flight() {
        let limit = Arc::new(ConcurrencyLimit::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..6 {
                let (limit, active, peak) = (limit.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    let _p = limit.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn token_bucket_paces_after_burst() {
        let bucket = TokenBucket::new(200.0, 1.0);
        let start = Instant::now();
        for _ in 0..5 {
            bucket.acquire();
        }
        // One free token, then four at 5 ms each.
        assert!(start.elapsed() >= Duration::from_millis(15));
    }
}
