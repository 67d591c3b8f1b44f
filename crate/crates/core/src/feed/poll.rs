use super::{parse_free_bike_status, SnapshotStore, StoreError};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("http status {0}")]
    Status(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that can return the current feed document.
pub trait FeedSource {
    fn fetch(&mut self) -> Result<Vec<u8>, FetchError>;
}

/// Time source for the poller; swapped for a virtual clock in tests.
pub trait Pacer {
    /// Time elapsed since the pacer was created.
    fn elapsed(&self) -> Duration;
    fn sleep(&mut self, d: Duration);
}

pub struct SystemPacer {
    start: Instant,
}

impl SystemPacer {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Default for SystemPacer {
    fn default() -> Self {
        Self::new()
    }
}

impl Pacer for SystemPacer {
    fn elapsed(&self) -> Duration {
        self.start.elapsed()
    }
    fn sleep(&mut self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// HTTP(S) source with optional static headers (e.g. an API key).
pub struct HttpSource {
    agent: ureq::Agent,
    url: String,
    headers: Vec<(String, String)>,
}

const MAX_BODY_BYTES: u64 = 256 * 1024 * 1024;

impl HttpSource {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            url: url.into(),
            headers: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

impl FeedSource for HttpSource {
    fn fetch(&mut self) -> Result<Vec<u8>, FetchError> {
        let mut req = self.agent.get(&self.url);
        for (k, v) in &self.headers {
            req = req.header(k, v);
        }
        let mut resp = req.call().map_err(|e| match e {
            ureq::Error::StatusCode(code) => FetchError::Status(code),
            other => FetchError::Transport(other.to_string()),
        })?;
        resp.body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_vec()
            .map_err(|e| FetchError::Transport(e.to_string()))
    }
}

/// Reads the feed from a local file on every fetch.
pub struct FileSource(pub std::path::PathBuf);

impl FeedSource for FileSource {
    fn fetch(&mut self) -> Result<Vec<u8>, FetchError> {
        Ok(std::fs::read(&self.0)?)
    }
}

#[derive(Debug, Clone)]
pub struct PollConfig {
    pub provider: String,
    pub interval: Duration,
    /// Stop after this much (pacer) time; `None` runs until `stop` is raised.
    pub duration: Option<Duration>,
    pub max_attempts: u32,
    pub backoff_base: Duration,
}

impl PollConfig {
    pub fn new(provider: impl Into<String>, interval: Duration) -> Self {
        Self {
            provider: provider.into(),
            interval,
            duration: None,
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
        }
    }

    fn backoff(&self, failed_attempt: u32, interval: Duration) -> Duration {
        let exp = self.backoff_base.saturating_mul(1u32 << failed_attempt.saturating_sub(1).min(16));
        exp.min(interval / 2)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PollSummary {
    /// Polling rounds started (one per tick).
    pub rounds: u64,
    pub snapshots_written: u64,
    /// Documents whose `last_updated` was not newer than the stored one.
    pub duplicates_skipped: u64,
    /// Individual fetch attempts that failed (each retried up to the budget).
    pub failed_attempts: u64,
    /// Rounds in which every attempt failed.
    pub exhausted_rounds: u64,
    pub parse_failures: u64,
}

/// Polls `source` every tick, appending new snapshots to `store`.
///
/// The tick is `min(interval, ttl)` once a TTL has been observed. Transient
/// fetch failures are retried with exponential backoff capped at half the
/// tick; a round that exhausts its attempts is recorded and polling goes on.
/// Only store write failures abort.
pub fn poll_feed(
    source: &mut dyn FeedSource,
    store: &SnapshotStore,
    config: &PollConfig,
    stop: &AtomicBool,
    pacer: &mut dyn Pacer,
) -> Result<PollSummary, StoreError> {
    assert!(!config.interval.is_zero(), "poll interval must be positive");
    let mut summary = PollSummary::default();
    let mut last_stored = store.last_captured_at(&config.provider)?;
    let mut tick = config.interval;
    let mut next_due = pacer.elapsed();

    let expired = |pacer: &dyn Pacer| config.duration.is_some_and(|d| pacer.elapsed() >= d);

    loop {
        if stop.load(Ordering::Relaxed) || expired(pacer) {
            break;
        }
        summary.rounds += 1;

        let mut attempt = 0;
        let body = loop {
            attempt += 1;
            match source.fetch() {
                Ok(body) => break Some(body),
                Err(e) => {
                    summary.failed_attempts += 1;
                    log::warn!(
                        "{}: fetch attempt {attempt}/{} failed: {e}",
                        config.provider,
                        config.max_attempts
                    );
                    if attempt >= config.max_attempts {
                        summary.exhausted_rounds += 1;
                        break None;
                    }
                    pacer.sleep(config.backoff(attempt, tick));
                }
            }
        };

        if let Some(body) = body {
            match parse_free_bike_status(&body, &config.provider) {
                Ok(snapshot) => {
                    tick = config.interval.min(Duration::from_secs(snapshot.ttl_s.into()));
                    if last_stored.is_some_and(|t| snapshot.captured_at <= t) {
                        summary.duplicates_skipped += 1;
                    } else {
                        store.append(&snapshot)?;
                        last_stored = Some(snapshot.captured_at);
                        summary.snapshots_written += 1;
                        log::info!(
                            "{}: stored snapshot {} ({} vehicles)",
                            config.provider,
                            snapshot.captured_at,
                            snapshot.observations.len()
                        );
                    }
                }
                Err(e) => {
                    summary.parse_failures += 1;
                    log::warn!("{}: unparseable feed document: {e}", config.provider);
                }
            }
        }

        next_due += tick;
        let now = pacer.elapsed();
        if next_due > now {
            let wait = match config.duration {
                Some(d) if d < next_due => d.saturating_sub(now),
                _ => next_due - now,
            };
            pacer.sleep(wait);
        } else {
            // fell behind; realign instead of bursting
            next_due = now;
        }
    }
    Ok(summary)
}
