//! Chat-completion execution against a multimodal model.
//!
//! [`Gateway`] owns retry, timeout and admission control; the transport
//! lives behind [`ChatBackend`] so the same code path drives a real
//! OpenAI-compatible endpoint ([`HttpBackend`]) or the offline
//! [`MockBackend`].

mod http;
mod mock;

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::prompting::MessageSequence;

pub use http::{HttpBackend, API_KEY_ENV};
pub use mock::{mock_complete, MockBackend, MockConfig, DEFAULT_REFERENCE_DISTANCE_M};

/// Default sampling temperature for self-consistency batches.
pub const DEFAULT_SAMPLING_TEMPERATURE: f64 = 0.7;
/// Temperature used for single-pass scoring.
pub const DEFAULT_SINGLE_PASS_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {reason}")]
    Transport { attempts: u32, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("authentication rejected (HTTP {status}): {message}")]
    Auth { status: u16, message: String },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Outcome of one backend call.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CallError {
    /// Timeouts, connection failures, HTTP 429 and 5xx. Retried.
    #[error("transient failure: {0}")]
    Transient(String),
    /// HTTP 401/403. Never retried.
    #[error("authentication failed ({status}): {message}")]
    Auth { status: u16, message: String },
    /// The endpoint answered with something that is not a usable reply.
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub cap: Duration,
    /// Relative jitter; 0.2 spreads each delay over ±20%.
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            initial: Duration::from_secs(1),
            cap: Duration::from_secs(8),
            jitter: 0.2,
        }
    }
}

impl Backoff {
    /// Nominal delay before retry number `retry` (0-based): initial·2^retry,
    /// capped.
    pub fn nominal(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(30));
        self.initial.saturating_mul(factor).min(self.cap)
    }

    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let base = self.nominal(retry);
        if self.jitter <= 0.0 {
            return base;
        }
        let scale = 1.0 + rng.random_range(-self.jitter..=self.jitter);
        base.mul_f64(scale.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Sampling temperature for self-consistency batches.
    pub temperature: f64,
    pub request_timeout: Duration,
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub backoff: Backoff,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            endpoint_url: String::new(),
            model_name: "mock".into(),
            temperature: DEFAULT_SAMPLING_TEMPERATURE,
            request_timeout: Duration::from_secs(120),
            max_retries: 3,
            max_concurrency: 8,
            backoff: Backoff::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_concurrency == 0 {
            return Err(GatewayError::Config("max_concurrency must be >= 1".into()));
        }
        if self.request_timeout.is_zero() {
            return Err(GatewayError::Config("request_timeout must be positive".into()));
        }
        if self.model_name.is_empty() {
            return Err(GatewayError::Config("model name is empty".into()));
        }
        Ok(())
    }
}

/// What the pair being scored is, for backends that need it (the mock
/// derives its verdict from it; HTTP ignores it).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairContext {
    pub query_id: String,
    pub candidate_id: String,
    /// Ground-truth distance in meters, when known.
    pub distance_m: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub messages: &'a MessageSequence,
    pub model: &'a str,
    pub temperature: f64,
    pub sample_index: usize,
    pub context: &'a PairContext,
}

/// A successful backend reply.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub output_tokens: Option<u64>,
    /// Backend-reported latency; measured wall time is used when absent.
    pub latency_s: Option<f64>,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn call(&self, request: CompletionRequest<'_>) -> Result<Completion, CallError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "lowercase")]
pub enum TransportStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub sample_index: usize,
    pub text: String,
    pub latency_s: f64,
    pub output_tokens: u64,
    pub attempts: u32,
    pub transport_status: TransportStatus,
}

impl RawResponse {
    fn failed(sample_index: usize, err: &GatewayError, latency_s: f64) -> Self {
        let attempts = match err {
            GatewayError::Transport { attempts, .. } => *attempts,
            GatewayError::Config(_) => 0,
            _ => 1,
        };
        RawResponse {
            sample_index,
            text: String::new(),
            latency_s,
            output_tokens: 0,
            attempts,
            transport_status: TransportStatus::Failed(err.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.transport_status == TransportStatus::Ok
    }
}

/// Shared request executor. Cloning is cheap and clones share one in-flight
/// cap.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cfg: ModelConfig,
    permits: Arc<Semaphore>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, cfg: ModelConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let permits = Arc::new(Semaphore::new(cfg.max_concurrency));
        Ok(Gateway {
            backend,
            cfg,
            permits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Sends one request, retrying transient failures with backoff.
    pub async fn complete(
        &self,
        messages: &MessageSequence,
        context: &PairContext,
        temperature: f64,
        sample_index: usize,
    ) -> Result<RawResponse, GatewayError> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(GatewayError::Config(format!("invalid temperature {temperature}")));
        }
        let request = CompletionRequest {
            messages,
            model: &self.cfg.model_name,
            temperature,
            sample_index,
            context,
        };
        let started = Instant::now();
        let mut last_reason = String::new();
        let mut attempts = 0;
        for retry in 0..=self.cfg.max_retries {
            attempts += 1;
            let outcome = {
                let _permit = self.permits.acquire().await.expect("semaphore is never closed");
                tokio::time::timeout(self.cfg.request_timeout, self.backend.call(request)).await
            };
            match outcome {
                Ok(Ok(c)) => {
                    return Ok(RawResponse {
                        sample_index,
                        text: c.text,
                        latency_s: c.latency_s.unwrap_or_else(|| started.elapsed().as_secs_f64()),
                        output_tokens: c.output_tokens.unwrap_or(0),
                        attempts,
                        transport_status: TransportStatus::Ok,
                    })
                }
                Ok(Err(CallError::Auth { status, message })) => {
                    return Err(GatewayError::Auth { status, message })
                }
                Ok(Err(CallError::Protocol(m))) => return Err(GatewayError::Protocol(m)),
                Ok(Err(CallError::Transient(reason))) => last_reason = reason,
                Err(_) => {
                    last_reason = format!("timed out after {:?}", self.cfg.request_timeout)
                }
            }
            if retry < self.cfg.max_retries {
                let delay = self.cfg.backoff.delay(retry, &mut rand::rng());
                tracing::debug!(sample_index, retry, ?delay, %last_reason, "retrying request");
                tokio::time::sleep(delay).await;
            }
        }
        Err(GatewayError::Transport {
            attempts,
            reason: last_reason,
        })
    }

    /// Issues `n` independent requests concurrently. The result always has
    /// `n` entries ordered by sample index; failed requests come back with
    /// a failed transport status instead of aborting the batch.
    pub async fn sample_n(
        &self,
        messages: &MessageSequence,
        context: &PairContext,
        temperature: f64,
        n: usize,
    ) -> Vec<RawResponse> {
        futures::future::join_all((0..n).map(|i| async move {
            let started = Instant::now();
            match self.complete(messages, context, temperature, i).await {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(sample_index = i, error = %e, "sample failed");
                    RawResponse::failed(i, &e, started.elapsed().as_secs_f64())
                }
            }
        }))
        .await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backoff_schedule() {
        let b = Backoff::default();
        let secs: Vec<u64> = (0..6).map(|r| b.nominal(r).as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4, 8, 8, 8]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for retry in 0..5 {
            for _ in 0..50 {
                let d = b.delay(retry, &mut rng).as_secs_f64();
                let n = b.nominal(retry).as_secs_f64();
                assert!(d >= 0.8 * n - 1e-9 && d <= 1.2 * n + 1e-9, "{d} vs {n}");
            }
        }
        let flat = Backoff { jitter: 0.0, ..b };
        assert_eq!(flat.delay(2, &mut rng), Duration::from_secs(4));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.temperature = f64::NAN));
        assert!(bad(|c| c.temperature = -0.1));
        assert!(bad(|c| c.max_concurrency = 0));
        assert!(bad(|c| c.request_timeout = Duration::ZERO));
        assert!(bad(|c| c.model_name.clear()));
    }
}
