//! Deterministic offline model.
//!
//! The synthetic mode scores a pair from its ground-truth distance plus
//! seeded noise, so ranking quality responds to the pipeline the same way
//! it would to a real model, only reproducibly. Every draw is keyed by
//! `(seed, query id, candidate id, sample index)` and never by call order
//! or timing.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{CallError, ChatBackend, Completion, CompletionRequest, PairContext};

/// Distance at which the synthetic score reaches zero.
pub const DEFAULT_REFERENCE_DISTANCE_M: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MockConfig {
    pub seed: u64,
    pub noise_scale: f64,
    pub malform_rate: f64,
    pub fence_rate: f64,
    pub reference_distance_m: f64,
    /// Scale noise up for mid-range scores and down near 0 and 1.
    pub heteroscedastic: bool,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            seed: 0,
            noise_scale: 0.1,
            malform_rate: 0.0,
            fence_rate: 0.0,
            reference_distance_m: DEFAULT_REFERENCE_DISTANCE_M,
            heteroscedastic: false,
        }
    }
}

impl MockConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.malform_rate) || !(0.0..=1.0).contains(&self.fence_rate) {
            return Err("mock malform/fence rates must lie in [0, 1]".into());
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err("mock noise scale must be finite and >= 0".into());
        }
        if !self.reference_distance_m.is_finite() || self.reference_distance_m <= 0.0 {
            return Err("mock reference distance must be positive".into());
        }
        Ok(())
    }
}

fn draw_rng(seed: u64, ctx: &PairContext, sample_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(ctx.query_id.as_bytes());
    h.update([0u8]);
    h.update(ctx.candidate_id.as_bytes());
    h.update([0u8]);
    h.update((sample_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn noise_factor(base: f64, heteroscedastic: bool) -> f64 {
    if heteroscedastic {
        0.25 + 3.0 * base * (1.0 - base)
    } else {
        1.0
    }
}

/// Noise-free score for a pair: `clamp01(1 − distance / reference)`.
pub fn base_score(distance_m: Option<f64>, reference_distance_m: f64) -> f64 {
    match distance_m {
        Some(d) => (1.0 - d / reference_distance_m).clamp(0.0, 1.0),
        None => 0.0,
    }
}

/// Text the synthetic model replies with for one sample.
pub fn mock_complete(ctx: &PairContext, sample_index: usize, cfg: &MockConfig) -> String {
    let mut rng = draw_rng(cfg.seed, ctx, sample_index);
    let base = base_score(ctx.distance_m, cfg.reference_distance_m);
    let z: f64 = rng.sample(StandardNormal);
    let malformed = rng.random::<f64>() < cfg.malform_rate;
    let fenced = rng.random::<f64>() < cfg.fence_rate;

    if malformed {
        return match sample_index % 3 {
            0 => "I am unable to give a reliable similarity score for these two images.".into(),
            1 => "Both images show an urban street; similarity score: roughly high.".into(),
            _ => "The query and candidate differ in lighting, so no verdict.".into(),
        };
    }
    let noisy = base + cfg.noise_scale * noise_factor(base, cfg.heteroscedastic) * z;
    let score = (noisy.clamp(0.0, 1.0) * 100.0).round() / 100.0;
    let (justification, matching, mismatched): (&str, &[&str], &[&str]) = if score >= 0.8 {
        (
            "The permanent structures and signage align closely between the two views.",
            &["building facade", "street sign", "lamp post"],
            &[],
        )
    } else if score >= 0.5 {
        (
            "Several landmarks match but some structures differ.",
            &["building facade"],
            &["storefront"],
        )
    } else if score >= 0.2 {
        (
            "Only generic urban features are shared.",
            &["road markings"],
            &["building facade", "signage"],
        )
    } else {
        (
            "No significant permanent features match.",
            &[],
            &["building facade", "skyline", "signage"],
        )
    };
    let body = json!({
        "similarity_score": score,
        "justification": justification,
        "key_matching_objects": matching,
        "key_mismatched_objects": mismatched,
    });
    let text = serde_json::to_string_pretty(&body).expect("verdict serializes");
    if fenced {
        format!("```json\n{text}\n```")
    } else {
        text
    }
}

enum Source {
    Synthetic(MockConfig),
    /// Reply `texts[sample_index % len]` regardless of the pair.
    Scripted(Vec<String>),
}

/// Offline [`ChatBackend`] with call accounting and fault injection.
pub struct MockBackend {
    source: Source,
    max_delay: Option<(Duration, u64)>,
    stall_samples: Vec<usize>,
    transient_failures: Mutex<u32>,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockBackend {
    fn with_source(source: Source) -> Self {
        MockBackend {
            source,
            max_delay: None,
            stall_samples: Vec::new(),
            transient_failures: Mutex::new(0),
            calls: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn synthetic(cfg: MockConfig) -> Self {
        MockBackend::with_source(Source::Synthetic(cfg))
    }

    pub fn scripted<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        let texts: Vec<String> = texts.into_iter().map(Into::into).collect();
        assert!(!texts.is_empty(), "scripted mock needs at least one reply");
        MockBackend::with_source(Source::Scripted(texts))
    }

    /// Sleeps a seeded pseudo-random time up to `max` before replying. The
    /// reported latency stays synthetic.
    pub fn with_random_delay(mut self, max: Duration, seed: u64) -> Self {
        self.max_delay = Some((max, seed));
        self
    }

    /// Never replies for these sample indices, so the caller's timeout fires.
    pub fn stalling_on(mut self, samples: impl IntoIterator<Item = usize>) -> Self {
        self.stall_samples = samples.into_iter().collect();
        self
    }

    /// Fails the first `n` calls with a transient error.
    pub fn failing_first(self, n: u32) -> Self {
        *self.transient_failures.lock().unwrap() = n;
        self
    }

    /// Total calls received, including failed ones.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of calls observed running at once.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    fn reply_text(&self, ctx: &PairContext, sample_index: usize) -> String {
        match &self.source {
            Source::Synthetic(cfg) => mock_complete(ctx, sample_index, cfg),
            Source::Scripted(texts) => texts[sample_index % texts.len()].clone(),
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Rough whitespace token count; stands in for the endpoint's usage data.
fn count_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn call(&self, request: CompletionRequest<'_>) -> Result<Completion, CallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlight(&self.in_flight);

        {
            let mut remaining = self.transient_failures.lock().unwrap();
            if *remaining > 0 {
                *remaining -= 1;
                return Err(CallError::Transient("injected transient failure".into()));
            }
        }
        if let Some((max, seed)) = self.max_delay {
            let mut rng = draw_rng(seed, request.context, request.sample_index);
            let frac: f64 = rng.random();
            tokio::time::sleep(max.mul_f64(frac)).await;
        }
        if self.stall_samples.contains(&request.sample_index) {
            std::future::pending::<()>().await;
        }
        let text = self.reply_text(request.context, request.sample_index);
        let tokens = count_tokens(&text);
        Ok(Completion {
            latency_s: Some(0.25 + 0.01 * tokens as f64),
            output_tokens: Some(tokens),
            text,
        })
    }
}
