use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, ValueEnum};
use serde::Deserialize;

use vpr_rerank::evaluation::{EvalConfig, DEFAULT_K_VALUES, DEFAULT_RADIUS_M};
use vpr_rerank::gateway::{DEFAULT_SAMPLING_TEMPERATURE, DEFAULT_SINGLE_PASS_TEMPERATURE};
use vpr_rerank::retrieval::{Metric, DEFAULT_TOP_N};
use vpr_rerank::uasc::{DEFAULT_LAMBDA, DEFAULT_SAMPLES};
use vpr_rerank::{CalibrationConfig, MockConfig, ModelConfig, VarianceMode};

/// Bad flags, a bad config file or an invalid combination of settings.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T, UsageError> {
    Err(UsageError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Cosine,
    L2,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::L2 => Metric::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Single,
    Uasc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceArg {
    Population,
    Sample,
}

impl From<VarianceArg> for VarianceMode {
    fn from(v: VarianceArg) -> Self {
        match v {
            VarianceArg::Population => VarianceMode::Population,
            VarianceArg::Sample => VarianceMode::Sample,
        }
    }
}

/// Every tunable setting. Each one can come from a flag or from the config
/// file under the same kebab-case name; unset fields fall back to defaults.
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
#[command(next_help_heading = "Settings (flag > config file > default)")]
pub struct Settings {
    /// Shortlist size per query [default: 20]
    #[arg(long, global = true)]
    pub top_n: Option<usize>,
    /// Coarse similarity [default: cosine]
    #[arg(long, global = true, value_enum)]
    pub metric: Option<MetricArg>,
    /// Prompt override: system text, a `---USER---` line, then user text
    #[arg(long, global = true)]
    pub prompt_file: Option<PathBuf>,
    /// Chat-completions base URL, e.g. http://localhost:8000/v1
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Sampling temperature for uasc batches [default: 0.7]
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Temperature for single-pass scoring [default: 0]
    #[arg(long, global = true)]
    pub single_pass_temperature: Option<f64>,
    /// Scoring mode [default: uasc]
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Samples per pair in uasc mode [default: 5]
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Uncertainty penalty [default: 0.5]
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Standard deviation estimator [default: population]
    #[arg(long, global = true, value_enum)]
    pub variance_mode: Option<VarianceArg>,
    /// Match radius in meters [default: 25]
    #[arg(long, global = true)]
    pub radius_m: Option<f64>,
    /// Recall cutoffs, comma separated [default: 1,5,10]
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Max requests in flight [default: 8]
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Per-request timeout in seconds [default: 120]
    #[arg(long, global = true)]
    pub request_timeout_s: Option<f64>,
    /// Retries after a transient failure [default: 3]
    #[arg(long, global = true)]
    pub max_retries: Option<u32>,
    /// Directory of per-pair results reused across runs
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Downscale images so the longer side is at most this many pixels
    #[arg(long, global = true)]
    pub max_side: Option<u32>,
    /// Score with the offline mock instead of an endpoint
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub mock: Option<bool>,
    /// Mock RNG seed [default: 0]
    #[arg(long, global = true)]
    pub mock_seed: Option<u64>,
    /// Mock score noise [default: 0.1]
    #[arg(long, global = true)]
    pub mock_noise: Option<f64>,
    /// Fraction of mock replies that are unparseable [default: 0]
    #[arg(long, global = true)]
    pub mock_malform_rate: Option<f64>,
    /// Fraction of mock replies wrapped in a code fence [default: 0]
    #[arg(long, global = true)]
    pub mock_fence_rate: Option<f64>,
    /// Distance at which the mock score reaches 0 [default: 100]
    #[arg(long, global = true)]
    pub mock_reference_distance_m: Option<f64>,
    /// Larger mock noise for mid-range scores [default: false]
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub mock_heteroscedastic: Option<bool>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        Settings { $($f: $hi.$f.clone().or_else(|| $lo.$f.clone()),)* }
    };
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self, UsageError> {
        toml::from_str(text).map_err(|e| UsageError(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("config file {}: {e}", path.display())))?;
        Settings::from_toml(&text)
    }

    /// `self` wins wherever it is set.
    pub fn over(&self, lower: &Settings) -> Settings {
        overlay!(self, lower;
            top_n, metric, prompt_file, endpoint, model, temperature, single_pass_temperature,
            mode, samples, lambda, variance_mode, radius_m, k, concurrency, request_timeout_s,
            max_retries, cache_dir, max_side, mock, mock_seed, mock_noise, mock_malform_rate,
            mock_fence_rate, mock_reference_distance_m, mock_heteroscedastic,
        )
    }

    fn mock_fields_set(&self) -> bool {
        self.mock_seed.is_some()
            || self.mock_noise.is_some()
            || self.mock_malform_rate.is_some()
            || self.mock_fence_rate.is_some()
            || self.mock_reference_distance_m.is_some()
            || self.mock_heteroscedastic.is_some()
    }
}

/// Where scores come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Endpoint { url: String, model: String },
    Mock(MockConfig),
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub top_n: usize,
    pub metric: Metric,
    pub prompt_file: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: f64,
    pub single_pass_temperature: f64,
    pub mode: ModeArg,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
    pub concurrency: usize,
    pub request_timeout: Duration,
    pub max_retries: u32,
    pub cache_dir: Option<PathBuf>,
    pub max_side: Option<u32>,
    pub mock: bool,
    pub mock_config: MockConfig,
}

impl RunConfig {
    /// Merges flags over the config file over defaults and validates the
    /// result.
    pub fn resolve(flags: &Settings, file: &Settings) -> Result<Self, UsageError> {
        let s = flags.over(file);
        let mock_defaults = MockConfig::default();
        let model_defaults = ModelConfig::default();
        let timeout_s = s.request_timeout_s.unwrap_or(model_defaults.request_timeout.as_secs_f64());
        if !(timeout_s.is_finite() && timeout_s > 0.0) {
            return usage(format!("request-timeout-s must be positive, got {timeout_s}"));
        }
        let cfg = RunConfig {
            top_n: s.top_n.unwrap_or(DEFAULT_TOP_N),
            metric: s.metric.map(Metric::from).unwrap_or_default(),
            prompt_file: s.prompt_file,
            endpoint: s.endpoint,
            model: s.model,
            temperature: s.temperature.unwrap_or(DEFAULT_SAMPLING_TEMPERATURE),
            single_pass_temperature: s.single_pass_temperature.unwrap_or(DEFAULT_SINGLE_PASS_TEMPERATURE),
            mode: s.mode.unwrap_or(ModeArg::Uasc),
            calibration: CalibrationConfig {
                lambda: s.lambda.unwrap_or(DEFAULT_LAMBDA),
                variance_mode: s.variance_mode.map(VarianceMode::from).unwrap_or_default(),
                n_samples: s.samples.unwrap_or(DEFAULT_SAMPLES),
            },
            eval: EvalConfig {
                radius_m: s.radius_m.unwrap_or(DEFAULT_RADIUS_M),
                k_values: s.k.unwrap_or_else(|| DEFAULT_K_VALUES.to_vec()),
            },
            concurrency: s.concurrency.unwrap_or(model_defaults.max_concurrency),
            request_timeout: Duration::from_secs_f64(timeout_s),
            max_retries: s.max_retries.unwrap_or(model_defaults.max_retries),
            cache_dir: s.cache_dir,
            max_side: s.max_side,
            mock: s.mock.unwrap_or(false),
            mock_config: MockConfig {
                seed: s.mock_seed.unwrap_or(mock_defaults.seed),
                noise_scale: s.mock_noise.unwrap_or(mock_defaults.noise_scale),
                malform_rate: s.mock_malform_rate.unwrap_or(mock_defaults.malform_rate),
                fence_rate: s.mock_fence_rate.unwrap_or(mock_defaults.fence_rate),
                reference_distance_m: s
                    .mock_reference_distance_m
                    .unwrap_or(mock_defaults.reference_distance_m),
                heteroscedastic: s.mock_heteroscedastic.unwrap_or(mock_defaults.heteroscedastic),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), UsageError> {
        if self.top_n == 0 {
            return usage("top-n must be >= 1");
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("single-pass-temperature", self.single_pass_temperature),
        ] {
            if !t.is_finite() || t < 0.0 {
                return usage(format!("{name} must be finite and >= 0, got {t}"));
            }
        }
        self.calibration.validate().map_err(|e| UsageError(e.to_string()))?;
        self.eval.validate().map_err(|e| UsageError(e.to_string()))?;
        if self.concurrency == 0 {
            return usage("concurrency must be >= 1");
        }
        if self.max_side == Some(0) {
            return usage("max-side must be >= 1");
        }
        self.mock_config.validate().map_err(UsageError)?;
        if matches!(&self.model, Some(m) if m.is_empty()) {
            return usage("model must not be empty");
        }
        Ok(())
    }

    /// The scoring backend for `rerank`. Exactly one of `--endpoint` and
    /// `--mock` must be in effect, and mock flags need `--mock`.
    pub fn backend(&self, flags: &Settings) -> Result<Backend, UsageError> {
        match (&self.endpoint, self.mock) {
            (Some(_), true) => usage("--endpoint and --mock are mutually exclusive"),
            (None, false) => usage("rerank needs either --endpoint URL or --mock"),
            (None, true) => Ok(Backend::Mock(self.mock_config)),
            (Some(url), false) => {
                if flags.mock_fields_set() {
                    return usage("--mock-* flags only apply together with --mock");
                }
                let model = self
                    .model
                    .clone()
                    .ok_or_else(|| UsageError("--endpoint requires --model".into()))?;
                Ok(Backend::Endpoint { url: url.clone(), model })
            }
        }
    }
}
