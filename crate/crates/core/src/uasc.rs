//! Uncertainty-aware self-consistency.
//!
//! N sampled verdicts for one image pair are reduced to the mean score and
//! its standard deviation; the mean is then penalized by `λ·σ` and clamped
//! to `[0, 1]`. Pairs the model scores consistently keep their mean, pairs
//! it scores erratically are pushed down.
//!
//! All sums run over the scores in ascending order so the statistics are
//! bit-identical under any reordering of the samples.

use serde::{Deserialize, Serialize};

use crate::codec::{ParseFailure, ParseOutcome, ParseStatus};

/// Default penalty strength.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Default number of sampled verdicts per pair.
pub const DEFAULT_SAMPLES: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum UascError {
    #[error("score set is empty")]
    EmptyScoreSet,
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("no valid samples among {} outcomes", details.len())]
    NoValidSamples { details: Vec<SampleDetail> },
    #[error("expected {expected} outcomes, got {got}")]
    SampleCountMismatch { expected: usize, got: usize },
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
}

/// Denominator used for the variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N − 1.
    Sample,
}

impl std::str::FromStr for VarianceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "population" => Ok(VarianceMode::Population),
            "sample" => Ok(VarianceMode::Sample),
            other => Err(format!("unknown variance mode `{other}` (expected population|sample)")),
        }
    }
}

impl std::fmt::Display for VarianceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VarianceMode::Population => "population",
            VarianceMode::Sample => "sample",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub lambda: f64,
    pub variance_mode: VarianceMode,
    pub n_samples: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            lambda: DEFAULT_LAMBDA,
            variance_mode: VarianceMode::Population,
            n_samples: DEFAULT_SAMPLES,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), UascError> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(UascError::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.n_samples == 0 {
            return Err(UascError::InvalidConfig("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Valid scores of one sampling batch, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet(Vec<f64>);

impl ScoreSet {
    pub fn new(scores: Vec<f64>) -> Result<Self, UascError> {
        if let Some(&bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(UascError::ScoreOutOfRange(bad));
        }
        Ok(ScoreSet(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn sorted(&self) -> Vec<f64> {
        let mut v = self.0.clone();
        v.sort_unstable_by(f64::total_cmp);
        v
    }
}

/// Scores of the valid outcomes, in input order.
pub fn collect_valid_scores(outcomes: &[ParseOutcome]) -> ScoreSet {
    // The codec only admits scores in [0, 1].
    ScoreSet(outcomes.iter().filter_map(ParseOutcome::score).collect())
}

pub fn mean_score(scores: &ScoreSet) -> Result<f64, UascError> {
    if scores.is_empty() {
        return Err(UascError::EmptyScoreSet);
    }
    Ok(mean_of_sorted(&scores.sorted()))
}

fn mean_of_sorted(sorted: &[f64]) -> f64 {
    sorted.iter().fold(0.0, |acc, s| acc + s) / sorted.len() as f64
}

/// Standard deviation of the set. A single score has zero spread in both
/// modes.
pub fn std_score(scores: &ScoreSet, mode: VarianceMode) -> Result<f64, UascError> {
    if scores.is_empty() {
        return Err(UascError::EmptyScoreSet);
    }
    let sorted = scores.sorted();
    Ok(std_of_sorted(&sorted, mean_of_sorted(&sorted), mode))
}

fn std_of_sorted(sorted: &[f64], mean: f64, mode: VarianceMode) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return 0.0;
    }
    let ss = sorted.iter().fold(0.0, |acc, s| acc + (s - mean) * (s - mean));
    let denom = match mode {
        VarianceMode::Population => n,
        VarianceMode::Sample => n - 1,
    };
    (ss / denom as f64).sqrt()
}

/// Returns `(μ − λσ, clamp01(μ − λσ))`.
pub fn calibrate_and_clamp(mean: f64, std: f64, lambda: f64) -> (f64, f64) {
    let calibrated = mean - lambda * std;
    (calibrated, calibrated.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleStatus {
    Success,
    ParseFailed,
    TransportFailed,
}

/// Per-sample audit entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDetail {
    pub sample_index: usize,
    pub raw_output: String,
    pub status: SampleStatus,
    pub parsed_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl SampleDetail {
    pub fn from_outcome(sample_index: usize, outcome: &ParseOutcome) -> Self {
        let (status, parsed_score, reason) = match &outcome.status {
            ParseStatus::Valid(r) => (SampleStatus::Success, Some(r.similarity_score), None),
            ParseStatus::Invalid(f @ ParseFailure::Transport(_)) => {
                (SampleStatus::TransportFailed, None, Some(f.to_string()))
            }
            ParseStatus::Invalid(f) => (SampleStatus::ParseFailed, None, Some(f.to_string())),
        };
        SampleDetail {
            sample_index,
            raw_output: outcome.raw_text.clone(),
            status,
            parsed_score,
            reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyMetrics {
    pub mean_score: f64,
    pub std_dev: f64,
    pub lambda: f64,
    pub num_valid_samples: usize,
}

/// Calibration record for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UascResult {
    /// Final clamped score.
    pub similarity_score: f64,
    /// `μ − λσ` before clamping.
    pub calibrated_score: f64,
    pub uncertainty_metrics: UncertaintyMetrics,
    pub sc_details: Vec<SampleDetail>,
}

impl UascResult {
    pub fn mean(&self) -> f64 {
        self.uncertainty_metrics.mean_score
    }

    pub fn std(&self) -> f64 {
        self.uncertainty_metrics.std_dev
    }

    pub fn final_score(&self) -> f64 {
        self.similarity_score
    }
}

/// Calibrates one batch of parsed outcomes, indexed by position.
pub fn run_uasc(outcomes: &[ParseOutcome], cfg: &CalibrationConfig) -> Result<UascResult, UascError> {
    cfg.validate()?;
    if outcomes.len() != cfg.n_samples {
        return Err(UascError::SampleCountMismatch {
            expected: cfg.n_samples,
            got: outcomes.len(),
        });
    }
    let details: Vec<SampleDetail> = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| SampleDetail::from_outcome(i, o))
        .collect();
    let scores = collect_valid_scores(outcomes);
    if scores.is_empty() {
        return Err(UascError::NoValidSamples { details });
    }
    let sorted = scores.sorted();
    let mean = mean_of_sorted(&sorted);
    let std = std_of_sorted(&sorted, mean, cfg.variance_mode);
    let (calibrated, final_score) = calibrate_and_clamp(mean, std, cfg.lambda);
    Ok(UascResult {
        similarity_score: final_score,
        calibrated_score: calibrated,
        uncertainty_metrics: UncertaintyMetrics {
            mean_score: mean,
            std_dev: std,
            lambda: cfg.lambda,
            num_valid_samples: scores.len(),
        },
        sc_details: details,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::parse_scored_response;
    use crate::golden;
    use proptest::prelude::*;

    fn set(v: &[f64]) -> ScoreSet {
        ScoreSet::new(v.to_vec()).unwrap()
    }

    const GOLDEN: [f64; 5] = [0.9, 0.8, 0.9, 0.95, 0.85];

    #[test]
    fn golden_mean_and_std() {
        let s = set(&GOLDEN);
        assert_eq!(mean_score(&s).unwrap(), 0.8799999999999999);
        let pop = std_score(&s, VarianceMode::Population).unwrap();
        assert!((pop - 0.050990195135927834).abs() <= 1e-12);
        let samp = std_score(&s, VarianceMode::Sample).unwrap();
        assert!((samp - (0.013f64 / 4.0).sqrt()).abs() <= 1e-9);
        assert!((samp - 0.057008771).abs() <= 1e-9);
    }

    #[test]
    fn small_sets() {
        assert_eq!(mean_score(&set(&[0.5])).unwrap(), 0.5);
        assert_eq!(mean_score(&set(&[0.0, 1.0])).unwrap(), 0.5);
        for mode in [VarianceMode::Population, VarianceMode::Sample] {
            assert_eq!(std_score(&set(&[0.7]), mode).unwrap(), 0.0);
            assert_eq!(std_score(&set(&[0.3, 0.3, 0.3]), mode).unwrap(), 0.0);
            assert_eq!(std_score(&ScoreSet::default(), mode), Err(UascError::EmptyScoreSet));
        }
        assert_eq!(mean_score(&ScoreSet::default()), Err(UascError::EmptyScoreSet));
        assert_eq!(ScoreSet::new(vec![0.2, 1.5]), Err(UascError::ScoreOutOfRange(1.5)));
    }

    #[test]
    fn calibration_examples() {
        let (_, f) = calibrate_and_clamp(0.88, 0.050990195135927834, 0.5);
        assert!((f - 0.854504902432036).abs() <= 1e-12);
        assert_eq!(calibrate_and_clamp(0.6, 0.3, 0.0), (0.6, 0.6));
        assert_eq!(calibrate_and_clamp(1.2, 0.0, 0.0).1, 1.0);
        let (c, f) = calibrate_and_clamp(0.1, 0.4, 1.0);
        assert!((c + 0.3).abs() < 1e-15);
        assert_eq!(f, 0.0);
    }

    #[test]
    fn collects_in_order_skipping_invalid() {
        let outcomes = vec![
            parse_scored_response(r#"{"similarity_score": 0.3}"#),
            parse_scored_response("nope"),
            parse_scored_response(r#"{"similarity_score": 0.6}"#),
        ];
        assert_eq!(collect_valid_scores(&outcomes).as_slice(), &[0.3, 0.6]);
        let none = vec![parse_scored_response("x"), ParseOutcome::transport_failure("timeout")];
        assert!(collect_valid_scores(&none).is_empty());
    }

    #[test]
    fn golden_record_end_to_end() {
        let outcomes: Vec<_> = golden::raw_outputs().iter().map(|r| parse_scored_response(r)).collect();
        assert_eq!(collect_valid_scores(&outcomes).len(), 5);
        let r = run_uasc(&outcomes, &CalibrationConfig::default()).unwrap();
        let expected = golden::expected();
        assert!((r.mean() - expected.mean_score).abs() <= 1e-12);
        assert!((r.std() - expected.std_dev).abs() <= 1e-12);
        assert!((r.final_score() - expected.final_score).abs() <= 1e-12);
        assert_eq!(r.uncertainty_metrics.num_valid_samples, 5);
        assert_eq!(r.uncertainty_metrics.lambda, 0.5);
        assert_eq!(r.sc_details.len(), 5);
        assert!(r.sc_details.iter().all(|d| d.status == SampleStatus::Success));
        assert_eq!(r.sc_details[3].parsed_score, Some(0.95));
        assert_eq!(r.sc_details[0].raw_output, golden::raw_outputs()[0]);
    }

    #[test]
    fn single_sample() {
        let cfg = CalibrationConfig { n_samples: 1, ..Default::default() };
        let r = run_uasc(&[parse_scored_response(r#"{"similarity_score": 0.7}"#)], &cfg).unwrap();
        assert_eq!((r.mean(), r.std(), r.final_score()), (0.7, 0.0, 0.7));
    }

    #[test]
    fn all_malformed() {
        let outcomes: Vec<_> = (0..5).map(|_| parse_scored_response("no json here")).collect();
        match run_uasc(&outcomes, &CalibrationConfig::default()) {
            Err(UascError::NoValidSamples { details }) => {
                assert_eq!(details.len(), 5);
                assert!(details.iter().all(|d| d.status == SampleStatus::ParseFailed));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_and_count_checked() {
        let outcomes = vec![parse_scored_response(r#"{"similarity_score": 0.7}"#)];
        assert!(matches!(
            run_uasc(&outcomes, &CalibrationConfig::default()),
            Err(UascError::SampleCountMismatch { expected: 5, got: 1 })
        ));
        let bad = CalibrationConfig { lambda: -1.0, n_samples: 1, ..Default::default() };
        assert!(matches!(run_uasc(&outcomes, &bad), Err(UascError::InvalidConfig(_))));
    }

    #[test]
    fn transport_failures_are_marked() {
        let outcomes = vec![
            ParseOutcome::transport_failure("timed out"),
            parse_scored_response(r#"{"similarity_score": 0.4}"#),
        ];
        let cfg = CalibrationConfig { n_samples: 2, ..Default::default() };
        let r = run_uasc(&outcomes, &cfg).unwrap();
        assert_eq!(r.sc_details[0].status, SampleStatus::TransportFailed);
        assert_eq!(r.uncertainty_metrics.num_valid_samples, 1);
        assert_eq!(r.final_score(), 0.4);
    }

    #[test]
    fn serializes_to_record_shape() {
        let outcomes: Vec<_> = golden::raw_outputs().iter().map(|r| parse_scored_response(r)).collect();
        let r = run_uasc(&outcomes, &CalibrationConfig::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["similarity_score"], serde_json::json!(0.854504902432036));
        assert_eq!(v["uncertainty_metrics"]["mean_score"], serde_json::json!(0.8799999999999999));
        assert_eq!(v["uncertainty_metrics"]["std_dev"], serde_json::json!(0.050990195135927834));
        assert_eq!(v["uncertainty_metrics"]["lambda"], serde_json::json!(0.5));
        assert_eq!(v["uncertainty_metrics"]["num_valid_samples"], serde_json::json!(5));
        assert_eq!(v["sc_details"][1]["status"], serde_json::json!("Success"));
        assert_eq!(v["sc_details"][1]["parsed_score"], serde_json::json!(0.8));
        assert!(v["sc_details"][1].get("reason").is_none());
        let back: UascResult = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, 1..12)
    }

    proptest! {
        #[test]
        fn sigma_orders_final(mean in 0.0f64..=1.0, s1 in 0.0f64..1.0, ds in 0.0f64..1.0, lambda in 0.0f64..3.0) {
            let (_, f1) = calibrate_and_clamp(mean, s1, lambda);
            let (_, f2) = calibrate_and_clamp(mean, s1 + ds, lambda);
            prop_assert!(f1 >= f2);
        }

        #[test]
        fn sample_mode_never_smaller(v in scores()) {
            let s = ScoreSet::new(v).unwrap();
            let pop = std_score(&s, VarianceMode::Population).unwrap();
            let samp = std_score(&s, VarianceMode::Sample).unwrap();
            prop_assert!(samp >= pop);
        }

        #[test]
        fn reversal_is_exact(v in scores()) {
            let mut r = v.clone();
            r.reverse();
            let (a, b) = (ScoreSet::new(v).unwrap(), ScoreSet::new(r).unwrap());
            prop_assert_eq!(mean_score(&a).unwrap(), mean_score(&b).unwrap());
            prop_assert_eq!(
                std_score(&a, VarianceMode::Sample).unwrap(),
                std_score(&b, VarianceMode::Sample).unwrap()
            );
        }
    }
}
