//! Reference calibration record: five sampled verdicts for one true-match
//! pair together with the statistics they must reduce to.

use std::sync::LazyLock;

use serde::Deserialize;

const RECORD: &str = include_str!("../fixtures/uasc_record.json");

#[derive(Deserialize)]
struct Record {
    similarity_score: f64,
    uncertainty_metrics: Metrics,
    sc_details: Vec<Detail>,
}

#[derive(Deserialize)]
struct Metrics {
    mean_score: f64,
    std_dev: f64,
    lambda: f64,
    num_valid_samples: usize,
}

#[derive(Deserialize)]
struct Detail {
    raw_output: String,
    parsed_score: f64,
}

/// Values the reference record reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expected {
    pub mean_score: f64,
    pub std_dev: f64,
    pub lambda: f64,
    pub num_valid_samples: usize,
    pub final_score: f64,
}

static PARSED: LazyLock<Record> =
    LazyLock::new(|| serde_json::from_str(RECORD).expect("embedded reference record is valid JSON"));

/// The raw model outputs, in sample order.
pub fn raw_outputs() -> Vec<&'static str> {
    PARSED.sc_details.iter().map(|d| d.raw_output.as_str()).collect()
}

/// The per-sample scores the record reports.
pub fn parsed_scores() -> Vec<f64> {
    PARSED.sc_details.iter().map(|d| d.parsed_score).collect()
}

pub fn expected() -> Expected {
    let m = &PARSED.uncertainty_metrics;
    Expected {
        mean_score: m.mean_score,
        std_dev: m.std_dev,
        lambda: m.lambda,
        num_valid_samples: m.num_valid_samples,
        final_score: PARSED.similarity_score,
    }
}

/// The full reference record as JSON text.
pub fn record_json() -> &'static str {
    RECORD
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_loads() {
        assert_eq!(raw_outputs().len(), 5);
        assert_eq!(parsed_scores(), vec![0.9, 0.8, 0.9, 0.95, 0.85]);
        let e = expected();
        assert_eq!(e.mean_score, 0.8799999999999999);
        assert_eq!(e.std_dev, 0.050990195135927834);
        assert_eq!(e.final_score, 0.854504902432036);
        assert_eq!(e.lambda, 0.5);
        assert_eq!(e.num_valid_samples, 5);
        assert!(raw_outputs()[0].starts_with("```json\n"));
    }
}
