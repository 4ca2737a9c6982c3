use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{PipelineError, Ranking};
use crate::evaluation::RankedList;
use crate::retrieval::CandidateList;
use crate::uasc::UncertaintyMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub candidate_id: String,
    pub score: f64,
    pub coarse_rank: usize,
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty_metrics: Option<UncertaintyMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTelemetry {
    pub time_s: f64,
    pub output_tokens: u64,
}

/// One line of a ranking file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingLine {
    pub query_id: String,
    pub ranking: Vec<RankingEntry>,
    pub telemetry: QueryTelemetry,
}

impl RankingLine {
    pub fn from_ranking(r: &Ranking) -> Self {
        RankingLine {
            query_id: r.query_id.clone(),
            ranking: r
                .pairs
                .iter()
                .map(|p| RankingEntry {
                    candidate_id: p.candidate_id.clone(),
                    score: p.final_score,
                    coarse_rank: p.coarse_rank,
                    fallback_used: p.fallback_used,
                    uncertainty_metrics: p.uncertainty_metrics().cloned(),
                })
                .collect(),
            telemetry: QueryTelemetry {
                time_s: r.pairs.iter().map(|p| p.latency_s).sum(),
                output_tokens: r.pairs.iter().map(|p| p.output_tokens).sum(),
            },
        }
    }
}

/// Query id plus ordered candidate ids, read back from either a ranking
/// file or a coarse candidate file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedIds {
    pub query_id: String,
    pub ids: Vec<String>,
}

impl RankedList for RankedIds {
    fn query_id(&self) -> &str {
        &self.query_id
    }

    fn ranked_ids(&self) -> Vec<&str> {
        self.ids.iter().map(String::as_str).collect()
    }
}

pub fn parse_ranked_lists(text: &str) -> Result<Vec<RankedIds>, PipelineError> {
    let bad = |line: usize, msg: String| PipelineError::Config(format!("ranking line {line}: {msg}"));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
        let ranked = if v.get("ranking").is_some() {
            let l: RankingLine = serde_json::from_value(v).map_err(|e| bad(i + 1, e.to_string()))?;
            RankedIds {
                query_id: l.query_id,
                ids: l.ranking.into_iter().map(|e| e.candidate_id).collect(),
            }
        } else if v.get("candidates").is_some() {
            let l: CandidateList = serde_json::from_value(v).map_err(|e| bad(i + 1, e.to_string()))?;
            RankedIds {
                ids: l.ids().map(str::to_owned).collect(),
                query_id: l.query_id,
            }
        } else {
            return Err(bad(i + 1, "expected a `ranking` or `candidates` field".into()));
        };
        out.push(ranked);
    }
    Ok(out)
}

/// Reads a ranking file or a coarse candidate file.
pub fn load_ranked_lists(path: impl AsRef<Path>) -> Result<Vec<RankedIds>, PipelineError> {
    parse_ranked_lists(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_both_shapes() {
        let text = concat!(
            r#"{"query_id":"q1","ranking":[{"candidate_id":"b","score":0.9,"coarse_rank":2,"fallback_used":false},"#,
            r#"{"candidate_id":"a","score":0.0,"coarse_rank":1,"fallback_used":true}],"telemetry":{"time_s":1.0,"output_tokens":3}}"#,
            "\n",
            r#"{"query_id":"q2","candidates":[{"candidate_id":"x","coarse_score":0.5,"coarse_rank":1}]}"#,
            "\n"
        );
        let lists = parse_ranked_lists(text).unwrap();
        assert_eq!(lists[0].ids, vec!["b", "a"]);
        assert_eq!(lists[1].query_id, "q2");
        assert_eq!(lists[1].ranked_ids(), vec!["x"]);
        assert!(parse_ranked_lists("{\"query_id\":\"q\"}").is_err());
        assert!(parse_ranked_lists("garbage").is_err());
    }
}
