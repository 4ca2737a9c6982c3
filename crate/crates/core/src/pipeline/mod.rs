//! Coarse-to-fine orchestration.
//!
//! Each coarse candidate is paired with its query, sent through
//! prompt → gateway → codec (→ self-consistency calibration), and the
//! shortlist is re-sorted by the resulting score. Pairs that cannot be
//! scored fall to 0.0 and keep their coarse order among themselves.

mod cache;
mod output;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{parse_scored_response, ParseOutcome};
use crate::evaluation::{geo_distance, RankedList};
use crate::gateway::{Gateway, PairContext, RawResponse, TransportStatus, DEFAULT_SINGLE_PASS_TEMPERATURE};
use crate::prompting::{build_messages, ImageOptions, PromptError, PromptTemplate};
use crate::retrieval::{retrieve_all, CandidateList, DescriptorSet, Manifest, Metric, PlaceRecord, RetrievalError};
use crate::uasc::{run_uasc, CalibrationConfig, SampleDetail, UascError, UascResult, UncertaintyMetrics};

pub use cache::{PairCache, PairKey};
pub use output::{load_ranked_lists, parse_ranked_lists, RankedIds, RankingEntry, RankingLine, QueryTelemetry};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("calibration failed: {0}")]
    Uasc(UascError),
    #[error("id `{0}` not found in manifest")]
    UnknownId(String),
    #[error("query `{0}` has an empty candidate list")]
    EmptyCandidateList(String),
    #[error("no pairs to aggregate")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoringMode {
    /// One request, score used as-is.
    SinglePass,
    /// N sampled requests calibrated by mean − λ·std.
    Uasc(CalibrationConfig),
}

impl ScoringMode {
    pub fn requests_per_pair(&self) -> usize {
        match self {
            ScoringMode::SinglePass => 1,
            ScoringMode::Uasc(c) => c.n_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankConfig {
    pub mode: ScoringMode,
    pub single_pass_temperature: f64,
    pub image: ImageOptions,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            mode: ScoringMode::Uasc(CalibrationConfig::default()),
            single_pass_temperature: DEFAULT_SINGLE_PASS_TEMPERATURE,
            image: ImageOptions::default(),
        }
    }
}

/// How a pair's final score was reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Single { sample: SampleDetail },
    Uasc { result: UascResult },
    /// Self-consistency run in which no sample produced a valid score.
    Unscored { sc_details: Vec<SampleDetail> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub query_id: String,
    pub candidate_id: String,
    pub coarse_rank: usize,
    pub final_score: f64,
    pub fallback_used: bool,
    /// Summed over every request issued for the pair.
    pub latency_s: f64,
    pub output_tokens: u64,
    pub requests: usize,
    pub verdict: Verdict,
}

impl PairScore {
    pub fn uasc(&self) -> Option<&UascResult> {
        match &self.verdict {
            Verdict::Uasc { result } => Some(result),
            _ => None,
        }
    }

    pub fn uncertainty_metrics(&self) -> Option<&UncertaintyMetrics> {
        self.uasc().map(|r| &r.uncertainty_metrics)
    }
}

/// Re-ranked shortlist for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_id: String,
    pub pairs: Vec<PairScore>,
}

impl Ranking {
    /// Sorts by final score descending, coarse rank ascending.
    pub fn from_pairs(query_id: impl Into<String>, mut pairs: Vec<PairScore>) -> Self {
        pairs.sort_by(|a, b| {
            b.final_score
                .total_cmp(&a.final_score)
                .then(a.coarse_rank.cmp(&b.coarse_rank))
        });
        Ranking {
            query_id: query_id.into(),
            pairs,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.candidate_id.as_str())
    }
}

impl RankedList for Ranking {
    fn query_id(&self) -> &str {
        &self.query_id
    }

    fn ranked_ids(&self) -> Vec<&str> {
        self.ids().collect()
    }
}

/// Efficiency summary; a "sample" is one query/candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub avg_time_s_per_sample: f64,
    pub avg_output_tokens_per_sample: f64,
    pub total_pairs: usize,
    pub total_requests: usize,
}

pub fn aggregate_telemetry<'a>(
    pairs: impl IntoIterator<Item = &'a PairScore>,
) -> Result<Telemetry, PipelineError> {
    let (mut n, mut time, mut tokens, mut requests) = (0usize, 0.0f64, 0u64, 0usize);
    for p in pairs {
        n += 1;
        time += p.latency_s;
        tokens += p.output_tokens;
        requests += p.requests;
    }
    if n == 0 {
        return Err(PipelineError::EmptyInput);
    }
    Ok(Telemetry {
        avg_time_s_per_sample: time / n as f64,
        avg_output_tokens_per_sample: tokens as f64 / n as f64,
        total_pairs: n,
        total_requests: requests,
    })
}

/// Result of a dataset run.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRun {
    pub rankings: Vec<Ranking>,
    pub telemetry: Telemetry,
    /// Pairs answered from the cache rather than the model.
    pub cached_pairs: usize,
}

pub struct Reranker {
    gateway: Gateway,
    template: PromptTemplate,
    cfg: RerankConfig,
    cache: Option<PairCache>,
}

fn to_outcome(r: &RawResponse) -> ParseOutcome {
    match &r.transport_status {
        TransportStatus::Ok => parse_scored_response(&r.text),
        TransportStatus::Failed(reason) => ParseOutcome::transport_failure(reason.clone()),
    }
}

impl Reranker {
    pub fn new(gateway: Gateway, template: PromptTemplate, cfg: RerankConfig) -> Result<Self, PipelineError> {
        template.validate()?;
        if let ScoringMode::Uasc(c) = &cfg.mode {
            c.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if !cfg.single_pass_temperature.is_finite() || cfg.single_pass_temperature < 0.0 {
            return Err(PipelineError::Config("single-pass temperature must be finite and >= 0".into()));
        }
        Ok(Reranker {
            gateway,
            template,
            cfg,
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: PairCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache(&self) -> Option<&PairCache> {
        self.cache.as_ref()
    }

    pub fn config(&self) -> &RerankConfig {
        &self.cfg
    }

    fn mode_tag(&self) -> String {
        let image = match self.cfg.image.max_side {
            Some(s) => format!("max{s}"),
            None => "orig".into(),
        };
        match &self.cfg.mode {
            ScoringMode::SinglePass => format!("single:t={}:img={image}", self.cfg.single_pass_temperature),
            ScoringMode::Uasc(c) => format!(
                "uasc:n={}:lambda={}:var={}:t={}:img={image}",
                c.n_samples,
                c.lambda,
                c.variance_mode,
                self.gateway.config().temperature
            ),
        }
    }

    fn key(&self, query_id: &str, candidate_id: &str) -> PairKey {
        let m = self.gateway.config();
        PairKey {
            query_id: query_id.to_owned(),
            candidate_id: candidate_id.to_owned(),
            mode: self.mode_tag(),
            model: format!("{}@{}", m.model_name, m.endpoint_url),
            prompt_hash: self.template.fingerprint(),
        }
    }

    /// Scores one pair. Transport and parse failures never surface as
    /// errors; they set `fallback_used` with a final score of 0.0.
    pub async fn score_pair(
        &self,
        query: &PlaceRecord,
        candidate: &PlaceRecord,
        coarse_rank: usize,
    ) -> Result<PairScore, PipelineError> {
        self.score_pair_cached(query, candidate, coarse_rank).await.map(|(s, _)| s)
    }

    async fn score_pair_cached(
        &self,
        query: &PlaceRecord,
        candidate: &PlaceRecord,
        coarse_rank: usize,
    ) -> Result<(PairScore, bool), PipelineError> {
        let key = self.key(&query.id, &candidate.id);
        if let Some(cache) = &self.cache {
            if let Some(mut hit) = cache.load(&key) {
                hit.coarse_rank = coarse_rank;
                return Ok((hit, true));
            }
        }
        let messages = build_messages(query, candidate, &self.template, self.cfg.image)?;
        let context = PairContext {
            query_id: query.id.clone(),
            candidate_id: candidate.id.clone(),
            distance_m: geo_distance(query, candidate).ok(),
        };
        let responses = match &self.cfg.mode {
            ScoringMode::SinglePass => {
                let temp = self.cfg.single_pass_temperature;
                self.gateway.sample_n(&messages, &context, temp, 1).await
            }
            ScoringMode::Uasc(c) => {
                let temp = self.gateway.config().temperature;
                self.gateway.sample_n(&messages, &context, temp, c.n_samples).await
            }
        };
        let latency_s = responses.iter().map(|r| r.latency_s).sum();
        let output_tokens = responses.iter().map(|r| r.output_tokens).sum();
        let outcomes: Vec<ParseOutcome> = responses.iter().map(to_outcome).collect();

        let (final_score, fallback_used, verdict) = match &self.cfg.mode {
            ScoringMode::SinglePass => {
                let outcome = &outcomes[0];
                let sample = SampleDetail::from_outcome(0, outcome);
                match outcome.score() {
                    Some(s) => (s, false, Verdict::Single { sample }),
                    None => (0.0, true, Verdict::Single { sample }),
                }
            }
            ScoringMode::Uasc(c) => match run_uasc(&outcomes, c) {
                Ok(result) => (result.similarity_score, false, Verdict::Uasc { result }),
                Err(UascError::NoValidSamples { details }) => {
                    (0.0, true, Verdict::Unscored { sc_details: details })
                }
                Err(e) => return Err(PipelineError::Uasc(e)),
            },
        };
        let score = PairScore {
            query_id: query.id.clone(),
            candidate_id: candidate.id.clone(),
            coarse_rank,
            final_score,
            fallback_used,
            latency_s,
            output_tokens,
            requests: responses.len(),
            verdict,
        };
        if let Some(cache) = &self.cache {
            cache.store(&key, &score)?;
        }
        Ok((score, false))
    }

    /// Re-ranks one coarse shortlist. Pairs are scored concurrently; the
    /// output order depends only on the scores and coarse ranks.
    pub async fn rerank_query(
        &self,
        query: &PlaceRecord,
        coarse: &CandidateList,
        manifest: &Manifest,
    ) -> Result<Ranking, PipelineError> {
        Ok(self.rerank_query_counted(query, coarse, manifest).await?.0)
    }

    async fn rerank_query_counted(
        &self,
        query: &PlaceRecord,
        coarse: &CandidateList,
        manifest: &Manifest,
    ) -> Result<(Ranking, usize), PipelineError> {
        if coarse.is_empty() {
            return Err(PipelineError::EmptyCandidateList(coarse.query_id.clone()));
        }
        let candidates = coarse
            .items
            .iter()
            .map(|c| {
                manifest
                    .get(&c.candidate_id)
                    .map(|rec| (rec, c.coarse_rank))
                    .ok_or_else(|| PipelineError::UnknownId(c.candidate_id.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let scored = futures::future::join_all(
            candidates
                .into_iter()
                .map(|(rec, rank)| self.score_pair_cached(query, rec, rank)),
        )
        .await;
        let mut pairs = Vec::with_capacity(scored.len());
        let mut hits = 0;
        for r in scored {
            let (pair, hit) = r?;
            hits += usize::from(hit);
            pairs.push(pair);
        }
        Ok((Ranking::from_pairs(&query.id, pairs), hits))
    }

    /// Re-ranks every shortlist in order, writing one ranking line per
    /// query to `out` as soon as the query is done. With a cache attached,
    /// pairs scored by an earlier (possibly interrupted) run are reused.
    pub async fn rerank_dataset<W: Write>(
        &self,
        lists: &[CandidateList],
        manifest: &Manifest,
        out: &mut W,
    ) -> Result<DatasetRun, PipelineError> {
        if lists.is_empty() {
            return Err(PipelineError::EmptyInput);
        }
        let mut rankings = Vec::with_capacity(lists.len());
        let mut cached_pairs = 0;
        for list in lists {
            let query = manifest
                .get(&list.query_id)
                .ok_or_else(|| PipelineError::UnknownId(list.query_id.clone()))?;
            let (ranking, hits) = self.rerank_query_counted(query, list, manifest).await?;
            cached_pairs += hits;
            let line = RankingLine::from_ranking(&ranking);
            serde_json::to_writer(&mut *out, &line).map_err(io::Error::other)?;
            out.write_all(b"\n")?;
            out.flush()?;
            rankings.push(ranking);
        }
        let telemetry = aggregate_telemetry(rankings.iter().flat_map(|r| &r.pairs))?;
        Ok(DatasetRun {
            rankings,
            telemetry,
            cached_pairs,
        })
    }

    /// Coarse retrieval for every query descriptor followed by
    /// [`Reranker::rerank_dataset`].
    pub async fn coarse_to_fine<W: Write>(
        &self,
        queries: &DescriptorSet,
        db: &DescriptorSet,
        top_n: usize,
        metric: Metric,
        manifest: &Manifest,
        out: &mut W,
    ) -> Result<(Vec<CandidateList>, DatasetRun), PipelineError> {
        if top_n == 0 {
            return Err(PipelineError::Config("top_n must be >= 1".into()));
        }
        let lists = retrieve_all(queries, db, top_n, metric)?;
        let run = self.rerank_dataset(&lists, manifest, out).await?;
        Ok((lists, run))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uasc::{SampleStatus, UncertaintyMetrics};

    fn pair(id: &str, rank: usize, score: f64, latency: f64, tokens: u64) -> PairScore {
        PairScore {
            query_id: "q".into(),
            candidate_id: id.into(),
            coarse_rank: rank,
            final_score: score,
            fallback_used: false,
            latency_s: latency,
            output_tokens: tokens,
            requests: 1,
            verdict: Verdict::Single {
                sample: SampleDetail {
                    sample_index: 0,
                    raw_output: String::new(),
                    status: SampleStatus::Success,
                    parsed_score: Some(score),
                    reason: None,
                },
            },
        }
    }

    #[test]
    fn sort_by_score_then_coarse_rank() {
        let r = Ranking::from_pairs(
            "q",
            vec![pair("c1", 1, 0.2, 0.0, 0), pair("c2", 2, 0.9, 0.0, 0), pair("c3", 3, 0.5, 0.0, 0)],
        );
        assert_eq!(r.ids().collect::<Vec<_>>(), vec!["c2", "c3", "c1"]);
        let tied = Ranking::from_pairs(
            "q",
            vec![pair("c", 3, 0.4, 0.0, 0), pair("a", 1, 0.4, 0.0, 0), pair("b", 2, 0.4, 0.0, 0)],
        );
        assert_eq!(tied.ids().collect::<Vec<_>>(), vec!["a", "b", "c"]);
    }

    #[test]
    fn telemetry_means() {
        let t = aggregate_telemetry(&[pair("a", 1, 0.0, 1.0, 100), pair("b", 2, 0.0, 3.0, 140)]).unwrap();
        assert_eq!(t.avg_time_s_per_sample, 2.0);
        assert_eq!(t.avg_output_tokens_per_sample, 120.0);
        assert_eq!(t.total_pairs, 2);
        assert_eq!(t.total_requests, 2);
        let one = aggregate_telemetry(&[pair("a", 1, 0.0, 3.67, 112)]).unwrap();
        assert_eq!((one.avg_time_s_per_sample, one.avg_output_tokens_per_sample), (3.67, 112.0));
        assert!(matches!(aggregate_telemetry(&[]), Err(PipelineError::EmptyInput)));
    }

    #[test]
    fn pair_score_round_trips_through_json() {
        let mut p = pair("a", 1, 0.5, 1.5, 10);
        p.verdict = Verdict::Uasc {
            result: UascResult {
                similarity_score: 0.5,
                calibrated_score: 0.5,
                uncertainty_metrics: UncertaintyMetrics {
                    mean_score: 0.5,
                    std_dev: 0.0,
                    lambda: 0.5,
                    num_valid_samples: 1,
                },
                sc_details: vec![],
            },
        };
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PairScore>(&text).unwrap(), p);
        assert_eq!(p.uncertainty_metrics().unwrap().num_valid_samples, 1);
    }
}
