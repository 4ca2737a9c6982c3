//! Training-free visual place recognition re-ranking.
//!
//! The crate runs a two-stage retrieval:
//!
//! 1. **Coarse** ([`retrieval`]): exhaustive top-N search over global image
//!    descriptors (GeM-pooled, L2-normalized).
//! 2. **Fine** ([`pipeline`]): every query/candidate pair of the shortlist
//!    is sent to a multimodal chat model with a structured scoring prompt
//!    ([`prompting`], [`gateway`]); the JSON verdict is extracted
//!    ([`codec`]) and optionally calibrated over several sampled replies by
//!    penalizing their spread ([`uasc`]).
//!
//! [`evaluation`] computes geolocation Recall@K for either stage.

pub mod codec;
pub mod evaluation;
pub mod gateway;
pub mod golden;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod uasc;

pub use codec::{parse_scored_response, ParseOutcome, ScoredResponse};
pub use evaluation::{recall_at_k, EvalConfig, RecallReport};
pub use gateway::{Gateway, MockBackend, MockConfig, ModelConfig};
pub use pipeline::{PairScore, Ranking, RerankConfig, Reranker, ScoringMode, Telemetry};
pub use prompting::PromptTemplate;
pub use retrieval::{CandidateList, DescriptorSet, Manifest, PlaceRecord};
pub use uasc::{CalibrationConfig, UascResult, VarianceMode};
