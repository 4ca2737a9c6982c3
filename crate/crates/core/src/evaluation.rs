//! Geolocation-based Recall@K.
//!
//! A query counts as retrieved at K when any of its first K candidates lies
//! within `radius_m` of the query's own geotag.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::retrieval::{CandidateList, Frame, Manifest, PlaceRecord};

pub const DEFAULT_RADIUS_M: f64 = 25.0;
pub const DEFAULT_K_VALUES: [usize; 3] = [1, 5, 10];
/// Spherical Earth radius used by the haversine distance.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("frame mismatch: `{a}` is {fa}, `{b}` is {fb}")]
    FrameMismatch { a: String, fa: Frame, b: String, fb: Frame },
    #[error("id `{0}` not found in manifest")]
    UnknownId(String),
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error("reports are not comparable: {0}")]
    MismatchedConfigs(String),
    #[error("no rankings to evaluate")]
    EmptyInput,
}

/// Distance in meters: planar for UTM, haversine for WGS84.
pub fn geo_distance(a: &PlaceRecord, b: &PlaceRecord) -> Result<f64, EvalError> {
    if a.frame != b.frame {
        return Err(EvalError::FrameMismatch {
            a: a.id.clone(),
            fa: a.frame,
            b: b.id.clone(),
            fb: b.frame,
        });
    }
    Ok(match a.frame {
        Frame::Utm => (a.x - b.x).hypot(a.y - b.y),
        Frame::Wgs84 => haversine_m(a.x, a.y, b.x, b.y),
    })
}

fn haversine_m(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub radius_m: f64,
    pub k_values: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            radius_m: DEFAULT_RADIUS_M,
            k_values: DEFAULT_K_VALUES.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn new(radius_m: f64, k_values: Vec<usize>) -> Result<Self, EvalError> {
        let cfg = EvalConfig { radius_m, k_values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if !self.radius_m.is_finite() || self.radius_m <= 0.0 {
            return Err(EvalError::InvalidConfig(format!(
                "radius must be positive, got {}",
                self.radius_m
            )));
        }
        if self.k_values.is_empty() || self.k_values[0] == 0 {
            return Err(EvalError::InvalidConfig("k values must be positive and nonempty".into()));
        }
        if self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EvalError::InvalidConfig("k values must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Anything that ranks candidate ids for one query.
pub trait RankedList {
    fn query_id(&self) -> &str;
    fn ranked_ids(&self) -> Vec<&str>;
}

impl RankedList for CandidateList {
    fn query_id(&self) -> &str {
        &self.query_id
    }

    fn ranked_ids(&self) -> Vec<&str> {
        self.ids().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub radius_m: f64,
}

impl RecallReport {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "queries: {}  radius: {} m", self.num_queries, self.radius_m);
        let _ = writeln!(out, "{:>6}  {:>8}", "K", "R@K (%)");
        for (k, r) in &self.recall {
            let _ = writeln!(out, "{:>6}  {:>8.2}", k, r * 100.0);
        }
        out
    }
}

/// 1-based rank of the first candidate within the radius, if any. Every
/// candidate is resolved, hit or not.
fn first_hit(
    ranking: &impl RankedList,
    manifest: &Manifest,
    radius_m: f64,
) -> Result<Option<usize>, EvalError> {
    let query = manifest
        .get(ranking.query_id())
        .ok_or_else(|| EvalError::UnknownId(ranking.query_id().to_owned()))?;
    let mut hit = None;
    for (i, id) in ranking.ranked_ids().into_iter().enumerate() {
        let cand = manifest.get(id).ok_or_else(|| EvalError::UnknownId(id.to_owned()))?;
        if geo_distance(query, cand)? <= radius_m && hit.is_none() {
            hit = Some(i + 1);
        }
    }
    Ok(hit)
}

pub fn recall_at_k<R: RankedList>(
    rankings: &[R],
    manifest: &Manifest,
    cfg: &EvalConfig,
) -> Result<RecallReport, EvalError> {
    cfg.validate()?;
    if rankings.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = rankings
        .iter()
        .map(|r| first_hit(r, manifest, cfg.radius_m))
        .collect::<Result<Vec<_>, _>>()?;
    let n = rankings.len();
    let recall = cfg
        .k_values
        .iter()
        .map(|&k| {
            let found = hits.iter().filter(|h| matches!(h, Some(rank) if *rank <= k)).count();
            (k, found as f64 / n as f64)
        })
        .collect();
    Ok(RecallReport {
        recall,
        num_queries: n,
        radius_m: cfg.radius_m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub k: usize,
    pub coarse: f64,
    pub reranked: f64,
    pub delta: f64,
}

/// Coarse vs. re-ranked recall, side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub num_queries: usize,
    pub radius_m: f64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "queries: {}  radius: {} m", self.num_queries, self.radius_m);
        let _ = writeln!(out, "{:>6}  {:>10}  {:>10}  {:>8}", "K", "coarse %", "rerank %", "delta");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6}  {:>10.2}  {:>10.2}  {:>+8.2}",
                r.k,
                r.coarse * 100.0,
                r.reranked * 100.0,
                r.delta * 100.0
            );
        }
        out
    }
}

pub fn build_report(coarse: &RecallReport, reranked: &RecallReport) -> Result<Comparison, EvalError> {
    if coarse.num_queries != reranked.num_queries {
        return Err(EvalError::MismatchedConfigs(format!(
            "query counts differ: {} vs {}",
            coarse.num_queries, reranked.num_queries
        )));
    }
    if !coarse.recall.keys().eq(reranked.recall.keys()) {
        return Err(EvalError::MismatchedConfigs("k values differ".into()));
    }
    if coarse.radius_m != reranked.radius_m {
        return Err(EvalError::MismatchedConfigs(format!(
            "radii differ: {} vs {}",
            coarse.radius_m, reranked.radius_m
        )));
    }
    let rows = coarse
        .recall
        .iter()
        .zip(reranked.recall.values())
        .map(|((&k, &c), &r)| ComparisonRow {
            k,
            coarse: c,
            reranked: r,
            delta: r - c,
        })
        .collect();
    Ok(Comparison {
        num_queries: coarse.num_queries,
        radius_m: coarse.radius_m,
        rows,
    })
}
