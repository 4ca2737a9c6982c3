use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DescriptorSet, RetrievalError};

/// Default shortlist size handed to the re-ranker.
pub const DEFAULT_TOP_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    /// Negated Euclidean distance, so larger is more similar.
    L2,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(format!("unknown metric `{other}` (expected cosine|l2)")),
        }
    }
}

pub fn similarity(a: &[f64], b: &[f64], metric: Metric) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimMismatch {
            id: "query".into(),
            got: b.len(),
            want: a.len(),
        });
    }
    match metric {
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(RetrievalError::ZeroVector(if na == 0.0 { "a" } else { "b" }.into()));
            }
            Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
        }
        Metric::L2 => Ok(-a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub coarse_score: f64,
    pub coarse_rank: usize,
}

/// Coarse shortlist for one query, best first; ranks start at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    #[serde(rename = "candidates")]
    pub items: Vec<Candidate>,
}

impl CandidateList {
    /// Builds a list from already-ordered `(id, score)` pairs, assigning
    /// ranks 1..=n.
    pub fn from_ordered<I, S>(query_id: impl Into<String>, items: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        CandidateList {
            query_id: query_id.into(),
            items: items
                .into_iter()
                .enumerate()
                .map(|(i, (id, score))| Candidate {
                    candidate_id: id.into(),
                    coarse_score: score,
                    coarse_rank: i + 1,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|c| c.candidate_id.as_str())
    }
}

/// One JSON object per line: `{"query_id": ..., "candidates": [...]}`.
pub fn candidates_to_jsonl(lists: &[CandidateList]) -> String {
    let mut out = String::new();
    for l in lists {
        out.push_str(&serde_json::to_string(l).expect("candidate lists always serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_candidate_lists(text: &str) -> Result<Vec<CandidateList>, RetrievalError> {
    let mut out: Vec<CandidateList> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| RetrievalError::Parse { line: idx + 1, message };
        let list: CandidateList = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if !seen.insert(list.query_id.clone()) {
            return Err(RetrievalError::DuplicateId(list.query_id));
        }
        let mut ranks: Vec<usize> = list.items.iter().map(|c| c.coarse_rank).collect();
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(i, r)| *r != i + 1) {
            return Err(bad(format!("coarse ranks of `{}` are not 1..={}", list.query_id, ranks.len())));
        }
        out.push(list);
    }
    Ok(out)
}

pub fn load_candidate_lists(path: impl AsRef<Path>) -> Result<Vec<CandidateList>, RetrievalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::io(path, e))?;
    parse_candidate_lists(&text)
}

pub fn write_candidate_lists(path: impl AsRef<Path>, lists: &[CandidateList]) -> Result<(), RetrievalError> {
    let path = path.as_ref();
    std::fs::write(path, candidates_to_jsonl(lists)).map_err(|e| RetrievalError::io(path, e))
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exhaustive top-`n` search. Returns every entry when the set holds fewer
/// than `n`.
pub fn retrieve_top_n(
    query_id: &str,
    query: &[f64],
    db: &DescriptorSet,
    n: usize,
    metric: Metric,
) -> Result<CandidateList, RetrievalError> {
    if query.len() != db.dim() {
        return Err(RetrievalError::DimMismatch {
            id: query_id.to_owned(),
            got: query.len(),
            want: db.dim(),
        });
    }
    let mut scored = db
        .iter()
        .map(|(id, v)| similarity(query, v, metric).map(|s| (s, id)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = n.min(scored.len());
    if n > 0 && n < scored.len() {
        scored.select_nth_unstable_by(n - 1, rank_order);
        scored.truncate(n);
    }
    scored.sort_unstable_by(rank_order);
    Ok(CandidateList::from_ordered(
        query_id,
        scored.into_iter().map(|(s, id)| (id, s)),
    ))
}

/// Runs [`retrieve_top_n`] for every query in parallel; output follows the
/// query set's id order.
pub fn retrieve_all(
    queries: &DescriptorSet,
    db: &DescriptorSet,
    n: usize,
    metric: Metric,
) -> Result<Vec<CandidateList>, RetrievalError> {
    let queries: Vec<_> = queries.iter().collect();
    queries
        .par_iter()
        .map(|(id, v)| retrieve_top_n(id, v, db, n, metric))
        .collect()
}
