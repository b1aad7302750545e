//! Exact k-nearest-neighbor search.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Corpus, ImageRecord, Tier};

/// Records fetched per query when the caller has no preference (4 pages of 15).
pub const DEFAULT_K: usize = 60;
pub const DEFAULT_PAGE_SIZE: usize = 15;

/// Candidate count above which the distance scan is split across threads.
const PARALLEL_SCAN_THRESHOLD: usize = 4096;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L2,
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        check_dims(a, b)?;
        Ok(match self {
            Metric::L2 => l2(a, b),
            Metric::Cosine => cosine(a, b),
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown metric {s:?}"))),
        }
    }
}

/// Euclidean distance between two embeddings.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    Metric::L2.distance(a, b)
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// `1 - cos(a, b)`, clamped to [0, 2]. A zero vector is at distance 1 from everything.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub image_id: String,
    pub distance: f64,
    pub diagnosis: String,
}

impl RankedResult {
    /// Ascending distance, then lexicographic id.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then_with(|| self.image_id.cmp(&other.image_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchFilter {
    pub tier: Tier,
    #[serde(default)]
    pub allowed_categories: Option<BTreeSet<String>>,
    #[serde(default)]
    pub exclude_ids: BTreeSet<String>,
}

impl SearchFilter {
    pub fn tier(tier: Tier) -> Self {
        Self {
            tier,
            allowed_categories: None,
            exclude_ids: BTreeSet::new(),
        }
    }

    pub fn with_categories<I, S>(mut self, categories: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.allowed_categories = Some(categories.into_iter().map(Into::into).collect());
        self
    }

    pub fn excluding(mut self, id: impl Into<String>) -> Self {
        self.exclude_ids.insert(id.into());
        self
    }

    pub fn admits(&self, rec: &ImageRecord) -> bool {
        rec.tier == self.tier
            && !self.exclude_ids.contains(&rec.id)
            && self
                .allowed_categories
                .as_ref()
                .is_none_or(|allowed| allowed.contains(&rec.diagnosis))
    }
}

/// The `k` records closest to `query` that pass `filter`, ranked by
/// [`RankedResult::rank_cmp`]. Uses the corpus metric.
pub fn search<'a>(
    corpus: &'a Corpus,
    query: &[f64],
    filter: &SearchFilter,
    k: usize,
) -> Result<Vec<RankedResult>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if query.len() != corpus.dimension() {
        return Err(Error::DimensionMismatch {
            expected: corpus.dimension(),
            actual: query.len(),
        });
    }
    let metric = corpus.metric();
    let candidates: Vec<&ImageRecord> = corpus
        .tier_records(filter.tier)
        .filter(|r| filter.admits(r))
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates { tier: filter.tier });
    }

    let score = |rec: &&'a ImageRecord| -> (f64, &'a ImageRecord) {
        let d = match metric {
            Metric::L2 => l2(query, &rec.embedding),
            Metric::Cosine => cosine(query, &rec.embedding),
        };
        (d, *rec)
    };
    let mut scored: Vec<(f64, &'a ImageRecord)> = if candidates.len() >= PARALLEL_SCAN_THRESHOLD {
        candidates.par_iter().map(score).collect()
    } else {
        candidates.iter().map(score).collect()
    };

    let cmp = |a: &(f64, &ImageRecord), b: &(f64, &ImageRecord)| {
        a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);

    Ok(scored
        .into_iter()
        .map(|(distance, rec)| RankedResult {
            image_id: rec.id.clone(),
            distance,
            diagnosis: rec.diagnosis.clone(),
        })
        .collect())
}

/// Items `[page_index * page_size, (page_index + 1) * page_size)`; empty past the end.
pub fn page<T>(results: &[T], page_index: usize, page_size: usize) -> &[T] {
    let start = page_index.saturating_mul(page_size).min(results.len());
    let end = start.saturating_add(page_size).min(results.len());
    &results[start..end]
}
