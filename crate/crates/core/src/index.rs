//! Exact top-k cosine search over an [`EmbeddingMatrix`].

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::model::Channel;

/// One retrieved pool item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f32,
}

/// Candidates for one channel, best first. Ties are broken by id ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub channel: Channel,
    pub entries: Vec<Hit>,
    pub k_requested: usize,
}

impl RankedList {
    pub fn empty(channel: Channel) -> Self {
        Self {
            channel,
            entries: Vec::new(),
            k_requested: 0,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|h| h.id.as_str())
    }
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `a . b / (|a| |b|)`, accumulated in 64 bits.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            found: b.len(),
            context: "cosine operands".into(),
        });
    }
    let na = dot_f64(a, a).sqrt();
    let nb = dot_f64(b, b).sqrt();
    if na == 0.0 {
        return Err(Error::ZeroVector { id: "<lhs>".into() });
    }
    if nb == 0.0 {
        return Err(Error::ZeroVector { id: "<rhs>".into() });
    }
    Ok(dot_f64(a, b) / (na * nb))
}

#[derive(Debug, Clone, Copy)]
struct Candidate<'a> {
    score: f32,
    id: &'a str,
}

// Greater means better: higher score, then smaller id.
impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

/// Score of a stored (unit-norm) row against a query, as ranked by
/// [`top_k`].
pub fn row_score(query: &[f32], query_norm: f64, row: &[f32]) -> f32 {
    (dot_f64(query, row) / query_norm) as f32
}

/// The `k` highest-cosine rows of `matrix` whose ids are not in `exclude`.
///
/// Rows are unit-norm, so only the query is normalized. The result is
/// sorted by score descending, then id ascending.
pub fn top_k(query: &[f32], matrix: &EmbeddingMatrix, k: usize, exclude: &[&str]) -> Result<Vec<Hit>> {
    if query.len() != matrix.dim() {
        return Err(Error::DimMismatch {
            expected: matrix.dim(),
            found: query.len(),
            context: format!("query vs {} matrix", matrix.space()),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let query_norm = dot_f64(query, query).sqrt();
    if query_norm == 0.0 {
        return Err(Error::ZeroVector { id: "<query>".into() });
    }

    let mut heap: BinaryHeap<Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    for (id, row) in matrix.rows() {
        if exclude.contains(&id) {
            continue;
        }
        let cand = Candidate {
            score: row_score(query, query_norm, row),
            id,
        };
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if cand > *worst {
                heap.pop();
                heap.push(Reverse(cand));
            }
        }
    }

    let mut best: Vec<Candidate> = heap.into_iter().map(|Reverse(c)| c).collect();
    best.sort_unstable_by(|a, b| b.cmp(a));
    Ok(best
        .into_iter()
        .map(|c| Hit {
            id: c.id.to_string(),
            score: c.score,
        })
        .collect())
}
