//! Exact maximum-inner-product search over small immutable pools.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, sigmoid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry<P> {
    pub id: usize,
    pub embedding: Vec<f64>,
    #[serde(rename = "tokens")]
    pub payload: P,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPool<P> {
    entries: Vec<PoolEntry<P>>,
}

/// One ranked result. `score` is `sigmoid(logit)`; ranking uses the logit,
/// which orders identically but never saturates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub index: usize,
    pub id: usize,
    pub logit: f64,
    pub score: f64,
}

/// Heap key: larger is better; equal logits prefer the smaller id.
#[derive(Clone, Copy, Debug)]
struct Rank {
    logit: f64,
    id: usize,
    index: usize,
}

impl PartialEq for Rank {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Rank {}

impl PartialOrd for Rank {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Rank {
    fn cmp(&self, other: &Self) -> Ordering {
        self.logit
            .total_cmp(&other.logit)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl<P> RetrievalPool<P> {
    /// Validates unique ids, a common dimension and finite embeddings.
    pub fn new(entries: Vec<PoolEntry<P>>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Validation("retrieval pool is empty".into()))?;
        let dim = first.embedding.len();
        let mut seen = HashSet::new();
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::dim("retrieval pool", &[e.embedding.len()], &[dim]));
            }
            if !e.embedding.iter().all(|x| x.is_finite()) {
                return Err(Error::Validation(format!("pool entry {} has a non-finite embedding", e.id)));
            }
            if !seen.insert(e.id) {
                return Err(Error::Validation(format!("duplicate pool id {}", e.id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.len()
    }

    pub fn entries(&self) -> &[PoolEntry<P>] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &PoolEntry<P> {
        &self.entries[index]
    }

    pub fn into_entries(self) -> Vec<PoolEntry<P>> {
        self.entries
    }

    /// Exact top-`k` by inner product, best first, ties by ascending id.
    /// Entries whose id equals `exclude` are skipped.
    pub fn top_k(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Result<Vec<Hit>> {
        self.top_k_where(query, k, |e| Some(e.id) != exclude)
    }

    /// Entries accepted by `keep`, eligible to be retrieved.
    pub fn count_where(&self, keep: impl Fn(&PoolEntry<P>) -> bool) -> usize {
        self.entries.iter().filter(|e| keep(e)).count()
    }

    /// [`RetrievalPool::top_k`] over the entries accepted by `keep`.
    pub fn top_k_where(&self, query: &[f64], k: usize, keep: impl Fn(&PoolEntry<P>) -> bool) -> Result<Vec<Hit>> {
        if query.len() != self.dim() {
            return Err(Error::dim("retrieval query", &[query.len()], &[self.dim()]));
        }
        let available = self.count_where(&keep);
        if k == 0 || k > available {
            return Err(Error::Validation(format!(
                "cannot retrieve {k} items from a pool of {available}"
            )));
        }
        let mut heap: BinaryHeap<Reverse<Rank>> = BinaryHeap::with_capacity(k + 1);
        for (index, e) in self.entries.iter().enumerate() {
            if !keep(e) {
                continue;
            }
            let rank = Rank {
                logit: dot(query, &e.embedding),
                id: e.id,
                index,
            };
            if heap.len() < k {
                heap.push(Reverse(rank));
            } else if heap.peek().is_some_and(|worst| rank > worst.0) {
                heap.pop();
                heap.push(Reverse(rank));
            }
        }
        let mut ranked: Vec<Rank> = heap.into_iter().map(|r| r.0).collect();
        ranked.sort_by(|a, b| b.cmp(a));
        Ok(ranked
            .into_iter()
            .map(|r| Hit {
                index: r.index,
                id: r.id,
                logit: r.logit,
                score: sigmoid(r.logit),
            })
            .collect())
    }
}
