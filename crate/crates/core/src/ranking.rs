//! Ranked retrieval results and the strategy-agnostic retriever interface
//! shared by the sparse and dense backends.

use std::collections::HashSet;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no documents left after exclusion")]
    EmptyCorpusAfterExclusion,
    #[error("document position {doc} out of range (doc_count {count})")]
    DocOutOfRange { doc: usize, count: usize },
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("failed to read index {path}: {reason}")]
    BadIndexFile { path: String, reason: String },
}

/// Top-k retrieval result: `(demo id, score)` pairs in descending score
/// order, ties broken by id ascending (byte order) so results are
/// reproducible across runs and platforms.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sort arbitrary scored pairs with the tie rule and keep the top `k`.
    pub fn from_scored(mut scored: Vec<(String, f64)>, k: usize) -> Self {
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        RankedList { entries: scored }
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    /// True when scores are non-increasing, ids are distinct, and equal
    /// scores appear in ascending id order.
    pub fn is_well_formed(&self) -> bool {
        let mut seen = HashSet::new();
        for window in self.entries.windows(2) {
            let (ref id_a, score_a) = window[0];
            let (ref id_b, score_b) = window[1];
            if score_b > score_a {
                return false;
            }
            if score_a == score_b && id_a >= id_b {
                return false;
            }
        }
        self.entries.iter().all(|(id, _)| seen.insert(id.clone()))
    }
}

/// A retrieval strategy over a fixed corpus: given query text, return the
/// top-k demonstrations excluding the given ids.
pub trait Retriever: Sync {
    fn name(&self) -> &'static str;

    fn retrieve(
        &self,
        query_text: &str,
        k: usize,
        exclude_ids: &HashSet<String>,
    ) -> Result<RankedList, RetrievalError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_scored_sorts_desc_and_breaks_ties_by_id() {
        let ranked = RankedList::from_scored(
            vec![
                ("b".to_string(), 1.0),
                ("a".to_string(), 1.0),
                ("c".to_string(), 2.0),
            ],
            10,
        );
        let ids: Vec<&str> = ranked.ids().collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
        assert!(ranked.is_well_formed());
    }

    #[test]
    fn from_scored_truncates_to_k() {
        let ranked = RankedList::from_scored(
            vec![("a".to_string(), 0.5), ("b".to_string(), 0.9)],
            1,
        );
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked.entries()[0].0, "b");
    }
}
