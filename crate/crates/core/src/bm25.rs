//! Sparse lexical retrieval: tokenizer, inverted index, Okapi BM25 scoring,
//! and exact top-k search with query exclusion.
//!
//! Scoring uses the Lucene-style idf `ln(1 + (N - df + 0.5) / (df + 0.5))`,
//! which stays positive for every df in [1, N], and counts repeated query
//! terms once. Retrieval accumulates scores term-at-a-time over the postings
//! lists; [`Bm25Index::score`] computes the same quantity document-at-a-time,
//! which gives the test suite an independent route to the same numbers.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, IndexFields};
use crate::ranking::{RankedList, RetrievalError, Retriever};

const INDEX_FORMAT_VERSION: u32 = 1;

/// Okapi parameters. `k1` controls term-frequency saturation, `b` document
/// length normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self, RetrievalError> {
        let params = Bm25Params { k1, b };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(RetrievalError::BadIndexFile {
                path: String::new(),
                reason: format!("k1 must be a nonnegative finite real, got {}", self.k1),
            });
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrievalError::BadIndexFile {
                path: String::new(),
                reason: format!("b must lie in [0, 1], got {}", self.b),
            });
        }
        Ok(())
    }
}

/// Lowercase the text and split on any character that is not a letter or
/// digit, dropping empty pieces.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|piece| !piece.is_empty())
        .map(str::to_string)
        .collect()
}

/// Inverted index with the document statistics BM25 needs. Document order
/// matches corpus order; postings lists are sorted by document position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    version: u32,
    params: Bm25Params,
    fields: IndexFields,
    /// term -> [(doc position, term frequency)], positions ascending
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_len: f64,
    doc_count: usize,
}

impl Bm25Index {
    /// Build the index over `corpus`, where each document is the rendering
    /// of one demonstration under `fields`.
    pub fn build(
        corpus: &Corpus,
        params: Bm25Params,
        fields: IndexFields,
    ) -> Result<Self, RetrievalError> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (pos, demo) in corpus.demos().iter().enumerate() {
            let terms = tokenize(&fields.doc_text(demo));
            doc_lengths.push(terms.len() as u32);
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for term in terms {
                *counts.entry(term).or_insert(0) += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((pos as u32, tf));
            }
        }
        let doc_count = doc_lengths.len();
        let avg_doc_len = doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_count as f64;
        Ok(Bm25Index {
            version: INDEX_FORMAT_VERSION,
            params,
            fields,
            postings,
            doc_lengths,
            avg_doc_len,
            doc_count,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn fields(&self) -> IndexFields {
        self.fields
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    /// Number of documents containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count as f64;
        ((n - df as f64 + 0.5) / (df as f64 + 0.5) + 1.0).ln()
    }

    fn tf_in_doc(&self, term: &str, doc: u32) -> u32 {
        match self.postings.get(term) {
            Some(list) => list
                .binary_search_by_key(&doc, |&(d, _)| d)
                .map(|i| list[i].1)
                .unwrap_or(0),
            None => 0,
        }
    }

    /// BM25 score of one document for the given query terms. Repeated query
    /// terms are counted once; terms absent from the index contribute 0.
    pub fn score(&self, query_terms: &[String], doc: usize) -> Result<f64, RetrievalError> {
        if doc >= self.doc_count {
            return Err(RetrievalError::DocOutOfRange {
                doc,
                count: self.doc_count,
            });
        }
        let unique: BTreeSet<&String> = query_terms.iter().collect();
        let Bm25Params { k1, b } = self.params;
        let len_norm = 1.0 - b + b * self.doc_lengths[doc] as f64 / self.avg_doc_len;
        let mut score = 0.0;
        for term in unique {
            let df = self.doc_freq(term);
            if df == 0 {
                continue;
            }
            let tf = self.tf_in_doc(term, doc as u32) as f64;
            if tf == 0.0 {
                continue;
            }
            score += self.idf(df) * tf * (k1 + 1.0) / (tf + k1 * len_norm);
        }
        Ok(score)
    }

    /// Serialize as single-line JSON. The format round-trips bit-exactly:
    /// floats are written in shortest round-trip form and map keys are
    /// already sorted, so the same index always produces the same bytes.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).expect("index serializes");
        fs::write(path, json).map_err(|e| RetrievalError::BadIndexFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| RetrievalError::BadIndexFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let index: Bm25Index =
            serde_json::from_str(&text).map_err(|e| RetrievalError::BadIndexFile {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        if index.version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::BadIndexFile {
                path: path.display().to_string(),
                reason: format!(
                    "unsupported index version {} (expected {})",
                    index.version, INDEX_FORMAT_VERSION
                ),
            });
        }
        Ok(index)
    }
}

/// Exact top-k BM25 retrieval. Every non-excluded document is eligible,
/// including score-0 ones, so a non-empty corpus always yields a result;
/// the returned list is `min(k, corpus size - excluded present)` long.
pub fn bm25_retrieve(
    index: &Bm25Index,
    corpus: &Corpus,
    query_text: &str,
    k: usize,
    exclude_ids: &HashSet<String>,
) -> Result<RankedList, RetrievalError> {
    let query_terms = tokenize(query_text);
    let unique: BTreeSet<&String> = query_terms.iter().collect();
    let Bm25Params { k1, b } = index.params;

    // Term-at-a-time accumulation over postings.
    let mut acc: Vec<f64> = vec![0.0; index.doc_count];
    for term in unique {
        let Some(list) = index.postings.get(term) else {
            continue;
        };
        let idf = index.idf(list.len());
        for &(doc, tf) in list {
            let tf = tf as f64;
            let len_norm = 1.0 - b + b * index.doc_lengths[doc as usize] as f64 / index.avg_doc_len;
            acc[doc as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * len_norm);
        }
    }

    let scored: Vec<(String, f64)> = corpus
        .demos()
        .iter()
        .enumerate()
        .filter(|(_, demo)| !exclude_ids.contains(&demo.id))
        .map(|(pos, demo)| (demo.id.clone(), acc[pos]))
        .collect();
    if scored.is_empty() {
        return Err(RetrievalError::EmptyCorpusAfterExclusion);
    }
    Ok(RankedList::from_scored(scored, k))
}

/// [`Retriever`] adapter over a built index and its corpus.
pub struct Bm25Retriever<'a> {
    index: Bm25Index,
    corpus: &'a Corpus,
}

impl<'a> Bm25Retriever<'a> {
    pub fn new(index: Bm25Index, corpus: &'a Corpus) -> Self {
        Bm25Retriever { index, corpus }
    }

    pub fn build(
        corpus: &'a Corpus,
        params: Bm25Params,
        fields: IndexFields,
    ) -> Result<Self, RetrievalError> {
        Ok(Bm25Retriever {
            index: Bm25Index::build(corpus, params, fields)?,
            corpus,
        })
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }
}

impl Retriever for Bm25Retriever<'_> {
    fn name(&self) -> &'static str {
        "bm25"
    }

    fn retrieve(
        &self,
        query_text: &str,
        k: usize,
        exclude_ids: &HashSet<String>,
    ) -> Result<RankedList, RetrievalError> {
        bm25_retrieve(&self.index, self.corpus, query_text, k, exclude_ids)
    }
}
