//! Dense retrieval half: hashed text features, a trainable linear embedder,
//! inner-product scoring, and exact top-k search.
//!
//! The embedder is a D x F linear map over hashed unigram+bigram counts.
//! Features are hashed with a fixed, seedless FNV-1a 64 so mined data and
//! trained checkpoints reproduce across machines. Corpus scale here is small
//! enough that exact search is both fast and oracle-testable.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::bm25::tokenize;
use crate::corpus::{Corpus, IndexFields};
use crate::ranking::{RankedList, RetrievalError, Retriever};
use crate::rng::Rng;

pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_FEATURE_SPACE: usize = 1 << 18;
const CHECKPOINT_MAGIC: &[u8; 8] = b"EMBCKPT\x01";
const CHECKPOINT_VERSION: u32 = 1;
/// Joins the two terms of a bigram before hashing.
const BIGRAM_SEP: char = '\u{1f}';

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not an embedder checkpoint: {path}")]
    BadMagic { path: String },
    #[error("unsupported checkpoint version {found} in {path}")]
    BadVersion { path: String, found: u32 },
    #[error("checkpoint {path} is truncated or oversized")]
    SizeMismatch { path: String },
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Sparse hashed feature counts over a feature space of size `feature_space`.
/// Indices are unique and sorted; values are occurrence counts (collisions
/// add).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pairs: Vec<(u32, f64)>,
    feature_space: usize,
}

impl FeatureVector {
    pub fn pairs(&self) -> &[(u32, f64)] {
        &self.pairs
    }

    pub fn feature_space(&self) -> usize {
        self.feature_space
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Hash each unigram and each adjacent bigram into `[0, feature_space)` and
/// count occurrences. Deterministic and platform-independent.
pub fn hash_features(terms: &[String], feature_space: usize) -> FeatureVector {
    assert!(feature_space > 0, "feature space must be positive");
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for term in terms {
        let idx = (fnv1a64(term.as_bytes()) % feature_space as u64) as u32;
        *counts.entry(idx).or_insert(0.0) += 1.0;
    }
    for pair in terms.windows(2) {
        let joined = format!("{}{}{}", pair[0], BIGRAM_SEP, pair[1]);
        let idx = (fnv1a64(joined.as_bytes()) % feature_space as u64) as u32;
        *counts.entry(idx).or_insert(0.0) += 1.0;
    }
    FeatureVector {
        pairs: counts.into_iter().collect(),
        feature_space,
    }
}

/// Dense embedding of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Inner product of two embeddings.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| x * y)
        .sum())
}

/// The trainable dual-encoder half: a dense D x F weight matrix applied to
/// hashed features. The same embedder encodes both queries and documents.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    dim: usize,
    feature_space: usize,
    normalize: bool,
    seed: u64,
    /// Row-major D x F.
    weights: Vec<f64>,
}

impl Embedder {
    /// Seeded Gaussian init (std 0.02), raw inner-product scoring.
    pub fn random(dim: usize, feature_space: usize, seed: u64) -> Self {
        assert!(dim >= 1 && feature_space >= 1);
        let mut rng = Rng::from_seed_pair(seed, 0x31_37);
        let weights = (0..dim * feature_space)
            .map(|_| rng.gaussian() * 0.02)
            .collect();
        Embedder {
            dim,
            feature_space,
            normalize: false,
            seed,
            weights,
        }
    }

    pub fn zeros(dim: usize, feature_space: usize) -> Self {
        assert!(dim >= 1 && feature_space >= 1);
        Embedder {
            dim,
            feature_space,
            normalize: false,
            seed: 0,
            weights: vec![0.0; dim * feature_space],
        }
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_space(&self) -> usize {
        self.feature_space
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight(&self, d: usize, f: usize) -> f64 {
        self.weights[d * self.feature_space + f]
    }

    pub fn set_weight(&mut self, d: usize, f: usize, value: f64) {
        self.weights[d * self.feature_space + f] = value;
    }

    /// Scale every weight by `c` (used by the covariance tests).
    pub fn scale_weights(&mut self, c: f64) {
        for w in &mut self.weights {
            *w *= c;
        }
    }

    /// v = W f over the sparse features; no normalization applied.
    pub fn embed_features_raw(&self, features: &FeatureVector) -> EmbeddingVector {
        debug_assert_eq!(features.feature_space(), self.feature_space);
        let mut values = vec![0.0; self.dim];
        for &(f, x) in features.pairs() {
            let col = f as usize;
            for (d, value) in values.iter_mut().enumerate() {
                *value += self.weights[d * self.feature_space + col] * x;
            }
        }
        EmbeddingVector { values }
    }

    /// Embed a text: tokenize, hash, apply the linear map, and (when the
    /// embedder is configured for it) rescale to unit L2 norm. Zero vectors
    /// stay zero.
    pub fn embed(&self, text: &str) -> EmbeddingVector {
        let features = hash_features(&tokenize(text), self.feature_space);
        let mut v = self.embed_features_raw(&features);
        if self.normalize {
            let norm = v.l2_norm();
            if norm > 0.0 {
                for value in &mut v.values {
                    *value /= norm;
                }
            }
        }
        v
    }

    /// Binary checkpoint: magic, version, D, F, normalize flag, seed, then
    /// row-major weights as little-endian f64 bits. Round-trips bit-exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = Vec::with_capacity(8 + 4 * 3 + 1 + 8 + self.weights.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_space as u32).to_le_bytes());
        out.push(self.normalize as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&out).map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(io_err)?
            .read_to_end(&mut bytes)
            .map_err(io_err)?;
        let display = path.display().to_string();
        if bytes.len() < 8 || &bytes[0..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { path: display });
        }
        let header_len = 8 + 4 + 4 + 4 + 1 + 8;
        if bytes.len() < header_len {
            return Err(CheckpointError::SizeMismatch { path: display });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion {
                path: display,
                found: version,
            });
        }
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let feature_space = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let normalize = bytes[20] != 0;
        let seed = u64::from_le_bytes(bytes[21..29].try_into().unwrap());
        let body = &bytes[29..];
        if dim == 0 || feature_space == 0 || body.len() != dim * feature_space * 8 {
            return Err(CheckpointError::SizeMismatch { path: display });
        }
        let weights = body
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        Ok(Embedder {
            dim,
            feature_space,
            normalize,
            seed,
            weights,
        })
    }
}

/// Exact inner-product retriever over precomputed document embeddings.
pub struct DenseRetriever<'a> {
    corpus: &'a Corpus,
    embedder: &'a Embedder,
    doc_embeddings: Vec<EmbeddingVector>,
}

impl<'a> DenseRetriever<'a> {
    /// Embed every corpus document (same field policy as the BM25 index).
    pub fn build(embedder: &'a Embedder, corpus: &'a Corpus, fields: IndexFields) -> Self {
        let doc_embeddings = corpus
            .demos()
            .iter()
            .map(|demo| embedder.embed(&fields.doc_text(demo)))
            .collect();
        DenseRetriever {
            corpus,
            embedder,
            doc_embeddings,
        }
    }

    pub fn embedder(&self) -> &Embedder {
        self.embedder
    }
}

impl Retriever for DenseRetriever<'_> {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn retrieve(
        &self,
        query_text: &str,
        k: usize,
        exclude_ids: &HashSet<String>,
    ) -> Result<RankedList, RetrievalError> {
        if self.corpus.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let query = self.embedder.embed(query_text);
        let mut scored = Vec::with_capacity(self.corpus.len());
        for (demo, doc) in self.corpus.demos().iter().zip(&self.doc_embeddings) {
            if exclude_ids.contains(&demo.id) {
                continue;
            }
            scored.push((demo.id.clone(), similarity(&query, doc)?));
        }
        if scored.is_empty() {
            return Err(RetrievalError::EmptyCorpusAfterExclusion);
        }
        Ok(RankedList::from_scored(scored, k))
    }
}

/// One-call dense retrieval that embeds the corpus on the fly. Prefer
/// [`DenseRetriever`] when issuing many queries against the same corpus.
pub fn dense_retrieve(
    embedder: &Embedder,
    corpus: &Corpus,
    query_text: &str,
    k: usize,
    exclude_ids: &HashSet<String>,
    fields: IndexFields,
) -> Result<RankedList, RetrievalError> {
    DenseRetriever::build(embedder, corpus, fields).retrieve(query_text, k, exclude_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Demonstration, TaskSpec};
    use proptest::prelude::*;

    fn corpus_of(texts: &[&str]) -> Corpus {
        let demos = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Demonstration {
                id: format!("d{i:03}"),
                question: t.to_string(),
                cot: None,
                answer: "x".to_string(),
            })
            .collect();
        Corpus::from_demos(TaskSpec::new("t", false), demos).unwrap()
    }

    #[test]
    fn hash_features_empty() {
        let fv = hash_features(&[], 64);
        assert!(fv.is_empty());
    }

    #[test]
    fn hash_features_counts_unigrams_and_bigrams() {
        let terms = vec!["a".to_string(), "a".to_string()];
        let fv = hash_features(&terms, DEFAULT_FEATURE_SPACE);
        // one unigram feature with count 2, one bigram ("a<sep>a") with count 1
        assert_eq!(fv.pairs().len(), 2);
        let mut values: Vec<f64> = fv.pairs().iter().map(|&(_, v)| v).collect();
        values.sort_by(f64::total_cmp);
        assert_eq!(values, vec![1.0, 2.0]);
    }

    #[test]
    fn hash_features_deterministic() {
        let terms = tokenize("same text twice hashed");
        assert_eq!(
            hash_features(&terms, DEFAULT_FEATURE_SPACE),
            hash_features(&terms, DEFAULT_FEATURE_SPACE)
        );
    }

    #[test]
    fn zero_weights_embed_to_zero() {
        let e = Embedder::zeros(4, 64);
        let v = e.embed("anything at all");
        assert_eq!(v.values(), &[0.0; 4]);
    }

    #[test]
    fn embed_is_linear_in_feature_counts() {
        // D=1, weight 2.0 on the feature of token "tok"; "tok tok tok"
        // yields unigram count 3 (plus bigrams, whose weights stay 0).
        let mut e = Embedder::zeros(1, 64);
        let idx = (fnv1a64(b"tok") % 64) as usize;
        e.set_weight(0, idx, 2.0);
        let v = e.embed("tok tok tok");
        assert_eq!(v.values(), &[6.0]);
    }

    #[test]
    fn normalization_rescales_to_unit_length() {
        let mut e = Embedder::zeros(2, 64).with_normalize(true);
        let idx = (fnv1a64(b"tok") % 64) as usize;
        e.set_weight(0, idx, 3.0);
        e.set_weight(1, idx, 4.0);
        let v = e.embed("tok");
        assert!((v.values()[0] - 0.6).abs() < 1e-12);
        assert!((v.values()[1] - 0.8).abs() < 1e-12);
        // zero vectors are exempt
        let z = e.embed("");
        assert_eq!(z.values(), &[0.0, 0.0]);
    }

    #[test]
    fn similarity_basics() {
        let a = EmbeddingVector::new(vec![1.0, 0.0]);
        let b = EmbeddingVector::new(vec![0.0, 1.0]);
        assert_eq!(similarity(&a, &b).unwrap(), 0.0);
        let c = EmbeddingVector::new(vec![1.0, 2.0]);
        let d = EmbeddingVector::new(vec![3.0, 4.0]);
        assert_eq!(similarity(&c, &d).unwrap(), 11.0);
        let short = EmbeddingVector::new(vec![1.0]);
        assert!(matches!(
            similarity(&a, &short),
            Err(RetrievalError::DimMismatch { left: 2, right: 1 })
        ));
    }

    #[test]
    fn self_match_ranks_first_under_normalization() {
        let corpus = corpus_of(&["alpha beta gamma", "delta epsilon", "zeta eta theta"]);
        let e = Embedder::random(16, 4096, 7).with_normalize(true);
        let retriever = DenseRetriever::build(&e, &corpus, IndexFields::QuestionOnly);
        let ranked = retriever
            .retrieve("alpha beta gamma", 1, &HashSet::new())
            .unwrap();
        assert_eq!(ranked.entries()[0].0, "d000");
    }

    fn oracle(
        embedder: &Embedder,
        corpus: &Corpus,
        query: &str,
        k: usize,
        exclude: &HashSet<String>,
    ) -> RankedList {
        let q = embedder.embed(query);
        let scored: Vec<(String, f64)> = corpus
            .demos()
            .iter()
            .filter(|d| !exclude.contains(&d.id))
            .map(|d| {
                let doc = embedder.embed(&IndexFields::QuestionOnly.doc_text(d));
                (d.id.clone(), similarity(&q, &doc).unwrap())
            })
            .collect();
        RankedList::from_scored(scored, k)
    }

    #[test]
    fn retrieve_matches_oracle_and_exclusion_promotes_rank_two() {
        let mut rng = crate::rng::Rng::new(9);
        let vocab: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
        let texts: Vec<String> = (0..50)
            .map(|_| {
                let len = 2 + rng.gen_range(8);
                (0..len)
                    .map(|_| vocab[rng.gen_range(vocab.len())].clone())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let corpus = corpus_of(&refs);
        let e = Embedder::random(16, 4096, 3);
        let retriever = DenseRetriever::build(&e, &corpus, IndexFields::QuestionOnly);

        let query = "w1 w2 w3 w4";
        let got = retriever.retrieve(query, 10, &HashSet::new()).unwrap();
        let want = oracle(&e, &corpus, query, 10, &HashSet::new());
        assert_eq!(got, want);

        let top = got.entries()[0].0.clone();
        let second = got.entries()[1].0.clone();
        let exclude: HashSet<String> = [top].into();
        let after = retriever.retrieve(query, 10, &exclude).unwrap();
        assert_eq!(after.entries()[0].0, second);
        assert_eq!(after, oracle(&e, &corpus, query, 10, &exclude));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let e = Embedder::random(8, 512, 123).with_normalize(true);
        let f = tempfile::NamedTempFile::new().unwrap();
        e.save(f.path()).unwrap();
        let loaded = Embedder::load(f.path()).unwrap();
        assert_eq!(loaded, e);
        let f2 = tempfile::NamedTempFile::new().unwrap();
        loaded.save(f2.path()).unwrap();
        assert_eq!(
            std::fs::read(f.path()).unwrap(),
            std::fs::read(f2.path()).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), b"not a checkpoint at all").unwrap();
        assert!(matches!(
            Embedder::load(f.path()),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    proptest! {
        #[test]
        fn self_similarity_nonnegative(seed in 0u64..200) {
            let e = Embedder::random(8, 256, seed);
            let v = e.embed("some tokens to embed");
            prop_assert!(similarity(&v, &v).unwrap() >= 0.0);
        }

        #[test]
        fn scaling_weights_preserves_rank_order(seed in 0u64..50) {
            let mut rng = crate::rng::Rng::new(seed);
            let vocab: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
            let mut texts: Vec<String> = (0..20)
                .map(|_| {
                    let len = 1 + rng.gen_range(6);
                    (0..len)
                        .map(|_| vocab[rng.gen_range(vocab.len())].clone())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            // duplicated doc forces an exact tie that scaling must preserve
            texts.push(texts[0].clone());
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let corpus = corpus_of(&refs);
            let e = Embedder::random(8, 1024, seed.wrapping_add(77));
            let base = DenseRetriever::build(&e, &corpus, IndexFields::QuestionOnly)
                .retrieve("v0 v1 v2", texts.len(), &HashSet::new())
                .unwrap();
            for c in [0.5, 3.0] {
                let mut scaled = e.clone();
                scaled.scale_weights(c);
                let got = DenseRetriever::build(&scaled, &corpus, IndexFields::QuestionOnly)
                    .retrieve("v0 v1 v2", texts.len(), &HashSet::new())
                    .unwrap();
                let base_ids: Vec<&str> = base.ids().collect();
                let got_ids: Vec<&str> = got.ids().collect();
                prop_assert_eq!(base_ids, got_ids);
            }
        }
    }
}
