//! Query-specific demonstration retrieval for in-context learning.
//!
//! The pipeline, end to end:
//!
//! 1. [`corpus`] - demonstration pools, task formatting rules, and prompt
//!    assembly.
//! 2. [`bm25`] / [`dense`] - off-the-shelf retrievers: an Okapi BM25
//!    inverted index and a hashed-feature linear dual encoder, both exposing
//!    exact top-k search behind the [`ranking::Retriever`] interface.
//! 3. [`miner`] - LM-feedback mining: score retrieved candidates by the
//!    log-probability of the gold answer and keep the extremes as positive
//!    and hard-negative training pairs.
//! 4. [`trainer`] - contrastive training of the dense embedder on mined
//!    pairs with in-batch and hard negatives, plus retrieval metrics on a
//!    held-out split.
//! 5. [`sequential`] - step-by-step selection conditioned on the
//!    demonstrations already chosen, optionally rescored by the gain in
//!    gold-answer log-probability.
//! 6. [`harness`] - exact-match ICL evaluation and the answer-overlap
//!    analysis tables.
//!
//! [`lm`] supplies the language-model interface used throughout: an HTTP
//! backend and a deterministic mock.

pub mod bm25;
pub mod corpus;
pub mod dense;
pub mod harness;
pub mod lm;
pub mod miner;
pub mod ranking;
pub mod rng;
pub mod sequential;
pub mod trainer;

mod par;

pub use corpus::{build_prompt, linearize, Corpus, Demonstration, Query, TaskSpec};
pub use ranking::{RankedList, RetrievalError, Retriever};
