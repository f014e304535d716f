//! Builds retriever-training data from LM feedback: for each training query,
//! retrieve a candidate set, score every candidate by the LM log-probability
//! of the query's gold answer given that candidate as a one-shot prompt, and
//! keep the top-n as positives and the bottom-n as hard negatives.
//!
//! The query's own demonstration never enters its candidate set, and neither
//! does any demonstration whose question is byte-equal to the query's: an
//! identical question would leak the gold answer straight into the prompt.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_prompt, Corpus, Demonstration, Query, TaskSpec};
use crate::lm::{LmClient, LmError, LmScore, LmScoreRequest};
use crate::par::parallel_map;
use crate::ranking::{RetrievalError, Retriever};

#[derive(Debug, Error)]
pub enum MineError {
    #[error("query {query_id:?} has no gold answer")]
    MissingGold { query_id: String },
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("mined file io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed mined record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Which off-the-shelf retriever proposes candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieverKind {
    Bm25,
    Dense,
}

/// Mining parameters. Defaults: 100 candidates per query, top-5 positives,
/// bottom-5 hard negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub candidate_k: usize,
    pub positive_n: usize,
    pub negative_n: usize,
    pub retriever: RetrieverKind,
    /// Queries whose scored pool ends up smaller than this are skipped
    /// rather than mined.
    pub min_pool: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            candidate_k: 100,
            positive_n: 5,
            negative_n: 5,
            retriever: RetrieverKind::Bm25,
            min_pool: 10,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MineError> {
        if self.positive_n == 0 || self.negative_n == 0 || self.candidate_k == 0 {
            return Err(MineError::InvalidConfig(
                "candidate_k, positive_n, and negative_n must be >= 1".to_string(),
            ));
        }
        if self.candidate_k < self.positive_n + self.negative_n {
            return Err(MineError::InvalidConfig(format!(
                "candidate_k {} < positive_n {} + negative_n {}",
                self.candidate_k, self.positive_n, self.negative_n
            )));
        }
        if self.min_pool == 0 || self.min_pool > self.candidate_k {
            return Err(MineError::InvalidConfig(format!(
                "min_pool {} must lie in [1, candidate_k {}]",
                self.min_pool, self.candidate_k
            )));
        }
        Ok(())
    }
}

/// One LM-scored demonstration reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDemo {
    pub id: String,
    pub logprob: f64,
}

/// A query with its LM-scored positive and hard-negative demonstrations.
/// Positives are sorted by logprob descending, negatives ascending, the sets
/// are disjoint, and `min(positives) >= max(negatives)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedExample {
    pub query_id: String,
    pub query_text: String,
    pub positives: Vec<ScoredDemo>,
    pub negatives: Vec<ScoredDemo>,
}

/// Result of mining one query.
#[derive(Debug, Clone, PartialEq)]
pub enum MineOutcome {
    Mined(MinedExample),
    /// Scored pool was smaller than `min_pool`.
    Skipped { pool: usize },
}

/// Totals for a mining run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MineSummary {
    pub mined: usize,
    pub skipped: usize,
    /// Candidates whose LM score failed after retries and were dropped.
    pub dropped: usize,
}

/// Score one candidate: the LM log-probability of the gold answer given a
/// one-shot prompt built from the candidate and the query question.
pub fn score_candidate(
    lm: &dyn LmClient,
    candidate: &Demonstration,
    query: &Query,
    task: &TaskSpec,
) -> Result<LmScore, MineError> {
    let gold = query.gold_answer.as_deref().ok_or(MineError::MissingGold {
        query_id: query.id.clone(),
    })?;
    let prompt = build_prompt(&[candidate], &query.question, task);
    let req = LmScoreRequest::new(prompt, gold)?;
    Ok(lm.score(&req)?)
}

/// Mine one query: retrieve `candidate_k` candidates (excluding the query's
/// own id and byte-equal questions), score each, and split the pool into
/// top positives and bottom negatives. Candidates whose score fails after
/// the client's retries are dropped and counted. Returns `Skipped` when the
/// surviving pool is smaller than `min_pool`.
pub fn mine_query(
    retriever: &dyn Retriever,
    lm: &dyn LmClient,
    corpus: &Corpus,
    query: &Query,
    cfg: &MiningConfig,
) -> Result<(MineOutcome, usize), MineError> {
    cfg.validate()?;
    if query.gold_answer.is_none() {
        return Err(MineError::MissingGold {
            query_id: query.id.clone(),
        });
    }

    let mut exclude: HashSet<String> = HashSet::new();
    exclude.insert(query.id.clone());
    exclude.extend(corpus.ids_with_question(&query.question));

    let candidates = retriever.retrieve(&query.question, cfg.candidate_k, &exclude)?;

    let mut dropped = 0usize;
    let mut scored: Vec<ScoredDemo> = Vec::with_capacity(candidates.len());
    for id in candidates.ids() {
        let demo = corpus.get(id).expect("retrieved id resolves in corpus");
        match score_candidate(lm, demo, query, corpus.task()) {
            Ok(score) => scored.push(ScoredDemo {
                id: id.to_string(),
                logprob: score.logprob(),
            }),
            // backend trouble drops the candidate; anything else (bad gold,
            // invalid request) is a real error
            Err(MineError::Lm(
                LmError::BackendUnavailable { .. }
                | LmError::BackendMalformedReply { .. }
                | LmError::Timeout { .. },
            )) => dropped += 1,
            Err(other) => return Err(other),
        }
    }

    let pool = scored.len();
    if pool < cfg.min_pool {
        return Ok((MineOutcome::Skipped { pool }, dropped));
    }

    scored.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.id.cmp(&b.id)));

    // If the pool cannot fill both sides, negatives shrink first, then
    // positives; the split stays disjoint with min(pos) >= max(neg).
    let pos_n = cfg.positive_n.min(pool);
    let neg_n = cfg.negative_n.min(pool - pos_n);
    let positives = scored[..pos_n].to_vec();
    let mut negatives = scored[pool - neg_n..].to_vec();
    negatives.reverse();

    Ok((
        MineOutcome::Mined(MinedExample {
            query_id: query.id.clone(),
            query_text: query.question.clone(),
            positives,
            negatives,
        }),
        dropped,
    ))
}

/// Mine every query and write one record per line (query order preserved)
/// after a `#`-prefixed header carrying the config snapshot. A partial
/// output file is removed on abort. `jobs` bounds worker threads; the LM
/// client's own concurrency cap still applies.
pub fn mine_dataset(
    retriever: &dyn Retriever,
    lm: &dyn LmClient,
    corpus: &Corpus,
    queries: &[Query],
    cfg: &MiningConfig,
    out_path: impl AsRef<Path>,
    jobs: usize,
) -> Result<MineSummary, MineError> {
    cfg.validate()?;
    let out_path = out_path.as_ref();

    let results = parallel_map(queries, jobs, |_, query| {
        mine_query(retriever, lm, corpus, query, cfg)
    });

    let write_err = |source| MineError::Io {
        path: out_path.display().to_string(),
        source,
    };
    let mut summary = MineSummary::default();
    let mut body = String::new();
    body.push_str("# ");
    body.push_str(&serde_json::to_string(cfg).expect("config serializes"));
    body.push('\n');
    for result in results {
        match result {
            Ok((MineOutcome::Mined(example), dropped)) => {
                summary.mined += 1;
                summary.dropped += dropped;
                body.push_str(&serde_json::to_string(&example).expect("example serializes"));
                body.push('\n');
            }
            Ok((MineOutcome::Skipped { .. }, dropped)) => {
                summary.skipped += 1;
                summary.dropped += dropped;
            }
            Err(e) => {
                let _ = fs::remove_file(out_path);
                return Err(e);
            }
        }
    }

    let mut file = fs::File::create(out_path).map_err(write_err)?;
    if let Err(e) = file.write_all(body.as_bytes()) {
        drop(file);
        let _ = fs::remove_file(out_path);
        return Err(write_err(e));
    }
    Ok(summary)
}

/// Read a mined file back, skipping `#` header lines.
pub fn load_mined(path: impl AsRef<Path>) -> Result<Vec<MinedExample>, MineError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let example: MinedExample =
            serde_json::from_str(line).map_err(|e| MineError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
        examples.push(example);
    }
    Ok(examples)
}
