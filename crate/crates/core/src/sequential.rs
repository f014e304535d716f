//! Sequential demonstration retrieval: each demonstration is picked
//! conditioned on the query and the demonstrations already chosen, optionally
//! rescoring candidates by the change in gold-answer log-probability from
//! appending them to the context.
//!
//! The delta-rescored mode needs the gold answer, so it serves mining and
//! analysis rather than inference; the retriever-only mode works for any
//! query.

use std::collections::HashSet;

use thiserror::Error;

use crate::corpus::{build_prompt, linearize, Corpus, Demonstration, Query, TaskSpec};
use crate::lm::{LmClient, LmError, LmScore, LmScoreRequest};
use crate::par::parallel_map;
use crate::ranking::{RetrievalError, Retriever};

#[derive(Debug, Error)]
pub enum SequentialError {
    #[error("query {query_id:?} has no gold answer (delta scoring needs one)")]
    MissingGold { query_id: String },
    #[error("demonstration {id:?} already present in the context")]
    DuplicateDemo { id: String },
    #[error("delta-rescored selection needs an LM client")]
    LmRequired,
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Demonstrations chosen so far. `max_chars` caps how much of the context is
/// rendered into the retrieval query; demonstrations are never dropped from
/// the list itself, only from that rendering (oldest first).
#[derive(Debug, Clone)]
pub struct DemoContext {
    demos: Vec<Demonstration>,
    max_chars: usize,
}

impl Default for DemoContext {
    fn default() -> Self {
        DemoContext::new(4000)
    }
}

impl DemoContext {
    pub fn new(max_chars: usize) -> Self {
        DemoContext {
            demos: Vec::new(),
            max_chars,
        }
    }

    pub fn push(&mut self, demo: Demonstration) -> Result<(), SequentialError> {
        if self.demos.iter().any(|d| d.id == demo.id) {
            return Err(SequentialError::DuplicateDemo { id: demo.id });
        }
        self.demos.push(demo);
        Ok(())
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn contains(&self, id: &str) -> bool {
        self.demos.iter().any(|d| d.id == id)
    }

    pub fn max_chars(&self) -> usize {
        self.max_chars
    }
}

/// Render the retrieval query for the next step: the linearized context
/// demonstrations (oldest first), truncated from the front to fit
/// `max_chars`, then the separator and the query text. An empty context
/// renders as the query text alone.
pub fn context_query(query_text: &str, ctx: &DemoContext, task: &TaskSpec) -> String {
    let blocks: Vec<String> = ctx.demos.iter().map(|d| linearize(d, task)).collect();
    // keep the longest suffix of demos whose joined rendering fits
    let mut start = blocks.len();
    let mut used = 0usize;
    for (i, block) in blocks.iter().enumerate().rev() {
        let sep = if i + 1 < blocks.len() {
            task.demo_separator.len()
        } else {
            0
        };
        if used + block.len() + sep > ctx.max_chars {
            break;
        }
        used += block.len() + sep;
        start = i;
    }
    if start == blocks.len() {
        return query_text.to_string();
    }
    let mut rendered = blocks[start..].join(&task.demo_separator);
    rendered.push_str(&task.demo_separator);
    rendered.push_str(query_text);
    rendered
}

/// Gold-answer log-probability before and after appending one demonstration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaScore {
    pub before: LmScore,
    pub after: LmScore,
    /// `after - before`; positive means the demonstration helped.
    pub delta: f64,
}

/// Score the effect of appending `demo` to the context: the difference in
/// the LM log-probability of the gold answer between the prompt with and
/// without it.
pub fn delta(
    lm: &dyn LmClient,
    ctx: &DemoContext,
    demo: &Demonstration,
    query: &Query,
    task: &TaskSpec,
) -> Result<DeltaScore, SequentialError> {
    let gold = query
        .gold_answer
        .as_deref()
        .ok_or_else(|| SequentialError::MissingGold {
            query_id: query.id.clone(),
        })?;
    if ctx.contains(&demo.id) {
        return Err(SequentialError::DuplicateDemo {
            id: demo.id.clone(),
        });
    }

    let ctx_refs: Vec<&Demonstration> = ctx.demos.iter().collect();
    let before_prompt = build_prompt(&ctx_refs, &query.question, task);
    let before = lm.score(&LmScoreRequest::new(before_prompt, gold)?)?;

    let mut with_demo = ctx_refs;
    with_demo.push(demo);
    let after_prompt = build_prompt(&with_demo, &query.question, task);
    let after = lm.score(&LmScoreRequest::new(after_prompt, gold)?)?;

    Ok(DeltaScore {
        before,
        after,
        delta: after.logprob() - before.logprob(),
    })
}

/// Selection policy for each sequential step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// Take the retriever's top-1 under the context-conditioned query.
    RetrieverOnly,
    /// Rescore the retriever's top `rescore_m` candidates by delta and take
    /// the argmax (ties: retrieval rank, then id ascending).
    DeltaRescored,
}

/// Result of a sequential selection; `exhausted` flags that the corpus ran
/// out before `n` demonstrations were chosen.
#[derive(Debug, Clone)]
pub struct SequenceSelection {
    pub demos: Vec<Demonstration>,
    pub exhausted: bool,
}

/// Choose up to `n` demonstrations one at a time, re-retrieving after each
/// pick with the chosen demonstrations rendered into the query. Already
/// chosen ids and the query's own id never reappear.
#[allow(clippy::too_many_arguments)]
pub fn select_sequence(
    retriever: &dyn Retriever,
    lm: Option<&dyn LmClient>,
    corpus: &Corpus,
    query: &Query,
    n: usize,
    mode: SelectMode,
    rescore_m: usize,
    max_chars: usize,
) -> Result<SequenceSelection, SequentialError> {
    if mode == SelectMode::DeltaRescored {
        if lm.is_none() {
            return Err(SequentialError::LmRequired);
        }
        if query.gold_answer.is_none() {
            return Err(SequentialError::MissingGold {
                query_id: query.id.clone(),
            });
        }
    }
    let task = corpus.task();
    let mut ctx = DemoContext::new(max_chars);
    let mut exhausted = false;

    for _ in 0..n {
        let mut exclude: HashSet<String> = ctx.demos.iter().map(|d| d.id.clone()).collect();
        exclude.insert(query.id.clone());
        let step_query = context_query(&query.question, &ctx, task);

        let want = match mode {
            SelectMode::RetrieverOnly => 1,
            SelectMode::DeltaRescored => rescore_m.max(1),
        };
        let ranked = match retriever.retrieve(&step_query, want, &exclude) {
            Ok(ranked) => ranked,
            Err(RetrievalError::EmptyCorpusAfterExclusion) => {
                exhausted = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };

        let chosen_id = match mode {
            SelectMode::RetrieverOnly => ranked.entries()[0].0.clone(),
            SelectMode::DeltaRescored => {
                let lm = lm.expect("checked above");
                // delta calls can hit a real backend, so they run in
                // parallel; the LM client's own concurrency cap gates them
                let candidates: Vec<&str> = ranked.ids().collect();
                let deltas = parallel_map(&candidates, candidates.len(), |_, id| {
                    let demo = corpus.get(id).expect("retrieved id resolves");
                    delta(lm, &ctx, demo, query, task)
                });
                // candidates arrive in rank order, so a strictly-greater
                // comparison resolves ties by rank (and the ranked list
                // already breaks score ties by id)
                let mut best: Option<(f64, &str)> = None;
                for (id, scored) in candidates.iter().zip(deltas) {
                    let scored = scored?;
                    if best.is_none_or(|(d, _)| scored.delta > d) {
                        best = Some((scored.delta, id));
                    }
                }
                best.expect("ranked list is non-empty").1.to_string()
            }
        };
        let demo = corpus.get(&chosen_id).expect("chosen id resolves").clone();
        ctx.push(demo)?;
    }

    Ok(SequenceSelection {
        demos: ctx.demos,
        exhausted,
    })
}
