//! End-to-end ICL evaluation: assemble k-shot prompts under a retrieval
//! strategy, query the LM, score exact match, and produce the analysis
//! tables (improvement over a baseline, demonstration-answer overlap with
//! majority voting).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    build_prompt, AnswerNormalizer, Corpus, DemoOrder, Demonstration, Query, TaskSpec,
};
use crate::lm::{GenRequest, LmClient, LmError};
use crate::par::parallel_map;
use crate::ranking::{RetrievalError, Retriever};
use crate::rng::Rng;
use crate::sequential::{select_sequence, SelectMode, SequentialError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test query {query_id:?} has no gold answer")]
    MissingGold { query_id: String },
    #[error("record references demo id {0:?} not present in the corpus")]
    UnresolvedDemoId(String),
    #[error("{failures} of {total} queries failed LM calls (budget {budget_pct:.1}%)")]
    FailureBudgetExceeded {
        failures: usize,
        total: usize,
        budget_pct: f64,
    },
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Sequential(#[from] SequentialError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("report io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed report line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Demonstration-selection strategy for one evaluation run.
pub enum Strategy<'a> {
    /// Seeded uniform sampling without replacement.
    Random,
    /// An explicit demo-id list applied to every query.
    Fixed(Vec<String>),
    /// Any plain retriever (BM25 or dense).
    Retriever(&'a dyn Retriever),
    /// Sequential selection over a base retriever.
    Sequential {
        retriever: &'a dyn Retriever,
        mode: SelectMode,
        rescore_m: usize,
        max_chars: usize,
    },
}

impl Strategy<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Fixed(_) => "fixed",
            Strategy::Retriever(r) => r.name(),
            Strategy::Sequential { .. } => "sequential",
        }
    }
}

/// Evaluation settings. `shots` = 0 runs zero-shot; `max_prompt_chars` drops
/// the least-adjacent demonstrations first when a prompt overflows.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub shots: usize,
    pub seed: u64,
    pub demo_order: DemoOrder,
    pub max_prompt_chars: usize,
    /// Abort when more than this fraction of queries fail LM calls.
    pub failure_budget: f64,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            shots: 4,
            seed: 0,
            demo_order: DemoOrder::default(),
            max_prompt_chars: 8000,
            failure_budget: 0.05,
            jobs: 1,
        }
    }
}

/// Outcome of one evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub query_id: String,
    pub demo_ids: Vec<String>,
    pub prediction: String,
    pub gold: String,
    pub matched: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

/// Accuracy gain over a named baseline, in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub baseline: String,
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReportSummary {
    task: String,
    strategy: String,
    shots: usize,
    n_examples: usize,
    matches: usize,
    failures: usize,
    exact_match: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    improvement_vs: Option<Improvement>,
}

/// Per-strategy evaluation result: exact-match accuracy plus one record per
/// query, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub strategy: String,
    pub shots: usize,
    pub n_examples: usize,
    pub matches: usize,
    pub failures: usize,
    pub exact_match: f64,
    pub improvement_vs: Option<Improvement>,
    pub per_example: Vec<ExampleRecord>,
}

impl EvalReport {
    /// `exact_match` as percentage points with one decimal.
    pub fn exact_match_pct(&self) -> f64 {
        self.exact_match * 100.0
    }

    /// Record the accuracy delta against a baseline run, in percentage
    /// points (rendered to one decimal by [`improvement_pp`]).
    pub fn with_improvement(mut self, baseline: &EvalReport) -> EvalReport {
        self.improvement_vs = Some(Improvement {
            baseline: baseline.strategy.clone(),
            delta_pp: self.exact_match_pct() - baseline.exact_match_pct(),
        });
        self
    }

    /// One summary line plus one line per example, as JSON lines.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let io_err = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let summary = ReportSummary {
            task: self.task.clone(),
            strategy: self.strategy.clone(),
            shots: self.shots,
            n_examples: self.n_examples,
            matches: self.matches,
            failures: self.failures,
            exact_match: self.exact_match,
            improvement_vs: self.improvement_vs.clone(),
        };
        let mut body = serde_json::to_string(&summary).expect("summary serializes");
        body.push('\n');
        for record in &self.per_example {
            body.push_str(&serde_json::to_string(record).expect("record serializes"));
            body.push('\n');
        }
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(body.as_bytes()).map_err(io_err)
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(EvalError::Malformed {
            line: 1,
            reason: "empty report".to_string(),
        })?;
        let summary: ReportSummary =
            serde_json::from_str(first).map_err(|e| EvalError::Malformed {
                line: 1,
                reason: e.to_string(),
            })?;
        let mut per_example = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let record: ExampleRecord =
                serde_json::from_str(line).map_err(|e| EvalError::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            per_example.push(record);
        }
        Ok(EvalReport {
            task: summary.task,
            strategy: summary.strategy,
            shots: summary.shots,
            n_examples: summary.n_examples,
            matches: summary.matches,
            failures: summary.failures,
            exact_match: summary.exact_match,
            improvement_vs: summary.improvement_vs,
            per_example,
        })
    }
}

/// Normalize an answer for comparison. `LowercaseTrim` lowercases, trims,
/// and collapses internal whitespace; `LowercaseStripPunctArticles`
/// additionally removes punctuation and the articles a/an/the.
pub fn normalize_answer(text: &str, normalizer: AnswerNormalizer) -> String {
    match normalizer {
        AnswerNormalizer::LowercaseTrim => text
            .to_lowercase()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" "),
        AnswerNormalizer::LowercaseStripPunctArticles => text
            .to_lowercase()
            .chars()
            .filter(|c| c.is_alphanumeric() || c.is_whitespace())
            .collect::<String>()
            .split_whitespace()
            .filter(|token| !matches!(*token, "a" | "an" | "the"))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

/// Byte equality of the normalized prediction and gold answer.
pub fn exact_match(prediction: &str, gold: &str, normalizer: AnswerNormalizer) -> bool {
    normalize_answer(prediction, normalizer) == normalize_answer(gold, normalizer)
}

/// Pull the answer out of a raw generation. Non-CoT tasks take the first
/// line; CoT tasks take the text after the last `answer_prefix`, falling
/// back to the last line when the prefix never appears.
pub fn extract_answer(raw: &str, task: &TaskSpec) -> String {
    if !task.use_cot {
        return raw.lines().next().unwrap_or("").trim().to_string();
    }
    match raw.rfind(&task.answer_prefix) {
        Some(at) => raw[at + task.answer_prefix.len()..].trim().to_string(),
        None => raw.lines().last().unwrap_or("").trim().to_string(),
    }
}

/// `"+1.4"`-style improvement in percentage points, one decimal, given both
/// accuracies as percentages.
pub fn improvement_pp(accuracy_pct: f64, baseline_pct: f64) -> String {
    format!("{:+.1}", accuracy_pct - baseline_pct)
}

/// `"39.2(+1.4)"`-style cell: accuracy plus its improvement over a baseline.
pub fn format_improvement(accuracy_pct: f64, baseline_pct: f64) -> String {
    format!(
        "{:.1}({})",
        accuracy_pct,
        improvement_pp(accuracy_pct, baseline_pct)
    )
}

fn eligible_positions(corpus: &Corpus, query: &Query) -> Vec<usize> {
    corpus
        .demos()
        .iter()
        .enumerate()
        .filter(|(_, d)| d.id != query.id && d.question != query.question)
        .map(|(pos, _)| pos)
        .collect()
}

fn select_demos<'c>(
    strategy: &Strategy<'_>,
    corpus: &'c Corpus,
    query: &Query,
    query_index: usize,
    lm: &dyn LmClient,
    cfg: &EvalConfig,
) -> Result<Vec<&'c Demonstration>, EvalError> {
    let mut exclude: HashSet<String> = HashSet::new();
    exclude.insert(query.id.clone());
    exclude.extend(corpus.ids_with_question(&query.question));

    let demos: Vec<&Demonstration> = match strategy {
        Strategy::Random => {
            let eligible = eligible_positions(corpus, query);
            let mut rng = Rng::from_seed_pair(cfg.seed, query_index as u64);
            rng.sample_indices(eligible.len(), cfg.shots)
                .into_iter()
                .map(|i| &corpus.demos()[eligible[i]])
                .collect()
        }
        Strategy::Fixed(ids) => {
            let mut demos = Vec::new();
            for id in ids.iter().take(cfg.shots) {
                demos.push(
                    corpus
                        .get(id)
                        .ok_or_else(|| EvalError::UnresolvedDemoId(id.clone()))?,
                );
            }
            demos
        }
        Strategy::Retriever(retriever) => {
            if cfg.shots == 0 {
                Vec::new()
            } else {
                let ranked = retriever.retrieve(&query.question, cfg.shots, &exclude)?;
                ranked
                    .ids()
                    .map(|id| corpus.get(id).expect("retrieved id resolves"))
                    .collect()
            }
        }
        Strategy::Sequential {
            retriever,
            mode,
            rescore_m,
            max_chars,
        } => {
            if cfg.shots == 0 {
                Vec::new()
            } else {
                let selection = select_sequence(
                    *retriever, Some(lm), corpus, query, cfg.shots, *mode, *rescore_m, *max_chars,
                )?;
                selection
                    .demos
                    .into_iter()
                    .map(|d| corpus.get(&d.id).expect("selected id resolves"))
                    .collect()
            }
        }
    };
    Ok(demos)
}

fn order_demos<'c>(
    mut demos: Vec<&'c Demonstration>,
    order: DemoOrder,
    corpus: &Corpus,
) -> Vec<&'c Demonstration> {
    match order {
        // strategies produce most-relevant-first lists; the default puts the
        // best demonstration adjacent to the query block
        DemoOrder::RelevantLast => {
            demos.reverse();
            demos
        }
        DemoOrder::RelevantFirst => demos,
        DemoOrder::Corpus => {
            demos.sort_by_key(|d| corpus.position(&d.id).unwrap_or(usize::MAX));
            demos
        }
    }
}

/// Evaluate one strategy over the test queries: select demonstrations per
/// query, assemble the prompt, generate with temperature 0, extract the
/// answer, and score exact match. Deterministic given the seed and a
/// deterministic LM.
pub fn evaluate(
    corpus: &Corpus,
    test_queries: &[Query],
    strategy: &Strategy<'_>,
    lm: &dyn LmClient,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    if let Strategy::Fixed(ids) = strategy {
        if ids.is_empty() {
            return Err(EvalError::InvalidConfig(
                "fixed strategy requires an explicit demo-id list".to_string(),
            ));
        }
    }
    let task = corpus.task();

    let results = parallel_map(test_queries, cfg.jobs, |query_index, query| {
        let gold = query
            .gold_answer
            .as_deref()
            .ok_or_else(|| EvalError::MissingGold {
                query_id: query.id.clone(),
            })?;

        let selected = select_demos(strategy, corpus, query, query_index, lm, cfg)?;
        let mut ordered = order_demos(selected, cfg.demo_order, corpus);

        let mut prompt = build_prompt(&ordered, &query.question, task);
        while prompt.len() > cfg.max_prompt_chars && !ordered.is_empty() {
            ordered.remove(0);
            prompt = build_prompt(&ordered, &query.question, task);
        }
        let demo_ids: Vec<String> = ordered.iter().map(|d| d.id.clone()).collect();

        let request = GenRequest::new(prompt, task.max_decode_len)?;
        match lm.generate(&request) {
            Ok(raw) => {
                let prediction = extract_answer(&raw, task);
                let matched = exact_match(&prediction, gold, task.answer_normalizer);
                Ok(ExampleRecord {
                    query_id: query.id.clone(),
                    demo_ids,
                    prediction,
                    gold: gold.to_string(),
                    matched,
                    failed: false,
                })
            }
            // an LM failure consumes failure budget instead of aborting
            Err(LmError::BackendUnavailable { .. })
            | Err(LmError::Timeout { .. })
            | Err(LmError::BackendMalformedReply { .. }) => Ok(ExampleRecord {
                query_id: query.id.clone(),
                demo_ids,
                prediction: String::new(),
                gold: gold.to_string(),
                matched: false,
                failed: true,
            }),
            Err(other) => Err(EvalError::Lm(other)),
        }
    });

    let mut per_example = Vec::with_capacity(results.len());
    for result in results {
        per_example.push(result?);
    }
    let n_examples = per_example.len();
    let failures = per_example.iter().filter(|r| r.failed).count();
    if n_examples > 0 && failures as f64 > cfg.failure_budget * n_examples as f64 {
        return Err(EvalError::FailureBudgetExceeded {
            failures,
            total: n_examples,
            budget_pct: cfg.failure_budget * 100.0,
        });
    }
    let matches = per_example.iter().filter(|r| r.matched).count();
    Ok(EvalReport {
        task: task.name.clone(),
        strategy: strategy.label().to_string(),
        shots: cfg.shots,
        n_examples,
        matches,
        failures,
        exact_match: if n_examples == 0 {
            0.0
        } else {
            matches as f64 / n_examples as f64
        },
        improvement_vs: None,
        per_example,
    })
}

/// Demonstration-answer overlap for one report: the fraction of queries
/// whose demonstration answers (majority-voted in few-shot) equal the gold
/// answer after normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub task: String,
    pub strategy: String,
    pub shots: usize,
    pub n_examples: usize,
    pub overlap_ratio: f64,
    /// Probability of the correct label under uniform choice, supplied by
    /// the caller (e.g. 1/#labels).
    pub random_baseline: f64,
    /// Queries whose vote matched the gold, for manual inspection.
    pub overlapping_query_ids: Vec<String>,
}

/// Majority vote over normalized answers; ties go to the lexicographically
/// smallest answer.
fn majority_vote(answers: &[String]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for answer in answers {
        *counts.entry(answer.as_str()).or_insert(0) += 1;
    }
    // strictly-greater keeps the first-seen (smallest) key among tied counts
    let mut best: Option<(&str, usize)> = None;
    for (answer, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((answer, count));
        }
    }
    best.map(|(answer, _)| answer.to_string())
}

pub fn overlap_analysis(
    report: &EvalReport,
    corpus: &Corpus,
    random_baseline: f64,
) -> Result<OverlapReport, EvalError> {
    let normalizer = corpus.task().answer_normalizer;
    let mut overlapping = Vec::new();
    for record in &report.per_example {
        let mut answers = Vec::with_capacity(record.demo_ids.len());
        for id in &record.demo_ids {
            let demo = corpus
                .get(id)
                .ok_or_else(|| EvalError::UnresolvedDemoId(id.clone()))?;
            answers.push(normalize_answer(&demo.answer, normalizer));
        }
        let vote = majority_vote(&answers);
        let gold = normalize_answer(&record.gold, normalizer);
        if vote.as_deref() == Some(gold.as_str()) {
            overlapping.push(record.query_id.clone());
        }
    }
    let n = report.per_example.len();
    Ok(OverlapReport {
        task: report.task.clone(),
        strategy: report.strategy.clone(),
        shots: report.shots,
        n_examples: n,
        overlap_ratio: if n == 0 {
            0.0
        } else {
            overlapping.len() as f64 / n as f64
        },
        random_baseline,
        overlapping_query_ids: overlapping,
    })
}

/// One row of the overlap analysis table.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRow {
    pub task: String,
    pub random_baseline: f64,
    pub retriever: String,
    pub one_shot: Option<f64>,
    pub few_shot: Option<f64>,
}

/// Render overlap rows as an aligned text table with columns Task, Random,
/// Retriever, One-shot, Few-shot (ratios as percentages, two decimals).
pub fn render_analysis_table(rows: &[AnalysisRow]) -> String {
    let headers = ["Task", "Random", "Retriever", "One-shot", "Few-shot"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|row| {
            let pct = |v: Option<f64>| match v {
                Some(v) => format!("{:.2}", v * 100.0),
                None => "-".to_string(),
            };
            [
                row.task.clone(),
                format!("{:.2}", row.random_baseline * 100.0),
                row.retriever.clone(),
                pct(row.one_shot),
                pct(row.few_shot),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row.iter()) {
            *w = (*w).max(cell.len());
        }
    }
    let render_row = |cols: &[String]| -> String {
        cols.iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = String::new();
    out.push_str(&render_row(
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
    ));
    out.push('\n');
    for row in &cells {
        out.push_str(&render_row(row));
        out.push('\n');
    }
    out
}
