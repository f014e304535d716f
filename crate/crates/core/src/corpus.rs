//! Data model for demonstrations, tasks, and prompt text: ingestion from
//! record files, linearization of single demonstrations, and few-shot prompt
//! assembly.
//!
//! A corpus file is UTF-8 JSON-lines: one flat object per line with string
//! fields `id`, `question`, `answer`, and optional `cot`. A task config is a
//! `key = value` text file (see [`TaskSpec::from_file`]).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unreadable file {path}: {source}")]
    UnreadableFile {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate id {id:?}")]
    DuplicateId { id: String },
    #[error("missing cot for demonstration {id:?} (task requires chain-of-thought)")]
    MissingCot { id: String },
    #[error("invalid task config: {reason}")]
    InvalidTask { reason: String },
    #[error("failed to write {path}: {source}")]
    WriteFailed {
        path: String,
        source: std::io::Error,
    },
}

/// One retrievable training example: question, optional chain-of-thought,
/// and answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
    pub answer: String,
}

/// A test or training query: the input text plus, when known, the gold answer
/// (required for mining and evaluation, absent for pure inference).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

/// How predictions and gold answers are normalized before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerNormalizer {
    LowercaseTrim,
    LowercaseStripPunctArticles,
}

/// Presentation order of demonstrations inside a prompt.
///
/// Retrieval strategies produce a most-relevant-first list; `RelevantLast`
/// (the default) reverses it so the best demonstration sits adjacent to the
/// query block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoOrder {
    #[default]
    RelevantLast,
    RelevantFirst,
    Corpus,
}

/// Which demonstration fields form the document text seen by the retrievers
/// (both the BM25 index and the dense embedder use the same policy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexFields {
    /// question + cot (when present) + answer
    #[default]
    All,
    QuestionOnly,
}

impl IndexFields {
    /// Render the document text for one demonstration.
    pub fn doc_text(&self, demo: &Demonstration) -> String {
        match self {
            IndexFields::QuestionOnly => demo.question.clone(),
            IndexFields::All => match &demo.cot {
                Some(cot) => format!("{} {} {}", demo.question, cot, demo.answer),
                None => format!("{} {}", demo.question, demo.answer),
            },
        }
    }
}

/// Per-task formatting rules: prefixes, separator, decoding budget, and the
/// answer normalizer used by exact match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub use_cot: bool,
    pub question_prefix: String,
    pub answer_prefix: String,
    pub cot_prefix: String,
    pub demo_separator: String,
    pub max_decode_len: usize,
    pub answer_normalizer: AnswerNormalizer,
}

impl TaskSpec {
    /// Defaults depend on whether the task uses chain-of-thought:
    /// `"Q: "`/`"A: "` prefixes and a 256-token decode budget with CoT,
    /// `"question: "`/`"answer: "` and 10 tokens without.
    pub fn new(name: impl Into<String>, use_cot: bool) -> Self {
        if use_cot {
            TaskSpec {
                name: name.into(),
                use_cot: true,
                question_prefix: "Q: ".to_string(),
                answer_prefix: "A: ".to_string(),
                cot_prefix: "Step-by-step reasoning process: ".to_string(),
                demo_separator: "\n\n".to_string(),
                max_decode_len: 256,
                answer_normalizer: AnswerNormalizer::LowercaseTrim,
            }
        } else {
            TaskSpec {
                name: name.into(),
                use_cot: false,
                question_prefix: "question: ".to_string(),
                answer_prefix: "answer: ".to_string(),
                cot_prefix: "Step-by-step reasoning process: ".to_string(),
                demo_separator: "\n\n".to_string(),
                max_decode_len: 10,
                answer_normalizer: AnswerNormalizer::LowercaseTrim,
            }
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.question_prefix.is_empty()
            || self.answer_prefix.is_empty()
            || self.cot_prefix.is_empty()
        {
            return Err(CorpusError::InvalidTask {
                reason: "prefixes must be non-empty".to_string(),
            });
        }
        if self.max_decode_len == 0 {
            return Err(CorpusError::InvalidTask {
                reason: "max_decode_len must be >= 1".to_string(),
            });
        }
        Ok(())
    }

    /// Parse a task config file of `key = value` lines. Blank lines and lines
    /// starting with `#` are skipped. Values may be double-quoted to preserve
    /// leading/trailing spaces and to use `\n`, `\t`, `\"`, `\\` escapes.
    ///
    /// Recognized keys: `name`, `use_cot`, `question_prefix`, `answer_prefix`,
    /// `cot_prefix`, `demo_separator`, `max_decode_len`, `answer_normalizer`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::UnreadableFile {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_config_str(&text)
    }

    pub fn from_config_str(text: &str) -> Result<Self, CorpusError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CorpusError::InvalidTask {
                reason: format!("line {}: expected `key = value`", i + 1),
            })?;
            let key = key.trim().to_string();
            let value = unquote(value.trim()).map_err(|reason| CorpusError::InvalidTask {
                reason: format!("line {}: {reason}", i + 1),
            })?;
            pairs.push((key, value));
        }

        // use_cot determines the defaults for everything else, so resolve it
        // before applying overrides.
        let use_cot = match pairs.iter().find(|(k, _)| k == "use_cot") {
            Some((_, v)) => parse_bool(v).map_err(|reason| CorpusError::InvalidTask { reason })?,
            None => false,
        };
        let mut task = TaskSpec::new("unnamed", use_cot);

        for (key, value) in pairs {
            match key.as_str() {
                "name" => task.name = value,
                "use_cot" => {} // already applied
                "question_prefix" => task.question_prefix = value,
                "answer_prefix" => task.answer_prefix = value,
                "cot_prefix" => task.cot_prefix = value,
                "demo_separator" => task.demo_separator = value,
                "max_decode_len" => {
                    task.max_decode_len =
                        value.parse().map_err(|_| CorpusError::InvalidTask {
                            reason: format!("max_decode_len: not a positive integer: {value:?}"),
                        })?
                }
                "answer_normalizer" => {
                    task.answer_normalizer = match value.as_str() {
                        "lowercase_trim" => AnswerNormalizer::LowercaseTrim,
                        "lowercase_strip_punct_articles" => {
                            AnswerNormalizer::LowercaseStripPunctArticles
                        }
                        other => {
                            return Err(CorpusError::InvalidTask {
                                reason: format!("unknown answer_normalizer {other:?}"),
                            })
                        }
                    }
                }
                other => {
                    return Err(CorpusError::InvalidTask {
                        reason: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        task.validate()?;
        Ok(task)
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true/false, got {other:?}")),
    }
}

fn unquote(v: &str) -> Result<String, String> {
    if !(v.len() >= 2 && v.starts_with('"') && v.ends_with('"')) {
        return Ok(v.to_string());
    }
    let inner = &v[1..v.len() - 1];
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('"') => out.push('"'),
            Some('\\') => out.push('\\'),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling escape".to_string()),
        }
    }
    Ok(out)
}

/// A task's demonstration pool: ordered demonstrations plus an id lookup.
/// Immutable after load; safe to share across worker threads.
#[derive(Debug, Clone)]
pub struct Corpus {
    task: TaskSpec,
    demos: Vec<Demonstration>,
    index_by_id: HashMap<String, usize>,
    ignored_cot: usize,
}

impl Corpus {
    /// Load a JSON-lines record file. Records keep file order. Errors:
    /// unreadable file, malformed record (naming the line), duplicate id,
    /// and missing `cot` when the task requires it. A `cot` present on a
    /// non-CoT task is dropped and counted in [`Corpus::ignored_cot`].
    pub fn load(path: impl AsRef<Path>, task: TaskSpec) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::UnreadableFile {
            path: path.display().to_string(),
            source,
        })?;
        task.validate()?;

        let mut demos = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let demo: Demonstration =
                serde_json::from_str(raw).map_err(|e| CorpusError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            if demo.id.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: line_no,
                    reason: "empty id".to_string(),
                });
            }
            if demo.question.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: line_no,
                    reason: "empty question".to_string(),
                });
            }
            if demo.answer.trim().is_empty() {
                return Err(CorpusError::MalformedRecord {
                    line: line_no,
                    reason: "empty answer".to_string(),
                });
            }
            if task.use_cot {
                match &demo.cot {
                    Some(cot) if !cot.trim().is_empty() => {}
                    _ => return Err(CorpusError::MissingCot { id: demo.id }),
                }
            }
            demos.push(demo);
        }
        Self::from_demos(task, demos)
    }

    /// Build a corpus from in-memory demonstrations, enforcing the same
    /// invariants as [`Corpus::load`] (including dropping `cot` fields when
    /// the task does not use chain-of-thought).
    pub fn from_demos(task: TaskSpec, mut demos: Vec<Demonstration>) -> Result<Self, CorpusError> {
        task.validate()?;
        let mut ignored_cot = 0usize;
        let mut index_by_id = HashMap::with_capacity(demos.len());
        for (pos, demo) in demos.iter_mut().enumerate() {
            if task.use_cot {
                if demo.cot.is_none() {
                    return Err(CorpusError::MissingCot {
                        id: demo.id.clone(),
                    });
                }
            } else if demo.cot.take().is_some() {
                ignored_cot += 1;
            }
            if index_by_id.insert(demo.id.clone(), pos).is_some() {
                return Err(CorpusError::DuplicateId {
                    id: demo.id.clone(),
                });
            }
        }
        Ok(Corpus {
            task,
            demos,
            index_by_id,
            ignored_cot,
        })
    }

    /// Write the pool back to the record format; reloading the written file
    /// yields an identical corpus.
    pub fn write_records(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let mut out = String::new();
        for demo in &self.demos {
            out.push_str(&serde_json::to_string(demo).expect("demonstration serializes"));
            out.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|source| CorpusError::WriteFailed {
            path: path.display().to_string(),
            source,
        })?;
        file.write_all(out.as_bytes())
            .map_err(|source| CorpusError::WriteFailed {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.index_by_id.get(id).map(|&pos| &self.demos[pos])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index_by_id.get(id).copied()
    }

    /// Count of `cot` fields dropped at load because the task has
    /// `use_cot = false`.
    pub fn ignored_cot(&self) -> usize {
        self.ignored_cot
    }

    /// Ids of demonstrations whose question is byte-equal to `question`.
    /// Used to keep a query's own (possibly re-labeled) duplicate out of its
    /// candidate pool.
    pub fn ids_with_question(&self, question: &str) -> Vec<String> {
        self.demos
            .iter()
            .filter(|d| d.question == question)
            .map(|d| d.id.clone())
            .collect()
    }
}

/// Render one demonstration as prompt text.
///
/// Without CoT: `question_prefix + question + "\n" + answer_prefix + answer`.
/// With CoT the reasoning block sits between question and answer.
pub fn linearize(demo: &Demonstration, task: &TaskSpec) -> String {
    match (&demo.cot, task.use_cot) {
        (Some(cot), true) => format!(
            "{}{}\n{}{}\n{}{}",
            task.question_prefix,
            demo.question,
            task.cot_prefix,
            cot,
            task.answer_prefix,
            demo.answer
        ),
        _ => format!(
            "{}{}\n{}{}",
            task.question_prefix, demo.question, task.answer_prefix, demo.answer
        ),
    }
}

/// Assemble a k-shot prompt: each demonstration linearized, joined with the
/// task separator, followed by the query block whose `answer_prefix` is left
/// open for the model to complete. Demonstrations appear in the given order.
pub fn build_prompt(demos: &[&Demonstration], query_question: &str, task: &TaskSpec) -> String {
    let mut blocks: Vec<String> = demos.iter().map(|d| linearize(d, task)).collect();
    blocks.push(format!(
        "{}{}\n{}",
        task.question_prefix, query_question, task.answer_prefix
    ));
    blocks.join(&task.demo_separator)
}

/// Load queries from a JSON-lines file with fields `id`, `question`, and
/// optional `gold_answer`.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::UnreadableFile {
        path: path.display().to_string(),
        source,
    })?;
    let mut queries = Vec::new();
    let mut seen = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let query: Query =
            serde_json::from_str(raw).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if query.question.trim().is_empty() {
            return Err(CorpusError::MalformedRecord {
                line: line_no,
                reason: "empty question".to_string(),
            });
        }
        if seen.insert(query.id.clone(), line_no).is_some() {
            return Err(CorpusError::DuplicateId { id: query.id });
        }
        queries.push(query);
    }
    Ok(queries)
}

impl fmt::Display for DemoOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DemoOrder::RelevantLast => write!(f, "relevant-last"),
            DemoOrder::RelevantFirst => write!(f, "relevant-first"),
            DemoOrder::Corpus => write!(f, "corpus"),
        }
    }
}
