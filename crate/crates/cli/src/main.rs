//! `demo-retrieve`: demonstration retrieval for in-context learning.
//!
//! Subcommands: `index` (build/serialize a BM25 index), `retrieve` (ad-hoc
//! top-k lookup), `mine` (LM-scored training data), `train` (contrastive
//! embedder training), `eval` (exact-match ICL evaluation), and `analyze`
//! (demonstration-answer overlap tables).
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 LM
//! backend failure after retries.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use demo_retrieve_core::bm25::{Bm25Index, Bm25Params, Bm25Retriever};
use demo_retrieve_core::corpus::{load_queries, DemoOrder, IndexFields};
use demo_retrieve_core::dense::{DenseRetriever, Embedder, DEFAULT_DIM, DEFAULT_FEATURE_SPACE};
use demo_retrieve_core::harness::{
    evaluate, format_improvement, overlap_analysis, render_analysis_table, AnalysisRow,
    EvalConfig, EvalError, EvalReport, Strategy,
};
use demo_retrieve_core::lm::{HttpLm, HttpLmConfig, LmClient, LmError, MockLm, ENDPOINT_ENV};
use demo_retrieve_core::miner::{load_mined, mine_dataset, MineError, MiningConfig};
use demo_retrieve_core::sequential::{select_sequence, SelectMode, SequentialError};
use demo_retrieve_core::trainer::{evaluate_retrieval, train, TrainConfig};
use demo_retrieve_core::{Corpus, Query, Retriever, TaskSpec};

/// Data/validation failures exit 2; LM backend failures exit 3.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn backend(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

macro_rules! from_data_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::data(e.to_string())
            }
        }
    )*};
}

from_data_error!(
    demo_retrieve_core::corpus::CorpusError,
    demo_retrieve_core::ranking::RetrievalError,
    demo_retrieve_core::dense::CheckpointError,
    demo_retrieve_core::trainer::TrainError
);

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::BackendUnavailable { .. }
            | LmError::BackendMalformedReply { .. }
            | LmError::Timeout { .. } => CliError::backend(e.to_string()),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<MineError> for CliError {
    fn from(e: MineError) -> Self {
        match e {
            MineError::Lm(lm) => lm.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<SequentialError> for CliError {
    fn from(e: SequentialError) -> Self {
        match e {
            SequentialError::Lm(lm) => lm.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Lm(lm) => lm.into(),
            EvalError::FailureBudgetExceeded { .. } => CliError::backend(e.to_string()),
            EvalError::Sequential(seq) => seq.into(),
            other => CliError::data(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "demo-retrieve",
    about = "Query-specific demonstration retrieval for in-context learning",
    version
)]
struct Cli {
    /// Worker threads for LM-bound commands (mine, eval).
    #[arg(long, global = true, default_value_t = default_jobs())]
    jobs: usize,

    /// Print progress detail to stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldsArg {
    All,
    QuestionOnly,
}

impl From<FieldsArg> for IndexFields {
    fn from(v: FieldsArg) -> Self {
        match v {
            FieldsArg::All => IndexFields::All,
            FieldsArg::QuestionOnly => IndexFields::QuestionOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    RelevantLast,
    RelevantFirst,
    Corpus,
}

impl From<OrderArg> for DemoOrder {
    fn from(v: OrderArg) -> Self {
        match v {
            OrderArg::RelevantLast => DemoOrder::RelevantLast,
            OrderArg::RelevantFirst => DemoOrder::RelevantFirst,
            OrderArg::Corpus => DemoOrder::Corpus,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    RetrieverOnly,
    Delta,
}

impl From<ModeArg> for SelectMode {
    fn from(v: ModeArg) -> Self {
        match v {
            ModeArg::RetrieverOnly => SelectMode::RetrieverOnly,
            ModeArg::Delta => SelectMode::DeltaRescored,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrieverArg {
    Bm25,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    Fixed,
    Bm25,
    Dense,
    Sequential,
}

/// Flags shared by every corpus-consuming subcommand.
#[derive(Args)]
struct CorpusArgs {
    /// Corpus record file (JSON lines: id, question, answer, optional cot).
    #[arg(long)]
    corpus: PathBuf,
    /// Task config file (key = value lines).
    #[arg(long)]
    task: PathBuf,
    /// Which demonstration fields form retriever document text.
    #[arg(long, value_enum, default_value = "all")]
    index_fields: FieldsArg,
}

impl CorpusArgs {
    fn load(&self, verbose: u8) -> Result<(Corpus, IndexFields), CliError> {
        let task = TaskSpec::from_file(&self.task)?;
        let corpus = Corpus::load(&self.corpus, task)?;
        if verbose > 0 && corpus.ignored_cot() > 0 {
            eprintln!(
                "note: ignored cot on {} records (task has use_cot = false)",
                corpus.ignored_cot()
            );
        }
        Ok((corpus, self.index_fields.into()))
    }
}

/// LM backend selection shared by mine/eval/retrieve.
#[derive(Args)]
struct LmArgs {
    /// Use the deterministic mock LM.
    #[arg(long)]
    mock_lm: bool,
    /// HTTP LM endpoint (overrides DEMO_RETRIEVE_LM_ENDPOINT).
    #[arg(long)]
    lm_endpoint: Option<String>,
    /// Per-request deadline in seconds.
    #[arg(long, default_value_t = 30)]
    lm_timeout_secs: u64,
    /// In-flight request cap of the HTTP client.
    #[arg(long, default_value_t = 8)]
    lm_concurrency: usize,
}

impl LmArgs {
    fn build(&self, task: &TaskSpec) -> Result<Option<Box<dyn LmClient>>, CliError> {
        if self.mock_lm {
            return Ok(Some(Box::new(MockLm::new(task.clone()))));
        }
        let endpoint = self
            .lm_endpoint
            .clone()
            .or_else(|| std::env::var(ENDPOINT_ENV).ok());
        match endpoint {
            Some(endpoint) => {
                let mut cfg = HttpLmConfig::new(endpoint);
                cfg.timeout = std::time::Duration::from_secs(self.lm_timeout_secs);
                cfg.concurrency = self.lm_concurrency;
                Ok(Some(Box::new(HttpLm::new(cfg)?)))
            }
            None => Ok(None),
        }
    }

    fn require(&self, task: &TaskSpec) -> Result<Box<dyn LmClient>, CliError> {
        self.build(task)?.ok_or_else(|| CliError {
            code: 1,
            message: format!(
                "an LM backend is required: pass --mock-lm, --lm-endpoint, or set {ENDPOINT_ENV}"
            ),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index and serialize it.
    Index {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Output index file.
        #[arg(long)]
        out: PathBuf,
        /// Okapi k1 (term-frequency saturation).
        #[arg(long, default_value_t = 1.5)]
        k1: f64,
        /// Okapi b (length normalization).
        #[arg(long, default_value_t = 0.75)]
        b: f64,
    },
    /// Retrieve top-k demonstrations for one query.
    Retrieve {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Query text.
        #[arg(long)]
        query: String,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        /// Number of demonstrations.
        #[arg(long, default_value_t = 1)]
        shots: usize,
        /// Prebuilt BM25 index (otherwise built in memory).
        #[arg(long)]
        index: Option<PathBuf>,
        /// Trained embedder checkpoint for the dense strategy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequential selection mode.
        #[arg(long, value_enum, default_value = "retriever-only")]
        mode: ModeArg,
        /// Candidates rescored per sequential step in delta mode.
        #[arg(long, default_value_t = 10)]
        rescore_m: usize,
        /// Context-rendering budget for sequential retrieval queries.
        #[arg(long, default_value_t = 4000)]
        max_context_chars: usize,
        /// Base retriever for the sequential strategy.
        #[arg(long, value_enum, default_value = "bm25")]
        base: RetrieverArg,
        /// Gold answer (needed by --mode delta).
        #[arg(long)]
        gold: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        lm: LmArgs,
    },
    /// Mine LM-scored positives and hard negatives for retriever training.
    Mine {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Query file (JSON lines: id, question, gold_answer).
        #[arg(long)]
        queries: PathBuf,
        /// Output mined file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        candidate_k: usize,
        /// Positives kept per query.
        #[arg(long, default_value_t = 5)]
        positives: usize,
        /// Hard negatives kept per query.
        #[arg(long, default_value_t = 5)]
        negatives: usize,
        /// Queries with a smaller scored pool are skipped.
        #[arg(long, default_value_t = 10)]
        min_pool: usize,
        /// Candidate retriever.
        #[arg(long, value_enum, default_value = "bm25")]
        mine_retriever: RetrieverArg,
        /// Embedder checkpoint when mining with the dense retriever.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        lm: LmArgs,
    },
    /// Train the dense embedder on mined data.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Mined training file.
        #[arg(long)]
        mined: PathBuf,
        /// Output embedder checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        /// Train with in-batch negatives only.
        #[arg(long)]
        no_hard_negatives: bool,
        #[arg(long)]
        no_shuffle: bool,
        /// Fraction of mined examples held out for retrieval metrics.
        #[arg(long, default_value_t = 0.1)]
        eval_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Embedding dimension for fresh embedders.
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        /// Hashed feature space size for fresh embedders.
        #[arg(long, default_value_t = DEFAULT_FEATURE_SPACE)]
        feature_space: usize,
        /// Warm-start checkpoint (otherwise random init from --seed).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a retrieval strategy with exact-match accuracy.
    Eval {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Test query file (JSON lines with gold answers).
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 4)]
        shots: usize,
        /// Comma-separated demo ids for the fixed strategy.
        #[arg(long, value_delimiter = ',')]
        fixed_demos: Vec<String>,
        /// Embedder checkpoint for the dense strategy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "relevant-last")]
        demo_order: OrderArg,
        #[arg(long, default_value_t = 8000)]
        max_prompt_chars: usize,
        /// Sequential selection mode (sequential strategy only).
        #[arg(long, value_enum, default_value = "retriever-only")]
        mode: ModeArg,
        #[arg(long, default_value_t = 10)]
        rescore_m: usize,
        #[arg(long, default_value_t = 4000)]
        max_context_chars: usize,
        /// Base retriever for the sequential strategy.
        #[arg(long, value_enum, default_value = "bm25")]
        base: RetrieverArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report file to write (summary line + one line per example).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Baseline report for improvement arithmetic.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        lm: LmArgs,
    },
    /// Render the demonstration-answer overlap table from eval reports.
    Analyze {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Eval report files (repeatable).
        #[arg(long, required = true)]
        report: Vec<PathBuf>,
        /// Label count; the random baseline becomes 1/labels.
        #[arg(long)]
        labels: Option<usize>,
        /// Random baseline as a fraction in [0, 1] (overrides --labels).
        #[arg(long)]
        random_baseline: Option<f64>,
    },
}

fn load_bm25(
    corpus: &Corpus,
    fields: IndexFields,
    index_path: Option<&PathBuf>,
    k1: f64,
    b: f64,
) -> Result<Bm25Index, CliError> {
    match index_path {
        Some(path) => {
            let index = Bm25Index::read_from(path)?;
            if index.doc_count() != corpus.len() {
                return Err(CliError::data(format!(
                    "index covers {} docs but corpus has {}",
                    index.doc_count(),
                    corpus.len()
                )));
            }
            Ok(index)
        }
        None => Ok(Bm25Index::build(corpus, Bm25Params::new(k1, b)?, fields)?),
    }
}

fn load_embedder(
    checkpoint: Option<&PathBuf>,
    seed: u64,
    verbose: u8,
) -> Result<Embedder, CliError> {
    match checkpoint {
        Some(path) => Ok(Embedder::load(path)?),
        None => {
            if verbose > 0 {
                eprintln!(
                    "note: no --checkpoint given; using a random-init embedder (seed {seed})"
                );
            }
            Ok(Embedder::random(DEFAULT_DIM, DEFAULT_FEATURE_SPACE, seed))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Index { corpus, out, k1, b } => {
            let (corpus, fields) = corpus.load(cli.verbose)?;
            let index = Bm25Index::build(&corpus, Bm25Params::new(k1, b)?, fields)?;
            index.write_to(&out)?;
            println!(
                "indexed {} docs, {} terms, avg_doc_len {:.2} -> {}",
                index.doc_count(),
                index.term_count(),
                index.avg_doc_len(),
                out.display()
            );
            Ok(())
        }

        Command::Retrieve {
            corpus,
            query,
            strategy,
            shots,
            index,
            checkpoint,
            mode,
            rescore_m,
            max_context_chars,
            base,
            gold,
            seed,
            lm,
        } => {
            let (corpus, fields) = corpus.load(cli.verbose)?;
            let bm25_index;
            let embedder;
            let bm25_retriever;
            let dense_retriever;

            match strategy {
                StrategyArg::Bm25 => {
                    bm25_index = load_bm25(&corpus, fields, index.as_ref(), 1.5, 0.75)?;
                    bm25_retriever = Bm25Retriever::new(bm25_index, &corpus);
                    let ranked = bm25_retriever.retrieve(&query, shots, &HashSet::new())?;
                    for (rank, (id, score)) in ranked.entries().iter().enumerate() {
                        println!("{}\t{id}\t{score:.6}", rank + 1);
                    }
                    println!("retrieved {} demonstrations (strategy bm25)", ranked.len());
                }
                StrategyArg::Dense => {
                    embedder = load_embedder(checkpoint.as_ref(), seed, cli.verbose)?;
                    dense_retriever = DenseRetriever::build(&embedder, &corpus, fields);
                    let ranked = dense_retriever.retrieve(&query, shots, &HashSet::new())?;
                    for (rank, (id, score)) in ranked.entries().iter().enumerate() {
                        println!("{}\t{id}\t{score:.6}", rank + 1);
                    }
                    println!("retrieved {} demonstrations (strategy dense)", ranked.len());
                }
                StrategyArg::Sequential => {
                    let retriever: &dyn Retriever = match base {
                        RetrieverArg::Bm25 => {
                            bm25_index = load_bm25(&corpus, fields, index.as_ref(), 1.5, 0.75)?;
                            bm25_retriever = Bm25Retriever::new(bm25_index, &corpus);
                            &bm25_retriever
                        }
                        RetrieverArg::Dense => {
                            embedder = load_embedder(checkpoint.as_ref(), seed, cli.verbose)?;
                            dense_retriever = DenseRetriever::build(&embedder, &corpus, fields);
                            &dense_retriever
                        }
                    };
                    let lm_client = match SelectMode::from(mode) {
                        SelectMode::DeltaRescored => {
                            if gold.is_none() {
                                return Err(CliError {
                                    code: 1,
                                    message: "--mode delta scores the gold answer; pass --gold"
                                        .to_string(),
                                });
                            }
                            Some(lm.require(corpus.task())?)
                        }
                        SelectMode::RetrieverOnly => None,
                    };
                    let q = Query {
                        id: "__cli_query__".to_string(),
                        question: query.clone(),
                        gold_answer: gold,
                    };
                    let selection = select_sequence(
                        retriever,
                        lm_client.as_deref(),
                        &corpus,
                        &q,
                        shots,
                        mode.into(),
                        rescore_m,
                        max_context_chars,
                    )?;
                    for (rank, demo) in selection.demos.iter().enumerate() {
                        println!("{}\t{}", rank + 1, demo.id);
                    }
                    println!(
                        "retrieved {} demonstrations (strategy sequential{})",
                        selection.demos.len(),
                        if selection.exhausted {
                            ", corpus exhausted"
                        } else {
                            ""
                        }
                    );
                }
                StrategyArg::Random | StrategyArg::Fixed => {
                    return Err(CliError {
                        code: 1,
                        message: "retrieve supports bm25, dense, and sequential".to_string(),
                    });
                }
            }
            Ok(())
        }

        Command::Mine {
            corpus,
            queries,
            out,
            candidate_k,
            positives,
            negatives,
            min_pool,
            mine_retriever,
            checkpoint,
            seed,
            lm,
        } => {
            let (corpus, fields) = corpus.load(cli.verbose)?;
            let queries = load_queries(&queries)?;
            let lm_client = lm.require(corpus.task())?;
            let cfg = MiningConfig {
                candidate_k,
                positive_n: positives,
                negative_n: negatives,
                min_pool,
                retriever: match mine_retriever {
                    RetrieverArg::Bm25 => demo_retrieve_core::miner::RetrieverKind::Bm25,
                    RetrieverArg::Dense => demo_retrieve_core::miner::RetrieverKind::Dense,
                },
            };
            let embedder;
            let bm25_retriever;
            let dense_retriever;
            let retriever: &dyn Retriever = match mine_retriever {
                RetrieverArg::Bm25 => {
                    bm25_retriever = Bm25Retriever::build(&corpus, Bm25Params::default(), fields)?;
                    &bm25_retriever
                }
                RetrieverArg::Dense => {
                    embedder = load_embedder(checkpoint.as_ref(), seed, cli.verbose)?;
                    dense_retriever = DenseRetriever::build(&embedder, &corpus, fields);
                    &dense_retriever
                }
            };
            let summary = mine_dataset(
                retriever,
                lm_client.as_ref(),
                &corpus,
                &queries,
                &cfg,
                &out,
                cli.jobs,
            )?;
            println!(
                "mined {} skipped {} dropped {} -> {}",
                summary.mined,
                summary.skipped,
                summary.dropped,
                out.display()
            );
            Ok(())
        }

        Command::Train {
            corpus,
            mined,
            out,
            batch_size,
            epochs,
            lr,
            no_hard_negatives,
            no_shuffle,
            eval_fraction,
            seed,
            dim,
            feature_space,
            init,
        } => {
            let (corpus, fields) = corpus.load(cli.verbose)?;
            let examples = load_mined(&mined)?;
            let cfg = TrainConfig {
                batch_size,
                epochs,
                learning_rate: lr,
                hard_negatives: !no_hard_negatives,
                seed,
                shuffle: !no_shuffle,
                eval_fraction,
            };
            let init = match init {
                Some(path) => Embedder::load(&path)?,
                None => Embedder::random(dim, feature_space, seed),
            };
            let output = train(init, &examples, &corpus, &cfg, fields)?;
            for report in &output.history {
                println!(
                    "{{\"epoch\":{},\"loss\":{:.6},\"grad_norm\":{:.6},\"batch_accuracy\":{:.4}}}",
                    report.epoch, report.loss, report.grad_norm, report.batch_accuracy
                );
            }
            output.embedder.save(&out)?;
            let heldout_note = if output.heldout.is_empty() {
                String::from("no heldout split")
            } else {
                let metrics =
                    evaluate_retrieval(&output.embedder, &output.heldout, &corpus, fields)?;
                format!(
                    "heldout {} examples: recall@1 {:.3} recall@5 {:.3} mrr {:.3}",
                    output.heldout.len(),
                    metrics.recall_at_1,
                    metrics.recall_at_5,
                    metrics.mrr
                )
            };
            println!(
                "trained {} epochs on {} examples ({heldout_note}) -> {}",
                epochs,
                examples.len() - output.heldout.len(),
                out.display()
            );
            Ok(())
        }

        Command::Eval {
            corpus,
            test,
            strategy,
            shots,
            fixed_demos,
            checkpoint,
            demo_order,
            max_prompt_chars,
            mode,
            rescore_m,
            max_context_chars,
            base,
            seed,
            report,
            baseline,
            lm,
        } => {
            let (corpus, fields) = corpus.load(cli.verbose)?;
            let test_queries = load_queries(&test)?;
            let lm_client = lm.require(corpus.task())?;
            let cfg = EvalConfig {
                shots,
                seed,
                demo_order: demo_order.into(),
                max_prompt_chars,
                failure_budget: 0.05,
                jobs: cli.jobs,
            };

            let embedder;
            let bm25_retriever;
            let dense_retriever;
            let strategy = match strategy {
                StrategyArg::Random => Strategy::Random,
                StrategyArg::Fixed => Strategy::Fixed(fixed_demos),
                StrategyArg::Bm25 => {
                    bm25_retriever = Bm25Retriever::build(&corpus, Bm25Params::default(), fields)?;
                    Strategy::Retriever(&bm25_retriever)
                }
                StrategyArg::Dense => {
                    embedder = load_embedder(checkpoint.as_ref(), seed, cli.verbose)?;
                    dense_retriever = DenseRetriever::build(&embedder, &corpus, fields);
                    Strategy::Retriever(&dense_retriever)
                }
                StrategyArg::Sequential => {
                    let retriever: &dyn Retriever = match base {
                        RetrieverArg::Bm25 => {
                            bm25_retriever =
                                Bm25Retriever::build(&corpus, Bm25Params::default(), fields)?;
                            &bm25_retriever
                        }
                        RetrieverArg::Dense => {
                            embedder = load_embedder(checkpoint.as_ref(), seed, cli.verbose)?;
                            dense_retriever = DenseRetriever::build(&embedder, &corpus, fields);
                            &dense_retriever
                        }
                    };
                    Strategy::Sequential {
                        retriever,
                        mode: mode.into(),
                        rescore_m,
                        max_chars: max_context_chars,
                    }
                }
            };

            let mut result =
                evaluate(&corpus, &test_queries, &strategy, lm_client.as_ref(), &cfg)?;
            let baseline_report = baseline
                .as_ref()
                .map(EvalReport::read_from)
                .transpose()?;
            if let Some(baseline_report) = &baseline_report {
                result = result.with_improvement(baseline_report);
            }
            if let Some(path) = &report {
                result.write_to(path)?;
            }
            let accuracy_cell = match &baseline_report {
                Some(baseline_report) => format!(
                    "{} vs {}",
                    format_improvement(
                        result.exact_match_pct(),
                        baseline_report.exact_match_pct()
                    ),
                    baseline_report.strategy
                ),
                None => format!("{:.1}", result.exact_match_pct()),
            };
            println!(
                "task={} strategy={} shots={} n={} failures={} exact_match={}{}",
                result.task,
                result.strategy,
                result.shots,
                result.n_examples,
                result.failures,
                accuracy_cell,
                report
                    .map(|p| format!(" -> {}", p.display()))
                    .unwrap_or_default()
            );
            Ok(())
        }

        Command::Analyze {
            corpus,
            report,
            labels,
            random_baseline,
        } => {
            let (corpus, _) = corpus.load(cli.verbose)?;
            let baseline = match (random_baseline, labels) {
                (Some(fraction), _) => fraction,
                (None, Some(labels)) if labels > 0 => 1.0 / labels as f64,
                _ => {
                    return Err(CliError {
                        code: 1,
                        message: "pass --labels N or --random-baseline FRACTION".to_string(),
                    })
                }
            };
            // group reports by (task, strategy); shots == 1 fills the
            // one-shot column, anything larger the few-shot column
            let mut rows: Vec<AnalysisRow> = Vec::new();
            for path in &report {
                let loaded = EvalReport::read_from(path)?;
                let overlap = overlap_analysis(&loaded, &corpus, baseline)?;
                let slot = rows
                    .iter_mut()
                    .find(|r| r.task == overlap.task && r.retriever == overlap.strategy);
                let row = match slot {
                    Some(row) => row,
                    None => {
                        rows.push(AnalysisRow {
                            task: overlap.task.clone(),
                            random_baseline: baseline,
                            retriever: overlap.strategy.clone(),
                            one_shot: None,
                            few_shot: None,
                        });
                        rows.last_mut().unwrap()
                    }
                };
                if overlap.shots <= 1 {
                    row.one_shot = Some(overlap.overlap_ratio);
                } else {
                    row.few_shot = Some(overlap.overlap_ratio);
                }
            }
            print!("{}", render_analysis_table(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return ExitCode::SUCCESS;
                }
                _ => {
                    eprint!("{e}");
                    return ExitCode::from(1);
                }
            }
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
