//! `guiderag` command line: pipeline stages and the HTTP server.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use guiderag_core::answer::AnswerMode;
use guiderag_core::benchmark::{generate_dataset, save_dataset};
use guiderag_core::corpus::{
    chunk_by_title, clean_elements, enrich_tables, load_chunks, load_elements, save_chunks, save_elements, Chunk,
    DocumentElement, DEFAULT_SEPARATOR,
};
use guiderag_core::engine::{Engine, Outcome};
use guiderag_core::eval::{build_report, load_records};
use guiderag_core::index::{collection_dir, embed_chunks, open_collection, persist_collection};
use guiderag_core::retrieve::HybridIndex;
use guiderag_core::{Bm25Params, VectorCollection};
use serde_json::json;

use crate::api::{self, AppState};
use crate::config::Config;
use crate::store::Store;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_PIPELINE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files.
    Validation(String),
    /// A pipeline stage failed.
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Pipeline(_) => EXIT_PIPELINE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Pipeline(m) => f.write_str(m),
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn pipeline(e: impl std::fmt::Display) -> CliError {
    CliError::Pipeline(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "guiderag", version, about = "Question answering over vaccination guidelines")]
pub struct Cli {
    /// Configuration file.
    #[arg(long, short, global = true, default_value = "guiderag.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Simple,
    Enhanced,
    Agentic,
}

impl From<ModeArg> for AnswerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simple => AnswerMode::Simple,
            ModeArg::Enhanced => AnswerMode::Enhanced,
            ModeArg::Agentic => AnswerMode::Agentic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and clean parsed element files, writing the cleaned elements.
    Ingest {
        /// Element files; defaults to `storage.elements`.
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Clean, chunk by title and describe tables.
    Chunk {
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Skip language-model table descriptions.
        #[arg(long)]
        no_enrich: bool,
    },
    /// Embed the chunks and persist the vector collection.
    Index {
        #[arg(long)]
        chunks: Option<PathBuf>,
    },
    /// Answer one question.
    Ask {
        #[arg(long, value_enum, default_value = "enhanced")]
        mode: ModeArg,
        #[arg(long)]
        question: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Generate a question-answer benchmark from the chunks.
    BenchGen {
        #[arg(long)]
        output: PathBuf,
        /// Use only the first N chunks.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compute the evaluation report from JSON-lines records.
    Eval {
        #[arg(long)]
        records: PathBuf,
        /// JSON report; the text tables go next to it with a `.txt` extension.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let config = Config::load(&cli.config).map_err(validation)?;
    match cli.command {
        Command::Ingest { input, output } => ingest(&config, input, output),
        Command::Chunk { input, output, no_enrich } => chunk(&config, input, output, no_enrich),
        Command::Index { chunks } => index(&config, chunks),
        Command::Ask { mode, question, format } => ask(&config, mode, &question, format),
        Command::BenchGen { output, limit } => bench_gen(&config, &output, limit),
        Command::Eval { records, output } => eval(&records, output),
        Command::Serve { bind } => serve(&config, bind),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(pipeline)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Pipeline(format!("cannot write {}: {e}", path.display())))
}

fn inputs(config: &Config, input: Vec<PathBuf>) -> Result<Vec<PathBuf>, CliError> {
    let inputs = if input.is_empty() { config.storage.elements.clone() } else { input };
    if inputs.is_empty() {
        return Err(CliError::Validation("no element files given (use --input or storage.elements)".into()));
    }
    Ok(inputs)
}

/// Cleaned elements per input file, in input order.
fn load_clean(config: &Config, inputs: &[PathBuf]) -> Result<Vec<Vec<DocumentElement>>, CliError> {
    inputs
        .iter()
        .map(|path| {
            let elements = load_elements(open(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            clean_elements(elements, &config.cleaning).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn ingest(config: &Config, input: Vec<PathBuf>, output: Option<PathBuf>) -> Result<(), CliError> {
    let documents = load_clean(config, &inputs(config, input)?)?;
    let elements: Vec<DocumentElement> = documents.into_iter().flatten().collect();
    let output = output.unwrap_or_else(|| config.storage.cleaned.clone());
    let mut sink = create(&output)?;
    save_elements(&elements, &mut sink).map_err(pipeline)?;
    sink.flush().map_err(pipeline)?;
    println!("{} elements written to {}", elements.len(), output.display());
    Ok(())
}

fn chunk(config: &Config, input: Vec<PathBuf>, output: Option<PathBuf>, no_enrich: bool) -> Result<(), CliError> {
    let documents = load_clean(config, &inputs(config, input)?)?;
    let mut chunks: Vec<Chunk> = documents.iter().flat_map(|d| chunk_by_title(d, DEFAULT_SEPARATOR)).collect();
    if !no_enrich {
        let llm = config.language_provider().map_err(validation)?;
        for e in enrich_tables(&mut chunks, llm.as_ref()) {
            eprintln!("warning: {e}");
        }
    }
    let output = output.unwrap_or_else(|| config.storage.chunks.clone());
    let mut sink = create(&output)?;
    save_chunks(&chunks, &mut sink).map_err(pipeline)?;
    sink.flush().map_err(pipeline)?;
    println!("{} chunks written to {}", chunks.len(), output.display());
    Ok(())
}

fn read_chunks(path: &Path) -> Result<Vec<Chunk>, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("chunk file {} not found; run `guiderag chunk` first", path.display())));
    }
    load_chunks(open(path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn index(config: &Config, chunks: Option<PathBuf>) -> Result<(), CliError> {
    let chunks = read_chunks(&chunks.unwrap_or_else(|| config.storage.chunks.clone()))?;
    let embedder = config.embedding_provider();
    let report = embed_chunks::<f32>(&chunks, embedder.as_ref()).map_err(pipeline)?;
    for id in &report.skipped {
        eprintln!("warning: chunk {id} has no text and was not embedded");
    }
    let collection = VectorCollection::from_records(&config.storage.collection, embedder.dimension(), report.records).map_err(pipeline)?;
    let dir = persist_collection(&collection, &config.storage.index_dir).map_err(pipeline)?;
    println!("{} vectors written to {}", collection.len(), dir.display());
    Ok(())
}

pub fn load_engine(config: &Config) -> Result<Engine, CliError> {
    let chunks = read_chunks(&config.storage.chunks)?;
    let dir = collection_dir(&config.storage.index_dir, &config.storage.collection);
    if !dir.exists() {
        return Err(CliError::Validation(format!("index {} not found; run `guiderag index` first", dir.display())));
    }
    let collection: VectorCollection = open_collection(&dir).map_err(validation)?;
    let index = HybridIndex::new(chunks, collection, Bm25Params::default(), config.embedding_provider()).map_err(validation)?;
    Engine::new(index, config.language_provider().map_err(validation)?, config.engine_config()).map_err(validation)
}

fn print_outcome(outcome: &Outcome, format: Format) -> Result<(), CliError> {
    let answer = &outcome.answer;
    let mut out = std::io::stdout().lock();
    match format {
        Format::Json => {
            let value = json!({
                "answer": answer,
                "trace": outcome.trace,
                "queries": outcome.queries,
                "degraded": outcome.degraded,
            });
            writeln!(out, "{}", serde_json::to_string_pretty(&value).map_err(pipeline)?).map_err(pipeline)?;
        }
        Format::Text => {
            writeln!(out, "{}\n", answer.text).map_err(pipeline)?;
            if !answer.citations.is_empty() {
                writeln!(out, "Citations:").map_err(pipeline)?;
            }
            for (i, c) in answer.citations.iter().enumerate() {
                let page = c.page.map(|p| format!(", page {p}")).unwrap_or_default();
                let excerpt = c.excerpt.split_whitespace().collect::<Vec<_>>().join(" ");
                writeln!(out, "[{}] {}{page} ({})\n    {excerpt}", i + 1, c.filename, c.chunk_id).map_err(pipeline)?;
            }
            if let Some(reason) = &outcome.degraded {
                writeln!(out, "Note: {reason}").map_err(pipeline)?;
            }
            writeln!(out, "Latency: {:.2} s", answer.latency_s).map_err(pipeline)?;
        }
    }
    Ok(())
}

fn ask(config: &Config, mode: ModeArg, question: &str, format: Format) -> Result<(), CliError> {
    if question.trim().is_empty() {
        return Err(CliError::Validation("--question is empty".into()));
    }
    let engine = load_engine(config)?;
    let outcome = engine.ask(question, mode.into()).map_err(pipeline)?;
    print_outcome(&outcome, format)
}

fn bench_gen(config: &Config, output: &Path, limit: Option<usize>) -> Result<(), CliError> {
    let mut chunks = read_chunks(&config.storage.chunks)?;
    if let Some(n) = limit {
        chunks.truncate(n);
    }
    let llm = config.language_provider().map_err(validation)?;
    let (dataset, report) = generate_dataset(&chunks, llm.as_ref(), &config.benchmark).map_err(pipeline)?;
    for entry in &report.entries {
        eprintln!("warning: chunk {}: {}", entry.chunk_id, entry.message);
    }
    let mut sink = create(output)?;
    save_dataset(&dataset, &mut sink).map_err(pipeline)?;
    sink.flush().map_err(pipeline)?;
    println!("{} items written to {}", dataset.items.len(), output.display());
    Ok(())
}

fn eval(records: &Path, output: Option<PathBuf>) -> Result<(), CliError> {
    let records = load_records(open(records)?).map_err(validation)?;
    let report = build_report(&records).map_err(validation)?;
    let text = report.to_text();
    if let Some(path) = output {
        let mut sink = create(&path)?;
        serde_json::to_writer_pretty(&mut sink, &report).map_err(pipeline)?;
        sink.write_all(b"\n").map_err(pipeline)?;
        sink.flush().map_err(pipeline)?;
        std::fs::write(path.with_extension("txt"), &text).map_err(pipeline)?;
    }
    print!("{text}");
    Ok(())
}

fn serve(config: &Config, bind: Option<String>) -> Result<(), CliError> {
    let var = &config.server.auth_token_env;
    let token = std::env::var(var).map_err(|_| CliError::Validation(format!("environment variable {var} holding the API token is not set")))?;
    if token.is_empty() {
        return Err(CliError::Validation(format!("environment variable {var} is empty")));
    }
    let engine = load_engine(config)?;
    let store = Store::open(&config.storage.state_dir).map_err(pipeline)?;
    let state = AppState { store: Arc::new(store), engine: Arc::new(engine), token: token.into() };
    let bind = bind.unwrap_or_else(|| config.server.bind.clone());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(pipeline)?;
    runtime
        .block_on(api::serve(state, &bind, |addr| {
            println!("listening on http://{addr}");
            let _ = std::io::stdout().flush();
        }))
        .map_err(|e| CliError::Pipeline(format!("server on {bind}: {e}")))
}
