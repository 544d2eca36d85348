mod config;
mod meta;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

/// Pseudo ad-hoc query targets for proactive search in conversations.
///
/// Settings can also come from `C2Q_*` environment variables or a TOML file
/// given with `--config`; flags win over the environment, which wins over
/// the file.
#[derive(Debug, Parser)]
#[command(name = "conv2query", version)]
pub struct Cli {
    /// Worker threads for every parallel step (default: all cores).
    #[arg(long, global = true, env = "C2Q_THREADS")]
    pub threads: Option<usize>,

    /// TOML file with per-subcommand defaults.
    #[arg(long, global = true, env = "C2Q_CONFIG")]
    pub config: Option<PathBuf>,

    /// Log filter, e.g. `info` or `conv2query=debug`.
    #[arg(long, global = true, env = "C2Q_LOG", default_value = "warn")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build and save a BM25 index over a document corpus.
    Index(IndexArgs),
    /// Generate candidate queries for the relevant documents of judged turns.
    Gen(GenArgs),
    /// Pick one query per candidate set.
    Filter(FilterArgs),
    /// Build prompt/target pairs and, optionally, retrieval triples.
    BuildTrain(BuildTrainArgs),
    /// Retrieve at every judged turn and write a run file.
    Retrieve(RetrieveArgs),
    /// Score a run against qrels.
    Eval(EvalArgs),
    /// Text-window baseline: query with the best window of the context.
    Baseline(BaselineArgs),
    /// Export conversation judgments as a qrels file.
    Qrels(QrelsArgs),
}

#[derive(Debug, Args)]
pub struct Bm25Args {
    /// Parameter profile: procis, webdisc-cc or webdisc-ia.
    #[arg(long, env = "C2Q_PROFILE", default_value = "procis")]
    pub profile: String,
    /// Overrides the profile's k1.
    #[arg(long, env = "C2Q_K1")]
    pub k1: Option<f64>,
    /// Overrides the profile's b.
    #[arg(long, env = "C2Q_B")]
    pub b: Option<f64>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long, env = "C2Q_CORPUS")]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub bm25: Bm25Args,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Builtin,
    Service,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, env = "C2Q_CONVERSATIONS")]
    pub conversations: PathBuf,
    #[arg(long, env = "C2Q_CORPUS")]
    pub corpus: PathBuf,
    #[arg(long, env = "C2Q_INDEX")]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidates per document.
    #[arg(long, env = "C2Q_N", default_value_t = 100)]
    pub n: usize,
    #[arg(long, env = "C2Q_TOP_K", default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, env = "C2Q_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub max_query_terms: usize,
    #[arg(long, value_enum, default_value_t = Backend::Builtin)]
    pub backend: Backend,
    /// Base URL of the generation service.
    #[arg(long, env = "C2Q_GEN_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scorer {
    Bm25,
    Service,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, env = "C2Q_CONVERSATIONS")]
    pub conversations: PathBuf,
    #[arg(long, env = "C2Q_CORPUS")]
    pub corpus: PathBuf,
    /// Needed by the bm25 scorer.
    #[arg(long, env = "C2Q_INDEX")]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// contextualisation (cc) or anticipation (ia).
    #[arg(long, env = "C2Q_SETTING")]
    pub setting: String,
    /// qf-dc, qf-d or random.
    #[arg(long, env = "C2Q_MODE", default_value = "qf-dc")]
    pub mode: String,
    /// Seed for the random mode.
    #[arg(long, env = "C2Q_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Scorer::Bm25)]
    pub scorer: Scorer,
    /// Base URL of the reranker service.
    #[arg(long, env = "C2Q_SCORER_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
    /// Min-max normalize both scores within each candidate set.
    #[arg(long)]
    pub normalize: bool,
    #[command(flatten)]
    pub bm25: Bm25Args,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnEmptyPool {
    Fail,
    Skip,
}

#[derive(Debug, Args)]
pub struct BuildTrainArgs {
    #[arg(long, env = "C2Q_CONVERSATIONS")]
    pub conversations: PathBuf,
    /// Filter output.
    #[arg(long)]
    pub filtered: PathBuf,
    #[arg(long, env = "C2Q_SETTING")]
    pub setting: String,
    /// Pairs output.
    #[arg(long)]
    pub out: PathBuf,
    /// Triples output; requires --index.
    #[arg(long)]
    pub triples_out: Option<PathBuf>,
    #[arg(long, env = "C2Q_INDEX")]
    pub index: Option<PathBuf>,
    /// Hard negatives per triple.
    #[arg(long, default_value_t = 7)]
    pub negatives: usize,
    #[arg(long, env = "C2Q_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OnEmptyPool::Fail)]
    pub on_empty_pool: OnEmptyPool,
    #[command(flatten)]
    pub bm25: Bm25Args,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Source {
    Raw,
    Mapping,
    Service,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long, env = "C2Q_CONVERSATIONS")]
    pub conversations: PathBuf,
    #[arg(long, env = "C2Q_INDEX")]
    pub index: PathBuf,
    #[arg(long, env = "C2Q_SETTING")]
    pub setting: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Source::Raw)]
    pub source: Source,
    /// JSONL of {"qid","query"}; with --source mapping. Pairs files work too.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    /// Base URL of the query mapper; with --source service.
    #[arg(long, env = "C2Q_MAPPER_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
    /// Run depth.
    #[arg(long, env = "C2Q_K", default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value = "conv2query")]
    pub tag: String,
    #[command(flatten)]
    pub bm25: Bm25Args,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Comma list of p1, mrrK, npdcgK.
    #[arg(long, env = "C2Q_METRICS", default_value = "p1,mrr10,npdcg5")]
    pub metrics: String,
    #[arg(long, value_enum, env = "C2Q_FORMAT", default_value_t = Format::Table)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, env = "C2Q_CONVERSATIONS")]
    pub conversations: PathBuf,
    #[arg(long, env = "C2Q_INDEX")]
    pub index: PathBuf,
    #[arg(long, env = "C2Q_SETTING")]
    pub setting: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Chosen window per qid, as JSONL {"qid","query"}.
    #[arg(long)]
    pub windows_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub window_size: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 100)]
    pub nqc_depth: usize,
    #[arg(long, env = "C2Q_K", default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value = "textwin")]
    pub tag: String,
    #[command(flatten)]
    pub bm25: Bm25Args,
}

#[derive(Debug, Args)]
pub struct QrelsArgs {
    #[arg(long, env = "C2Q_CONVERSATIONS")]
    pub conversations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_cli() -> Result<Cli, ExitCode> {
    let argv: Vec<_> = std::env::args_os().collect();
    let argv = match config::apply_config_file(&Cli::command(), argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(e.exit_code() as u8));
        }
    };
    Cli::try_parse_from(argv).map_err(|e| {
        let _ = e.print();
        if e.use_stderr() {
            ExitCode::from(1)
        } else {
            ExitCode::SUCCESS
        }
    })
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(1);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global pool is configured once");
    }
    match stages::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
