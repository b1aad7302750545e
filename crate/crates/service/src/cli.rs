//! `refineir` command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or validation
//! errors. With `--json`, errors are written to stderr as
//! `{"error": {"kind": "usage"|"data", "message": ...}}`.

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use refineir::cav::{DEFAULT_LABELED_POOL, DEFAULT_STABILITY_N, DEFAULT_STABILITY_TRIALS};
use refineir::{
    generate_corpus, run_tool_eval, search, stability_curve, train_random_cav, train_relative_cav,
    CavRegistry, Corpus, EvalConfig, QueryState, SyntheticSpec, Tool, TrainerConfig,
};
use serde::Serialize;

use crate::api::{router, AppState};
use crate::config::Config;
use crate::ingest::ingest_dir;

#[derive(Debug, Parser)]
#[command(
    name = "refineir",
    version,
    about = "Refinable image retrieval over precomputed embeddings"
)]
pub struct Cli {
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a directory of record files and write a corpus file.
    Ingest {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Train concept activation vectors or measure their stability.
    Cav {
        #[command(subcommand)]
        command: CavCommand,
    },
    /// Generate synthetic corpora.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Score one refinement tool against the synthetic oracle.
    Eval(EvalArgs),
    /// One-shot search from a corpus image.
    Search(SearchArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// CAV registry file.
    #[arg(long)]
    pub cavs: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Config file; REFINEIR_CONFIG takes precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainerArgs {
    /// L2 regularization strength.
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

impl TrainerArgs {
    fn config(&self) -> TrainerConfig {
        let mut cfg = TrainerConfig::default();
        if let Some(v) = self.l2 {
            cfg.l2 = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum CavCommand {
    /// Train a CAV and add it to a registry file (replacing any of the same name).
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        concept: String,
        /// Train against this concept's positives instead of random negatives.
        #[arg(long)]
        opposing: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum labeled positives drawn (random negatives only).
        #[arg(long, default_value_t = DEFAULT_LABELED_POOL)]
        pool: usize,
        /// Registry file to update.
        #[arg(long, default_value = "cavs.jsonl")]
        registry: PathBuf,
        #[command(flatten)]
        trainer: TrainerArgs,
    },
    /// Cosine similarity to the full-data CAV as a function of training size.
    Stability {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_STABILITY_N)]
        n: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_STABILITY_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
        #[command(flatten)]
        trainer: TrainerArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write a synthetic corpus file.
    Gen {
        /// Generator spec (JSON); defaults apply to omitted fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the planted concept directions as JSON.
        #[arg(long)]
        directions: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_parser = parse_tool)]
    pub tool: Tool,
    /// Corpus file with oracle intensities; a synthetic corpus is generated when absent.
    #[arg(long, conflicts_with = "spec")]
    pub corpus: Option<PathBuf>,
    /// Generator spec for the synthetic corpus.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Target concept; defaults to the local concept for REGION and the
    /// first non-grading concept otherwise.
    #[arg(long)]
    pub concept: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CAV registry; its CAV for the target is used by the CONCEPT tool.
    #[arg(long)]
    pub cavs: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    /// Also write the JSON report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub image: String,
    #[arg(long, default_value_t = refineir::knn::DEFAULT_PAGE_SIZE)]
    pub k: usize,
    /// Concept slider as `concept=value`; repeatable.
    #[arg(long = "slider", value_parser = parse_slider)]
    pub sliders: Vec<(String, f64)>,
    /// Restrict results to these diagnoses; repeatable.
    #[arg(long = "category")]
    pub categories: Vec<String>,
    #[arg(long)]
    pub cavs: Option<PathBuf>,
    /// Config file; REFINEIR_CONFIG takes precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_tool(s: &str) -> Result<Tool, String> {
    s.parse().map_err(|e: refineir::Error| e.to_string())
}

fn parse_slider(s: &str) -> Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected concept=value, got {s:?}"))?;
    let value: f64 = value
        .parse()
        .map_err(|_| format!("slider value {value:?} is not a number"))?;
    if name.is_empty() || !value.is_finite() {
        return Err(format!("expected concept=value, got {s:?}"));
    }
    Ok((name.to_owned(), value))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] refineir::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> refineir::Error + '_ {
    move |source| refineir::Error::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: ErrorJsonBody<'a>,
}

#[derive(Serialize)]
struct ErrorJsonBody<'a> {
    kind: &'a str,
    message: &'a str,
}

fn report_error(err: &CliError, json: bool) {
    let message = err.to_string();
    let mut stderr = std::io::stderr().lock();
    if json {
        let body = ErrorJson {
            error: ErrorJsonBody {
                kind: err.kind(),
                message: message.trim_end(),
            },
        };
        let _ = writeln!(
            stderr,
            "{}",
            serde_json::to_string(&body).unwrap_or_default()
        );
    } else {
        let _ = writeln!(stderr, "error: {}", message.trim_end());
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let json = args.iter().skip(1).any(|a| a == "--json");
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json {
                report_error(&CliError::Usage(e.to_string()), true);
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e, cli.json);
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn main() -> ExitCode {
    run(std::env::args_os())
}

fn execute(command: Command) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Ingest { dir, output } => {
            let corpus = ingest_dir(&dir)?;
            corpus.save(&output)?;
            writeln!(
                out,
                "wrote {} records to {}",
                corpus.len(),
                output.display()
            )
            .ok();
        }
        Command::Serve(args) => serve(args)?,
        Command::Cav { command } => cav(command, &mut out)?,
        Command::Synth {
            command:
                SynthCommand::Gen {
                    spec,
                    seed,
                    output,
                    directions,
                },
        } => {
            let mut spec = load_spec(spec.as_deref())?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let synth = generate_corpus(&spec)?;
            synth.corpus.save(&output)?;
            if let Some(path) = directions {
                let text = serde_json::to_string(&synth.directions).expect("directions serialize");
                std::fs::write(&path, text).map_err(io_err(&path))?;
            }
            writeln!(
                out,
                "wrote {} records to {}",
                synth.corpus.len(),
                output.display()
            )
            .ok();
        }
        Command::Eval(args) => eval(args, &mut out)?,
        Command::Search(args) => one_shot_search(args, &mut out)?,
    }
    Ok(())
}

fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec, CliError> {
    let Some(path) = path else {
        return Ok(SyntheticSpec::default());
    };
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| refineir::Error::Malformed {
            line: e.line(),
            what: "synthetic spec",
            message: e.to_string(),
        })?;
    spec.validate()?;
    Ok(spec)
}

fn load_registry(path: Option<&Path>, corpus: &Corpus) -> Result<CavRegistry, CliError> {
    let registry = match path {
        Some(p) => CavRegistry::load(p)?,
        None => CavRegistry::new(),
    };
    registry.check_dimension(corpus.dimension())?;
    Ok(registry)
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let config = Config::resolve(args.config.as_deref())?;
    let corpus = Corpus::load(&args.corpus)?;
    let registry = load_registry(args.cavs.as_deref(), &corpus)?;
    let mut state = AppState::new(corpus, registry, config)?;
    if let Some(dir) = args.corpus.parent() {
        state = state.with_media_root(dir);
    }
    let app = router(Arc::new(state));
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("<runtime>")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.bind)
            .await
            .map_err(io_err(Path::new("<bind>")))?;
        let addr = listener.local_addr().map_err(io_err(Path::new("<bind>")))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(io_err(Path::new("<serve>")))?;
        Ok::<(), CliError>(())
    })
}

fn cav(command: CavCommand, out: &mut impl Write) -> Result<(), CliError> {
    match command {
        CavCommand::Train {
            corpus,
            concept,
            opposing,
            seed,
            pool,
            registry,
            trainer,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let hyper = trainer.config();
            let cav = match &opposing {
                Some(o) => train_relative_cav(&corpus, &concept, o, &hyper, seed)?,
                None => train_random_cav(&corpus, &concept, Some(pool), &hyper, seed)?,
            };
            let mut reg = if registry.exists() {
                CavRegistry::load(&registry)?
            } else {
                CavRegistry::new()
            };
            writeln!(
                out,
                "trained {} ({} positive, {} negative) -> {}",
                cav.name,
                cav.n_positive,
                cav.n_negative,
                registry.display()
            )
            .ok();
            reg.insert(cav);
            reg.check_dimension(corpus.dimension())?;
            reg.save(&registry)?;
        }
        CavCommand::Stability {
            corpus,
            concept,
            n,
            trials,
            seed,
            format,
            trainer,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let curve = stability_curve(&corpus, &concept, &n, trials, &trainer.config(), seed)?;
            match format {
                Format::Json => {
                    writeln!(
                        out,
                        "{}",
                        serde_json::to_string_pretty(&curve).expect("curve serializes")
                    )
                    .ok();
                }
                Format::Table => {
                    writeln!(
                        out,
                        "{:>6}  {:>8}  {:>8}  {:>8}  {:>8}",
                        "n", "median", "q1", "q3", "iqr"
                    )
                    .ok();
                    for p in &curve.points {
                        writeln!(
                            out,
                            "{:>6}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
                            p.n,
                            p.median_cosine,
                            p.q1_cosine,
                            p.q3_cosine,
                            p.iqr()
                        )
                        .ok();
                    }
                }
            }
        }
    }
    Ok(())
}

/// Default eval target: the local concept for REGION, else the first
/// concept that does not drive the diagnosis.
fn default_target(corpus: &Corpus, tool: Tool) -> Option<String> {
    let concepts = corpus.concepts();
    match tool {
        Tool::Region => concepts.last().cloned(),
        _ => concepts.get(1).or(concepts.first()).cloned(),
    }
}

fn eval(args: EvalArgs, out: &mut impl Write) -> Result<(), CliError> {
    let (corpus, spec) = match &args.corpus {
        Some(path) => (Corpus::load(path)?, None),
        None => {
            let spec = load_spec(args.spec.as_deref())?;
            (generate_corpus(&spec)?.corpus, Some(spec))
        }
    };
    let target = match args.concept {
        Some(c) => c,
        None => default_target(&corpus, args.tool)
            .ok_or_else(|| CliError::Usage("corpus has no concepts; pass --concept".into()))?,
    };
    let mut cfg = EvalConfig::new(target, args.queries, args.seed);
    if let Some(path) = &args.cavs {
        cfg.cav = load_registry(Some(path), &corpus)?
            .get(&cfg.target_concept)
            .cloned();
    }
    let mut report = run_tool_eval(&corpus, args.tool, &cfg)?;
    if report.spec.is_none() {
        report.spec = spec;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = &args.report {
        std::fs::write(path, &json).map_err(io_err(path))?;
    }
    match args.format {
        Format::Json => writeln!(out, "{json}").ok(),
        Format::Table => write!(out, "{}", report.table()).ok(),
    };
    Ok(())
}

fn one_shot_search(args: SearchArgs, out: &mut impl Write) -> Result<(), CliError> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be positive".into()));
    }
    let config = Config::resolve(args.config.as_deref())?;
    let corpus = Corpus::load(&args.corpus)?.with_metric(config.metric);
    let registry = load_registry(args.cavs.as_deref(), &corpus)?;
    let mut state = QueryState::with_scale(&corpus, &args.image, config.alpha.resolve(&corpus)?)?;
    for (concept, value) in &args.sliders {
        state.set_slider(&registry, concept, *value)?;
    }
    if !args.categories.is_empty() {
        state.set_category_filter(&corpus, Some(args.categories.iter().cloned()))?;
    }
    let query = state.compose(&corpus, &registry)?;
    let results = search(&corpus, &query, &state.search_filter(&corpus)?, args.k)?;
    for (i, r) in results.iter().enumerate() {
        writeln!(
            out,
            "{} {} {:.6} {}",
            i + 1,
            r.image_id,
            r.distance,
            r.diagnosis
        )
        .ok();
    }
    Ok(())
}
