use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing::{info, warn};
use url::Url;

use infotech_core::corpus::serialize_corpus;
use infotech_core::evaluation::{
    emit_report, parse_answers, parse_cases, rescore_recorded, run_benchmark, serialize_answers, EvalConfig,
    ReportFormat, SystemAnswer, Target, DEFAULT_THRESHOLD,
};
use infotech_core::ingest::{
    crawl, discover_pages, manifest_from_fixtures, CrawlManifest, CrawlOptions, FixtureFetcher, HttpFetcher,
    PageFetcher, DEFAULT_PARALLELISM,
};
use infotech_core::service::{build_engine, make_provider, serve, ConfigOverrides, EmbeddingMode, ServiceConfig};

#[derive(Parser)]
#[command(name = "infotech", version, about = "Question answering over infrastructure technology records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crawl technology pages into a corpus file.
    Ingest(IngestArgs),
    /// Score the system against a set of questions with reference answers.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// JSON manifest: {"root_url": .., "page_urls": [..], "expected_count": N}
    #[arg(long, conflicts_with = "root_url")]
    manifest: Option<PathBuf>,
    /// Listing page to discover technology pages from.
    #[arg(long)]
    root_url: Option<Url>,
    /// Read pages from stored snapshots instead of the network.
    #[arg(long)]
    fixtures_dir: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Fail unless exactly this many pages are ingested.
    #[arg(long)]
    expected_count: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_PARALLELISM)]
    parallelism: usize,
    /// Seconds between requests per worker (network fetches only).
    #[arg(long, default_value_t = 1.0)]
    delay_secs: f64,
}

/// Settings shared by `eval` and `serve`.
#[derive(Args)]
struct RuntimeArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// OpenAI-compatible endpoint of the local LLM server.
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Hash embeddings and canned summaries; no network needed.
    #[arg(long)]
    offline: bool,
    /// Use the built-in hash embeddings but keep the configured LLM.
    #[arg(long)]
    hash_embeddings: bool,
}

impl RuntimeArgs {
    fn resolve(&self, extra: ConfigOverrides) -> Result<ServiceConfig> {
        let mut flags = if self.offline { ConfigOverrides::offline() } else { ConfigOverrides::default() };
        if self.hash_embeddings {
            flags.embedding_mode = Some(EmbeddingMode::OfflineHash);
        }
        flags.corpus_path = self.corpus.clone();
        flags.llm_base_url = self.llm_url.clone();
        flags.llm_model_name = self.model.clone();
        flags.temperature = self.temperature;
        flags.port = extra.port;
        flags.bind_address = extra.bind_address;
        flags.static_dir = extra.static_dir;
        let env = ConfigOverrides::from_env(|k| std::env::var(k).ok())?;
        Ok(ServiceConfig::resolve(self.config.as_deref(), &env, &flags)?)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    runtime: RuntimeArgs,
    /// JSON array of {"question", "expected_answer"} objects.
    #[arg(long)]
    cases: PathBuf,
    /// Score previously recorded answers instead of querying the system.
    #[arg(long)]
    answers: Option<PathBuf>,
    /// Save the answers produced during this run.
    #[arg(long, conflicts_with = "answers")]
    record_answers: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// bot, llm or both
    #[arg(long, default_value = "llm")]
    target: Target,
    /// table, csv or chart-data
    #[arg(long, default_value = "table")]
    format: ReportFormat,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Exit with status 2 when accuracy falls below this percentage.
    #[arg(long)]
    min_accuracy: Option<f64>,
    /// Drop errored rows from the accuracy denominator.
    #[arg(long)]
    exclude_errored: bool,
    #[arg(long)]
    model_label: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    runtime: RuntimeArgs,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    bind: Option<String>,
    /// Directory holding the chat UI assets.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest(args) => ingest(args),
        Command::Eval(args) => eval(args),
        Command::Serve(args) => serve_cmd(args),
    }
}

fn ingest(args: IngestArgs) -> Result<ExitCode> {
    let fetcher: Box<dyn PageFetcher> = match &args.fixtures_dir {
        Some(dir) => Box::new(FixtureFetcher::new(dir)),
        None => Box::new(HttpFetcher::new(
            Duration::try_from_secs_f64(args.delay_secs).context("--delay-secs")?,
            Duration::from_secs(30),
        )),
    };
    let mut manifest = match (&args.manifest, &args.root_url, &args.fixtures_dir) {
        (Some(path), _, _) => CrawlManifest::parse(&read(path)?)?,
        (None, Some(root), _) => {
            let listing = fetcher.fetch(root).with_context(|| format!("fetching listing page {root}"))?;
            let pages = discover_pages(&listing, root)?;
            info!(count = pages.len(), "discovered pages");
            CrawlManifest::new(Some(root.clone()), pages, None)
        }
        (None, None, Some(dir)) => {
            let base = Url::parse("https://infotechnology.fhwa.dot.gov/").expect("static url");
            manifest_from_fixtures(dir, &base)?
        }
        (None, None, None) => bail!("give --manifest, --root-url or --fixtures-dir"),
    };
    if args.expected_count.is_some() {
        manifest.expected_count = args.expected_count;
    }
    let (corpus, report) = crawl(&manifest, fetcher.as_ref(), CrawlOptions { parallelism: args.parallelism })?;
    for page in report.pages.iter().filter(|p| !p.is_ok()) {
        warn!(url = %page.url, error = page.error.as_deref().unwrap_or(""), "page failed");
    }
    write(&args.out, &serialize_corpus(&corpus))?;
    eprintln!("{} -> {}", report.summary(), args.out.display());
    if report.failed() > 0 || report.shortfall() {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let config = args.runtime.resolve(ConfigOverrides::default())?;
    let cases = parse_cases(&read(&args.cases)?)?;
    let scorer = make_provider(&config)?;
    let eval_config = EvalConfig {
        threshold: args.threshold,
        target: args.target,
        exclude_errored: args.exclude_errored,
        model_label: args.model_label.clone().unwrap_or_else(|| {
            if config.canned_llm { "canned".to_string() } else { config.llm_model_name.clone() }
        }),
    };

    let report = match &args.answers {
        Some(path) => {
            let answers = parse_answers(&read(path)?)?;
            rescore_recorded(&cases, &answers, scorer.as_ref(), &eval_config, 4)?
        }
        None => {
            config.check_paths()?;
            let engine = Arc::new(build_engine(&config)?);
            let runtime = tokio::runtime::Runtime::new()?;
            let mut recorded = Vec::new();
            let report = run_benchmark(
                &cases,
                |question| {
                    let dual = runtime.block_on(engine.answer(question)).map_err(|e| e.to_string())?;
                    let answer = SystemAnswer { bot: dual.bot_text, llm: dual.llm_text };
                    recorded.push(answer.clone());
                    Ok(answer)
                },
                scorer.as_ref(),
                &eval_config,
            )?;
            if let Some(path) = &args.record_answers {
                write(path, &serialize_answers(&recorded))?;
            }
            report
        }
    };

    let rendered = emit_report(&report, args.format);
    match &args.out {
        Some(path) => write(path, &rendered)?,
        None => print!("{}", String::from_utf8_lossy(&rendered)),
    }
    eprintln!(
        "accuracy {:.1}% ({}/{} at threshold {})",
        report.accuracy_percent,
        report.correct_count(),
        report.scored_count(),
        report.threshold
    );
    if let Some(min) = args.min_accuracy {
        if report.accuracy_percent < min {
            eprintln!("accuracy below required {min}%");
            return Ok(ExitCode::from(2));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serve_cmd(args: ServeArgs) -> Result<ExitCode> {
    let config = args.runtime.resolve(ConfigOverrides {
        port: args.port,
        bind_address: args.bind.clone(),
        static_dir: args.static_dir.clone(),
        ..Default::default()
    })?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(config, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
