//! `vpr-rerank` command-line front end.

pub mod settings;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use vpr_rerank::evaluation::{build_report, recall_at_k};
use vpr_rerank::gateway::{Backoff, ChatBackend, Gateway, HttpBackend, MockBackend, ModelConfig};
use vpr_rerank::golden;
use vpr_rerank::pipeline::{load_ranked_lists, PairCache, RerankConfig, Reranker, ScoringMode};
use vpr_rerank::prompting::ImageOptions;
use vpr_rerank::retrieval::{
    load_candidate_lists, load_embeddings, load_manifest, retrieve_all, write_candidate_lists, EmbeddingFormat,
};
use vpr_rerank::{Manifest, MockConfig, PlaceRecord, PromptTemplate};

pub use settings::{Backend, ModeArg, RunConfig, Settings, UsageError};

#[derive(Debug, Parser)]
#[command(name = "vpr-rerank", version, about = "Coarse retrieval and MLLM re-ranking for visual place recognition")]
pub struct Cli {
    /// Flat TOML file of settings, keyed by flag name without dashes
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(flatten)]
    pub settings: Settings,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embeddings to coarse candidate lists
    Retrieve {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        database: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Candidate lists to re-ranked lists
    Rerank {
        #[arg(long)]
        candidates: PathBuf,
        /// Repeat for separate query and database manifests
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Also write run telemetry as JSON here
        #[arg(long)]
        telemetry: Option<PathBuf>,
    },
    /// Recall@K of a ranking or candidate file
    Eval {
        #[arg(long)]
        ranking: PathBuf,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Also write the JSON report here
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Coarse vs. re-ranked recall side by side
    Report {
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        reranked: PathBuf,
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Reproduce the bundled reference record through the full scoring path
    MockCheck,
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 on runtime failure, 2 on usage errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.verbose);
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Resolves settings from the parsed flags and the optional config file.
pub fn resolve(cli: &Cli) -> Result<RunConfig, UsageError> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    RunConfig::resolve(&cli.settings, &file)
}

fn execute(cli: Cli) -> anyhow::Result<i32> {
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::Retrieve { queries, database, output } => retrieve(&cfg, queries, database, output),
        Command::Rerank { candidates, manifest, output, telemetry } => {
            let backend = cfg.backend(&cli.settings)?;
            rerank(&cfg, backend, candidates, manifest, output, telemetry.as_deref())
        }
        Command::Eval { ranking, manifest, format, output } => eval(&cfg, ranking, manifest, *format, output.as_deref()),
        Command::Report { coarse, reranked, manifest, format, output } => {
            report(&cfg, coarse, reranked, manifest, *format, output.as_deref())
        }
        Command::MockCheck => mock_check(),
    }
}

fn load_manifests(paths: &[PathBuf]) -> anyhow::Result<Manifest> {
    let mut manifest = Manifest::new(Vec::new())?;
    for p in paths {
        let records = load_manifest(p).with_context(|| format!("manifest {}", p.display()))?;
        manifest.extend(records).with_context(|| format!("manifest {}", p.display()))?;
    }
    Ok(manifest)
}

fn retrieve(cfg: &RunConfig, queries: &Path, database: &Path, output: &Path) -> anyhow::Result<i32> {
    let load = |p: &Path| {
        load_embeddings(p, EmbeddingFormat::from_path(p)).with_context(|| format!("embeddings {}", p.display()))
    };
    let (q, db) = (load(queries)?, load(database)?);
    let lists = retrieve_all(&q, &db, cfg.top_n, cfg.metric)?;
    write_candidate_lists(output, &lists)?;
    eprintln!(
        "wrote {} candidate lists (top {}, {:?}) to {}",
        lists.len(),
        cfg.top_n,
        cfg.metric,
        output.display()
    );
    Ok(0)
}

/// Model config for the chosen backend. The mock's settings are folded
/// into its endpoint string so cached pairs never cross mock configurations.
fn model_config(cfg: &RunConfig, backend: &Backend) -> ModelConfig {
    let (endpoint_url, model_name) = match backend {
        Backend::Endpoint { url, model } => (url.clone(), model.clone()),
        Backend::Mock(m) => (mock_identity(m), "mock".to_owned()),
    };
    ModelConfig {
        endpoint_url,
        model_name,
        temperature: cfg.temperature,
        request_timeout: cfg.request_timeout,
        max_retries: cfg.max_retries,
        max_concurrency: cfg.concurrency,
        backoff: Backoff::default(),
    }
}

pub fn mock_identity(m: &MockConfig) -> String {
    format!(
        "mock://seed={};noise={};malform={};fence={};dref={};hetero={}",
        m.seed, m.noise_scale, m.malform_rate, m.fence_rate, m.reference_distance_m, m.heteroscedastic
    )
}

fn build_reranker(cfg: &RunConfig, backend: &Backend) -> anyhow::Result<Reranker> {
    let chat: Arc<dyn ChatBackend> = match backend {
        Backend::Endpoint { url, .. } => Arc::new(HttpBackend::from_env(url)?),
        Backend::Mock(m) => Arc::new(MockBackend::synthetic(*m)),
    };
    let gateway = Gateway::new(chat, model_config(cfg, backend))?;
    let template = match &cfg.prompt_file {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::default(),
    };
    let mode = match cfg.mode {
        ModeArg::Single => ScoringMode::SinglePass,
        ModeArg::Uasc => ScoringMode::Uasc(cfg.calibration),
    };
    let rerank_cfg = RerankConfig {
        mode,
        single_pass_temperature: cfg.single_pass_temperature,
        image: ImageOptions { max_side: cfg.max_side },
    };
    let mut reranker = Reranker::new(gateway, template, rerank_cfg)?;
    if let Some(dir) = &cfg.cache_dir {
        let cache = PairCache::open(dir).with_context(|| format!("cache dir {}", dir.display()))?;
        reranker = reranker.with_cache(cache);
    }
    Ok(reranker)
}

fn runtime() -> anyhow::Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn rerank(
    cfg: &RunConfig,
    backend: Backend,
    candidates: &Path,
    manifests: &[PathBuf],
    output: &Path,
    telemetry: Option<&Path>,
) -> anyhow::Result<i32> {
    let lists = load_candidate_lists(candidates).with_context(|| format!("candidates {}", candidates.display()))?;
    let manifest = load_manifests(manifests)?;
    let reranker = build_reranker(cfg, &backend)?;
    let file = File::create(output).with_context(|| format!("creating {}", output.display()))?;
    let mut out = BufWriter::new(file);
    let run = runtime()?.block_on(reranker.rerank_dataset(&lists, &manifest, &mut out))?;
    out.flush()?;

    let summary = json!({
        "telemetry": run.telemetry,
        "cached_pairs": run.cached_pairs,
        "queries": run.rankings.len(),
    });
    if let Some(path) = telemetry {
        std::fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let t = &run.telemetry;
    eprintln!(
        "re-ranked {} queries, {} pairs, {} requests ({} pairs from cache); avg {:.3} s and {:.1} output tokens per pair",
        run.rankings.len(),
        t.total_pairs,
        t.total_requests,
        run.cached_pairs,
        t.avg_time_s_per_sample,
        t.avg_output_tokens_per_sample
    );
    Ok(0)
}

fn emit(value: &serde_json::Value, table: String, format: Format, output: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = output {
        std::fs::write(path, text.clone() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    match format {
        Format::Table => print!("{table}"),
        Format::Json => println!("{text}"),
    }
    Ok(())
}

fn recall_for(cfg: &RunConfig, ranking: &Path, manifest: &Manifest) -> anyhow::Result<vpr_rerank::RecallReport> {
    let lists = load_ranked_lists(ranking).with_context(|| format!("ranking {}", ranking.display()))?;
    if lists.is_empty() {
        bail!("{} holds no rankings", ranking.display());
    }
    Ok(recall_at_k(&lists, manifest, &cfg.eval)?)
}

fn eval(cfg: &RunConfig, ranking: &Path, manifests: &[PathBuf], format: Format, output: Option<&Path>) -> anyhow::Result<i32> {
    let manifest = load_manifests(manifests)?;
    let report = recall_for(cfg, ranking, &manifest)?;
    emit(&serde_json::to_value(&report)?, report.to_table(), format, output)?;
    Ok(0)
}

fn report(
    cfg: &RunConfig,
    coarse: &Path,
    reranked: &Path,
    manifests: &[PathBuf],
    format: Format,
    output: Option<&Path>,
) -> anyhow::Result<i32> {
    let manifest = load_manifests(manifests)?;
    let c = recall_for(cfg, coarse, &manifest)?;
    let r = recall_for(cfg, reranked, &manifest)?;
    let cmp = build_report(&c, &r)?;
    let value = json!({"coarse": c, "reranked": r, "comparison": cmp});
    emit(&value, cmp.to_table(), format, output)?;
    Ok(0)
}

const PIXEL_PNG: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00,
    0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1f, 0x15, 0xc4, 0x89, 0x00, 0x00, 0x00,
    0x0d, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0xf8, 0xcf, 0xc0, 0xf0, 0x1f, 0x00, 0x05, 0x00, 0x01, 0xff,
    0x56, 0xc3, 0x61, 0x6b, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

/// Replays the reference record's five raw outputs through prompting, the
/// gateway, the codec and calibration. Exit 0 iff every value matches to
/// within 1e-12.
fn mock_check() -> anyhow::Result<i32> {
    let dir = tempfile::tempdir()?;
    let img = dir.path().join("pixel.png");
    std::fs::write(&img, PIXEL_PNG)?;
    let q = PlaceRecord::utm("query", &img, 0.0, 0.0);
    let c = PlaceRecord::utm("candidate", &img, 0.0, 0.0);

    let backend = Arc::new(MockBackend::scripted(golden::raw_outputs()));
    let gateway = Gateway::new(backend, ModelConfig { endpoint_url: "mock://golden".into(), ..Default::default() })?;
    let reranker = Reranker::new(gateway, PromptTemplate::default(), RerankConfig::default())?;
    let pair = runtime()?.block_on(reranker.score_pair(&q, &c, 1))?;

    let want = golden::expected();
    let Some(result) = pair.uasc() else {
        println!("FAIL: no sample produced a valid score");
        return Ok(1);
    };
    let m = &result.uncertainty_metrics;
    let checks = [
        ("mean_score", m.mean_score, want.mean_score),
        ("std_dev", m.std_dev, want.std_dev),
        ("final_score", pair.final_score, want.final_score),
        ("num_valid_samples", m.num_valid_samples as f64, want.num_valid_samples as f64),
    ];
    let mut ok = true;
    for (name, got, expected) in checks {
        let pass = (got - expected).abs() <= 1e-12;
        ok &= pass;
        println!("{:<18} {:<22} expected {:<22} {}", name, got, expected, if pass { "ok" } else { "MISMATCH" });
    }
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { 0 } else { 1 })
}
