mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mirag_core::embed::ProviderConfig;
use mirag_core::eval::{build_report, CoverEmJudge};
use mirag_core::ingest::{load_gold_samples, parse_samples, QuestionMatrix};
use mirag_core::kbstore::{
    build_multimodal_kb, build_text_kb, load_kb_checked, multimodal_fingerprint, read_jsonl,
    save_kb,
};
use mirag_core::llm::DemoRecord;
use mirag_core::media::is_url;
use mirag_core::pipeline::{read_results, run_benchmark};
use mirag_core::{
    load_benchmark, tune_threshold, Encoders, Engine, FsImageLoader, KbIndex, KnowledgeBases,
    MultimodalEntry, TextPassage,
};
use thiserror::Error;
use tracing_subscriber::EnvFilter;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "mirag", version, about = "Iterative multimodal RAG runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a corpus into a KB bundle.
    BuildIndex(BuildIndexArgs),
    /// Run the pipeline over a benchmark.
    Run(RunArgs),
    /// Score a results dump against gold answers.
    Eval(EvalArgs),
    /// Greedy similarity downsampling of a sample file.
    Downsample(DownsampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KbKindArg {
    Textual,
    Multimodal,
}

#[derive(Args)]
struct ProviderArgs {
    /// Run config supplying the embedding providers.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the deterministic reference provider (without --config).
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Dimension of the deterministic reference provider (without --config).
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long, value_enum)]
    kind: KbKindArg,
    /// Passage JSONL (textual) or image-text entry JSONL (multimodal).
    #[arg(long)]
    corpus: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Root for relative image paths; defaults to the corpus directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[command(flatten)]
    providers: ProviderArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KbSelection {
    Both,
    TextualOnly,
    MultimodalOnly,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Expansion-only ablation: no generated sub-queries.
    #[arg(long)]
    no_generation: bool,
    #[arg(long, value_enum, default_value_t = KbSelection::Both)]
    kb: KbSelection,
    /// Skip samples already completed in the results file.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Record per-iteration wall-clock timings.
    #[arg(long)]
    timings: bool,
    /// Load KBs whose provider fingerprint differs from the config.
    #[arg(long)]
    allow_fingerprint_mismatch: bool,
    #[arg(long)]
    text_kb: Option<PathBuf>,
    #[arg(long)]
    mm_kb: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Results JSONL; defaults to the run output.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Report JSON path; defaults to the output directory.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    text_kb: Option<PathBuf>,
    #[arg(long)]
    mm_kb: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    allow_fingerprint_mismatch: bool,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["threshold", "target_count"])))]
struct DownsampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Keep a question iff its similarity to every kept one is <= t.
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Tune t by bisection to keep about this many samples.
    #[arg(long)]
    target_count: Option<usize>,
    /// Relative tolerance for --target-count.
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
    #[command(flatten)]
    providers: ProviderArgs,
}

fn text_providers(args: &ProviderArgs) -> Result<(ProviderConfig, ProviderConfig), CliError> {
    match &args.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            Ok((cfg.mm_text_provider().clone(), cfg.providers.image.clone()))
        }
        None => {
            let p = ProviderConfig::deterministic(args.seed, args.dim);
            Ok((p.clone(), p))
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn cmd_build_index(args: BuildIndexArgs) -> Result<(), CliError> {
    require_file(&args.corpus, "corpus")?;
    let start = Instant::now();
    let kb = match args.kind {
        KbKindArg::Textual => {
            let text = match &args.providers.config {
                Some(path) => RunConfig::load(path)?.providers.text,
                None => ProviderConfig::deterministic(args.providers.seed, args.providers.dim),
            };
            let embedder = text.build().map_err(|e| CliError::Usage(e.to_string()))?;
            let passages: Vec<TextPassage> = read_jsonl(&args.corpus).map_err(runtime)?;
            build_text_kb(passages, embedder.as_ref()).map_err(runtime)?
        }
        KbKindArg::Multimodal => {
            let (text, image) = text_providers(&args.providers)?;
            let text = text.build().map_err(|e| CliError::Usage(e.to_string()))?;
            let image = image.build().map_err(|e| CliError::Usage(e.to_string()))?;
            let root = args.image_root.clone().unwrap_or_else(|| {
                args.corpus
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_default()
            });
            let entries: Vec<MultimodalEntry> = read_jsonl(&args.corpus).map_err(runtime)?;
            let loader = FsImageLoader::new(root);
            build_multimodal_kb(entries, text.as_ref(), image.as_ref(), &loader).map_err(runtime)?
        }
    };
    save_kb(&kb, &args.out).map_err(runtime)?;
    println!(
        "built {} KB at {}: rows={} dim={} elapsed={:.2}s",
        match args.kind {
            KbKindArg::Textual => "textual",
            KbKindArg::Multimodal => "multimodal",
        },
        args.out.display(),
        kb.len(),
        kb.dim(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_kbs(
    cfg: &RunConfig,
    selection: KbSelection,
    allow_mismatch: bool,
) -> Result<KnowledgeBases, CliError> {
    let text_fp = cfg.providers.text.fingerprint();
    let mm_fp = multimodal_fingerprint(
        &cfg.providers.image.fingerprint(),
        &cfg.mm_text_provider().fingerprint(),
    );
    let load =
        |path: &Option<PathBuf>, fp: &str, what: &str| -> Result<Option<Arc<KbIndex>>, CliError> {
            let path = path
                .as_ref()
                .ok_or_else(|| CliError::Usage(format!("no {what} KB path configured")))?;
            load_kb_checked(path, fp, allow_mismatch)
                .map(|kb| Some(Arc::new(kb)))
                .map_err(|e| runtime(format!("{what} KB {}: {e}", path.display())))
        };
    let text = match selection {
        KbSelection::MultimodalOnly => None,
        _ => load(&cfg.paths.text_kb, &text_fp, "textual")?,
    };
    let multimodal = match selection {
        KbSelection::TextualOnly => None,
        _ => load(&cfg.paths.mm_kb, &mm_fp, "multimodal")?,
    };
    Ok(KnowledgeBases { text, multimodal })
}

fn override_paths(
    cfg: &mut RunConfig,
    text_kb: Option<PathBuf>,
    mm_kb: Option<PathBuf>,
    output_dir: Option<PathBuf>,
) {
    if text_kb.is_some() {
        cfg.paths.text_kb = text_kb;
    }
    if mm_kb.is_some() {
        cfg.paths.mm_kb = mm_kb;
    }
    if let Some(o) = output_dir {
        cfg.paths.output_dir = o;
    }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    override_paths(&mut cfg, args.text_kb, args.mm_kb, args.output_dir);
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
    if let Some(p) = args.parallelism {
        if p == 0 {
            return Err(CliError::Usage("--parallelism must be at least 1".into()));
        }
        cfg.parallelism = p;
    }
    if args.no_generation {
        cfg.pipeline.enable_generation = false;
    }
    if args.timings {
        cfg.pipeline.record_timings = true;
    }
    let spec = cfg
        .benchmark
        .clone()
        .ok_or_else(|| CliError::Usage("config has no [benchmark] section".into()))?;
    let llm_cfg = cfg
        .llm
        .clone()
        .ok_or_else(|| CliError::Usage("config has no [llm] section".into()))?;

    let kbs = load_kbs(&cfg, args.kb, args.allow_fingerprint_mismatch)?;
    let benchmark = load_benchmark(&spec).map_err(runtime)?;
    if benchmark.skipped_missing_images > 0 {
        eprintln!(
            "skipped {} samples with missing images",
            benchmark.skipped_missing_images
        );
    }
    let build = |p: &ProviderConfig| p.build().map_err(|e| CliError::Usage(e.to_string()));
    let encoders = Encoders {
        text: build(&cfg.providers.text)?,
        mm_text: build(cfg.mm_text_provider())?,
        image: build(&cfg.providers.image)?,
    };
    let llm = llm_cfg
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut engine = Engine::new(
        kbs,
        encoders,
        llm,
        // Sample image refs are already resolved against the image root.
        Arc::new(FsImageLoader::default()),
        cfg.pipeline_config(),
    );
    if let Some(pool) = &cfg.pipeline.demo_pool {
        let mut demos: Vec<DemoRecord> = read_jsonl(pool).map_err(runtime)?;
        let root = pool.parent().unwrap_or(Path::new(""));
        for d in &mut demos {
            if !is_url(&d.image) {
                d.image = root.join(&d.image).to_string_lossy().into_owned();
            }
        }
        engine = engine.with_demo_pool(demos);
    }

    std::fs::create_dir_all(&cfg.paths.output_dir).map_err(|e| {
        runtime(format!(
            "cannot create output dir {}: {e}",
            cfg.paths.output_dir.display()
        ))
    })?;
    let out = cfg.results_path();
    let summary = run_benchmark(
        &engine,
        &benchmark.samples,
        cfg.parallelism,
        &out,
        args.resume,
    )
    .map_err(runtime)?;
    println!(
        "run finished: total={} resumed={} completed={} failed={} results={}",
        summary.total,
        summary.resumed,
        summary.completed,
        summary.failed,
        out.display()
    );
    if summary.failed > 0 {
        return Err(CliError::Runtime(format!(
            "{} samples failed",
            summary.failed
        )));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    override_paths(&mut cfg, args.text_kb, args.mm_kb, args.output_dir);
    let spec = cfg
        .benchmark
        .clone()
        .ok_or_else(|| CliError::Usage("config has no [benchmark] section".into()))?;
    let results_path = args.results.unwrap_or_else(|| cfg.results_path());
    require_file(&results_path, "results file")?;
    require_file(&spec.samples_path, "benchmark samples")?;
    let results = read_results(&results_path).map_err(runtime)?;
    let golds = load_gold_samples(&spec).map_err(runtime)?;
    let kbs = load_kbs(&cfg, KbSelection::Both, args.allow_fingerprint_mismatch)?;
    let report =
        build_report(&results, &golds, &kbs, &cfg.eval, Some(&CoverEmJudge)).map_err(runtime)?;
    let report_path = args.report.unwrap_or_else(|| cfg.report_path());
    if let Some(dir) = report_path.parent() {
        std::fs::create_dir_all(dir).map_err(runtime)?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(&report_path, json + "\n").map_err(runtime)?;
    print!("{}", report.to_table());
    println!("report written to {}", report_path.display());
    Ok(())
}

fn cmd_downsample(args: DownsampleArgs) -> Result<(), CliError> {
    require_file(&args.input, "input")?;
    if let Some(t) = args.threshold {
        if !t.is_finite() {
            return Err(CliError::Usage("--threshold must be finite".into()));
        }
    }
    let file = std::fs::File::open(&args.input).map_err(runtime)?;
    let samples = parse_samples(std::io::BufReader::new(file)).map_err(runtime)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(format!(
            "no samples in {}",
            args.input.display()
        )));
    }
    let (text, _) = text_providers(&args.providers)?;
    let embedder = text.build().map_err(|e| CliError::Usage(e.to_string()))?;
    let matrix = QuestionMatrix::embed(&samples, embedder.as_ref()).map_err(runtime)?;
    let (threshold, kept) = match (args.threshold, args.target_count) {
        (Some(t), _) => (t, matrix.greedy_keep(t)),
        (None, Some(target)) => {
            let out = tune_threshold(&matrix, target, args.tolerance, 64).map_err(runtime)?;
            if !out.feasible {
                return Err(CliError::Runtime(format!(
                    "target {target} infeasible: closest was {} kept at t={:.6}",
                    out.kept.len(),
                    out.threshold
                )));
            }
            (out.threshold, out.kept)
        }
        (None, None) => unreachable!("clap requires one mode"),
    };
    let mut body = String::new();
    for &i in &kept {
        body.push_str(&serde_json::to_string(&samples[i]).map_err(runtime)?);
        body.push('\n');
    }
    std::fs::write(&args.output, body).map_err(runtime)?;
    println!(
        "kept {}/{} samples at threshold {} -> {}",
        kept.len(),
        samples.len(),
        threshold,
        args.output.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("MIRAG_LOG").unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildIndex(a) => cmd_build_index(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Downsample(a) => cmd_downsample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
