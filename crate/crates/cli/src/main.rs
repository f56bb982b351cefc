//! Command-line surface for the co-evolution engine: train runs, resume
//! from checkpoints, standalone defense evaluation, history reports, and
//! a synthetic corpus generator.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use coevo_core::coevolution::{
    default_attacker_seeds, default_defender_seeds, load_seed_dir, restore, Engine, EngineError,
    EventLog,
};
use coevo_core::corpus::{generate_synthetic, load_corpus, render_corpus, require_benign};
use coevo_core::domain::{validate_config, BackendKind, BackendSettings, RunConfig};
use coevo_core::gateway::{
    CacheMode, ChatBackend, Gateway, HttpBackend, RecordReplayBackend, RetryPolicy,
};
use coevo_core::grader::{Grader, GraderError};
use coevo_core::optimizer::TemplateSet;
use coevo_core::report::{
    evaluate_defense, load_run_dir, render_evaluation_row, render_multi_run_csv,
    render_multi_run_table, write_best_prompts, write_history,
};
use coevo_core::synthetic::oracle_backend;

#[derive(Parser)]
#[command(name = "coevo", version, about = "Co-evolves prompt-injection attacks and defenses for an LLM-graded task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Scripted,
    Replay,
}

impl From<BackendArg> for BackendKind {
    fn from(value: BackendArg) -> Self {
        match value {
            BackendArg::Http => BackendKind::Http,
            BackendArg::Scripted => BackendKind::Scripted,
            BackendArg::Replay => BackendKind::Replay,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run co-evolution training on a benign corpus.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured backend.
        #[arg(long)]
        backend: Option<BackendArg>,
        /// Override the configured RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continue a checkpointed run to completion.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a stored defense prompt against a labeled corpus.
    Evaluate {
        #[arg(long)]
        defense: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Optional attack prompt injected into benign articles.
        #[arg(long)]
        attack: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backend: Option<BackendArg>,
        /// Write the metrics document here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render per-iteration metric tables from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Emit the delimiter-separated form instead of the plain table.
        #[arg(long)]
        csv: bool,
    },
    /// Generate a synthetic benign corpus.
    GenCorpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit codes: 2 config/usage, 3 data, 4 backend, 5 aborted run.
enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
    Aborted(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Aborted(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) | CliError::Aborted(m) => m,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(err: EngineError) -> Self {
        match &err {
            EngineError::Grader(GraderError::CycleAbort { .. }) => CliError::Aborted(err.to_string()),
            EngineError::Grader(GraderError::Gateway(_))
            | EngineError::Optimizer(coevo_core::optimizer::OptimizerError::Gateway(_)) => {
                CliError::Backend(err.to_string())
            }
            EngineError::NoSeeds(_) => CliError::Usage(err.to_string()),
            _ => CliError::Data(err.to_string()),
        }
    }
}

fn read_file(path: &Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    let raw = match path {
        Some(p) => read_file(p, "config")?,
        None => String::new(),
    };
    validate_config(&raw).map_err(|e| CliError::Usage(e.to_string()))
}

fn build_gateway(settings: &BackendSettings) -> Result<Arc<Gateway>, CliError> {
    let cached = |inner: Arc<dyn ChatBackend>| -> Result<Arc<dyn ChatBackend>, CliError> {
        match &settings.cache_dir {
            Some(dir) => Ok(Arc::new(
                RecordReplayBackend::new(Some(inner), CacheMode::Record, dir)
                    .map_err(|e| CliError::Backend(e.to_string()))?,
            )),
            None => Ok(inner),
        }
    };
    let backend: Arc<dyn ChatBackend> = match settings.kind {
        BackendKind::Scripted => cached(Arc::new(oracle_backend()))?,
        BackendKind::Http => cached(Arc::new(HttpBackend::new(
            &settings.endpoint,
            &settings.model,
            &settings.credential_env,
        )))?,
        BackendKind::Replay => {
            let dir = settings.cache_dir.as_ref().ok_or_else(|| {
                CliError::Usage("replay backend requires backend.cache_dir in the config".into())
            })?;
            Arc::new(
                RecordReplayBackend::new(None, CacheMode::Replay, dir)
                    .map_err(|e| CliError::Backend(e.to_string()))?,
            )
        }
    };
    let retry = RetryPolicy {
        max_attempts: settings.max_attempts,
        base_delay: Duration::from_millis(settings.retry_base_ms),
    };
    Ok(Arc::new(
        Gateway::new(backend, settings.parallelism, retry)
            .with_structured_retries(settings.structured_retries),
    ))
}

fn resolve_rubric(config: &RunConfig) -> Result<Option<String>, CliError> {
    match &config.paths.rubric {
        Some(path) => Ok(Some(read_file(path, "rubric")?)),
        None => Ok(None),
    }
}

fn resolve_templates(config: &RunConfig) -> Result<TemplateSet, CliError> {
    match &config.paths.templates_dir {
        Some(dir) => TemplateSet::with_overrides(dir)
            .map_err(|e| CliError::Data(format!("templates dir {}: {e}", dir.display()))),
        None => Ok(TemplateSet::default()),
    }
}

fn resolve_seeds(config: &RunConfig) -> Result<(Vec<String>, Vec<String>), CliError> {
    let mut attacker = match &config.paths.attacker_seeds {
        Some(dir) => load_seed_dir(dir)
            .map_err(|e| CliError::Data(format!("attacker seeds {}: {e}", dir.display())))?,
        None => default_attacker_seeds(),
    };
    let mut defender = match &config.paths.defender_seeds {
        Some(dir) => load_seed_dir(dir)
            .map_err(|e| CliError::Data(format!("defender seeds {}: {e}", dir.display())))?,
        None => default_defender_seeds(),
    };
    let cap = config.initial_categories as usize;
    attacker.truncate(cap);
    defender.truncate(cap);
    Ok((attacker, defender))
}

fn finish_run(
    engine: &Engine,
    state: &mut coevo_core::coevolution::RunState,
    corpus: &[coevo_core::corpus::Article],
    out: &Path,
) -> Result<(), CliError> {
    let outcome = engine.run(state, corpus)?;
    write_history(&outcome.history, out).map_err(|e| CliError::Data(e.to_string()))?;
    write_best_prompts(&outcome.best_attack, &outcome.best_defense, out)
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "run complete: {} iteration(s), converged={}, artifacts in {}",
        outcome.history.len(),
        outcome.converged,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config_path: Option<PathBuf>,
    corpus_path: PathBuf,
    out: PathBuf,
    backend: Option<BackendArg>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut config = load_config(config_path.as_ref())?;
    if let Some(kind) = backend {
        config.backend.kind = kind.into();
    }
    if let Some(seed) = seed {
        config.rng_seed = seed;
    }
    let articles = load_corpus(&corpus_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", corpus_path.display())))?;
    require_benign(&articles).map_err(|e| CliError::Data(e.to_string()))?;

    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    let events = EventLog::to_file(&out.join("events.jsonl"))
        .map_err(|e| CliError::Data(format!("event log: {e}")))?;
    let gateway = build_gateway(&config.backend)?;
    let rubric = resolve_rubric(&config)?;
    let templates = resolve_templates(&config)?;
    let (attacker_seeds, defender_seeds) = resolve_seeds(&config)?;

    let engine = Engine::new(config, gateway, rubric, templates, events, Some(out.clone()));
    let mut state = engine.initialize(&articles, &attacker_seeds, &defender_seeds)?;
    finish_run(&engine, &mut state, &articles, &out)
}

fn cmd_resume(checkpoint: PathBuf, corpus_path: PathBuf, out: PathBuf) -> Result<(), CliError> {
    let mut state = restore(&checkpoint)?;
    let config = state.config.clone();
    let articles = load_corpus(&corpus_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", corpus_path.display())))?;

    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    let events = EventLog::to_file(&out.join("events.jsonl"))
        .map_err(|e| CliError::Data(format!("event log: {e}")))?;
    let gateway = build_gateway(&config.backend)?;
    let rubric = resolve_rubric(&config)?;
    let templates = resolve_templates(&config)?;

    let engine = Engine::new(config, gateway, rubric, templates, events, Some(out.clone()));
    if state.is_finished() {
        println!("checkpoint is already complete; nothing to resume");
    }
    finish_run(&engine, &mut state, &articles, &out)
}

fn cmd_evaluate(
    defense: PathBuf,
    corpus_path: PathBuf,
    attack: Option<PathBuf>,
    config_path: Option<PathBuf>,
    backend: Option<BackendArg>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut config = load_config(config_path.as_ref())?;
    if let Some(kind) = backend {
        config.backend.kind = kind.into();
    }
    let defense_text = read_file(&defense, "defense prompt")?.trim().to_string();
    if defense_text.is_empty() {
        return Err(CliError::Data(format!("defense prompt {} is empty", defense.display())));
    }
    let attack_text = match &attack {
        Some(path) => Some(read_file(path, "attack prompt")?.trim().to_string()),
        None => None,
    };
    let articles = load_corpus(&corpus_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", corpus_path.display())))?;

    let gateway = build_gateway(&config.backend)?;
    let rubric = resolve_rubric(&config)?;
    let grader = Grader::new(gateway, &config, rubric);
    let report = evaluate_defense(&grader, &defense_text, &articles, attack_text.as_deref())
        .map_err(|e| match e {
            GraderError::Gateway(_) => CliError::Backend(e.to_string()),
            other => CliError::Data(other.to_string()),
        })?;

    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(path) = out {
        std::fs::write(&path, format!("{json}\n"))
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    println!("{json}");
    let name = defense
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "defense".into());
    println!("{}", render_evaluation_row(&name, &report));
    Ok(())
}

fn cmd_report(run_dir: PathBuf, csv: bool) -> Result<(), CliError> {
    let runs = load_run_dir(&run_dir).map_err(|e| CliError::Data(e.to_string()))?;
    if csv {
        print!("{}", render_multi_run_csv(&runs));
    } else {
        print!("{}", render_multi_run_table(&runs));
    }
    Ok(())
}

fn cmd_gen_corpus(n: usize, seed: u64, out: PathBuf) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let articles = generate_synthetic(n, seed);
    std::fs::write(&out, render_corpus(&articles))
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {} synthetic benign articles to {}", n, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, corpus, out, backend, seed } => {
            cmd_train(config, corpus, out, backend, seed)
        }
        Command::Resume { checkpoint, corpus, out } => cmd_resume(checkpoint, corpus, out),
        Command::Evaluate { defense, corpus, attack, config, backend, out } => {
            cmd_evaluate(defense, corpus, attack, config, backend, out)
        }
        Command::Report { run_dir, csv } => cmd_report(run_dir, csv),
        Command::GenCorpus { n, seed, out } => cmd_gen_corpus(n, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
