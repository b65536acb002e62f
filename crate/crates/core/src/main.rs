use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use kbforge::builders::{bootstrap_knowledge_base, Builder};
use kbforge::knowledge::{load_knowledge_base, IntegrityMode};
use kbforge::orchestrator::{
    evolve_from_web, post_run_evolve, run_task, seconds, OrchestratorError, RunRequest, Settings, SystemClock, TaskSpec,
};

#[derive(Parser)]
#[command(name = "kbforge", version, about = "Knowledge-backed model-building agents")]
struct Cli {
    /// Settings file (TOML): backend, retry, budgets, caps, seeds.
    #[arg(long, global = true)]
    backend_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one task and write `<run-dir>/final`.
    Run {
        #[arg(long)]
        task_file: PathBuf,
        /// Overrides the task file's data_dir.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        kb: PathBuf,
        /// Parallel solution repositories; the settings file's value otherwise.
        #[arg(long)]
        repos: Option<usize>,
        /// Wall-clock budget in seconds.
        #[arg(long)]
        budget: Option<f64>,
        /// Replay backend responses from a JSON Lines script.
        #[arg(long)]
        scripted: Option<PathBuf>,
        /// Defaults to `runs/<task_id>-<timestamp>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Build a fresh knowledge base from a corpus folder.
    Bootstrap {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        l1_index: PathBuf,
        #[arg(long)]
        out_kb: PathBuf,
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
    /// Distil a finished run into the knowledge base.
    EvolveRun {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
    /// Add documents built from new source groups.
    EvolveWeb {
        #[arg(long)]
        groups: PathBuf,
        /// Corpus folder holding the grouped sources.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        scripted: Option<PathBuf>,
    },
    /// Check a knowledge base's integrity.
    KbValidate {
        #[arg(long)]
        kb: PathBuf,
        /// `strict` or `pending_evolution`.
        #[arg(long, default_value = "strict")]
        mode: IntegrityMode,
    },
}

fn invalid(message: impl Into<String>) -> OrchestratorError {
    OrchestratorError::InvalidInput(message.into())
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn builder(settings: &Settings, scripted: Option<&Path>) -> Result<Builder, OrchestratorError> {
    let mut b = Builder::new(settings.client(scripted)?);
    b.prompts = settings.prompts()?;
    b.config = settings.builder.clone();
    Ok(b)
}

fn execute(cli: Cli) -> Result<i32, OrchestratorError> {
    let settings = match &cli.backend_config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Run {
            task_file,
            data_dir,
            kb,
            repos,
            budget,
            scripted,
            run_dir,
        } => {
            let mut task = TaskSpec::load(&task_file)?;
            if let Some(dir) = data_dir {
                task.data_dir = dir;
            }
            let mut budget_settings = settings.budget.clone();
            if let Some(b) = budget {
                budget_settings.wall_clock_seconds = seconds(b)?.as_secs_f64();
                // a flag budget gets the default reserve unless one is configured that fits
                if budget_settings.aggregator_reserve_seconds.is_some_and(|r| r >= b) {
                    budget_settings.aggregator_reserve_seconds = None;
                }
            }
            let budget = budget_settings.to_budget()?;
            let run_dir = run_dir.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-{}", task.task_id, chrono::Utc::now().format("%Y%m%dT%H%M%SZ")))
            });
            let mut req = RunRequest::new(task, kb, run_dir, budget);
            req.n_repos = repos.unwrap_or(settings.repos);
            req.agents = settings.agents.clone();
            req.prompts = settings.prompts()?;
            let client = settings.client(scripted.as_deref())?;
            let out = run_task(&req, client, Arc::new(SystemClock::new()))?;
            eprintln!("{} {}: report at {}", out.run_id, out.status, out.final_dir.join("report.md").display());
            print_json(&out);
            Ok(out.status.exit_code())
        }
        Command::Bootstrap {
            corpus,
            l1_index,
            out_kb,
            scripted,
        } => {
            if !corpus.is_dir() {
                return Err(invalid(format!("corpus {} is not a folder", corpus.display())));
            }
            if !l1_index.is_file() {
                return Err(invalid(format!("L1 index {} is not a file", l1_index.display())));
            }
            let b = builder(&settings, scripted.as_deref())?;
            let provider = settings.embedder()?;
            let (_, report) = bootstrap_knowledge_base(&corpus, &l1_index, &out_kb, &b, provider.as_ref(), &settings.pipeline)?;
            print_json(&report);
            Ok(if report.failures.is_empty() { 0 } else { 2 })
        }
        Command::EvolveRun { run_dir, kb, scripted } => {
            let report = post_run_evolve(&run_dir, &kb, &builder(&settings, scripted.as_deref())?)?;
            print_json(&report);
            Ok(if report.entries.is_empty() { 1 } else { 0 })
        }
        Command::EvolveWeb {
            groups,
            corpus,
            kb,
            scripted,
        } => {
            let report = evolve_from_web(&groups, &corpus, &kb, &builder(&settings, scripted.as_deref())?)?;
            print_json(&report);
            Ok(match (report.entries.is_empty(), report.failures.is_empty()) {
                (_, true) => 0,
                (false, false) => 2,
                (true, false) => 1,
            })
        }
        Command::KbValidate { kb, mode } => {
            let base = load_knowledge_base(&kb).map_err(|e| invalid(e.to_string()))?;
            let report = base.validate_integrity(mode);
            for v in &report.violations {
                println!("{v}");
            }
            println!(
                "{} categories, {} documents, {} violation(s)",
                base.l1_index.len(),
                base.document_count(),
                report.violations.len()
            );
            Ok(if report.is_clean() { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap's own usage code (2) would read as a partial run
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
