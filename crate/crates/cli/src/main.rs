//! `sera`: command-line front end for the scenario repair pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sera_core::analysis::{
    extract_patterns, extract_patterns_llm, extract_patterns_rules, load_patterns, save_patterns, Granularity,
};
use sera_core::bank::load_drafts;
use sera_core::embed::DEFAULT_DIM;
use sera_core::harness::{load_logs, load_routes, pre_evaluate, save_logs};
use sera_core::recommend::{
    load_candidates, recommend, refine, reflect_llm, reflect_rules, save_candidates, save_suggestions,
    ReflectThresholds, ReflectionSuggestion, DEFAULT_K, DEFAULT_TAU_COV, DEFAULT_TAU_DUP,
};
use sera_core::repair::{render_ablation, run_ablation, run_repair, RepairConfig};
use sera_core::{fixture, Embedder, Error, LlmClient, LlmConfig, PolicyParams, ScenarioBank};

const EXIT_CONFIG: u8 = 2;
const EXIT_UPSTREAM: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sera",
    version,
    about = "Failure-aware scenario recommendation and policy repair"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Manage the scenario bank.
    Bank {
        /// Bank file (JSON Lines).
        #[arg(long, global = true, default_value = "bank.jsonl")]
        bank: PathBuf,
        #[command(subcommand)]
        action: BankAction,
    },
    /// Run a policy on a route set and write performance logs.
    Evaluate {
        /// Policy parameters as JSON; the shipped baseline when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        routes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract failure patterns from performance logs.
    Analyze {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Rules)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Scope::Global)]
        granularity: Scope,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select the K scenarios most relevant to a pattern set.
    Recommend {
        #[arg(long)]
        patterns: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(short = 'K', long = "k", default_value_t = DEFAULT_K)]
        k: usize,
        /// Candidate output (JSON Lines); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Audit a candidate set and optionally apply the suggestions.
    Reflect(ReflectArgs),
    /// Run the closed repair loop.
    Repair {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the random, initial and full selection arms.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        /// Also write the rows as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the demonstration fixture.
    #[command(hide = true)]
    Fixture {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum BankAction {
    /// Add scenarios from a JSON Lines file of drafts.
    Ingest { file: PathBuf },
    /// Print one line per scenario.
    List,
    /// Print attribute counts as JSON.
    Stats,
}

#[derive(Args)]
struct ReflectArgs {
    #[arg(long, value_enum, default_value_t = Mode::Rules)]
    mode: Mode,
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    patterns: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU_COV)]
    tau_cov: f64,
    #[arg(long, default_value_t = DEFAULT_TAU_DUP)]
    tau_dup: f64,
    /// Suggestion output (JSON Lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also apply the suggestions and write the refined set as JSON.
    #[arg(long)]
    refined: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Llm,
    Rules,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Global,
    PerRoute,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error.root() {
            Error::InvalidConfig(_) => EXIT_CONFIG,
            _ => EXIT_UPSTREAM,
        };
        Self { code, error }
    }
}

fn config_failure(error: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        error,
    }
}

type CliResult = Result<(), Failure>;

fn llm_client() -> Result<LlmClient, Failure> {
    LlmConfig::from_env().map(LlmClient::new).map_err(config_failure)
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

/// Writes one line to stdout. A closed pipe (`sera bank list | head`) ends
/// the process quietly instead of panicking.
fn emit(line: &str) {
    use std::io::Write;
    if let Err(e) = writeln!(std::io::stdout().lock(), "{line}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing to stdout: {e}");
        std::process::exit(i32::from(EXIT_UPSTREAM));
    }
}

fn print_jsonl<T: serde::Serialize>(items: &[T]) {
    for item in items {
        emit(&serde_json::to_string(item).expect("item serializes"));
    }
}

fn bank_command(path: &Path, action: BankAction) -> CliResult {
    match action {
        BankAction::Ingest { file } => {
            let mut bank = if path.exists() {
                ScenarioBank::load(path)?
            } else {
                ScenarioBank::new()
            };
            let report = bank.ingest(load_drafts(&file)?)?;
            bank.refresh_embeddings(&Embedder::hashed(DEFAULT_DIM))?;
            bank.save(path)?;
            emit(&to_json(&report));
        }
        BankAction::List => {
            for record in ScenarioBank::load(path)?.scan() {
                emit(&format!("{}\t{}", record.scenario_id, record.text.text));
            }
        }
        BankAction::Stats => emit(&to_json(&ScenarioBank::load(path)?.stats())),
    }
    Ok(())
}

fn evaluate(policy: Option<PathBuf>, routes: &Path, out: &Path) -> CliResult {
    let theta = match policy {
        Some(p) => PolicyParams::load(&p)?,
        None => PolicyParams::baseline(),
    };
    let evaluation = pre_evaluate(&theta, &load_routes(routes)?)?;
    save_logs(out, &evaluation.logs)?;
    emit(&to_json(&evaluation.summary));
    Ok(())
}

fn analyze(logs: &Path, mode: Mode, scope: Scope, out: &Path) -> CliResult {
    let logs = load_logs(logs)?;
    let granularity = match scope {
        Scope::Global => Granularity::Global,
        Scope::PerRoute => Granularity::PerRoute,
    };
    let patterns = match mode {
        Mode::Rules => extract_patterns(&logs, granularity, |l| Ok(extract_patterns_rules(l)))?,
        Mode::Llm => {
            let llm = llm_client()?;
            extract_patterns(&logs, granularity, |l| extract_patterns_llm(l, &llm))?
        }
    };
    save_patterns(out, &patterns)?;
    log::info!("{} patterns from {} logs", patterns.len(), logs.len());
    Ok(())
}

fn recommend_command(patterns: &Path, bank: &Path, k: usize, out: Option<PathBuf>) -> CliResult {
    let patterns = load_patterns(patterns)?;
    let bank = ScenarioBank::load(bank)?;
    let candidates = recommend(&bank, &patterns, k, &Embedder::hashed(DEFAULT_DIM))?;
    match out {
        Some(path) => save_candidates(&path, &candidates)?,
        None => print_jsonl(&candidates.members),
    }
    Ok(())
}

fn reflect(args: ReflectArgs) -> CliResult {
    let candidates = load_candidates(&args.candidates)?;
    let patterns = load_patterns(&args.patterns)?;
    let bank = ScenarioBank::load(&args.bank)?;
    let embedder = Embedder::hashed(DEFAULT_DIM);
    let thresholds = ReflectThresholds {
        tau_cov: args.tau_cov,
        tau_dup: args.tau_dup,
    };
    if !(0.0..=1.0).contains(&thresholds.tau_cov) || !(0.0..=1.0).contains(&thresholds.tau_dup) {
        return Err(Error::InvalidConfig("tau_cov and tau_dup must lie in [0, 1]".into()).into());
    }
    let suggestions: Vec<ReflectionSuggestion> = match args.mode {
        Mode::Rules => reflect_rules(&candidates, &patterns, &bank, &embedder, thresholds)?,
        Mode::Llm => reflect_llm(&candidates, &patterns, &bank, &llm_client()?)?,
    };
    match &args.out {
        Some(path) => save_suggestions(path, &suggestions)?,
        None => print_jsonl(&suggestions),
    }
    if let Some(path) = &args.refined {
        let refined = refine(&candidates, &suggestions, &bank, &patterns, &embedder)?;
        write_text(path, &(to_json(&refined) + "\n"))?;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RepairConfig, Failure> {
    RepairConfig::load(path).map_err(config_failure)
}

fn optional_llm(cfg: &RepairConfig) -> Result<Option<LlmClient>, Failure> {
    let wants_llm = cfg.analyzer == sera_core::repair::AnalyzerMode::Llm
        || cfg.reflection == sera_core::repair::ReflectionMode::Llm;
    wants_llm.then(llm_client).transpose()
}

fn repair(config: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let llm = optional_llm(&cfg)?;
    let report = run_repair(&cfg, llm.as_ref())?;
    report.save(out)?;
    emit(&format!(
        "driving score {:.2} -> {:.2}, infractions {} -> {}, successes {} -> {}",
        report.before.driving_score,
        report.after.driving_score,
        report.before.infractions,
        report.after.infractions,
        report.before.successes,
        report.after.successes,
    ));
    Ok(())
}

fn ablation(config: &Path, out: Option<PathBuf>) -> CliResult {
    let cfg = load_config(config)?;
    let llm = optional_llm(&cfg)?;
    let rows = run_ablation(&cfg, llm.as_ref())?;
    emit(render_ablation(&rows).trim_end());
    if let Some(path) = out {
        write_text(&path, &(to_json(&rows) + "\n"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Bank { bank, action } => bank_command(&bank, action),
        Command::Evaluate { policy, routes, out } => evaluate(policy, &routes, &out),
        Command::Analyze {
            logs,
            mode,
            granularity,
            out,
        } => analyze(&logs, mode, granularity, &out),
        Command::Recommend { patterns, bank, k, out } => recommend_command(&patterns, &bank, k, out),
        Command::Reflect(args) => reflect(args),
        Command::Repair { config, out } => repair(&config, &out),
        Command::Ablation { config, out } => ablation(&config, out),
        Command::Fixture { out_dir } => Ok(fixture::write_fixture(&out_dir)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
