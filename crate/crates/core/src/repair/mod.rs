//! The closed repair loop: evaluate, mine failure patterns, retrieve and refine
//! training scenarios, fine-tune the policy on them, and re-evaluate.

mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use train::{
    episode_loss, fail_loss, fine_tune, fine_tune_on, routes_loss, training_routes, TrainOutcome, TrainSettings,
    EARLY_STOP_PATIENCE, EARLY_STOP_TOLERANCE, S_COLLISION, S_RED_LIGHT, S_SPEEDING, W_COLLISION, W_DEVIATION, W_JERK,
    W_RED_LIGHT, W_SPEEDING,
};

use crate::analysis::{extract_patterns_llm, extract_patterns_rules, FailurePattern};
use crate::bank::ScenarioBank;
use crate::embed::{Embedder, DEFAULT_DIM};
use crate::error::{Error, Result, Stage, StageExt};
use crate::harness::{load_routes, pre_evaluate, PerformanceLog, PolicyParams, Route, Summary};
use crate::llm::LlmClient;
use crate::recommend::{
    random_selection, refine, reflect_llm, reflect_rules, score_bank, CandidateSet, RefinedSet, ReflectThresholds,
    ReflectionSuggestion, DEFAULT_K, DEFAULT_TAU_COV, DEFAULT_TAU_DUP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzerMode {
    Llm,
    Rules,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionMode {
    Llm,
    Rules,
    Off,
}

/// Which scenarios the policy is fine-tuned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// K scenarios drawn uniformly from the bank.
    Random,
    /// Top-K by relevance, no reflection.
    Initial,
    /// Top-K followed by reflection and refinement.
    Full,
}

impl Selection {
    pub const ALL: [Selection; 3] = [Selection::Random, Selection::Initial, Selection::Full];

    pub fn label(self) -> &'static str {
        match self {
            Selection::Random => "random",
            Selection::Initial => "initial",
            Selection::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One global iteration over all pre-evaluation logs.
    Batch,
    /// One iteration per route, updating the policy after each.
    PerRoute,
}

/// Flat repair configuration. Relative paths resolve against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairConfig {
    pub routes: PathBuf,
    pub bank: PathBuf,
    /// Initial policy parameters; the shipped baseline when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_analyzer")]
    pub analyzer: AnalyzerMode,
    #[serde(default = "default_reflection")]
    pub reflection: ReflectionMode,
    #[serde(default = "default_selection")]
    pub selection: Selection,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_max_grad_steps")]
    pub max_grad_steps: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: f64,
    #[serde(default = "default_episodes")]
    pub episodes_per_scenario: usize,
    #[serde(default = "default_tau_cov")]
    pub tau_cov: f64,
    #[serde(default = "default_tau_dup")]
    pub tau_dup: f64,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_analyzer() -> AnalyzerMode {
    AnalyzerMode::Rules
}
fn default_reflection() -> ReflectionMode {
    ReflectionMode::Rules
}
fn default_selection() -> Selection {
    Selection::Full
}
fn default_granularity() -> Granularity {
    Granularity::Batch
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_max_grad_steps() -> usize {
    200
}
fn default_fd_step() -> f64 {
    1e-3
}
fn default_max_grad_norm() -> f64 {
    10.0
}
fn default_episodes() -> usize {
    3
}
fn default_tau_cov() -> f64 {
    DEFAULT_TAU_COV
}
fn default_tau_dup() -> f64 {
    DEFAULT_TAU_DUP
}
fn default_embed_dim() -> usize {
    DEFAULT_DIM
}

impl RepairConfig {
    /// Config with defaults for everything but the input files.
    pub fn new(routes: impl Into<PathBuf>, bank: impl Into<PathBuf>) -> Self {
        Self {
            routes: routes.into(),
            bank: bank.into(),
            policy: None,
            k: default_k(),
            analyzer: default_analyzer(),
            reflection: default_reflection(),
            selection: default_selection(),
            granularity: default_granularity(),
            learning_rate: default_learning_rate(),
            max_grad_steps: default_max_grad_steps(),
            fd_step: default_fd_step(),
            max_grad_norm: default_max_grad_norm(),
            episodes_per_scenario: default_episodes(),
            tau_cov: default_tau_cov(),
            tau_dup: default_tau_dup(),
            embed_dim: default_embed_dim(),
            seed: 0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.routes = base.join(&cfg.routes);
        cfg.bank = base.join(&cfg.bank);
        cfg.policy = cfg.policy.map(|p| base.join(p));
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_grad_steps == 0 {
            return bad("max_grad_steps must be at least 1");
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return bad("fd_step must be positive");
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm <= 0.0 {
            return bad("max_grad_norm must be positive");
        }
        if self.episodes_per_scenario == 0 {
            return bad("episodes_per_scenario must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau_cov) || !(0.0..=1.0).contains(&self.tau_dup) {
            return bad("tau_cov and tau_dup must lie in [0, 1]");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1");
        }
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            learning_rate: self.learning_rate,
            max_grad_steps: self.max_grad_steps,
            fd_step: self.fd_step,
            max_grad_norm: self.max_grad_norm,
        }
    }

    pub fn thresholds(&self) -> ReflectThresholds {
        ReflectThresholds {
            tau_cov: self.tau_cov,
            tau_dup: self.tau_dup,
        }
    }

    /// Distinct rollout seeds shared by every training scenario.
    pub fn episode_seeds(&self) -> Vec<u64> {
        (0..self.episodes_per_scenario as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    fn needs_llm(&self) -> bool {
        self.analyzer == AnalyzerMode::Llm
            || (self.selection == Selection::Full && self.reflection == ReflectionMode::Llm)
    }
}

/// Everything one repair iteration produced, enough to replay refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Route the iteration was driven by; absent in batch mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_id: Option<String>,
    pub patterns: Vec<FailurePattern>,
    pub candidates: Option<CandidateSet>,
    pub suggestions: Vec<ReflectionSuggestion>,
    pub refined: Option<RefinedSet>,
    pub training: Option<TrainOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub config: RepairConfig,
    pub embedder_fingerprint: String,
    pub initial_theta: PolicyParams,
    pub final_theta: PolicyParams,
    pub before: Summary,
    pub after: Summary,
    pub before_logs: Vec<PerformanceLog>,
    pub after_logs: Vec<PerformanceLog>,
    pub iterations: Vec<IterationRecord>,
}

impl RepairReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::SchemaError {
            line: e.line(),
            field: "report".into(),
            message: e.to_string(),
        })
    }
}

/// Inputs of a repair run, loaded once.
pub struct RepairInputs {
    pub routes: Vec<Route>,
    pub bank: ScenarioBank,
    pub theta: PolicyParams,
}

impl RepairInputs {
    pub fn load(cfg: &RepairConfig) -> Result<Self> {
        let routes = load_routes(&cfg.routes).stage(Stage::Load)?;
        let bank = ScenarioBank::load(&cfg.bank).stage(Stage::Load)?;
        let theta = match &cfg.policy {
            Some(p) => PolicyParams::load(p).stage(Stage::Load)?,
            None => PolicyParams::baseline(),
        };
        Ok(Self { routes, bank, theta })
    }
}

struct Pipeline<'a> {
    cfg: &'a RepairConfig,
    bank: &'a ScenarioBank,
    embedder: Embedder,
    llm: Option<&'a LlmClient>,
}

impl Pipeline<'_> {
    fn llm(&self) -> Result<&LlmClient> {
        self.llm
            .ok_or_else(|| Error::InvalidConfig("LLM mode selected but no LLM client configured".into()))
    }

    /// Patterns, selection, reflection, refinement and fine-tuning for one set of logs.
    fn iterate(
        &self,
        theta: &PolicyParams,
        logs: &[PerformanceLog],
        route_id: Option<String>,
    ) -> Result<(PolicyParams, IterationRecord)> {
        let patterns = match self.cfg.analyzer {
            AnalyzerMode::Rules => extract_patterns_rules(logs),
            AnalyzerMode::Llm => extract_patterns_llm(logs, self.llm()?).stage(Stage::Analyze)?,
        };
        let mut record = IterationRecord {
            route_id,
            patterns,
            candidates: None,
            suggestions: Vec::new(),
            refined: None,
            training: None,
        };
        if record.patterns.is_empty() {
            return Ok((*theta, record));
        }
        let scores = score_bank(self.bank, &record.patterns, &self.embedder).stage(Stage::Recommend)?;
        if scores.is_empty() {
            return Err(Error::EmptyBank).stage(Stage::Recommend);
        }
        let candidates = match self.cfg.selection {
            Selection::Random => random_selection(scores, self.cfg.k, self.cfg.seed),
            Selection::Initial | Selection::Full => CandidateSet::top_k(scores, self.cfg.k),
        }
        .stage(Stage::Recommend)?;
        let suggestions = match (self.cfg.selection, self.cfg.reflection) {
            (Selection::Full, ReflectionMode::Rules) => reflect_rules(
                &candidates,
                &record.patterns,
                self.bank,
                &self.embedder,
                self.cfg.thresholds(),
            ),
            (Selection::Full, ReflectionMode::Llm) => {
                reflect_llm(&candidates, &record.patterns, self.bank, self.llm()?)
            }
            _ => Ok(Vec::new()),
        }
        .stage(Stage::Reflect)?;
        let refined =
            refine(&candidates, &suggestions, self.bank, &record.patterns, &self.embedder).stage(Stage::Refine)?;
        let outcome = fine_tune(
            theta,
            &refined,
            self.bank,
            &self.cfg.episode_seeds(),
            &self.cfg.train_settings(),
        )
        .stage(Stage::FineTune)?;
        let theta = outcome.theta;
        record.candidates = Some(candidates);
        record.suggestions = suggestions;
        record.refined = Some(refined);
        record.training = Some(outcome);
        Ok((theta, record))
    }
}

/// Runs the repair loop on already-loaded inputs.
pub fn run_repair_with(cfg: &RepairConfig, inputs: &RepairInputs, llm: Option<&LlmClient>) -> Result<RepairReport> {
    cfg.validate()?;
    let pipeline = Pipeline {
        cfg,
        bank: &inputs.bank,
        embedder: Embedder::hashed(cfg.embed_dim),
        llm,
    };
    if cfg.needs_llm() {
        pipeline.llm()?;
    }
    let before = pre_evaluate(&inputs.theta, &inputs.routes).stage(Stage::PreEvaluate)?;
    let mut theta = inputs.theta;
    let mut iterations = Vec::new();
    match cfg.granularity {
        Granularity::Batch => {
            let (next, record) = pipeline.iterate(&theta, &before.logs, None)?;
            theta = next;
            iterations.push(record);
        }
        Granularity::PerRoute => {
            for route in &inputs.routes {
                let logs = pre_evaluate(&theta, std::slice::from_ref(route))
                    .stage(Stage::PreEvaluate)?
                    .logs;
                let (next, record) = pipeline.iterate(&theta, &logs, Some(route.route_id.clone()))?;
                theta = next;
                iterations.push(record);
            }
        }
    }
    let after = pre_evaluate(&theta, &inputs.routes).stage(Stage::PostEvaluate)?;
    Ok(RepairReport {
        config: cfg.clone(),
        embedder_fingerprint: pipeline.embedder.fingerprint(),
        initial_theta: inputs.theta,
        final_theta: theta,
        before: before.summary,
        after: after.summary,
        before_logs: before.logs,
        after_logs: after.logs,
        iterations,
    })
}

/// Loads the configured inputs and runs the repair loop.
pub fn run_repair(cfg: &RepairConfig, llm: Option<&LlmClient>) -> Result<RepairReport> {
    cfg.validate()?;
    let inputs = RepairInputs::load(cfg)?;
    run_repair_with(cfg, &inputs, llm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Selection,
    pub before: Summary,
    pub after: Summary,
}

/// Runs the random, initial and full arms with identical seeds and budgets.
pub fn run_ablation(cfg: &RepairConfig, llm: Option<&LlmClient>) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let inputs = RepairInputs::load(cfg)?;
    Selection::ALL
        .iter()
        .map(|&arm| {
            let arm_cfg = RepairConfig {
                selection: arm,
                ..cfg.clone()
            };
            let report = run_repair_with(&arm_cfg, &inputs, llm)?;
            Ok(AblationRow {
                arm,
                before: report.before,
                after: report.after,
            })
        })
        .collect()
}

/// Plain-text comparison table of ablation arms.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:>13} {:>12} {:>11} {:>12} {:>12}\n",
        "arm", "driving score", "success (%)", "efficiency", "comfortness", "infractions"
    );
    if let Some(first) = rows.first() {
        out += &row_line("baseline", &first.before);
    }
    for row in rows {
        out += &row_line(row.arm.label(), &row.after);
    }
    out
}

fn row_line(label: &str, s: &Summary) -> String {
    format!(
        "{label:<10} {:>13.2} {:>12.2} {:>11.2} {:>12.2} {:>12}\n",
        s.driving_score, s.success_rate, s.efficiency, s.comfortness, s.infractions
    )
}
