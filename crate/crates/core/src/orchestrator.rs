//! The run loop and success evaluation.
//!
//! A step renders the planner prompt, gets a response through the cascade,
//! dispatches the chosen action and appends the record to the trace. A run
//! ends on a final answer, the action budget, an exhausted cascade or an
//! unrecoverable fault. The evaluator then scores the final workspace.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rust_decimal::prelude::{FromPrimitive, ToPrimitive};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::{
    available_planner_actions, plan_next, request_expert, Attempt, CascadeConfig, CascadeError, CascadeState,
    PlanningCalls,
};
use crate::environment::{Environment, EnvironmentSettings, WorkerCalls, Workspace, REQUEST_EXPERT};
use crate::gateway::{Endpoint, ModelDescriptor, ModelGateway};
use crate::grammar::{canonical_json, render_planner_prompt, PROMPT_TEMPLATE_VERSION};
use crate::ledger::{aggregate, combine_runs, pricing_table, CostLedger, CostReport};
use crate::memory::{
    ResearchLog, RunEnd, StepRecord, TraceHeader, TraceLine, TraceWriter, DEFAULT_SHORT_TERM_K, TRACE_VERSION,
};
use crate::money::Money;

pub const DEFAULT_MAX_ACTIONS: usize = 30;
pub const DEFAULT_PLANNING_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_WORKER_TEMPERATURE: f64 = 0.01;
/// Success requires strictly more than this improvement.
pub const SUCCESS_THRESHOLD: &str = "0.10";
pub const MANIFEST_FILE: &str = "task.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricDirection {
    #[default]
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementMode {
    /// `(final - baseline) / |baseline|`.
    #[default]
    Relative,
    /// `final - baseline`, for metrics already expressed as fractions.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    MaxActionsReached,
    CascadeExhausted,
    EnvFatal,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Completed => "completed",
            RunStatus::MaxActionsReached => "max_actions_reached",
            RunStatus::CascadeExhausted => "cascade_exhausted",
            RunStatus::EnvFatal => "env_fatal",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("baseline score is 0; relative improvement is undefined")]
    BaselineDegenerate,
    #[error("score is not finite")]
    NonFinite,
    #[error("no runs to rate")]
    EmptyRunSet,
}

fn exact(x: f64) -> Option<Decimal> {
    Decimal::from_str(&x.to_string()).ok().or_else(|| Decimal::from_f64(x))
}

/// Improvement over the baseline and whether it clears the threshold.
///
/// Scores are compared in decimal using their shortest text form, so a
/// 0.55 score against a 0.50 baseline is exactly 10% and fails.
pub fn evaluate_success(
    final_score: f64,
    baseline: f64,
    direction: MetricDirection,
    mode: ImprovementMode,
) -> Result<(f64, bool), EvalError> {
    if !final_score.is_finite() || !baseline.is_finite() {
        return Err(EvalError::NonFinite);
    }
    if mode == ImprovementMode::Relative && baseline == 0.0 {
        return Err(EvalError::BaselineDegenerate);
    }
    let threshold = Decimal::from_str(SUCCESS_THRESHOLD).expect("threshold literal");
    if let (Some(f), Some(b)) = (exact(final_score), exact(baseline)) {
        let delta = match direction {
            MetricDirection::HigherIsBetter => f - b,
            MetricDirection::LowerIsBetter => b - f,
        };
        let improvement = match mode {
            ImprovementMode::Relative => delta.checked_div(b.abs()),
            ImprovementMode::Absolute => Some(delta),
        };
        if let Some(imp) = improvement {
            return Ok((imp.to_f64().unwrap_or(f64::NAN), imp > threshold));
        }
    }
    let delta = match direction {
        MetricDirection::HigherIsBetter => final_score - baseline,
        MetricDirection::LowerIsBetter => baseline - final_score,
    };
    let imp = match mode {
        ImprovementMode::Relative => delta / baseline.abs(),
        ImprovementMode::Absolute => delta,
    };
    Ok((imp, imp > 0.10))
}

/// Percentage of successful runs.
pub fn success_rate<'a>(results: impl IntoIterator<Item = &'a RunResult>) -> Result<f64, EvalError> {
    success_rate_of(results.into_iter().map(|r| r.success))
}

pub fn success_rate_of(outcomes: impl IntoIterator<Item = bool>) -> Result<f64, EvalError> {
    let (mut total, mut ok) = (0u32, 0u32);
    for s in outcomes {
        total += 1;
        ok += u32::from(s);
    }
    if total == 0 {
        return Err(EvalError::EmptyRunSet);
    }
    Ok(100.0 * f64::from(ok) / f64::from(total))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task package {dir}: {detail}")]
    Invalid { dir: String, detail: String },
}

/// Raw manifest; every field is optional so validation can list all
/// problems at once.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    id: Option<String>,
    description_file: Option<String>,
    baseline_score: Option<f64>,
    metric_direction: Option<MetricDirection>,
    improvement_mode: Option<ImprovementMode>,
    interpreter_command: Option<String>,
    execute_timeout_s: Option<u64>,
    evaluator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskPackage {
    pub id: String,
    pub dir: PathBuf,
    pub description_text: String,
    pub seed_workspace: PathBuf,
    /// Evaluator argv. `{task_dir}` is replaced by the package directory; the
    /// command runs inside the final workspace.
    pub evaluator: Vec<String>,
    pub baseline_score: f64,
    pub metric_direction: MetricDirection,
    pub improvement_mode: ImprovementMode,
    pub interpreter_command: Vec<String>,
    pub execute_timeout_s: u64,
}

fn which(program: &str) -> bool {
    if program.contains('/') {
        return Path::new(program).is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|d| d.join(program).is_file()))
        .unwrap_or(false)
}

impl TaskPackage {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TaskError> {
        let (task, problems) = Self::inspect(dir.as_ref());
        match (task, problems.is_empty()) {
            (Some(t), true) => Ok(t),
            _ => Err(TaskError::Invalid { dir: dir.as_ref().display().to_string(), detail: problems.join("; ") }),
        }
    }

    /// Loads the package and lists every problem found, including whether
    /// the evaluator and interpreter programs can be started.
    pub fn diagnose(dir: impl AsRef<Path>) -> Vec<String> {
        Self::inspect(dir.as_ref()).1
    }

    fn inspect(dir: &Path) -> (Option<Self>, Vec<String>) {
        // The evaluator runs inside the run workspace, so `{task_dir}` must
        // not depend on the caller's working directory.
        let absolute = std::fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf());
        let dir = absolute.as_path();
        let mut problems = Vec::new();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = match std::fs::read_to_string(&manifest_path) {
            Ok(t) => t,
            Err(e) => return (None, vec![format!("{}: {e}", manifest_path.display())]),
        };
        let m: Manifest = match toml::from_str(&text) {
            Ok(m) => m,
            Err(e) => return (None, vec![format!("{MANIFEST_FILE}: {}", e.message())]),
        };
        let mut missing = |field: &str| problems.push(format!("{MANIFEST_FILE}: missing field `{field}`"));
        if m.id.is_none() {
            missing("id");
        }
        if m.baseline_score.is_none() {
            missing("baseline_score");
        }
        if m.evaluator.is_none() {
            missing("evaluator");
        }
        if let Some(b) = m.baseline_score {
            if !b.is_finite() {
                problems.push(format!("{MANIFEST_FILE}: baseline_score must be finite"));
            } else if b == 0.0 && m.improvement_mode.unwrap_or_default() == ImprovementMode::Relative {
                problems.push(format!("{MANIFEST_FILE}: baseline_score is 0, relative improvement is undefined"));
            }
        }
        let description_file = m.description_file.clone().unwrap_or_else(|| "description.md".into());
        let description_text = match std::fs::read_to_string(dir.join(&description_file)) {
            Ok(t) if !t.trim().is_empty() => t,
            Ok(_) => {
                problems.push(format!("{description_file}: description is empty"));
                String::new()
            }
            Err(e) => {
                problems.push(format!("{description_file}: {e}"));
                String::new()
            }
        };
        let seed = dir.join("workspace");
        if !seed.is_dir() {
            problems.push("workspace/: seed workspace directory is missing".into());
        }
        let evaluator: Vec<String> = m
            .evaluator
            .as_deref()
            .unwrap_or("")
            .split_whitespace()
            .map(|s| s.replace("{task_dir}", &dir.display().to_string()))
            .collect();
        if m.evaluator.is_some() {
            match evaluator.first() {
                None => problems.push(format!("{MANIFEST_FILE}: evaluator is empty")),
                Some(p) if !which(p) => problems.push(format!("evaluator: command not found: {p}")),
                _ => {}
            }
        }
        let interpreter: Vec<String> =
            m.interpreter_command.as_deref().unwrap_or("python3").split_whitespace().map(String::from).collect();
        match interpreter.first() {
            None => problems.push(format!("{MANIFEST_FILE}: interpreter_command is empty")),
            Some(p) if !which(p) => problems.push(format!("interpreter_command: command not found: {p}")),
            _ => {}
        }
        if m.execute_timeout_s == Some(0) {
            problems.push(format!("{MANIFEST_FILE}: execute_timeout_s must be >= 1"));
        }
        let (Some(id), Some(baseline_score)) = (m.id, m.baseline_score) else {
            return (None, problems);
        };
        let task = TaskPackage {
            id,
            dir: dir.to_path_buf(),
            description_text,
            seed_workspace: seed,
            evaluator,
            baseline_score,
            metric_direction: m.metric_direction.unwrap_or_default(),
            improvement_mode: m.improvement_mode.unwrap_or_default(),
            interpreter_command: interpreter,
            execute_timeout_s: m.execute_timeout_s.unwrap_or(crate::environment::DEFAULT_EXECUTE_TIMEOUT_S),
        };
        (Some(task), problems)
    }

    /// Runs the evaluator in `workspace` and parses the last non-empty
    /// stdout line as the score.
    pub fn evaluate(&self, workspace: &Path) -> Result<f64, String> {
        let (program, args) = self.evaluator.split_first().ok_or("evaluator is empty")?;
        let output = std::process::Command::new(program)
            .args(args)
            .current_dir(workspace)
            .stdin(std::process::Stdio::null())
            .output()
            .map_err(|e| format!("evaluator {program}: {e}"))?;
        let stdout = String::from_utf8_lossy(&output.stdout);
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(format!("evaluator exited with {}: {}", output.status, stderr.trim()));
        }
        let last = stdout.lines().rev().find(|l| !l.trim().is_empty()).ok_or("evaluator printed nothing")?;
        last.trim().parse::<f64>().map_err(|_| format!("evaluator output is not a number: {last:?}"))
    }
}

/// Copies a directory tree; symlinks are copied as links.
pub fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    let mut entries: Vec<_> = std::fs::read_dir(from)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let ty = entry.file_type()?;
        let dest = to.join(entry.file_name());
        if ty.is_dir() {
            copy_tree(&entry.path(), &dest)?;
        } else if ty.is_symlink() {
            std::os::unix::fs::symlink(std::fs::read_link(entry.path())?, &dest)?;
        } else {
            std::fs::copy(entry.path(), &dest)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub max_actions: usize,
    pub short_term_k: usize,
    pub retrieval_enabled: bool,
    pub cascade: CascadeConfig,
    pub planning_temperature: f64,
    pub worker_temperature: f64,
    /// Model that serves worker actions and retrieval. Defaults to tier 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_model: Option<ModelDescriptor>,
    pub seed_label: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunConfigError {
    #[error("max_actions must be >= 1")]
    MaxActions,
    #[error("{field} must be within [0, 1], got {value}")]
    Temperature { field: &'static str, value: f64 },
    #[error("worker model: {0}")]
    Worker(String),
    #[error("cascade: {0}")]
    Cascade(#[from] crate::cascade::CascadeConfigError),
}

impl RunConfig {
    pub fn new(cascade: CascadeConfig) -> Self {
        RunConfig {
            max_actions: DEFAULT_MAX_ACTIONS,
            short_term_k: DEFAULT_SHORT_TERM_K,
            retrieval_enabled: true,
            cascade,
            planning_temperature: DEFAULT_PLANNING_TEMPERATURE,
            worker_temperature: DEFAULT_WORKER_TEMPERATURE,
            worker_model: None,
            seed_label: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), RunConfigError> {
        if self.max_actions < 1 {
            return Err(RunConfigError::MaxActions);
        }
        for (field, value) in
            [("planning_temperature", self.planning_temperature), ("worker_temperature", self.worker_temperature)]
        {
            if !(0.0..=1.0).contains(&value) {
                return Err(RunConfigError::Temperature { field, value });
            }
        }
        self.cascade.validate()?;
        if let Some(w) = &self.worker_model {
            w.validate().map_err(|e| RunConfigError::Worker(e.to_string()))?;
            if let Some(t) = self.cascade.tiers.iter().find(|t| t.id == w.id) {
                if t != w {
                    return Err(RunConfigError::Worker(format!("{} differs from the tier of the same id", w.id)));
                }
            }
        }
        Ok(())
    }

    pub fn worker(&self) -> Result<&ModelDescriptor, RunConfigError> {
        match &self.worker_model {
            Some(w) => Ok(w),
            None => {
                self.cascade.tiers.first().ok_or(RunConfigError::Cascade(crate::cascade::CascadeConfigError::NoTiers))
            }
        }
    }

    /// Every model the run may call: the tiers, then a separate worker.
    pub fn models(&self) -> Vec<&ModelDescriptor> {
        let mut models: Vec<&ModelDescriptor> = self.cascade.tiers.iter().collect();
        if let Some(w) = &self.worker_model {
            if !models.iter().any(|m| m.id == w.id) {
                models.push(w);
            }
        }
        models
    }

    /// The configuration as written to trace headers. Scripted replies are
    /// left out; prices and retry budgets are kept.
    pub fn effective_json(&self) -> Value {
        let describe = |t: &ModelDescriptor| {
            let endpoint = match &t.endpoint {
                Endpoint::Remote(r) => json!({"kind": "remote", "base_url": r.base_url, "model_name": r.model_name}),
                Endpoint::Scripted(s) => json!({"kind": "scripted", "replies": s.replies.len()}),
            };
            json!({
                "id": t.id,
                "tier_rank": t.tier_rank,
                "max_format_retries": t.max_format_retries,
                "price_per_input_token": t.price_per_input_token,
                "price_per_output_token": t.price_per_output_token,
                "endpoint": endpoint,
            })
        };
        let tiers: Vec<Value> = self.cascade.tiers.iter().map(describe).collect();
        json!({
            "max_actions": self.max_actions,
            "short_term_k": self.short_term_k,
            "retrieval_enabled": self.retrieval_enabled,
            "planning_temperature": self.planning_temperature,
            "worker_temperature": self.worker_temperature,
            "worker_model": self.worker_model.as_ref().map(describe),
            "seed_label": self.seed_label,
            "cascade": {
                "tiers": tiers,
                "repeat_threshold": self.cascade.repeat_threshold,
                "lifeline_cap": self.cascade.lifeline_cap,
                "expert_enabled": self.cascade.expert_enabled,
                "expert_tier_index": self.cascade.expert_tier_index(),
                "repeat_trigger": self.cascade.repeat_trigger,
            },
        })
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(canonical_json(&self.effective_json()).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub status: RunStatus,
    pub final_score: Option<f64>,
    pub improvement_fraction: Option<f64>,
    pub success: bool,
    pub step_count: usize,
    pub lifelines_used: u32,
    pub cost_report: CostReport,
    pub trace_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    TaskPackageInvalid(#[from] TaskError),
    #[error("invalid run configuration: {0}")]
    Config(#[from] RunConfigError),
    #[error("{0}")]
    Io(String),
}

/// Where a run keeps its files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub run_id: String,
    /// Created by the run; must not exist yet.
    pub workspace: PathBuf,
    /// Created by the run; must not exist yet.
    pub trace: PathBuf,
}

/// Runs one task to completion. In-run failures are reported through
/// [`RunResult::status`]; only setup problems are errors.
pub fn run_task(
    task: &TaskPackage,
    config: &RunConfig,
    gateway: &ModelGateway,
    paths: &RunPaths,
) -> Result<RunResult, RunError> {
    config.validate()?;
    if !task.seed_workspace.is_dir() {
        return Err(TaskError::Invalid {
            dir: task.dir.display().to_string(),
            detail: "seed workspace is missing".into(),
        }
        .into());
    }
    if paths.workspace.exists() {
        return Err(RunError::Io(format!("workspace {} already exists", paths.workspace.display())));
    }
    copy_tree(&task.seed_workspace, &paths.workspace)
        .map_err(|e| RunError::Io(format!("copying seed workspace: {e}")))?;
    let workspace = Workspace::open(&paths.workspace).map_err(|e| RunError::Io(e.to_string()))?;
    let settings = EnvironmentSettings {
        interpreter: task.interpreter_command.clone(),
        execute_timeout: std::time::Duration::from_secs(task.execute_timeout_s),
        ..Default::default()
    };
    let prompt_budget = settings.prompt_budget_chars;
    let mut env = Environment::new(workspace, settings, task.description_text.clone());

    let pricing = pricing_table(config.models());
    let header = TraceHeader {
        version: TRACE_VERSION,
        task_id: task.id.clone(),
        run_id: paths.run_id.clone(),
        config_hash: config.hash(),
        prompt_template_version: PROMPT_TEMPLATE_VERSION.to_string(),
        task: json!({
            "baseline_score": task.baseline_score,
            "metric_direction": task.metric_direction,
            "improvement_mode": task.improvement_mode,
        }),
        config: config.effective_json(),
        pricing: pricing.clone(),
    };
    if let Some(parent) = paths.trace.parent() {
        std::fs::create_dir_all(parent).map_err(|e| RunError::Io(e.to_string()))?;
    }
    let io = |e: crate::memory::LogError| RunError::Io(e.to_string());
    let mut writer = TraceWriter::create(&paths.trace).map_err(io)?;
    writer.write_line(&TraceLine::Header(header.clone())).map_err(io)?;

    let worker = config.worker()?.clone();
    let mut ledger = CostLedger::new();
    let mut log = ResearchLog::new(header);
    let mut state = CascadeState::new(&config.cascade);
    let mut unattached_attempts: Vec<Attempt> = Vec::new();
    let mut unattached_from = None;
    let mut ended: Option<(RunStatus, Option<String>)> = None;

    for step in 0..config.max_actions {
        let events_before = ledger.len();
        let actions = available_planner_actions(&state, &config.cascade, env.actions());
        let allowed: Vec<&str> = actions.iter().map(|a| a.name.as_str()).collect();

        let current_plan = log.records().last().map(|r| r.planner_response.plan_and_status.clone()).unwrap_or_default();
        let retrieval = {
            let mut calls = WorkerCalls {
                gateway,
                model: &worker,
                ledger: &mut ledger,
                run_id: &paths.run_id,
                step_index: step,
                temperature: config.worker_temperature,
            };
            log.retrieve(&current_plan, config.retrieval_enabled, config.short_term_k, prompt_budget, &mut calls)
        };
        let prompt = render_planner_prompt(
            &task.description_text,
            &actions,
            log.recent_window(config.short_term_k),
            config.retrieval_enabled.then_some(retrieval.summary.as_str()),
        );

        let mut planning = PlanningCalls {
            gateway,
            ledger: &mut ledger,
            run_id: &paths.run_id,
            step_index: step,
            temperature: config.planning_temperature,
        };
        let planned = plan_next(&prompt, &mut state, &config.cascade, &allowed, &mut planning).and_then(|plan| {
            if plan.response.action_name != REQUEST_EXPERT {
                return Ok(plan);
            }
            let question = plan.response.action_input.get("question").and_then(Value::as_str).unwrap_or("").to_string();
            let mut attempts = plan.attempts;
            match request_expert(&question, &prompt, &mut state, &config.cascade, &allowed, &mut planning) {
                Ok(mut expert) => {
                    attempts.append(&mut expert.attempts);
                    expert.attempts = attempts;
                    Ok(expert)
                }
                Err(CascadeError::Exhausted { lifeline_cap_hit, attempts: mut more }) => {
                    attempts.append(&mut more);
                    Err(CascadeError::Exhausted { lifeline_cap_hit, attempts })
                }
                Err(CascadeError::Fatal { error, attempts: mut more }) => {
                    attempts.append(&mut more);
                    Err(CascadeError::Fatal { error, attempts })
                }
                Err(e @ CascadeError::LifelinesExhausted { .. }) => Err(e),
            }
        });
        let plan = match planned {
            Ok(plan) => plan,
            Err(e) => {
                let status = match e {
                    CascadeError::Fatal { .. } => RunStatus::EnvFatal,
                    _ => RunStatus::CascadeExhausted,
                };
                unattached_attempts = e.attempts().to_vec();
                unattached_from = Some(events_before);
                ended = Some((status, Some(e.to_string())));
                break;
            }
        };

        let response = plan.response;
        let dispatched = {
            let mut calls = WorkerCalls {
                gateway,
                model: &worker,
                ledger: &mut ledger,
                run_id: &paths.run_id,
                step_index: step,
                temperature: config.worker_temperature,
            };
            env.dispatch(&response.action_name, &response.action_input, &log, &mut calls)
        };
        let observation = match dispatched {
            Ok(obs) => obs,
            Err(e) if e.is_fatal() => {
                ended = Some((RunStatus::EnvFatal, Some(e.to_string())));
                e.into_observation(&response.action_name)
            }
            Err(e) => e.into_observation(&response.action_name),
        };
        state.record_action(response.action_key());

        let events = ledger.events()[events_before..].to_vec();
        let record = StepRecord {
            index: step,
            tier: plan.tier,
            planner_model: plan.model_id,
            escalation_trace: plan.attempts,
            action_name: response.action_name.clone(),
            action_input: response.action_input.clone(),
            planner_response: response,
            observation,
            retrieval: config.retrieval_enabled.then_some(retrieval),
            lifelines_used: state.lifelines_used,
            usage_event_ids: events.iter().map(|e| e.id).collect(),
            usage_events: events,
        };
        tracing::debug!(
            run = %paths.run_id,
            step,
            tier = record.tier,
            action = %record.action_name,
            attempts = record.escalation_trace.len(),
            "step done"
        );
        writer.write_line(&TraceLine::Step(Box::new(record.clone()))).map_err(io)?;
        log.append_step(record).map_err(io)?;

        if ended.is_some() {
            break;
        }
        if env.is_finished() {
            ended = Some((RunStatus::Completed, None));
            break;
        }
    }
    let (status, mut detail) = ended.unwrap_or((RunStatus::MaxActionsReached, None));

    let (mut final_score, mut improvement, mut success) = (None, None, false);
    if matches!(status, RunStatus::Completed | RunStatus::MaxActionsReached) {
        match task.evaluate(env.workspace().root()) {
            Ok(score) => {
                final_score = Some(score);
                match evaluate_success(score, task.baseline_score, task.metric_direction, task.improvement_mode) {
                    Ok((imp, ok)) => {
                        improvement = Some(imp);
                        success = ok;
                    }
                    Err(e) => detail = Some(e.to_string()),
                }
            }
            Err(e) => detail = Some(e),
        }
    }

    let cost_report = aggregate(ledger.events(), &pricing).map_err(|e| RunError::Io(e.to_string()))?;
    let end = RunEnd {
        status,
        step_count: log.len(),
        lifelines_used: state.lifelines_used,
        final_score,
        improvement_fraction: improvement,
        success,
        detail: detail.clone(),
        unattached_usage_events: unattached_from.map(|i| ledger.events()[i..].to_vec()).unwrap_or_default(),
        unattached_attempts,
        total_cost: cost_report.total,
    };
    writer.write_line(&TraceLine::RunEnd(end)).map_err(io)?;
    tracing::info!(
        run = %paths.run_id,
        status = %status,
        steps = log.len(),
        cost = %cost_report.total,
        "run finished"
    );

    Ok(RunResult {
        run_id: paths.run_id.clone(),
        status,
        final_score,
        improvement_fraction: improvement,
        success,
        step_count: log.len(),
        lifelines_used: state.lifelines_used,
        cost_report,
        trace_path: paths.trace.clone(),
        detail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub task_id: String,
    pub runs: Vec<RunResult>,
    pub success_rate: f64,
    pub average_cost_per_run: Money,
    pub cost: CostReport,
    pub status_counts: BTreeMap<String, usize>,
}

impl BatchReport {
    pub fn from_runs(task_id: &str, runs: Vec<RunResult>) -> Result<Self, EvalError> {
        let success_rate = success_rate(&runs)?;
        let reports: Vec<CostReport> = runs.iter().map(|r| r.cost_report.clone()).collect();
        let cost = combine_runs(&reports);
        let mut status_counts = BTreeMap::new();
        for r in &runs {
            *status_counts.entry(r.status.to_string()).or_insert(0) += 1;
        }
        Ok(BatchReport {
            task_id: task_id.to_string(),
            success_rate,
            average_cost_per_run: cost.average_per_run.unwrap_or(Money::ZERO),
            cost,
            status_counts,
            runs,
        })
    }
}

pub fn run_id(task_id: &str, n: usize) -> String {
    format!("{task_id}-run{n}")
}

/// Runs `n_runs` independent runs, at most `parallelism` at a time. Each run
/// gets its own gateway from `make_gateway`, its own workspace under
/// `out/workspaces` and its own trace under `out/traces`.
pub fn run_batch(
    task: &TaskPackage,
    config: &RunConfig,
    n_runs: usize,
    parallelism: usize,
    out: &Path,
    make_gateway: &(dyn Fn() -> ModelGateway + Sync),
) -> Result<BatchReport, RunError> {
    config.validate()?;
    if n_runs == 0 {
        return Err(RunError::Io("n_runs must be >= 1".into()));
    }
    let next = AtomicUsize::new(1);
    let results: Mutex<Vec<Result<RunResult, RunError>>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, n_runs) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i > n_runs {
                    break;
                }
                let id = run_id(&task.id, i);
                let paths = RunPaths {
                    workspace: out.join("workspaces").join(&id),
                    trace: out.join("traces").join(format!("{id}.jsonl")),
                    run_id: id,
                };
                let gateway = make_gateway();
                let r = run_task(task, config, &gateway, &paths);
                results.lock().expect("batch results poisoned").push(r);
            });
        }
    });
    let mut runs = Vec::with_capacity(n_runs);
    for r in results.into_inner().expect("batch results poisoned") {
        runs.push(r?);
    }
    runs.sort_by_key(|r| r.run_id.trim_start_matches(&format!("{}-run", task.id)).parse::<usize>().unwrap_or(0));
    BatchReport::from_runs(&task.id, runs).map_err(|e| RunError::Io(e.to_string()))
}
