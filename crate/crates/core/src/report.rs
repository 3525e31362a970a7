//! Reports and transcripts built from trace files.
//!
//! Every number is recomputed from the usage events and step records in the
//! traces. A stored run total that disagrees with the recomputed one is an
//! error. Costs include retrieval calls.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{Attempt, AttemptOutcome, EscalationReason};
use crate::ledger::{aggregate, combine_runs, CostReport, LedgerError, UsagePurpose};
use crate::memory::{read_trace, StepRecord, Trace, TraceError};
use crate::money::Money;
use crate::orchestrator::{evaluate_success, success_rate_of, ImprovementMode, MetricDirection, RunStatus};

pub const COST_CONVENTION: &str = "Costs count every model call, including retrieval summaries.";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no traces found in {0}")]
    EmptyRunSet(String),
    #[error("{path}: {source}")]
    Trace { path: String, source: TraceError },
    #[error("{path}: {source}")]
    Ledger { path: String, source: LedgerError },
    #[error("{path}: stored total {stored} but usage events add up to {recomputed}")]
    TotalMismatch { path: String, stored: Money, recomputed: Money },
    #[error("step {step} not in trace ({steps} steps)")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("{0}")]
    Io(String),
}

/// Figures for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub task_id: String,
    /// `None` when the trace has no closing record.
    pub status: Option<RunStatus>,
    pub final_score: Option<f64>,
    pub improvement_fraction: Option<f64>,
    pub success: bool,
    pub step_count: usize,
    pub lifelines_used: u32,
    pub cost: CostReport,
    pub escalations: BTreeMap<EscalationReason, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub average_cost_per_run: Money,
    pub cost: CostReport,
    pub escalations: BTreeMap<EscalationReason, usize>,
    /// Runs by number of lifelines used.
    pub lifeline_histogram: BTreeMap<u32, usize>,
    pub statuses: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tasks: Vec<TaskRow>,
    pub runs: Vec<RunSummary>,
    pub convention: String,
}

fn escalations_in<'a>(attempts: impl IntoIterator<Item = &'a Attempt>, into: &mut BTreeMap<EscalationReason, usize>) {
    for a in attempts {
        if let Some(r) = a.escalation {
            *into.entry(r).or_insert(0) += 1;
        }
    }
}

/// Recomputes one trace's figures and checks them against its stored total.
pub fn summarize_trace(trace: &Trace, path: &str) -> Result<RunSummary, ReportError> {
    let events = trace.usage_events();
    let cost = aggregate(&events, &trace.header.pricing)
        .map_err(|source| ReportError::Ledger { path: path.to_string(), source })?;

    let mut escalations = BTreeMap::new();
    for s in &trace.steps {
        escalations_in(&s.escalation_trace, &mut escalations);
    }
    let (mut status, mut final_score, mut improvement, mut success) = (None, None, None, false);
    let mut lifelines_used = trace.steps.last().map(|s| s.lifelines_used).unwrap_or(0);
    if let Some(end) = &trace.end {
        if end.total_cost != cost.total {
            return Err(ReportError::TotalMismatch {
                path: path.to_string(),
                stored: end.total_cost,
                recomputed: cost.total,
            });
        }
        escalations_in(&end.unattached_attempts, &mut escalations);
        status = Some(end.status);
        lifelines_used = end.lifelines_used;
        final_score = end.final_score;
        let task = &trace.header.task;
        let baseline = task.get("baseline_score").and_then(serde_json::Value::as_f64);
        let direction: MetricDirection =
            serde_json::from_value(task.get("metric_direction").cloned().unwrap_or_default()).unwrap_or_default();
        let mode: ImprovementMode =
            serde_json::from_value(task.get("improvement_mode").cloned().unwrap_or_default()).unwrap_or_default();
        if let (Some(score), Some(baseline)) = (final_score, baseline) {
            if let Ok((imp, ok)) = evaluate_success(score, baseline, direction, mode) {
                improvement = Some(imp);
                success = ok;
            }
        }
    }
    Ok(RunSummary {
        run_id: trace.header.run_id.clone(),
        task_id: trace.header.task_id.clone(),
        status,
        final_score,
        improvement_fraction: improvement,
        success,
        step_count: trace.steps.len(),
        lifelines_used,
        cost,
        escalations,
    })
}

/// Trace files directly in `dir` or in its `traces/` subdirectory.
pub fn find_traces(dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut found = Vec::new();
    for d in [dir.to_path_buf(), dir.join("traces")] {
        if !d.is_dir() {
            continue;
        }
        for entry in std::fs::read_dir(&d).map_err(|e| ReportError::Io(format!("{}: {e}", d.display())))? {
            let path = entry.map_err(|e| ReportError::Io(e.to_string()))?.path();
            if path.is_file() && path.extension().is_some_and(|x| x == "jsonl") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn build_report(dir: &Path) -> Result<Report, ReportError> {
    let paths = find_traces(dir)?;
    if paths.is_empty() {
        return Err(ReportError::EmptyRunSet(dir.display().to_string()));
    }
    let mut runs = Vec::with_capacity(paths.len());
    for p in &paths {
        let shown = p.display().to_string();
        let trace = read_trace(p).map_err(|source| ReportError::Trace { path: shown.clone(), source })?;
        runs.push(summarize_trace(&trace, &shown)?);
    }
    Ok(report_from_runs(runs))
}

pub fn report_from_runs(runs: Vec<RunSummary>) -> Report {
    let mut by_task: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
    for r in &runs {
        by_task.entry(r.task_id.clone()).or_default().push(r);
    }
    let tasks = by_task
        .into_iter()
        .map(|(task_id, rs)| {
            let reports: Vec<CostReport> = rs.iter().map(|r| r.cost.clone()).collect();
            let cost = combine_runs(&reports);
            let mut escalations = BTreeMap::new();
            let mut lifeline_histogram = BTreeMap::new();
            let mut statuses = BTreeMap::new();
            for r in &rs {
                for (k, v) in &r.escalations {
                    *escalations.entry(*k).or_insert(0) += v;
                }
                *lifeline_histogram.entry(r.lifelines_used).or_insert(0) += 1;
                let s = r.status.map(|s| s.to_string()).unwrap_or_else(|| "incomplete".into());
                *statuses.entry(s).or_insert(0) += 1;
            }
            TaskRow {
                runs: rs.len(),
                successes: rs.iter().filter(|r| r.success).count(),
                success_rate: success_rate_of(rs.iter().map(|r| r.success)).unwrap_or(0.0),
                average_cost_per_run: cost.average_per_run.unwrap_or(Money::ZERO),
                cost,
                escalations,
                lifeline_histogram,
                statuses,
                task_id,
            }
        })
        .collect();
    Report { tasks, runs, convention: COST_CONVENTION.to_string() }
}

fn reason_name(r: EscalationReason) -> &'static str {
    match r {
        EscalationReason::FormatFailure => "format_failure",
        EscalationReason::RepeatedAction => "repeated_action",
        EscalationReason::ExpertRequested => "expert_requested",
    }
}

pub fn render_report(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>5} {:>9} {:>12} {:>12} {:>8} {:>8} {:>8}",
        "task", "runs", "success%", "avg $/run", "total $", "format", "repeat", "expert"
    );
    for t in &report.tasks {
        let esc = |r| t.escalations.get(&r).copied().unwrap_or(0);
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>9.1} {:>12} {:>12} {:>8} {:>8} {:>8}",
            t.task_id,
            t.runs,
            t.success_rate,
            t.average_cost_per_run.display_short(),
            t.cost.total.display_short(),
            esc(EscalationReason::FormatFailure),
            esc(EscalationReason::RepeatedAction),
            esc(EscalationReason::ExpertRequested),
        );
    }
    for t in &report.tasks {
        let _ = writeln!(out, "\n{}:", t.task_id);
        let statuses: Vec<String> = t.statuses.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "  statuses: {}", statuses.join(", "));
        let hist: Vec<String> = t.lifeline_histogram.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        let _ = writeln!(out, "  lifelines used (lifelines:runs): {}", hist.join(" "));
        for (model, cost) in &t.cost.breakdown_by_model {
            let _ = writeln!(out, "  model {model}: {cost}");
        }
        for (purpose, cost) in &t.cost.breakdown_by_purpose {
            let _ = writeln!(out, "  purpose {purpose}: {cost}");
        }
        if !t.escalations.is_empty() {
            let esc: Vec<String> = t.escalations.iter().map(|(k, v)| format!("{}={v}", reason_name(*k))).collect();
            let _ = writeln!(out, "  escalations: {}", esc.join(", "));
        }
    }
    let _ = writeln!(out, "\n{}", report.convention);
    out
}

fn render_attempt(a: &Attempt) -> String {
    let outcome = match &a.outcome {
        AttemptOutcome::Accepted => "accepted".to_string(),
        AttemptOutcome::FormatFailure { failure, detail } => format!("format failure ({failure:?}): {detail}"),
        AttemptOutcome::RepeatedAction { action } => format!("repeated action {action}, discarded"),
        AttemptOutcome::TransportError { detail } => format!("call failed: {detail}"),
    };
    let entered = a.escalation.map(|r| format!(" after {}", reason_name(r))).unwrap_or_default();
    format!("    tier {} {} #{} [{}]{}: {}", a.tier, a.model_id, a.attempt, a.purpose, entered, outcome)
}

fn render_step(step: &StepRecord, pricing: &crate::ledger::PricingTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "== Step {} == tier {} ({}), lifelines used {}",
        step.index, step.tier, step.planner_model, step.lifelines_used
    );
    let _ = writeln!(out, "  attempts:");
    for a in &step.escalation_trace {
        let _ = writeln!(out, "{}", render_attempt(a));
    }
    if let Some(r) = &step.retrieval {
        match r.source_step_range {
            Some((from, to)) => {
                let _ = writeln!(out, "  retrieval over steps {from}-{to} by {}", r.produced_by);
            }
            None => {
                let _ = writeln!(out, "  retrieval: nothing older than the window");
            }
        }
    }
    let p = &step.planner_response;
    let _ = writeln!(out, "Reflection: {}", p.reflection);
    let _ = writeln!(out, "Research Plan and Status: {}", p.plan_and_status);
    let _ = writeln!(out, "Fact Check: {}", p.fact_check);
    let _ = writeln!(out, "Thought: {}", p.thought);
    let _ = writeln!(out, "Action: {}", step.action_name);
    let _ = writeln!(
        out,
        "Action Input: {}",
        serde_json::to_string_pretty(&step.action_input).expect("json map serializes")
    );
    let status = match step.observation.exit_status {
        Some(code) => format!(" (exit status {code})"),
        None => String::new(),
    };
    let _ = writeln!(out, "Observation{status}:\n{}", step.observation.text);
    let cost = aggregate(&step.usage_events, pricing).map(|c| c.total.to_string()).unwrap_or_else(|e| e.to_string());
    let _ = writeln!(out, "  usage: {} calls, {cost}", step.usage_events.len());
    out
}

/// Human-readable transcript; with `step`, only that step.
pub fn render_trace(trace: &Trace, step: Option<usize>) -> Result<String, ReportError> {
    let pricing = &trace.header.pricing;
    if let Some(i) = step {
        let s = trace.steps.get(i).ok_or(ReportError::StepOutOfRange { step: i, steps: trace.steps.len() })?;
        return Ok(render_step(s, pricing));
    }
    let h = &trace.header;
    let mut out = String::new();
    let _ = writeln!(out, "Run {} (task {})", h.run_id, h.task_id);
    let _ = writeln!(out, "  trace version {}, prompts {}", h.version, h.prompt_template_version);
    let _ = writeln!(out, "  config sha256 {}", h.config_hash);
    out.push('\n');
    for s in &trace.steps {
        out.push_str(&render_step(s, pricing));
        out.push('\n');
    }
    match &trace.end {
        None => {
            let _ = writeln!(out, "== Run end == (missing: the run did not finish)");
        }
        Some(e) => {
            let _ = writeln!(
                out,
                "== Run end == {} after {} steps, lifelines used {}",
                e.status, e.step_count, e.lifelines_used
            );
            for a in &e.unattached_attempts {
                let _ = writeln!(out, "{}", render_attempt(a));
            }
            if let Some(score) = e.final_score {
                let _ = writeln!(out, "  score {score}");
            }
            if let Some(imp) = e.improvement_fraction {
                let _ = writeln!(out, "  improvement {:.2}%", imp * 100.0);
            }
            let _ = writeln!(out, "  success {}", if e.success { "yes" } else { "no" });
            if let Some(d) = &e.detail {
                let _ = writeln!(out, "  detail: {d}");
            }
            let by_purpose = aggregate(&trace.usage_events(), pricing)
                .map(|c| {
                    c.breakdown_by_purpose
                        .iter()
                        .map(|(k, v): (&UsagePurpose, &Money)| format!("{k} {v}"))
                        .collect::<Vec<_>>()
                        .join(", ")
                })
                .unwrap_or_default();
            let _ = writeln!(out, "  total cost {} ({by_purpose})", e.total_cost);
        }
    }
    Ok(out)
}
