//! Research log, the recency window and summarizing retrieval.
//!
//! The log is persisted as JSON lines: a header, one line per step, and a
//! closing `run_end` line. Every line is flushed and synced before the next
//! step starts.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::cascade::Attempt;
use crate::environment::{truncate_middle, Observation, WorkerCalls, ERROR_MARKER};
use crate::grammar::PlannerResponse;
use crate::ledger::{EventId, PricingTable, UsageEvent, UsagePurpose};
use crate::money::Money;
use crate::orchestrator::RunStatus;
use crate::profiles;

pub const TRACE_VERSION: u32 = 1;
pub const DEFAULT_SHORT_TERM_K: usize = 3;

/// Observation characters kept per step when the log is rendered for a
/// worker prompt.
const HISTORY_OBSERVATION_CHARS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: usize,
    pub planner_response: PlannerResponse,
    /// Tier and model that produced the accepted response.
    pub tier: usize,
    pub planner_model: String,
    pub escalation_trace: Vec<Attempt>,
    pub action_name: String,
    pub action_input: Map<String, Value>,
    pub observation: Observation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievedContext>,
    pub lifelines_used: u32,
    pub usage_event_ids: Vec<EventId>,
    /// Copies of the events listed in `usage_event_ids`, so a trace can be
    /// re-priced on its own.
    pub usage_events: Vec<UsageEvent>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub task_id: String,
    pub run_id: String,
    pub config_hash: String,
    pub prompt_template_version: String,
    /// Baseline and scoring rule of the task.
    pub task: Value,
    /// Effective run configuration after defaults and overrides.
    pub config: Value,
    pub pricing: PricingTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEnd {
    pub status: RunStatus,
    pub step_count: usize,
    pub lifelines_used: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement_fraction: Option<f64>,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// Usage from a step that never produced a record, e.g. the failed
    /// attempts of an exhausted cascade.
    pub unattached_usage_events: Vec<UsageEvent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unattached_attempts: Vec<Attempt>,
    pub total_cost: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Step(Box<StepRecord>),
    RunEnd(RunEnd),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub summary: String,
    /// Inclusive step range that was summarized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_step_range: Option<(usize, usize)>,
    pub produced_by: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RetrievedContext {
    pub fn disabled() -> Self {
        RetrievedContext { produced_by: "disabled".into(), ..Default::default() }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("step index {got} appended to a log of length {expected}")]
    IndexGap { expected: usize, got: usize },
    #[error("trace i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TraceError {
    #[error("cannot read trace: {0}")]
    Io(String),
    #[error("TraceCorrupt({line}): {detail}")]
    Corrupt { line: usize, detail: String },
}

/// Append-only JSONL writer.
#[derive(Debug)]
pub struct TraceWriter {
    file: File,
    path: PathBuf,
}

impl TraceWriter {
    /// Creates the file; fails if it already exists.
    pub fn create(path: impl AsRef<Path>) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let file = File::options()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| LogError::Io(format!("{}: {e}", path.display())))?;
        Ok(TraceWriter { file, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_line(&mut self, line: &TraceLine) -> Result<(), LogError> {
        let mut text = serde_json::to_string(line).map_err(|e| LogError::Io(e.to_string()))?;
        text.push('\n');
        let io = |e: std::io::Error| LogError::Io(e.to_string());
        self.file.write_all(text.as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub end: Option<RunEnd>,
}

impl Trace {
    /// Every usage event in the trace, steps first, then unattached ones.
    pub fn usage_events(&self) -> Vec<UsageEvent> {
        let mut events: Vec<UsageEvent> = self.steps.iter().flat_map(|s| s.usage_events.iter().cloned()).collect();
        if let Some(end) = &self.end {
            events.extend(end.unattached_usage_events.iter().cloned());
        }
        events
    }
}

pub fn parse_trace(text: &str) -> Result<Trace, TraceError> {
    let mut header = None;
    let mut steps = Vec::new();
    let mut end = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let corrupt = |detail: String| TraceError::Corrupt { line, detail };
        if raw.trim().is_empty() {
            return Err(corrupt("blank line".into()));
        }
        let parsed: TraceLine = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
        match (line, parsed) {
            (1, TraceLine::Header(h)) => {
                if h.version != TRACE_VERSION {
                    return Err(corrupt(format!("unsupported trace version {}", h.version)));
                }
                header = Some(h);
            }
            (1, _) => return Err(corrupt("first line is not a header".into())),
            (_, TraceLine::Header(_)) => return Err(corrupt("second header".into())),
            (_, _) if end.is_some() => return Err(corrupt("record after run_end".into())),
            (_, TraceLine::Step(s)) => {
                if s.index != steps.len() {
                    return Err(corrupt(format!("step index {} where {} expected", s.index, steps.len())));
                }
                steps.push(*s);
            }
            (_, TraceLine::RunEnd(e)) => end = Some(e),
        }
    }
    let header = header.ok_or(TraceError::Corrupt { line: 1, detail: "empty trace".into() })?;
    Ok(Trace { header, steps, end })
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    let file = File::open(path.as_ref()).map_err(|e| TraceError::Io(format!("{}: {e}", path.as_ref().display())))?;
    let mut text = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| TraceError::Corrupt { line: i + 1, detail: e.to_string() })?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_trace(&text)
}

/// One run's history. Records are immutable once appended.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResearchLog {
    pub header: TraceHeader,
    records: Vec<StepRecord>,
}

impl ResearchLog {
    pub fn new(header: TraceHeader) -> Self {
        ResearchLog { header, records: Vec::new() }
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn append_step(&mut self, record: StepRecord) -> Result<(), LogError> {
        if record.index != self.records.len() {
            return Err(LogError::IndexGap { expected: self.records.len(), got: record.index });
        }
        self.records.push(record);
        Ok(())
    }

    /// The last `min(k, len)` records.
    pub fn recent_window(&self, k: usize) -> &[StepRecord] {
        &self.records[self.records.len().saturating_sub(k)..]
    }

    /// Records older than the recency window.
    pub fn long_term(&self, k: usize) -> &[StepRecord] {
        &self.records[..self.records.len().saturating_sub(k)]
    }

    /// Plain-text history for worker prompts, clipped to `max_chars`.
    pub fn render_for_reflection(&self, max_chars: usize) -> String {
        render_history(&self.records, max_chars)
    }

    /// Summarizes the records older than the last `k` with respect to
    /// `current_plan`. Makes no model call when disabled or when nothing is
    /// older than the window.
    pub fn retrieve(
        &self,
        current_plan: &str,
        enabled: bool,
        k: usize,
        max_chars: usize,
        calls: &mut WorkerCalls<'_>,
    ) -> RetrievedContext {
        if !enabled {
            return RetrievedContext::disabled();
        }
        let older = self.long_term(k);
        let produced_by = calls.model.id.clone();
        let Some(last) = older.last() else {
            return RetrievedContext { produced_by, ..Default::default() };
        };
        let range = (older[0].index, last.index);
        let prompt = format!(
            "Below are the earlier steps of an agent's research log.\n```\n{}\n```\n\
The agent's current research plan and status:\n{}\n\n\
Summarize only the information from these steps that is relevant to the current plan: \
results obtained, files changed, errors seen and ideas already tried. Be concise.\n",
            render_history(older, max_chars),
            if current_plan.trim().is_empty() { "(none yet)" } else { current_plan.trim() }
        );
        match calls.call(profiles::RETRIEVAL, &prompt, UsagePurpose::Retrieval) {
            Ok(summary) => RetrievedContext { summary, source_step_range: Some(range), produced_by, error: None },
            Err(e) => RetrievedContext {
                summary: String::new(),
                source_step_range: Some(range),
                produced_by,
                error: Some(format!("{ERROR_MARKER} {e}")),
            },
        }
    }
}

fn render_history(records: &[StepRecord], max_chars: usize) -> String {
    if records.is_empty() {
        return crate::grammar::NO_STEPS_MARKER.to_string();
    }
    let mut out = String::new();
    for r in records {
        let (obs, _) = truncate_middle(&r.observation.text, HISTORY_OBSERVATION_CHARS);
        out.push_str(&format!(
            "Step {}:\nResearch Plan and Status: {}\nThought: {}\nAction: {}\nAction Input: {}\nObservation: {}\n\n",
            r.index,
            r.planner_response.plan_and_status,
            r.planner_response.thought,
            r.action_name,
            serde_json::to_string(&r.action_input).expect("json map serializes"),
            obs
        ));
    }
    truncate_middle(out.trim_end(), max_chars.max(1)).0
}
