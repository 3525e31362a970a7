//! Task workspace and the actions the planner can take in it.
//!
//! Low-level actions are programmatic. High-level actions may call a worker
//! model with their persona as the system prompt; those calls are billed to
//! the run's ledger as `worker_action`.

mod exec;
pub mod fs;
mod registry;
mod workspace;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gateway::{CompletionRequest, GatewayError, ModelDescriptor, ModelGateway, UsageTag};
use crate::ledger::{CostLedger, UsagePurpose};
use crate::memory::ResearchLog;
use crate::profiles;

pub use exec::{run_with_timeout, ExecOutcome};
pub use registry::*;
pub use workspace::Workspace;

/// Observation length cap in characters, elision marker included.
pub const TRUNCATION_CAP: usize = 5_000;
pub const ELISION_MARKER: &str = "\n...[observation truncated]...\n";
pub const DEFAULT_EXECUTE_TIMEOUT_S: u64 = 900;
/// Characters of file content sent to a worker per call.
pub const DEFAULT_PROMPT_BUDGET_CHARS: usize = 12_000;
pub const ERROR_MARKER: &str = "[error]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub truncated: bool,
    pub source_action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
}

impl Observation {
    pub fn new(source_action: &str, text: impl Into<String>) -> Self {
        Self::with_cap(source_action, text, TRUNCATION_CAP)
    }

    pub fn with_cap(source_action: &str, text: impl Into<String>, cap: usize) -> Self {
        let (text, truncated) = truncate_middle(&text.into(), cap);
        Observation { text, truncated, source_action: source_action.to_string(), exit_status: None }
    }

    fn exit(mut self, code: Option<i32>) -> Self {
        self.exit_status = code;
        self
    }
}

/// Keeps the head and tail of `text` so the result, marker included, fits in
/// `cap` characters.
pub fn truncate_middle(text: &str, cap: usize) -> (String, bool) {
    let len = text.chars().count();
    if len <= cap {
        return (text.to_string(), false);
    }
    let marker_len = ELISION_MARKER.chars().count();
    let keep = cap.saturating_sub(marker_len);
    let head = keep / 2;
    let tail = keep - head;
    let head_str: String = text.chars().take(head).collect();
    let tail_str: String = text.chars().skip(len - tail).collect();
    (format!("{head_str}{ELISION_MARKER}{tail_str}"), true)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("path escapes the workspace: {0}")]
    PathEscapesSandbox(String),
    #[error("not a directory: {0}")]
    NotADirectory(String),
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("refusing to overwrite existing file {0} (set overwrite to true)")]
    OverwriteRefused(String),
    #[error("nothing to undo for {0}")]
    NothingToUndo(String),
    #[error("invalid line range {start}..{end}")]
    InvalidRange { start: i64, end: i64 },
    #[error("script timed out after {after_s} s")]
    Timeout { after_s: u64, partial_output: String },
    #[error("failed to start script: {0}")]
    SpawnFailure(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("invalid action input: {0}")]
    InvalidInput(String),
    #[error("unknown action: {0}")]
    UnknownAction(String),
    #[error("the run already ended with a final answer")]
    RunFinished,
    #[error("model call failed: {0}")]
    Gateway(GatewayError),
}

impl EnvError {
    /// Errors that end the run; everything else is shown to the planner.
    pub fn is_fatal(&self) -> bool {
        match self {
            EnvError::SpawnFailure(_) | EnvError::RunFinished => true,
            EnvError::Gateway(e) => e.is_fatal(),
            _ => false,
        }
    }

    pub fn into_observation(self, action: &str) -> Observation {
        match self {
            EnvError::Timeout { after_s, partial_output } => {
                Observation::new(action, format!("{partial_output}\n[timed out after {after_s} s; process killed]"))
            }
            other => Observation::new(action, format!("EnvError: {other}")),
        }
    }
}

/// Worker model access for one step.
pub struct WorkerCalls<'a> {
    pub gateway: &'a ModelGateway,
    pub model: &'a ModelDescriptor,
    pub ledger: &'a mut CostLedger,
    pub run_id: &'a str,
    pub step_index: usize,
    pub temperature: f64,
}

impl WorkerCalls<'_> {
    pub fn call(&mut self, profile: &str, prompt: &str, purpose: UsagePurpose) -> Result<String, GatewayError> {
        let request = CompletionRequest::new(profile, prompt, self.temperature);
        let tag = UsageTag { run_id: self.run_id.to_string(), step_index: self.step_index, purpose };
        self.gateway.complete(self.model, &request, &tag, self.ledger).map(|(r, _)| r.text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSettings {
    /// Interpreter argv prefix, e.g. `["python3"]`.
    pub interpreter: Vec<String>,
    pub execute_timeout: Duration,
    pub truncation_cap: usize,
    pub prompt_budget_chars: usize,
}

impl Default for EnvironmentSettings {
    fn default() -> Self {
        EnvironmentSettings {
            interpreter: vec!["python3".into()],
            execute_timeout: Duration::from_secs(DEFAULT_EXECUTE_TIMEOUT_S),
            truncation_cap: TRUNCATION_CAP,
            prompt_budget_chars: DEFAULT_PROMPT_BUDGET_CHARS,
        }
    }
}

#[derive(Debug)]
pub struct Environment {
    workspace: Workspace,
    settings: EnvironmentSettings,
    task_description: String,
    registry: Vec<ActionSpec>,
    finished: bool,
}

fn str_arg<'a>(input: &'a Map<String, Value>, key: &str) -> Result<&'a str, EnvError> {
    input
        .get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| EnvError::InvalidInput(format!("missing string argument \"{key}\"")))
}

fn int_arg(input: &Map<String, Value>, key: &str) -> Result<Option<i64>, EnvError> {
    match input.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => as_integer(v)
            .map(Some)
            .ok_or_else(|| EnvError::InvalidInput(format!("argument \"{key}\" is not an integer"))),
    }
}

/// Pulls the body of the first fenced code block, or returns the text as is.
fn strip_code_fence(reply: &str) -> String {
    let mut lines = reply.lines();
    if !lines.any(|l| l.trim_start().starts_with("```")) {
        return reply.to_string();
    }
    let body: Vec<&str> = lines.take_while(|l| !l.trim_start().starts_with("```")).collect();
    let mut out = body.join("\n");
    out.push('\n');
    out
}

fn split_lines_keep(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

impl Environment {
    pub fn new(workspace: Workspace, settings: EnvironmentSettings, task_description: impl Into<String>) -> Self {
        Environment {
            workspace,
            settings,
            task_description: task_description.into(),
            registry: base_actions(),
            finished: false,
        }
    }

    pub fn workspace(&self) -> &Workspace {
        &self.workspace
    }

    pub fn actions(&self) -> &[ActionSpec] {
        &self.registry
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn obs(&self, action: &str, text: impl Into<String>) -> Observation {
        Observation::with_cap(action, text, self.settings.truncation_cap)
    }

    pub fn list_files(&self, dir: &str) -> Result<Observation, EnvError> {
        let entries = self.workspace.list(dir)?;
        Ok(self.obs(LIST_FILES, entries.join("\n")))
    }

    pub fn read_file(&self, file: &str) -> Result<Observation, EnvError> {
        let bytes = self.workspace.read(file)?;
        Ok(self.obs(READ_FILE, String::from_utf8_lossy(&bytes)))
    }

    pub fn write_file(&self, file: &str, content: &str) -> Result<Observation, EnvError> {
        self.workspace.write(file, content.as_bytes())?;
        Ok(self.obs(WRITE_FILE, format!("File {file} written successfully.")))
    }

    pub fn append_file(&self, file: &str, content: &str) -> Result<Observation, EnvError> {
        self.workspace.append(file, content.as_bytes())?;
        Ok(self.obs(APPEND_FILE, format!("File {file} appended successfully.")))
    }

    pub fn copy_file(&self, source: &str, destination: &str, overwrite: bool) -> Result<Observation, EnvError> {
        self.workspace.copy(source, destination, overwrite)?;
        Ok(self.obs(COPY_FILE, format!("File {source} copied to {destination}")))
    }

    pub fn undo_edit_script(&mut self, file: &str) -> Result<Observation, EnvError> {
        let text = match self.workspace.undo(file)? {
            Some(bytes) => {
                format!("Content of {file} after undo the most recent edit:\n{}", String::from_utf8_lossy(&bytes))
            }
            None => format!("Undid the most recent edit: {file} did not exist before it and was removed."),
        };
        Ok(self.obs(UNDO_EDIT_SCRIPT, text))
    }

    pub fn execute_script(&self, file: &str, timeout: Option<Duration>) -> Result<Observation, EnvError> {
        let path = self.workspace.resolve(file)?;
        let fs = self.workspace.fs();
        if !fs.exists(&path) || fs.is_dir(&path) {
            return Err(EnvError::FileNotFound(file.to_string()));
        }
        let rel = path.strip_prefix(self.workspace.root()).unwrap_or(&path).to_string_lossy().into_owned();
        let (program, prefix) = self
            .settings
            .interpreter
            .split_first()
            .ok_or_else(|| EnvError::SpawnFailure("no interpreter configured".into()))?;
        let mut args = prefix.to_vec();
        args.push(rel);
        let timeout = timeout.unwrap_or(self.settings.execute_timeout);
        let env = [("PYTHONUNBUFFERED", "1"), ("PYTHONDONTWRITEBYTECODE", "1")];
        match run_with_timeout(program, &args, self.workspace.root(), &env, timeout) {
            Ok(ExecOutcome::Exited { output, code }) => Ok(self.obs(EXECUTE_SCRIPT, output).exit(code)),
            Ok(ExecOutcome::TimedOut { partial_output }) => {
                Err(EnvError::Timeout { after_s: timeout.as_secs(), partial_output })
            }
            Err(e) => Err(EnvError::SpawnFailure(format!("{program}: {e}"))),
        }
    }

    pub fn inspect_script_lines(&self, file: &str, start: i64, end: i64) -> Result<Observation, EnvError> {
        if start < 1 || start > end {
            return Err(EnvError::InvalidRange { start, end });
        }
        let content = String::from_utf8_lossy(&self.workspace.read(file)?).into_owned();
        let lines: Vec<&str> = content.lines().collect();
        let first = (start - 1) as usize;
        if first >= lines.len() {
            return Err(EnvError::InvalidRange { start, end });
        }
        let last = (end as usize).min(lines.len());
        let text = (first..last).map(|i| format!("{}: {}", i + 1, lines[i])).collect::<Vec<_>>().join("\n");
        Ok(self.obs(INSPECT_SCRIPT_LINES, text))
    }

    pub fn understand_file(
        &self,
        file: &str,
        query: &str,
        calls: &mut WorkerCalls<'_>,
    ) -> Result<Observation, EnvError> {
        let content = String::from_utf8_lossy(&self.workspace.read(file)?).into_owned();
        if content.is_empty() {
            return Ok(self.obs(UNDERSTAND_FILE, format!("The file {file} is empty.")));
        }
        let budget = self.settings.prompt_budget_chars.max(1);
        let chars: Vec<char> = content.chars().collect();
        let chunks: Vec<String> = chars.chunks(budget).map(|c| c.iter().collect()).collect();
        let total = chunks.len();
        let mut answers = Vec::with_capacity(total);
        for (i, chunk) in chunks.iter().enumerate() {
            let segment = if total > 1 { format!(" (segment {} of {total})", i + 1) } else { String::new() };
            let prompt = format!(
                "Given this file excerpt from {file}{segment}:\n```\n{chunk}\n```\n\
Here is a detailed description on what to look for and what should be returned: {query}\n\
Keep the description short and reference the lines relevant to what is being looked for. \
Only describe what is objectively confirmed by the file content. If you cannot find part of the \
request in this segment, say so.\n"
            );
            match calls.call(profiles::UNDERSTAND_FILE, &prompt, UsagePurpose::WorkerAction) {
                Ok(text) if total == 1 => answers.push(text),
                Ok(text) => answers.push(format!("Segment {}/{total}:\n{text}", i + 1)),
                Err(e) if e.is_fatal() => return Err(EnvError::Gateway(e)),
                Err(e) => return Ok(self.obs(UNDERSTAND_FILE, format!("{ERROR_MARKER} {e}"))),
            }
        }
        Ok(self.obs(UNDERSTAND_FILE, answers.join("\n\n")))
    }

    /// Asks the editing worker for the full new content of `file` (or of the
    /// given line range) and saves it to `save_as`, pushing the previous
    /// content of `save_as` onto its undo stack.
    pub fn edit_script_ai(
        &mut self,
        file: &str,
        instruction: &str,
        save_as: &str,
        range: Option<(i64, i64)>,
        calls: &mut WorkerCalls<'_>,
    ) -> Result<Observation, EnvError> {
        self.workspace.resolve(save_as)?;
        let original = String::from_utf8_lossy(&self.workspace.read(file)?).into_owned();
        let lines = split_lines_keep(&original);
        let (first, last) = match range {
            None => (0, lines.len()),
            Some((start, end)) => {
                if start < 1 || start > end || (start as usize) > lines.len().max(1) {
                    return Err(EnvError::InvalidRange { start, end });
                }
                ((start - 1) as usize, (end as usize).min(lines.len()))
            }
        };
        let segment: String = lines[first..last].concat();
        let prompt = format!(
            "Given this python script:\n```python\n{segment}\n```\n\
Edit the script by following the instruction:\n{instruction}\n\
Provide the full code after the edit, making no other changes. Start the python code with \"```python\".\n"
        );
        let reply = match calls.call(profiles::EDIT_SCRIPT, &prompt, UsagePurpose::WorkerAction) {
            Ok(text) => text,
            Err(e) if e.is_fatal() => return Err(EnvError::Gateway(e)),
            Err(e) => return Ok(self.obs(EDIT_SCRIPT_AI, format!("{ERROR_MARKER} {e}; no changes were saved"))),
        };
        let mut edited = strip_code_fence(&reply);
        if !segment.ends_with('\n') && edited.ends_with('\n') && reply.contains("```") {
            edited.pop();
        }
        let new_content = format!("{}{}{}", lines[..first].concat(), edited, lines[last..].concat());
        self.workspace.edit_with_backup(save_as, new_content.as_bytes())?;

        let diff = unified_diff(&original, &new_content, file, save_as);
        Ok(self.obs(
            EDIT_SCRIPT_AI,
            format!("The edited file is saved to {save_as}. Here is the diff, please check if the edit is correct and desirable:\n\n{diff}"),
        ))
    }

    pub fn reflection(
        &self,
        query: &str,
        log: &ResearchLog,
        calls: &mut WorkerCalls<'_>,
    ) -> Result<Observation, EnvError> {
        let history = log.render_for_reflection(self.settings.prompt_budget_chars);
        let prompt = format!(
            "We are trying to solve this research problem:\n{}\n\nYour current research log:\n```\n{history}\n```\n\
Reflect on this: {query}\nGive an answer in natural language paragraphs as truthfully as possible.\n",
            self.task_description.trim_end()
        );
        match calls.call(profiles::REFLECTION, &prompt, UsagePurpose::WorkerAction) {
            Ok(text) => Ok(self.obs(REFLECTION, text)),
            Err(e) if e.is_fatal() => Err(EnvError::Gateway(e)),
            Err(e) => Ok(self.obs(REFLECTION, format!("{ERROR_MARKER} {e}"))),
        }
    }

    pub fn final_answer(&mut self, answer: &str) -> Result<Observation, EnvError> {
        if self.finished {
            return Err(EnvError::RunFinished);
        }
        self.finished = true;
        let _ = answer;
        Ok(self.obs(FINAL_ANSWER, "Final answer submitted."))
    }

    /// Validates `input` against the action's schema and runs it.
    pub fn dispatch(
        &mut self,
        action: &str,
        input: &Map<String, Value>,
        log: &ResearchLog,
        calls: &mut WorkerCalls<'_>,
    ) -> Result<Observation, EnvError> {
        if self.finished {
            return Err(EnvError::RunFinished);
        }
        let spec = self
            .registry
            .iter()
            .find(|a| a.name == action)
            .ok_or_else(|| EnvError::UnknownAction(action.to_string()))?;
        spec.validate_input(input).map_err(EnvError::InvalidInput)?;

        match action {
            LIST_FILES => self.list_files(str_arg(input, "dir_path")?),
            READ_FILE => self.read_file(str_arg(input, "file_name")?),
            WRITE_FILE => self.write_file(str_arg(input, "file_name")?, str_arg(input, "content")?),
            APPEND_FILE => self.append_file(str_arg(input, "file_name")?, str_arg(input, "content")?),
            COPY_FILE => {
                let overwrite = input.get("overwrite").and_then(as_bool).unwrap_or(false);
                self.copy_file(str_arg(input, "source")?, str_arg(input, "destination")?, overwrite)
            }
            UNDO_EDIT_SCRIPT => self.undo_edit_script(str_arg(input, "script_name")?),
            EXECUTE_SCRIPT => self.execute_script(str_arg(input, "script_name")?, None),
            FINAL_ANSWER => self.final_answer(str_arg(input, "final_answer")?),
            UNDERSTAND_FILE => {
                self.understand_file(str_arg(input, "file_name")?, str_arg(input, "things_to_look_for")?, calls)
            }
            INSPECT_SCRIPT_LINES => {
                let start = int_arg(input, "start_line_number")?.unwrap_or(1);
                let end = int_arg(input, "end_line_number")?.unwrap_or(start);
                self.inspect_script_lines(str_arg(input, "script_name")?, start, end)
            }
            EDIT_SCRIPT_AI => {
                let range = match (int_arg(input, "start_line_number")?, int_arg(input, "end_line_number")?) {
                    (Some(s), Some(e)) => Some((s, e)),
                    (Some(s), None) => Some((s, i64::MAX)),
                    (None, Some(e)) => Some((1, e)),
                    (None, None) => None,
                };
                self.edit_script_ai(
                    str_arg(input, "script_name")?,
                    str_arg(input, "edit_instruction")?,
                    str_arg(input, "save_name")?,
                    range,
                    calls,
                )
            }
            REFLECTION => self.reflection(str_arg(input, "things_to_reflect_on")?, log, calls),
            other => Err(EnvError::UnknownAction(other.to_string())),
        }
    }
}

/// Unified diff; empty when the contents are identical.
pub fn unified_diff(old: &str, new: &str, old_name: &str, new_name: &str) -> String {
    if old == new {
        return String::new();
    }
    similar::TextDiff::from_lines(old, new).unified_diff().context_radius(3).header(old_name, new_name).to_string()
}
