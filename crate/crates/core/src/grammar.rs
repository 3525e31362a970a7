//! Planner prompt rendering and structured-response parsing.
//!
//! A planner reply carries six sections, each introduced by a header at the
//! start of a line:
//!
//! ```text
//! Reflection: ...
//! Research Plan and Status: ...
//! Fact Check: ...
//! Thought: ...
//! Action: Execute Script
//! Action Input: {"script_name": "train.py"}
//! ```
//!
//! Headers match case-insensitively and in any order. If a header repeats,
//! the last occurrence wins. The action input is the first balanced `{...}`
//! block after its header; anything following it is ignored.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::environment::ActionSpec;
use crate::memory::StepRecord;

/// Bumped whenever the rendered prompt text changes; recorded in traces.
pub const PROMPT_TEMPLATE_VERSION: &str = "planner-prompt/1";

pub const NO_STEPS_MARKER: &str = "No steps taken yet.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Section {
    Reflection,
    PlanAndStatus,
    FactCheck,
    Thought,
    Action,
    ActionInput,
}

impl Section {
    const CANONICAL: [Section; 6] = [
        Section::Reflection,
        Section::PlanAndStatus,
        Section::FactCheck,
        Section::Thought,
        Section::Action,
        Section::ActionInput,
    ];

    fn header(self) -> &'static str {
        match self {
            Section::Reflection => "Reflection:",
            Section::PlanAndStatus => "Research Plan and Status:",
            Section::FactCheck => "Fact Check:",
            Section::Thought => "Thought:",
            Section::Action => "Action:",
            Section::ActionInput => "Action Input:",
        }
    }

    /// Matches a header at the start of `line` (after leading whitespace) and
    /// returns the text after it. "Action Input:" is tried before "Action:".
    fn match_line(line: &str) -> Option<(Section, &str)> {
        const PROBE_ORDER: [Section; 6] = [
            Section::ActionInput,
            Section::Action,
            Section::Reflection,
            Section::PlanAndStatus,
            Section::FactCheck,
            Section::Thought,
        ];
        let t = line.trim_start();
        PROBE_ORDER.iter().find_map(|&s| {
            let h = s.header().as_bytes();
            let b = t.as_bytes();
            (b.len() >= h.len() && b[..h.len()].eq_ignore_ascii_case(h)).then(|| (s, &t[h.len()..]))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerResponse {
    pub reflection: String,
    pub plan_and_status: String,
    pub fact_check: String,
    pub thought: String,
    pub action_name: String,
    pub action_input: Map<String, Value>,
}

impl PlannerResponse {
    /// Canonical text form; parsing it yields an equal value.
    pub fn to_canonical_text(&self) -> String {
        let input = serde_json::to_string(&self.action_input).expect("json map serializes");
        format!(
            "Reflection: {}\nResearch Plan and Status: {}\nFact Check: {}\nThought: {}\nAction: {}\nAction Input: {}\n",
            self.reflection, self.plan_and_status, self.fact_check, self.thought, self.action_name, input
        )
    }

    /// Action name plus key-sorted, whitespace-free input. Two proposals are
    /// the same action iff their keys are equal.
    pub fn action_key(&self) -> ActionKey {
        ActionKey::new(&self.action_name, &self.action_input)
    }
}

/// Identity of a proposed action for repeat detection.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionKey {
    pub name: String,
    pub canonical_input: String,
}

impl ActionKey {
    pub fn new(name: &str, input: &Map<String, Value>) -> Self {
        ActionKey { name: name.to_string(), canonical_input: canonical_json(&Value::Object(input.clone())) }
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(v: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(m) => {
                let mut keys: Vec<_> = m.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&m[k]));
                }
                Value::Object(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string(&sort(v)).expect("json value serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailureKind {
    MissingSection,
    MalformedActionInput,
    UnknownAction,
    EmptyResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub detail: String,
    pub offending_text: String,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)
    }
}

impl std::error::Error for ParseFailure {}

const OFFENDING_CLIP: usize = 400;

fn failure(kind: ParseFailureKind, detail: impl Into<String>, text: &str) -> ParseFailure {
    ParseFailure { kind, detail: detail.into(), offending_text: text.chars().take(OFFENDING_CLIP).collect() }
}

/// First balanced `{...}` block in `text`, honouring JSON string escapes.
pub fn first_balanced_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a planner reply. Total: any input yields a response or a
/// classified failure.
pub fn parse_planner_response<S: AsRef<str>>(
    text: &str,
    allowed_actions: &[S],
) -> Result<PlannerResponse, ParseFailure> {
    if text.trim().is_empty() {
        return Err(failure(ParseFailureKind::EmptyResponse, "response is empty", text));
    }

    let mut found: [Option<String>; 6] = Default::default();
    let mut current: Option<(Section, Vec<&str>)> = None;
    let flush = |cur: Option<(Section, Vec<&str>)>, found: &mut [Option<String>; 6]| {
        if let Some((s, lines)) = cur {
            let idx = Section::CANONICAL.iter().position(|&c| c == s).expect("known section");
            found[idx] = Some(lines.join("\n").trim().to_string());
        }
    };
    for line in text.lines() {
        if let Some((section, rest)) = Section::match_line(line) {
            flush(current.take(), &mut found);
            current = Some((section, vec![rest]));
        } else if let Some((_, lines)) = current.as_mut() {
            lines.push(line);
        }
    }
    flush(current, &mut found);

    let missing: Vec<&str> =
        Section::CANONICAL.iter().zip(&found).filter(|(_, v)| v.is_none()).map(|(s, _)| s.header()).collect();
    if !missing.is_empty() {
        return Err(failure(
            ParseFailureKind::MissingSection,
            format!("missing section(s): {}", missing.join(", ")),
            text,
        ));
    }
    let [reflection, plan_and_status, fact_check, thought, action, action_input] =
        found.map(|v| v.expect("checked above"));

    let proposed = action.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let proposed = proposed.trim_matches(|c| c == '`' || c == '"' || c == '*').trim();
    if proposed.is_empty() {
        return Err(failure(ParseFailureKind::MissingSection, "Action: section is empty", text));
    }
    let action_name = allowed_actions
        .iter()
        .map(AsRef::as_ref)
        .find(|a| a.eq_ignore_ascii_case(proposed))
        .ok_or_else(|| {
            failure(ParseFailureKind::UnknownAction, format!("\"{proposed}\" is not an available action"), proposed)
        })?
        .to_string();

    let block = first_balanced_object(&action_input).ok_or_else(|| {
        failure(ParseFailureKind::MalformedActionInput, "Action Input: contains no balanced JSON object", &action_input)
    })?;
    let action_input = match serde_json::from_str::<Value>(block) {
        Ok(Value::Object(m)) => m,
        Ok(_) => unreachable!("a balanced {{}} block can only parse as an object"),
        Err(e) => {
            return Err(failure(
                ParseFailureKind::MalformedActionInput,
                format!("Action Input: invalid JSON ({e})"),
                block,
            ))
        }
    };

    Ok(PlannerResponse { reflection, plan_and_status, fact_check, thought, action_name, action_input })
}

fn render_step(step: &StepRecord) -> String {
    let status = match step.observation.exit_status {
        Some(code) if code != 0 => format!(" (exit status {code})"),
        _ => String::new(),
    };
    format!(
        "Step {}:\nResearch Plan and Status: {}\nAction: {}\nAction Input: {}\nObservation{}:\n```\n{}\n```\n",
        step.index,
        step.planner_response.plan_and_status,
        step.action_name,
        serde_json::to_string(&step.action_input).expect("json map serializes"),
        status,
        step.observation.text
    )
}

/// Builds the planner prompt: task, action docs, retrieved context (only when
/// `retrieved_context` is `Some`), recent steps, then format instructions.
pub fn render_planner_prompt(
    task_description: &str,
    available_actions: &[ActionSpec],
    recent_steps: &[StepRecord],
    retrieved_context: Option<&str>,
) -> String {
    let mut out = String::new();
    out.push_str("You are working on the following machine learning research problem.\n\n");
    out.push_str("Research Problem:\n");
    out.push_str(task_description.trim_end());
    out.push_str("\n\n");

    out.push_str("You have access to the following actions:\n");
    for a in available_actions {
        out.push_str(&a.render_doc());
    }
    out.push('\n');

    if let Some(ctx) = retrieved_context {
        out.push_str("Relevant history from earlier steps:\n");
        if ctx.trim().is_empty() {
            out.push_str("(nothing retrieved)\n");
        } else {
            out.push_str(ctx.trim_end());
            out.push('\n');
        }
        out.push('\n');
    }

    out.push_str("Most recent steps:\n");
    if recent_steps.is_empty() {
        out.push_str(NO_STEPS_MARKER);
        out.push('\n');
    } else {
        for s in recent_steps {
            out.push_str(&render_step(s));
        }
    }
    out.push('\n');

    let names: Vec<&str> = available_actions.iter().map(|a| a.name.as_str()).collect();
    out.push_str("Always respond in exactly this format, with each header at the start of a line:\n");
    out.push_str("Reflection: what the last observation means and what went wrong or right\n");
    out.push_str("Research Plan and Status: the high level plan and the status of each step, updated\n");
    out.push_str("Fact Check: for each objective statement in the plan and status, whether it is guessed or directly confirmed by an observation\n");
    out.push_str("Thought: what you are doing now and why\n");
    out.push_str(&format!("Action: exactly one of [{}]\n", names.join(", ")));
    out.push_str("Action Input: the action's arguments as a single JSON object\n");
    out
}

/// Prompt shown to the planning expert when the planner asks for help.
pub fn render_expert_prompt(base_prompt: &str, question: &str) -> String {
    format!(
        "{base_prompt}\nThe planner working on this problem is stuck and asked for your help:\n{}\nDecide the next action for this step yourself, using the same response format.\n",
        question.trim()
    )
}
