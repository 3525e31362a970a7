//! Action documentation and input schemas.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::profiles;

pub const LIST_FILES: &str = "List Files";
pub const READ_FILE: &str = "Read File";
pub const WRITE_FILE: &str = "Write File";
pub const APPEND_FILE: &str = "Append File";
pub const COPY_FILE: &str = "Copy File";
pub const UNDO_EDIT_SCRIPT: &str = "Undo Edit Script";
pub const EXECUTE_SCRIPT: &str = "Execute Script";
pub const FINAL_ANSWER: &str = "Final Answer";
pub const UNDERSTAND_FILE: &str = "Understand File";
pub const INSPECT_SCRIPT_LINES: &str = "Inspect Script Lines";
pub const EDIT_SCRIPT_AI: &str = "Edit Script (AI)";
pub const REFLECTION: &str = "Reflection";
pub const REQUEST_EXPERT: &str = "Request Help from a Planning Expert";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    LowLevel,
    HighLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgType {
    String,
    /// A JSON integer or a string of decimal digits.
    Integer,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub arg_type: ArgType,
    pub required: bool,
    pub doc: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    pub description: String,
    pub usage: Vec<ArgSpec>,
    pub returns: String,
    pub kind: ActionKind,
    /// System prompt of the worker; `None` for programmatic actions.
    pub profile: Option<String>,
}

fn arg(name: &str, arg_type: ArgType, required: bool, doc: &str) -> ArgSpec {
    ArgSpec { name: name.into(), arg_type, required, doc: doc.into() }
}

impl ActionSpec {
    fn new(name: &str, kind: ActionKind, description: &str, usage: Vec<ArgSpec>, returns: &str) -> Self {
        ActionSpec {
            name: name.into(),
            description: description.into(),
            usage,
            returns: returns.into(),
            kind,
            profile: None,
        }
    }

    fn with_profile(mut self, profile: &str) -> Self {
        self.profile = Some(profile.into());
        self
    }

    /// Documentation block shown to the planner.
    pub fn render_doc(&self) -> String {
        let mut usage = String::from("{\n");
        for (i, a) in self.usage.iter().enumerate() {
            let ty = match a.arg_type {
                ArgType::String => "string",
                ArgType::Integer => "integer",
                ArgType::Boolean => "boolean",
            };
            let opt = if a.required { "" } else { ", optional" };
            let sep = if i + 1 < self.usage.len() { "," } else { "" };
            usage.push_str(&format!("    \"{}\": [{ty}{opt}] {}{sep}\n", a.name, a.doc));
        }
        usage.push('}');
        format!(
            "- {}:\n  Description: {}\n  Usage:\n    ```\n    Action: {}\n    Action Input: {}\n    ```\n  Returns: {}\n",
            self.name,
            self.description,
            self.name,
            usage.replace('\n', "\n    "),
            self.returns
        )
    }

    /// Checks `input` against the declared arguments. Unknown keys are ignored.
    pub fn validate_input(&self, input: &Map<String, Value>) -> Result<(), String> {
        for a in &self.usage {
            match input.get(&a.name) {
                None | Some(Value::Null) if a.required => {
                    return Err(format!("{}: missing required argument \"{}\"", self.name, a.name));
                }
                None | Some(Value::Null) => {}
                Some(v) => {
                    let ok = match a.arg_type {
                        ArgType::String => v.is_string(),
                        ArgType::Integer => as_integer(v).is_some(),
                        ArgType::Boolean => as_bool(v).is_some(),
                    };
                    if !ok {
                        return Err(format!(
                            "{}: argument \"{}\" should be {:?}, got {v}",
                            self.name, a.name, a.arg_type
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn as_integer(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

pub(crate) fn as_bool(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "yes" => Some(true),
            "false" | "no" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Every action the environment can dispatch, in prompt order.
pub fn base_actions() -> Vec<ActionSpec> {
    use ActionKind::*;
    use ArgType::*;
    vec![
        ActionSpec::new(
            LIST_FILES,
            LowLevel,
            "Use this to navigate the file system.",
            vec![arg("dir_path", String, true, "a valid relative path to a directory, such as \".\" or \"folder1/folder2\"")],
            "The observation will be a list of files and folders in dir_path or current directory if dir_path is empty, or an error message if dir_path is invalid.",
        ),
        ActionSpec::new(
            READ_FILE,
            LowLevel,
            "Use this to read an existing file.",
            vec![arg("file_name", String, true, "a valid file name with relative path to current directory if needed")],
            "The observation will be the contents of the file read.",
        ),
        ActionSpec::new(
            WRITE_FILE,
            LowLevel,
            "Use this to write a file. If the file already exists, it will be overwritten.",
            vec![
                arg("file_name", String, true, "a valid file name with relative path to current directory if needed"),
                arg("content", String, true, "the content to be written to the file"),
            ],
            "A success message if the file is written successfully, or an error message if the file cannot be written.",
        ),
        ActionSpec::new(
            APPEND_FILE,
            LowLevel,
            "Use this to append a file to a new location with a new name.",
            vec![
                arg("file_name", String, true, "a valid file name with relative path to current directory if needed"),
                arg("content", String, true, "the content to be appended to the file"),
            ],
            "A success message if the file is appended successfully, or an error message if the file cannot be appended.",
        ),
        ActionSpec::new(
            COPY_FILE,
            LowLevel,
            "Use this to copy a file to a new location with a new name.",
            vec![
                arg("source", String, true, "a valid file name with relative path to current directory if needed"),
                arg("destination", String, true, "a valid file name with relative path to current directory if needed"),
                arg("overwrite", Boolean, false, "set to true to replace an existing destination"),
            ],
            "A success message if the file is copied successfully, or an error message if the file cannot be copied.",
        ),
        ActionSpec::new(
            UNDO_EDIT_SCRIPT,
            LowLevel,
            "Use this to undo the last edit of the python script.",
            vec![arg("script_name", String, true, "a valid python script name with relative path to current directory if needed")],
            "The observation will be the content of the script before the last edit. If the script does not exist, the observation will be an error message.",
        ),
        ActionSpec::new(
            EXECUTE_SCRIPT,
            LowLevel,
            "Use this to execute the python script. The script must already exist.",
            vec![arg("script_name", String, true, "a valid python script name with relative path to current directory if needed")],
            "The observation will be output of the script or errors.",
        ),
        ActionSpec::new(
            FINAL_ANSWER,
            LowLevel,
            "Use this to provide the final answer to the current task.",
            vec![arg("final_answer", String, true, "a detailed description on the final answer")],
            "The observation will be empty.",
        ),
        ActionSpec::new(
            UNDERSTAND_FILE,
            HighLevel,
            "Use this to read the whole file and understand certain aspects. You should provide detailed description on what to look for and what should be returned.",
            vec![
                arg("file_name", String, true, "a valid file name with relative path to current directory if needed"),
                arg("things_to_look_for", String, true, "a detailed description on what to look for and what should returned"),
            ],
            "The observation will be a description of relevant content and lines in the file. If the file does not exist, the observation will be an error message.",
        )
        .with_profile(profiles::UNDERSTAND_FILE),
        ActionSpec::new(
            INSPECT_SCRIPT_LINES,
            HighLevel,
            "Use this to inspect specific part of a python script precisely, or the full content of a short script.",
            vec![
                arg("script_name", String, true, "a valid python script name with relative path to current directory if needed"),
                arg("start_line_number", Integer, true, "a valid line number, starting from 1"),
                arg("end_line_number", Integer, true, "a valid line number not smaller than start_line_number"),
            ],
            "The observation will be the content of the script between start_line_number and end_line_number, with line numbers. If the script does not exist, the observation will be an error message.",
        ),
        ActionSpec::new(
            EDIT_SCRIPT_AI,
            HighLevel,
            "Use this to do a relatively large but cohesive edit over a python script. Instead of editing the script directly, you should describe the edit instruction so that another AI can help you do this.",
            vec![
                arg("script_name", String, true, "a valid python script name with relative path to current directory if needed"),
                arg("edit_instruction", String, true, "a detailed step by step description on how to edit it"),
                arg("save_name", String, true, "a valid file name with relative path to current directory if needed"),
                arg("start_line_number", Integer, false, "edit only from this line (1-based)"),
                arg("end_line_number", Integer, false, "edit only up to this line (inclusive)"),
            ],
            "The observation will be the edited content of the script as a diff. If the script does not exist, the observation will be an error message.",
        )
        .with_profile(profiles::EDIT_SCRIPT),
        ActionSpec::new(
            REFLECTION,
            HighLevel,
            "Use this to look over all the past steps and reflect. You should provide detailed description on what to reflect on and what should be returned.",
            vec![arg("things_to_reflect_on", String, true, "a detailed description on what to reflect on and what should be returned")],
            "The observation will be a the reflection.",
        )
        .with_profile(profiles::REFLECTION),
    ]
}

/// The lifeline action; offered only while lifelines remain.
pub fn expert_action() -> ActionSpec {
    ActionSpec::new(
        REQUEST_EXPERT,
        ActionKind::HighLevel,
        "Use this when you are stuck. A stronger planning expert will read the same context and decide the next action for this step. Only a limited number of requests is available.",
        vec![arg("question", ArgType::String, true, "what you are stuck on and what help you need")],
        "The expert's chosen action is executed in place of yours and its observation is returned.",
    )
    .with_profile(profiles::PLANNING_EXPERT)
}
