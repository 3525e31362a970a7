//! System-prompt personas for the planner and the model-backed workers.

pub const DEFAULT_PLANNER: &str = "You are a planner for solving machine learning tasks.";
pub const PLANNING_EXPERT: &str = "You are an expert in planning for solving machine learning tasks.";
pub const UNDERSTAND_FILE: &str = "You are an expert in understanding files containing both code and natural language.";
pub const EDIT_SCRIPT: &str = "You are an expert in editing code files.";
pub const REFLECTION: &str =
    "You are an expert in reflecting on previous actions when solving a machine learning task.";

/// Profile used for summarizing older log entries. Not one of the shipped
/// worker personas; retrieval is plumbing around the research log.
pub const RETRIEVAL: &str = "You summarize an agent's research log, keeping only what matters for its current plan.";
