//! Cost-aware planner/worker agent runtime.
//!
//! A planner model drives an agent over a sandboxed task workspace, escalating
//! through a cascade of increasingly expensive models when its responses are
//! malformed or repetitive. Every model call is priced per token, and runs
//! are scored against a task baseline.

pub mod cascade;
pub mod cli;
pub mod config;
pub mod environment;
pub mod gateway;
pub mod grammar;
pub mod ledger;
pub mod memory;
pub mod money;
pub mod orchestrator;
pub mod profiles;
pub mod report;
