//! Helpers shared by the integration tests.

#![allow(dead_code)]

pub mod sandbox;

use std::path::{Path, PathBuf};

use cascade_agent::cascade::CascadeConfig;
use cascade_agent::gateway::{ModelDescriptor, ModelGateway};
use cascade_agent::memory::{read_trace, Trace};
use cascade_agent::money::Price;
use cascade_agent::orchestrator::{run_task, RunConfig, RunPaths, RunResult, TaskPackage};

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn toy_dir() -> PathBuf {
    crate_dir().join("tasks/toy")
}

pub fn toy_task() -> TaskPackage {
    TaskPackage::load(toy_dir()).expect("toy task loads")
}

pub fn golden_config() -> PathBuf {
    toy_dir().join("configs/golden.toml")
}

/// A well-formed planner reply.
pub fn reply(action: &str, input: &str, plan: &str) -> String {
    format!(
        "Reflection: ok\nResearch Plan and Status: {plan}\nFact Check: none\nThought: next\nAction: {action}\nAction Input: {input}\n"
    )
}

pub fn list_files(dir: &str) -> String {
    reply("List Files", &format!("{{\"dir_path\": \"{dir}\"}}"), &format!("look at {dir}"))
}

pub fn final_answer() -> String {
    reply("Final Answer", "{\"final_answer\": \"done\"}", "finish")
}

pub fn ask_expert(question: &str) -> String {
    reply("Request Help from a Planning Expert", &format!("{{\"question\": \"{question}\"}}"), "ask for help")
}

pub fn garbage(n: usize) -> String {
    format!("I am not sure what to do next ({n}).")
}

pub fn strings(v: &[String]) -> Vec<String> {
    v.to_vec()
}

/// A scripted model priced at `input`/`output` dollars per million tokens.
pub fn model(id: &str, m: u32, replies: Vec<String>, input: i64, output: i64) -> ModelDescriptor {
    ModelDescriptor::scripted(id, m, replies)
        .with_prices(Price::per_million(input.into()), Price::per_million(output.into()))
}

/// Two-tier cascade (m=3 then m=1) with retrieval off and a separate worker.
pub fn two_tier(cheap: Vec<String>, expert: Vec<String>, worker: Vec<String>) -> RunConfig {
    let mut config =
        RunConfig::new(CascadeConfig::new(vec![model("cheap", 3, cheap, 1, 2), model("expert", 1, expert, 10, 30)]));
    config.worker_model = Some(model("worker", 1, worker, 1, 2));
    config.retrieval_enabled = false;
    config
}

pub struct Outcome {
    pub result: RunResult,
    pub trace: Trace,
    pub gateway: ModelGateway,
    pub trace_path: PathBuf,
}

impl Outcome {
    pub fn prompts(&self, model_id: &str) -> Vec<String> {
        self.gateway
            .scripted(model_id)
            .map(|b| b.requests().into_iter().map(|r| r.prompt).collect())
            .unwrap_or_default()
    }
}

/// Runs `task` once under `out/<run_id>` with a fresh scripted gateway.
pub fn run_in(task: &TaskPackage, config: &RunConfig, out: &Path, run_id: &str) -> Outcome {
    let gateway = ModelGateway::from_models(config.models());
    let paths = RunPaths {
        run_id: run_id.to_string(),
        workspace: out.join(run_id).join("workspace"),
        trace: out.join(run_id).join("trace.jsonl"),
    };
    let result = run_task(task, config, &gateway, &paths).expect("run starts");
    let trace = read_trace(&paths.trace).expect("trace parses");
    Outcome { result, trace, gateway, trace_path: paths.trace }
}
