//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid input (task package, config,
//! arguments, trace files), 2 for failures while running.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, Overrides};
use crate::gateway::ModelGateway;
use crate::memory::read_trace;
use crate::orchestrator::{run_batch, RunError, RunStatus, TaskPackage};
use crate::report::{build_report, render_report, render_trace, ReportError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "cascade-agent", version, about = "Run planner/worker agents over task packages with a model cascade")]
pub struct Cli {
    /// More log output on stderr (-v, -vv).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a task package.
    Validate {
        #[arg(long)]
        task: PathBuf,
    },
    /// Run a task one or more times.
    Run(RunArgs),
    /// Summarize the traces in a directory.
    Report {
        /// Directory holding trace files, or a run output directory.
        trace_dir: PathBuf,
        /// Print machine-readable JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Also write the report (JSON) to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Print a trace as a readable transcript.
    Trace {
        trace_file: PathBuf,
        /// Only this step.
        #[arg(long)]
        step: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long, overrides_with = "no_retrieval")]
    pub retrieval: bool,
    #[arg(long = "no-retrieval", overrides_with = "retrieval")]
    pub no_retrieval: bool,
    #[arg(long)]
    pub max_actions: Option<usize>,
    /// Output directory for traces, workspaces and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace earlier outputs in the output directory.
    #[arg(long)]
    pub force: bool,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match cli.command {
        Command::Validate { task } => cmd_validate(&task),
        Command::Run(args) => cmd_run(&args),
        Command::Report { trace_dir, json, out, force } => cmd_report(&trace_dir, json, out.as_deref(), force),
        Command::Trace { trace_file, step } => cmd_trace(&trace_file, step),
    }
}

fn cmd_validate(task: &Path) -> i32 {
    let problems = TaskPackage::diagnose(task);
    if problems.is_empty() {
        println!("{}: ok", task.display());
        EXIT_OK
    } else {
        for p in &problems {
            eprintln!("{}: {p}", task.display());
        }
        EXIT_VALIDATION
    }
}

fn prepare_out(out: &Path, force: bool) -> Result<(), String> {
    let owned = ["traces", "workspaces", "report.json", "report.txt"];
    let existing: Vec<&str> = owned.iter().copied().filter(|n| out.join(n).exists()).collect();
    if !existing.is_empty() {
        if !force {
            return Err(format!("{} already holds {}; pass --force to replace", out.display(), existing.join(", ")));
        }
        for name in existing {
            let p = out.join(name);
            let r = if p.is_dir() { std::fs::remove_dir_all(&p) } else { std::fs::remove_file(&p) };
            r.map_err(|e| format!("{}: {e}", p.display()))?;
        }
    }
    std::fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))
}

fn write_new(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_run(args: &RunArgs) -> i32 {
    let task = match TaskPackage::load(&args.task) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_VALIDATION;
        }
    };
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", args.config.display());
            return EXIT_VALIDATION;
        }
    };
    let retrieval = match (args.retrieval, args.no_retrieval) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    };
    Overrides { max_actions: args.max_actions, retrieval_enabled: retrieval, ..Default::default() }.apply(&mut config);
    if let Err(e) = config.validate() {
        eprintln!("{e}");
        return EXIT_VALIDATION;
    }
    if args.runs == 0 || args.parallelism == 0 {
        eprintln!("--runs and --parallelism must be >= 1");
        return EXIT_VALIDATION;
    }
    if let Err(e) = prepare_out(&args.out, args.force) {
        eprintln!("{e}");
        return EXIT_VALIDATION;
    }

    let models: Vec<_> = config.models().into_iter().cloned().collect();
    let make_gateway = || ModelGateway::from_models(&models);
    let report = match run_batch(&task, &config, args.runs, args.parallelism, &args.out, &make_gateway) {
        Ok(r) => r,
        Err(RunError::TaskPackageInvalid(e)) => {
            eprintln!("{e}");
            return EXIT_VALIDATION;
        }
        Err(e) => {
            eprintln!("{e}");
            return EXIT_RUNTIME;
        }
    };

    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let mut table = String::new();
    for r in &report.runs {
        table.push_str(&format!(
            "{}  {}  steps={}  score={}  success={}  cost={}\n",
            r.run_id,
            r.status,
            r.step_count,
            r.final_score.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            r.success,
            r.cost_report.total
        ));
    }
    table.push_str(&format!(
        "{}: {} runs, success rate {:.1}%, average cost per run {}\n",
        report.task_id,
        report.runs.len(),
        report.success_rate,
        report.average_cost_per_run
    ));
    let written =
        write_new(&args.out.join("report.json"), &json).and_then(|_| write_new(&args.out.join("report.txt"), &table));
    if let Err(e) = written {
        eprintln!("{e}");
        return EXIT_RUNTIME;
    }
    print!("{table}");
    for r in report.runs.iter() {
        if let Some(d) = &r.detail {
            eprintln!("{}: {d}", r.run_id);
        }
    }
    if report.runs.iter().all(|r| r.status == RunStatus::EnvFatal) {
        eprintln!("every run failed");
        return EXIT_RUNTIME;
    }
    EXIT_OK
}

fn cmd_report(dir: &Path, json: bool, out: Option<&Path>, force: bool) -> i32 {
    let report = match build_report(dir) {
        Ok(r) => r,
        Err(e @ (ReportError::Io(_) | ReportError::Ledger { .. })) => {
            eprintln!("{e}");
            return EXIT_RUNTIME;
        }
        Err(e) => {
            eprintln!("{e}");
            return EXIT_VALIDATION;
        }
    };
    let as_json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(path) = out {
        if path.exists() && !force {
            eprintln!("{} exists; pass --force to replace", path.display());
            return EXIT_VALIDATION;
        }
        if let Err(e) = write_new(path, &as_json) {
            eprintln!("{e}");
            return EXIT_RUNTIME;
        }
    }
    if json {
        println!("{as_json}");
    } else {
        print!("{}", render_report(&report));
    }
    EXIT_OK
}

fn cmd_trace(file: &Path, step: Option<usize>) -> i32 {
    let trace = match read_trace(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", file.display());
            return EXIT_VALIDATION;
        }
    };
    match render_trace(&trace, step) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_VALIDATION
        }
    }
}
