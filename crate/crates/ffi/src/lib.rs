//! C ABI for cascade-agent.
//!
//! Conventions:
//! - Every fallible function returns a [`CaStatus`]. On failure a message is
//!   available from [`ca_last_error`] on the same thread until the next call.
//! - Structured results are returned as JSON strings owned by the caller and
//!   released with [`ca_string_free`].
//! - Configs and task packages are opaque handles released with their
//!   `_free` function. Handles may be shared across threads for reading.
//! - Panics never cross the boundary; they become [`CaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cascade_agent::config::load_config;
use cascade_agent::environment::{base_actions, expert_action};
use cascade_agent::gateway::ModelGateway;
use cascade_agent::grammar::parse_planner_response;
use cascade_agent::ledger::{cost_of, UsageEvent, UsagePurpose};
use cascade_agent::money::Price;
use cascade_agent::orchestrator::{
    evaluate_success, run_batch, run_id, run_task, ImprovementMode, MetricDirection, RunConfig, RunPaths, TaskPackage,
};
use cascade_agent::report::build_report;
use rust_decimal::Decimal;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ConfigError = 4,
    TaskError = 5,
    ParseFailure = 6,
    RunError = 7,
    ReportError = 8,
    Panic = 9,
}

/// A loaded run configuration.
pub struct CaConfig {
    inner: RunConfig,
}

/// A loaded task package.
pub struct CaTask {
    inner: TaskPackage,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CaStatus, String);

impl Failure {
    fn new(status: CaStatus, msg: impl std::fmt::Display) -> Self {
        Failure(status, msg.to_string())
    }
}

fn set_last_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("NULs removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            CaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(Some(msg));
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(Some(format!("panic: {msg}")));
            CaStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string alive for `'a`.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(CaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure::new(CaStatus::InvalidUtf8, format!("{name}: {e}")))
}

/// # Safety
/// `p` is null or valid for writes for `'a`.
unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::new(CaStatus::NullPointer, format!("{name} is null")))
}

/// # Safety
/// `p` is null or a live handle from this library.
unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(CaStatus::NullPointer, format!("{name} is null")))
}

/// # Safety
/// As for [`handle`], and no other reference to the handle is in use.
unsafe fn handle_mut<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::new(CaStatus::NullPointer, format!("{name} is null")))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\\u0000")).expect("NULs removed").into_raw()
}

/// # Safety
/// `out` is null or valid for writes.
unsafe fn write_json(out: *mut *mut c_char, value: &impl serde::Serialize) -> Result<(), Failure> {
    let slot = out_arg(out, "out_json")?;
    let text = serde_json::to_string(value).map_err(|e| Failure::new(CaStatus::InvalidArgument, e))?;
    *slot = into_c_string(text);
    Ok(())
}

/// Library version as a static string. Never free it.
#[no_mangle]
pub extern "C" fn ca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ca_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned through an `out_json` or `out_cost` argument.
///
/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ca_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a TOML run configuration.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_config_load(path: *const c_char, out: *mut *mut CaConfig) -> CaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out_arg(out, "out")?;
        let inner = load_config(path).map_err(|e| Failure::new(CaStatus::ConfigError, format!("{path}: {e}")))?;
        *slot = Box::into_raw(Box::new(CaConfig { inner }));
        Ok(())
    })
}

/// Overrides the action budget.
///
/// # Safety
/// `config` is a live handle from [`ca_config_load`].
#[no_mangle]
pub unsafe extern "C" fn ca_config_set_max_actions(config: *mut CaConfig, max_actions: usize) -> CaStatus {
    guard(|| {
        let c = handle_mut(config, "config")?;
        if max_actions == 0 {
            return Err(Failure::new(CaStatus::InvalidArgument, "max_actions must be >= 1"));
        }
        c.inner.max_actions = max_actions;
        Ok(())
    })
}

/// Turns long-term retrieval on or off.
///
/// # Safety
/// `config` is a live handle from [`ca_config_load`].
#[no_mangle]
pub unsafe extern "C" fn ca_config_set_retrieval(config: *mut CaConfig, enabled: bool) -> CaStatus {
    guard(|| {
        handle_mut(config, "config")?.inner.retrieval_enabled = enabled;
        Ok(())
    })
}

/// The effective configuration as written to trace headers.
///
/// # Safety
/// `config` is a live handle; `out_json` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_config_to_json(config: *const CaConfig, out_json: *mut *mut c_char) -> CaStatus {
    guard(|| write_json(out_json, &handle(config, "config")?.inner.effective_json()))
}

/// # Safety
/// `config` is null or a handle from [`ca_config_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ca_config_free(config: *mut CaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Loads and validates a task package directory.
///
/// # Safety
/// `dir` is a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_task_load(dir: *const c_char, out: *mut *mut CaTask) -> CaStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let slot = out_arg(out, "out")?;
        let inner = TaskPackage::load(dir).map_err(|e| Failure::new(CaStatus::TaskError, e))?;
        *slot = Box::into_raw(Box::new(CaTask { inner }));
        Ok(())
    })
}

/// # Safety
/// `task` is null or a handle from [`ca_task_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ca_task_free(task: *mut CaTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// Runs `task` once as run number `run_index` (1-based). The workspace and
/// trace go under `out_dir/workspaces` and `out_dir/traces`. The run result
/// is written to `out_json`; in-run failures are reported in its `status`.
///
/// # Safety
/// Handles are live; `out_dir` is a NUL-terminated string; `out_json` is a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_run_task(
    task: *const CaTask,
    config: *const CaConfig,
    out_dir: *const c_char,
    run_index: usize,
    out_json: *mut *mut c_char,
) -> CaStatus {
    guard(|| {
        let task = &handle(task, "task")?.inner;
        let config = &handle(config, "config")?.inner;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        if run_index == 0 {
            return Err(Failure::new(CaStatus::InvalidArgument, "run_index is 1-based"));
        }
        let id = run_id(&task.id, run_index);
        let paths = RunPaths {
            workspace: out.join("workspaces").join(&id),
            trace: out.join("traces").join(format!("{id}.jsonl")),
            run_id: id,
        };
        let gateway = ModelGateway::from_models(config.models());
        let result = run_task(task, config, &gateway, &paths).map_err(|e| Failure::new(CaStatus::RunError, e))?;
        write_json(out_json, &result)
    })
}

/// Runs `task` `n_runs` times with at most `parallelism` runs at once and
/// writes the batch report to `out_json`.
///
/// # Safety
/// As for [`ca_run_task`].
#[no_mangle]
pub unsafe extern "C" fn ca_run_batch(
    task: *const CaTask,
    config: *const CaConfig,
    n_runs: usize,
    parallelism: usize,
    out_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> CaStatus {
    guard(|| {
        let task = &handle(task, "task")?.inner;
        let config = &handle(config, "config")?.inner;
        let out = PathBuf::from(str_arg(out_dir, "out_dir")?);
        if n_runs == 0 || parallelism == 0 {
            return Err(Failure::new(CaStatus::InvalidArgument, "n_runs and parallelism must be >= 1"));
        }
        let models: Vec<_> = config.models().into_iter().cloned().collect();
        let make = || ModelGateway::from_models(&models);
        let report = run_batch(task, config, n_runs, parallelism, &out, &make)
            .map_err(|e| Failure::new(CaStatus::RunError, e))?;
        write_json(out_json, &report)
    })
}

/// Improvement of `final_score` over `baseline` and whether it exceeds 10%.
/// `relative` selects relative (divide by |baseline|) or absolute improvement.
///
/// # Safety
/// `out_improvement` and `out_success` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn ca_evaluate_success(
    final_score: f64,
    baseline: f64,
    higher_is_better: bool,
    relative: bool,
    out_improvement: *mut f64,
    out_success: *mut bool,
) -> CaStatus {
    guard(|| {
        let improvement = out_arg(out_improvement, "out_improvement")?;
        let success = out_arg(out_success, "out_success")?;
        let direction = if higher_is_better { MetricDirection::HigherIsBetter } else { MetricDirection::LowerIsBetter };
        let mode = if relative { ImprovementMode::Relative } else { ImprovementMode::Absolute };
        let (imp, ok) = evaluate_success(final_score, baseline, direction, mode)
            .map_err(|e| Failure::new(CaStatus::InvalidArgument, e))?;
        *improvement = imp;
        *success = ok;
        Ok(())
    })
}

/// Parses a planner reply. `allowed_json` is a JSON array of action names,
/// or null for every planner action. On success `out_json` holds the parsed
/// response; on [`CaStatus::ParseFailure`] it holds the classified failure.
///
/// # Safety
/// `text` is a NUL-terminated string, `allowed_json` is null or one, and
/// `out_json` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_parse_planner_response(
    text: *const c_char,
    allowed_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CaStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let allowed: Vec<String> = if allowed_json.is_null() {
            base_actions().into_iter().chain([expert_action()]).map(|a| a.name).collect()
        } else {
            serde_json::from_str(str_arg(allowed_json, "allowed_json")?)
                .map_err(|e| Failure::new(CaStatus::InvalidArgument, format!("allowed_json: {e}")))?
        };
        match parse_planner_response(text, &allowed) {
            Ok(response) => write_json(out_json, &response),
            Err(failure) => {
                write_json(out_json, &failure)?;
                Err(Failure::new(CaStatus::ParseFailure, failure))
            }
        }
    })
}

/// Cost in dollars of one call, from prices quoted in dollars per million
/// tokens (decimal strings such as "0.50"). Writes a 6-decimal string.
///
/// # Safety
/// The price arguments are NUL-terminated strings; `out_cost` is a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_cost_of(
    tokens_in: u64,
    tokens_out: u64,
    input_per_million: *const c_char,
    output_per_million: *const c_char,
    out_cost: *mut *mut c_char,
) -> CaStatus {
    guard(|| {
        let parse = |p: *const c_char, name: &str| -> Result<Price, Failure> {
            let s = str_arg(p, name)?;
            let d = Decimal::from_str(s.trim())
                .map_err(|e| Failure::new(CaStatus::InvalidArgument, format!("{name}: {e}")))?;
            if d.is_sign_negative() && !d.is_zero() {
                return Err(Failure::new(CaStatus::InvalidArgument, format!("{name} is negative")));
            }
            Ok(Price::per_million(d))
        };
        let input = parse(input_per_million, "input_per_million")?;
        let output = parse(output_per_million, "output_per_million")?;
        let slot = out_arg(out_cost, "out_cost")?;
        let model = cascade_agent::gateway::ModelDescriptor::scripted("call", 1, Vec::new()).with_prices(input, output);
        let event = UsageEvent {
            id: 0,
            run_id: String::new(),
            step_index: 0,
            model_id: model.id.clone(),
            purpose: UsagePurpose::Planning,
            tokens_in,
            tokens_out,
            temperature: 0.0,
            profile: String::new(),
        };
        let cost = cost_of(&event, &model).map_err(|e| Failure::new(CaStatus::InvalidArgument, e))?;
        *slot = into_c_string(cost.as_decimal().to_string());
        Ok(())
    })
}

/// Summarizes every trace in `dir` (or `dir/traces`) as a JSON report.
///
/// # Safety
/// `dir` is a NUL-terminated string; `out_json` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ca_report(dir: *const c_char, out_json: *mut *mut c_char) -> CaStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let report = build_report(Path::new(dir)).map_err(|e| Failure::new(CaStatus::ReportError, e))?;
        write_json(out_json, &report)
    })
}
