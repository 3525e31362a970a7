//! Adversarial path corpus and audit for the workspace sandbox.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cascade_agent::environment::fs::{RecordingFs, StdFs};
use cascade_agent::environment::{
    Environment, EnvironmentSettings, WorkerCalls, Workspace, APPEND_FILE, COPY_FILE, EDIT_SCRIPT_AI, EXECUTE_SCRIPT,
    INSPECT_SCRIPT_LINES, LIST_FILES, READ_FILE, UNDERSTAND_FILE, UNDO_EDIT_SCRIPT, WRITE_FILE,
};
use cascade_agent::gateway::{ModelDescriptor, ModelGateway};
use cascade_agent::ledger::CostLedger;
use cascade_agent::memory::{ResearchLog, TraceHeader};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use serde_json::{json, Map, Value};

pub const SECRET: &str = "outside-secret";

/// 50 paths that must all be refused or kept inside the root.
pub fn adversarial_paths(outside: &Path) -> Vec<String> {
    let abs = outside.join("secret.txt").display().to_string();
    let abs_dir = outside.display().to_string();
    let mut paths: Vec<String> = [
        "..",
        "../",
        "../secret.txt",
        "../../secret.txt",
        "../../../../../../etc/passwd",
        "/etc/passwd",
        "/",
        "/tmp",
        "/tmp/x.py",
        "//etc/passwd",
        "./../secret.txt",
        "./../../x",
        "sub/../../secret.txt",
        "sub/../../../secret.txt",
        "sub/./../../x",
        "a/b/../../../x",
        "a/b/c/../../../../x",
        "sub/../sub/../../x",
        "link_out",
        "link_out/",
        "link_out/secret.txt",
        "link_out/new.txt",
        "link_out/../secret.txt",
        "./link_out/secret.txt",
        "sub/../link_out/secret.txt",
        "sub/link_up",
        "sub/link_up/secret.txt",
        "sub/link_up/new.txt",
        "file_link",
        "./file_link",
        "dangling",
        "dangling/x",
        "sub/deep_link/secret.txt",
        "sub/deep_link",
        "  ../secret.txt",
        "../secret.txt  ",
        "..\u{0}/x",
        "sub/\u{0}",
        "..//..//x",
        "sub/..//../x",
        "../sub",
        "../.",
        "./..",
        ".././secret.txt",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    paths.push(abs.clone());
    paths.push(abs_dir.clone());
    paths.push(format!("{abs_dir}/"));
    paths.push(format!("{abs_dir}/../secret.txt"));
    paths.push(format!("/{}", "../".repeat(8)));
    paths.push(format!("sub/{}", "../".repeat(5)));
    assert_eq!(paths.len(), 50, "corpus size");
    paths
}

/// Builds `tmp/ws` (the workspace) next to `tmp/outside` (secret data)
/// with symlinks from inside pointing out.
pub fn build_fixture(tmp: &Path) -> (PathBuf, PathBuf) {
    let ws = tmp.join("ws");
    let outside = tmp.join("outside");
    std::fs::create_dir_all(ws.join("sub")).unwrap();
    std::fs::create_dir_all(&outside).unwrap();
    std::fs::write(outside.join("secret.txt"), SECRET).unwrap();
    std::fs::write(outside.join("x.py"), "open('pwned', 'w').write('x')\n").unwrap();
    std::fs::write(ws.join("train.py"), "print('hello')\n").unwrap();
    std::os::unix::fs::symlink(&outside, ws.join("link_out")).unwrap();
    std::os::unix::fs::symlink("../..", ws.join("sub/link_up")).unwrap();
    std::os::unix::fs::symlink(outside.join("secret.txt"), ws.join("file_link")).unwrap();
    std::os::unix::fs::symlink(outside.join("missing"), ws.join("dangling")).unwrap();
    std::os::unix::fs::symlink(&outside, ws.join("sub/deep_link")).unwrap();
    (ws, outside)
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(snapshot(&p));
        } else {
            out.push((p.clone(), std::fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

/// Every (action, input) pair that places `path` in a path argument.
fn calls_for(path: &str) -> Vec<(&'static str, Map<String, Value>)> {
    let obj = |v: Value| v.as_object().expect("object").clone();
    vec![
        (LIST_FILES, obj(json!({"dir_path": path}))),
        (READ_FILE, obj(json!({"file_name": path}))),
        (WRITE_FILE, obj(json!({"file_name": path, "content": "pwned"}))),
        (APPEND_FILE, obj(json!({"file_name": path, "content": "pwned"}))),
        (COPY_FILE, obj(json!({"source": path, "destination": "copied.txt", "overwrite": true}))),
        (COPY_FILE, obj(json!({"source": "train.py", "destination": path, "overwrite": true}))),
        (UNDO_EDIT_SCRIPT, obj(json!({"script_name": path}))),
        (EXECUTE_SCRIPT, obj(json!({"script_name": path}))),
        (INSPECT_SCRIPT_LINES, obj(json!({"script_name": path, "start_line_number": 1, "end_line_number": 5}))),
        (UNDERSTAND_FILE, obj(json!({"file_name": path, "things_to_look_for": "secrets"}))),
        (EDIT_SCRIPT_AI, obj(json!({"script_name": path, "edit_instruction": "x", "save_name": "out.py"}))),
        (EDIT_SCRIPT_AI, obj(json!({"script_name": "train.py", "edit_instruction": "x", "save_name": path}))),
    ]
}

fn empty_log() -> ResearchLog {
    ResearchLog::new(TraceHeader {
        version: 1,
        task_id: "audit".into(),
        run_id: "audit".into(),
        config_hash: String::new(),
        prompt_template_version: String::new(),
        task: Value::Null,
        config: Value::Null,
        pricing: Default::default(),
    })
}

/// A touched path is inside the sandbox when its parent directory,
/// resolved physically, lies under the root.
fn physically_inside(p: &Path, root: &Path) -> bool {
    if !p.starts_with(root) {
        return false;
    }
    if p == root {
        return true;
    }
    let mut parent = p.parent().expect("has parent").to_path_buf();
    while !parent.exists() {
        parent = match parent.parent() {
            Some(q) => q.to_path_buf(),
            None => return false,
        };
    }
    std::fs::canonicalize(&parent).map(|c| c.starts_with(root)).unwrap_or(false)
}

/// Runs the corpus through every file action. Returns the number of
/// (path, action) probes made.
pub fn audit() -> Result<usize, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ws, outside) = build_fixture(tmp.path());
    let before = snapshot(&outside);

    let recording = RecordingFs::new(Arc::new(StdFs));
    let workspace = Workspace::with_fs(&ws, Arc::new(recording.clone())).map_err(|e| e.to_string())?;
    let root = workspace.root().to_path_buf();
    let mut env = Environment::new(workspace, EnvironmentSettings::default(), "audit");

    let worker = ModelDescriptor::scripted("worker", 1, vec!["```python\nprint(1)\n```".to_string(); 200]);
    let gateway = ModelGateway::from_models([&worker]);
    let mut ledger = CostLedger::new();
    let log = empty_log();

    let mut probes = 0;
    for path in adversarial_paths(&outside) {
        let rejected = env.workspace().resolve(&path).is_err();
        for (action, input) in calls_for(&path) {
            let calls_before = ledger.len();
            let mut calls = WorkerCalls {
                gateway: &gateway,
                model: &worker,
                ledger: &mut ledger,
                run_id: "audit",
                step_index: 0,
                temperature: 0.01,
            };
            let result = env.dispatch(action, &input, &log, &mut calls);
            probes += 1;
            if rejected && ledger.len() != calls_before {
                return Err(format!("{action} on {path:?} called a model for a rejected path"));
            }
            if let Ok(obs) = &result {
                if obs.text.contains(SECRET) {
                    return Err(format!("{action} on {path:?} leaked outside content"));
                }
            }
        }
    }
    for p in recording.accessed() {
        if !physically_inside(&p, &root) {
            return Err(format!("filesystem access outside the root: {}", p.display()));
        }
    }
    if snapshot(&outside) != before {
        return Err("files outside the workspace changed".into());
    }
    if tmp.path().join("pwned").exists() || outside.join("pwned").exists() {
        return Err("a script outside the workspace was executed".into());
    }
    Ok(probes)
}

#[derive(Debug, Clone)]
pub enum Op {
    Edit(usize, Vec<u8>),
    Undo(usize),
}

pub const UNDO_FILES: [&str; 3] = ["a.py", "sub/b.py", "fresh.txt"];

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..UNDO_FILES.len(), proptest::collection::vec(any::<u8>(), 0..64)).prop_map(|(f, d)| Op::Edit(f, d)),
        (0..UNDO_FILES.len()).prop_map(Op::Undo),
    ]
}

/// Applies `ops` to a real workspace and to an in-memory model and checks
/// that every file matches byte for byte after each operation.
pub fn check_undo_sequence(ops: &[Op]) -> Result<(), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::create_dir_all(tmp.path().join("sub")).unwrap();
    std::fs::write(tmp.path().join("a.py"), b"print('a')\n").unwrap();
    std::fs::write(tmp.path().join("sub/b.py"), b"print('b')\n").unwrap();
    let mut ws = Workspace::open(tmp.path()).map_err(|e| e.to_string())?;

    let mut current: HashMap<&str, Option<Vec<u8>>> =
        UNDO_FILES.iter().map(|f| (*f, std::fs::read(tmp.path().join(f)).ok())).collect();
    let mut stacks: HashMap<&str, Vec<Option<Vec<u8>>>> = HashMap::new();

    for (i, op) in ops.iter().enumerate() {
        match op {
            Op::Edit(f, data) => {
                let name = UNDO_FILES[*f];
                ws.edit_with_backup(name, data).map_err(|e| format!("op {i}: {e}"))?;
                let prev = current.insert(name, Some(data.clone())).flatten();
                stacks.entry(name).or_default().push(prev);
            }
            Op::Undo(f) => {
                let name = UNDO_FILES[*f];
                let expected = stacks.get_mut(name).and_then(Vec::pop);
                match (ws.undo(name), expected) {
                    (Ok(restored), Some(prev)) => {
                        if restored != prev {
                            return Err(format!("op {i}: undo of {name} returned the wrong content"));
                        }
                        current.insert(name, prev);
                    }
                    (Err(_), None) => {}
                    (r, e) => return Err(format!("op {i}: undo of {name} gave {r:?}, expected {e:?}")),
                }
            }
        }
        for f in UNDO_FILES {
            let on_disk = std::fs::read(tmp.path().join(f)).ok();
            if on_disk != current[f] {
                return Err(format!("op {i}: {f} differs from the expected content"));
            }
        }
    }
    Ok(())
}

/// Property: undo restores exact bytes for any sequence of up to 20 ops.
pub fn undo_property(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner
        .run(&proptest::collection::vec(op_strategy(), 0..=20), |ops| {
            check_undo_sequence(&ops).map_err(TestCaseError::fail)
        })
        .map_err(|e| e.to_string())
}
