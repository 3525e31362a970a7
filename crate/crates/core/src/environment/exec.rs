//! Script execution with a wall-clock limit and a scrubbed environment.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

/// Environment variables passed through to scripts. Everything else,
/// including model credentials, is dropped.
const INHERITED_ENV: &[&str] = &["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "USER"];

const POLL_INTERVAL: Duration = Duration::from_millis(10);
const DRAIN_GRACE: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    Exited { output: String, code: Option<i32> },
    TimedOut { partial_output: String },
}

/// Runs `program args...` in `cwd` with stdout and stderr merged into one
/// pipe. On timeout the whole process group is killed.
pub fn run_with_timeout(
    program: &str,
    args: &[String],
    cwd: &Path,
    extra_env: &[(&str, &str)],
    timeout: Duration,
) -> std::io::Result<ExecOutcome> {
    let (mut reader, writer) = std::io::pipe()?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(writer.try_clone()?)
        .stderr(writer)
        .process_group(0);
    for key in INHERITED_ENV {
        if let Ok(v) = std::env::var(key) {
            cmd.env(key, v);
        }
    }
    for (k, v) in extra_env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn()?;
    // The Command still owns copies of the pipe's write end.
    drop(cmd);

    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut chunk = [0u8; 8192];
        loop {
            match reader.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let _ = tx.send(Some(chunk[..n].to_vec()));
                }
            }
        }
        let _ = tx.send(None);
    });

    let started = Instant::now();
    let mut collected = Vec::new();
    let drain = |collected: &mut Vec<u8>, wait: Duration| {
        let deadline = Instant::now() + wait;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match rx.recv_timeout(left) {
                Ok(Some(bytes)) => collected.extend_from_slice(&bytes),
                Ok(None) | Err(_) => break,
            }
        }
    };

    loop {
        while let Ok(Some(bytes)) = rx.try_recv() {
            collected.extend_from_slice(&bytes);
        }
        if let Some(status) = child.try_wait()? {
            drain(&mut collected, DRAIN_GRACE);
            return Ok(ExecOutcome::Exited {
                output: String::from_utf8_lossy(&collected).into_owned(),
                code: status.code(),
            });
        }
        if started.elapsed() >= timeout {
            kill_group(child.id());
            let _ = child.kill();
            let _ = child.wait();
            drain(&mut collected, DRAIN_GRACE);
            return Ok(ExecOutcome::TimedOut { partial_output: String::from_utf8_lossy(&collected).into_owned() });
        }
        std::thread::sleep(POLL_INTERVAL);
    }
}

fn kill_group(pid: u32) {
    // SAFETY: kill(2) with a negative pid signals the process group we
    // created with process_group(0); it has no memory-safety preconditions.
    unsafe {
        libc::kill(-(pid as i32), libc::SIGKILL);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str, timeout: Duration) -> ExecOutcome {
        let dir = tempfile::tempdir().unwrap();
        run_with_timeout("sh", &["-c".into(), script.into()], dir.path(), &[], timeout).unwrap()
    }

    #[test]
    fn merges_streams_in_order() {
        let out = sh("echo one; echo two 1>&2; echo three", Duration::from_secs(5));
        assert_eq!(out, ExecOutcome::Exited { output: "one\ntwo\nthree\n".into(), code: Some(0) });
    }

    #[test]
    fn nonzero_exit_is_reported() {
        let out = sh("echo bad; exit 3", Duration::from_secs(5));
        assert_eq!(out, ExecOutcome::Exited { output: "bad\n".into(), code: Some(3) });
    }

    #[test]
    fn timeout_kills_and_keeps_partial_output() {
        let started = Instant::now();
        let out = sh("echo started; while true; do sleep 0.05; done", Duration::from_millis(500));
        assert!(started.elapsed() < Duration::from_secs(3));
        match out {
            ExecOutcome::TimedOut { partial_output } => assert_eq!(partial_output, "started\n"),
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn credentials_are_not_inherited() {
        std::env::set_var("EXEC_TEST_SECRET_API_KEY", "hunter2");
        let out = sh("echo \"[$EXEC_TEST_SECRET_API_KEY]\"", Duration::from_secs(5));
        assert_eq!(out, ExecOutcome::Exited { output: "[]\n".into(), code: Some(0) });
    }
}
