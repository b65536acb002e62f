//! Child processes in their own process group, killed as a tree.

use std::fs::File;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Exit code recorded for a process the harness killed.
pub const KILLED_EXIT_CODE: i32 = -9;

const POLL_INTERVAL: Duration = Duration::from_millis(10);

pub(crate) struct Finished {
    pub exit_code: i32,
    pub timed_out: bool,
    pub killed: bool,
    pub duration: Duration,
}

pub(crate) fn kill_group(pgid: i32) {
    // SAFETY: kill(2) with a negative pid targets the process group; no memory is shared.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => c,
        (None, Some(sig)) => -sig,
        (None, None) => -1,
    }
}

/// Runs `sh -c command` in `cwd` with output redirected to the given files.
/// `on_spawn` receives the process group id once the child exists; `cancel`
/// is polled so another thread can request a kill.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_shell(
    command: &str,
    cwd: &Path,
    env: &[(String, String)],
    stdout: File,
    stderr: File,
    timeout: Duration,
    running: &Mutex<Option<i32>>,
    cancel: &AtomicBool,
) -> std::io::Result<Finished> {
    let start = Instant::now();
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::from(stdout))
        .stderr(Stdio::from(stderr))
        .process_group(0);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn()?;
    let pgid = child.id() as i32;
    *running.lock().expect("pgid lock poisoned") = Some(pgid);

    let mut timed_out = false;
    let mut killed = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if cancel.load(Ordering::SeqCst) {
            killed = true;
            kill_group(pgid);
            break child.wait()?;
        }
        if start.elapsed() >= timeout {
            timed_out = true;
            kill_group(pgid);
            break child.wait()?;
        }
        std::thread::sleep(POLL_INTERVAL);
    };
    // halt may have killed the group directly
    killed |= cancel.load(Ordering::SeqCst);
    // stragglers that outlived the shell still belong to the group
    kill_group(pgid);
    *running.lock().expect("pgid lock poisoned") = None;
    Ok(Finished {
        exit_code: if timed_out || killed {
            KILLED_EXIT_CODE
        } else {
            exit_code(status)
        },
        timed_out,
        killed,
        duration: start.elapsed(),
    })
}
