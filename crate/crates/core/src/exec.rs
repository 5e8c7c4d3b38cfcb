//! Single execution of a target with a timeout, classifying how it ended.

use std::fs::{self, File};
use std::io;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::fuzzing::{ExecutionPlan, HarnessSpec};
use crate::CrashSignal;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecStatus {
    Exited(i32),
    Signaled(CrashSignal),
    TimedOut,
    LaunchFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub status: ExecStatus,
    pub wall_time: Duration,
}

/// A target together with how to launch it.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub target: PathBuf,
    pub plan: ExecutionPlan,
    pub harness: HarnessSpec,
}

impl Invocation {
    pub fn new(target: impl Into<PathBuf>, plan: ExecutionPlan, harness: HarnessSpec) -> Self {
        Invocation {
            target: target.into(),
            plan,
            harness,
        }
    }

    pub fn run(&self, input: &[u8]) -> ExecOutcome {
        run_once(&self.plan, &self.harness, &self.target, input)
    }
}

/// Builds the full command line: emulator prefix, then the rendered
/// harness argv.
pub fn command_line(
    plan: &ExecutionPlan,
    harness: &HarnessSpec,
    target: &Path,
    input: Option<&Path>,
) -> Vec<String> {
    let mut argv = plan.launcher();
    argv.extend(harness.render_argv(target, input));
    argv
}

/// Runs `target` once on `input` inside a fresh temporary working
/// directory. The child gets its own process group, which is killed as a
/// whole on timeout.
pub fn run_once(
    plan: &ExecutionPlan,
    harness: &HarnessSpec,
    target: &Path,
    input: &[u8],
) -> ExecOutcome {
    let start = Instant::now();
    let status = match run_inner(plan, harness, target, input) {
        Ok(s) => s,
        Err(e) => ExecStatus::LaunchFailed(e.to_string()),
    };
    ExecOutcome {
        status,
        wall_time: start.elapsed(),
    }
}

fn run_inner(
    plan: &ExecutionPlan,
    harness: &HarnessSpec,
    target: &Path,
    input: &[u8],
) -> io::Result<ExecStatus> {
    let workdir = tempfile::Builder::new().prefix("fuzzreuse-run").tempdir()?;
    let input_path = workdir.path().join("input");
    fs::write(&input_path, input)?;
    let target = if target.is_relative() {
        std::env::current_dir()?.join(target)
    } else {
        target.to_path_buf()
    };
    let argv = command_line(plan, harness, &target, Some(&input_path));
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command line"))?;

    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(workdir.path())
        .envs(&harness.env)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .process_group(0);
    if harness.stdin_mode {
        cmd.stdin(File::open(&input_path)?);
    } else {
        cmd.stdin(Stdio::null());
    }
    if let ExecutionPlan::Emulated { sysroot, .. } = plan {
        cmd.env("QEMU_LD_PREFIX", sysroot);
    }

    let mut child = cmd.spawn()?;
    let timeout = Duration::from_millis(harness.timeout_ms);
    let deadline = Instant::now() + timeout;
    let mut nap = Duration::from_micros(200);
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(classify(status));
        }
        let now = Instant::now();
        if now >= deadline {
            // SAFETY: signalling the process group we just created.
            unsafe {
                libc::kill(-(child.id() as i32), libc::SIGKILL);
            }
            let _ = child.wait();
            return Ok(ExecStatus::TimedOut);
        }
        thread::sleep(nap.min(deadline - now));
        nap = (nap * 2).min(Duration::from_millis(10));
    }
}

fn classify(status: ExitStatus) -> ExecStatus {
    match status.signal() {
        Some(sig) => ExecStatus::Signaled(CrashSignal::from_raw(sig)),
        None => ExecStatus::Exited(status.code().unwrap_or(-1)),
    }
}
