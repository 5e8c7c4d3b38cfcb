use std::collections::HashMap;
use std::fs;
use std::io;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use super::{find_in_path, CampaignConfig, ExecutionPlan, FuzzError};

/// How a fuzzer process ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunExit {
    Code(i32),
    Signal(i32),
}

/// Launches a fuzzer for one campaign.
pub trait FuzzerAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Fails with an environment error when the fuzzer is not installed.
    fn check_available(&self) -> Result<(), FuzzError>;

    fn launch(
        &self,
        config: &CampaignConfig,
        plan: &ExecutionPlan,
        seeds_dir: &Path,
    ) -> Result<Box<dyn FuzzerRun>, FuzzError>;
}

/// A running (or finished) fuzzer as seen by the supervisor.
pub trait FuzzerRun: Send {
    /// Current contents of the stats file.
    fn read_stats(&mut self) -> io::Result<String>;
    /// `Some` once the fuzzer has exited.
    fn poll_exit(&mut self) -> io::Result<Option<RunExit>>;
    /// Asks the fuzzer to shut down and flush its state.
    fn request_stop(&mut self) -> io::Result<()>;
    fn kill(&mut self) -> io::Result<()>;
    fn crash_inputs(&self) -> io::Result<Vec<Vec<u8>>>;
    fn queue_size(&self) -> io::Result<usize>;
}

/// A fuzzer child process with an AFL-style output directory.
pub struct ProcessRun {
    child: Child,
    exit: Option<RunExit>,
    stats_path: PathBuf,
    crash_dir: PathBuf,
    queue_dir: PathBuf,
}

impl ProcessRun {
    /// Spawns `cmd` in its own process group.
    pub fn spawn(
        mut cmd: Command,
        stats_path: PathBuf,
        crash_dir: PathBuf,
        queue_dir: PathBuf,
    ) -> Result<Self, FuzzError> {
        cmd.process_group(0)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        let child = cmd
            .spawn()
            .map_err(|e| FuzzError::Spawn(format!("{:?}: {e}", cmd.get_program())))?;
        Ok(ProcessRun {
            child,
            exit: None,
            stats_path,
            crash_dir,
            queue_dir,
        })
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    fn signal_group(&self, sig: i32) -> io::Result<()> {
        if self.exit.is_some() {
            return Ok(());
        }
        // SAFETY: kill(2) on our own child's process group.
        let rc = unsafe { libc::kill(-(self.child.id() as i32), sig) };
        if rc == 0 {
            Ok(())
        } else {
            let err = io::Error::last_os_error();
            if err.raw_os_error() == Some(libc::ESRCH) {
                Ok(())
            } else {
                Err(err)
            }
        }
    }
}

impl FuzzerRun for ProcessRun {
    fn read_stats(&mut self) -> io::Result<String> {
        fs::read_to_string(&self.stats_path)
    }

    fn poll_exit(&mut self) -> io::Result<Option<RunExit>> {
        if self.exit.is_none() {
            if let Some(status) = self.child.try_wait()? {
                self.exit = Some(match status.signal() {
                    Some(sig) => RunExit::Signal(sig),
                    None => RunExit::Code(status.code().unwrap_or(-1)),
                });
            }
        }
        Ok(self.exit)
    }

    fn request_stop(&mut self) -> io::Result<()> {
        self.signal_group(libc::SIGTERM)
    }

    fn kill(&mut self) -> io::Result<()> {
        self.signal_group(libc::SIGKILL)?;
        if self.exit.is_none() {
            let status = self.child.wait()?;
            self.exit = Some(match status.signal() {
                Some(sig) => RunExit::Signal(sig),
                None => RunExit::Code(status.code().unwrap_or(-1)),
            });
        }
        Ok(())
    }

    fn crash_inputs(&self) -> io::Result<Vec<Vec<u8>>> {
        read_entries(&self.crash_dir)?
            .into_iter()
            .map(fs::read)
            .collect()
    }

    fn queue_size(&self) -> io::Result<usize> {
        Ok(read_entries(&self.queue_dir)?.len())
    }
}

impl Drop for ProcessRun {
    fn drop(&mut self) {
        if self.exit.is_none() {
            let _ = self.kill();
        }
    }
}

/// Regular files in an AFL output subdirectory, skipping its README.
fn read_entries(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_file() && entry.file_name() != "README.txt" {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

/// AFL++ in binary-only (QEMU) mode with its standard output layout:
/// `<out>/afl/default/{fuzzer_stats,crashes/,queue/}`.
#[derive(Debug, Clone)]
pub struct AflAdapter {
    pub fuzzer: PathBuf,
    pub extra_args: Vec<String>,
    /// Pass `-Q`; turn off only for instrumented builds.
    pub qemu_mode: bool,
}

impl Default for AflAdapter {
    fn default() -> Self {
        AflAdapter {
            fuzzer: PathBuf::from("afl-fuzz"),
            extra_args: Vec::new(),
            qemu_mode: true,
        }
    }
}

impl AflAdapter {
    pub fn with_fuzzer(fuzzer: impl Into<PathBuf>) -> Self {
        AflAdapter {
            fuzzer: fuzzer.into(),
            ..Default::default()
        }
    }

    pub fn sync_dir(output_dir: &Path) -> PathBuf {
        output_dir.join("afl")
    }

    pub fn instance_dir(output_dir: &Path) -> PathBuf {
        Self::sync_dir(output_dir).join("default")
    }

    pub fn command(
        &self,
        config: &CampaignConfig,
        plan: &ExecutionPlan,
        seeds_dir: &Path,
    ) -> Command {
        let mut cmd = Command::new(&self.fuzzer);
        cmd.arg("-i")
            .arg(seeds_dir)
            .arg("-o")
            .arg(Self::sync_dir(&config.output_dir));
        if self.qemu_mode {
            cmd.arg("-Q");
        }
        cmd.arg("-t").arg(config.harness.timeout_ms.to_string());
        cmd.args(&self.extra_args);
        cmd.arg("--");
        // afl-fuzz substitutes @@ itself
        cmd.args(config.harness.render_argv(&config.target.path, None));
        cmd.env("AFL_NO_UI", "1");
        if let ExecutionPlan::Emulated { sysroot, .. } = plan {
            cmd.env("QEMU_LD_PREFIX", sysroot);
        }
        cmd.envs(&config.harness.env);
        cmd
    }
}

impl FuzzerAdapter for AflAdapter {
    fn name(&self) -> &str {
        "afl++"
    }

    fn check_available(&self) -> Result<(), FuzzError> {
        match find_in_path(&self.fuzzer.to_string_lossy()) {
            Some(_) => Ok(()),
            None => Err(FuzzError::Environment(format!(
                "fuzzer `{}` not found",
                self.fuzzer.display()
            ))),
        }
    }

    fn launch(
        &self,
        config: &CampaignConfig,
        plan: &ExecutionPlan,
        seeds_dir: &Path,
    ) -> Result<Box<dyn FuzzerRun>, FuzzError> {
        let instance = Self::instance_dir(&config.output_dir);
        let run = ProcessRun::spawn(
            self.command(config, plan, seeds_dir),
            instance.join("fuzzer_stats"),
            instance.join("crashes"),
            instance.join("queue"),
        )?;
        Ok(Box::new(run))
    }
}

/// One scripted event of the mock fuzzer; each poll consumes one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockStep {
    /// Stats file contents for this poll.
    Stats(String),
    /// Stats file present but unparsable.
    Garbage,
    /// The fuzzer exits with this status.
    Exit(i32),
    /// The fuzzer dies with this signal.
    Signal(i32),
}

/// Script for [`MockAdapter`].
///
/// Text form, one step per line, `#` comments:
///
/// ```text
/// spawn-fail            # only valid as the first line
/// ignore-term           # keep running after a graceful stop request
/// stats <t> <crashes> <edges> <execs> <cycles>
/// garbage
/// exit <code>
/// signal <signo>
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockScript {
    pub steps: Vec<MockStep>,
    pub spawn_fails: bool,
    pub ignore_term: bool,
}

impl MockScript {
    pub fn from_samples(samples: &[super::FuzzStatsSample]) -> Self {
        MockScript {
            steps: samples.iter().map(|s| MockStep::Stats(stats_text(s))).collect(),
            ..Default::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self, FuzzError> {
        let mut script = MockScript::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || FuzzError::Config(format!("mock script line {}: {raw:?}", n + 1));
            let mut words = line.split_whitespace();
            let nums = |w: std::str::SplitWhitespace<'_>| -> Result<Vec<i64>, FuzzError> {
                w.map(|x| x.parse::<i64>().map_err(|_| bad())).collect()
            };
            match words.next() {
                Some("spawn-fail") => script.spawn_fails = true,
                Some("ignore-term") => script.ignore_term = true,
                Some("garbage") => script.steps.push(MockStep::Garbage),
                Some("exit") => match nums(words)?.as_slice() {
                    [c] => script.steps.push(MockStep::Exit(*c as i32)),
                    _ => return Err(bad()),
                },
                Some("signal") => match nums(words)?.as_slice() {
                    [s] => script.steps.push(MockStep::Signal(*s as i32)),
                    _ => return Err(bad()),
                },
                Some("stats") => match nums(words)?.as_slice() {
                    &[t, c, e, x, y] if [t, c, e, x, y].iter().all(|v| *v >= 0) => {
                        script.steps.push(MockStep::Stats(stats_text(&super::FuzzStatsSample {
                            relative_time_s: t as u64,
                            crashes_saved: c as u64,
                            edges_found: e as u64,
                            execs_done: x as u64,
                            cycles_done: y as u64,
                        })))
                    }
                    _ => return Err(bad()),
                },
                _ => return Err(bad()),
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, FuzzError> {
        let text = fs::read_to_string(path).map_err(|e| FuzzError::io(path, e))?;
        Self::parse(&text)
    }
}

fn stats_text(s: &super::FuzzStatsSample) -> String {
    format!(
        "run_time          : {}\nsaved_crashes     : {}\nedges_found       : {}\nexecs_done        : {}\ncycles_done       : {}\n",
        s.relative_time_s, s.crashes_saved, s.edges_found, s.execs_done, s.cycles_done
    )
}

/// In-process stand-in for a fuzzer, driven by a [`MockScript`] per
/// campaign id. It never spawns a process; liveness is tracked in memory.
#[derive(Debug, Clone, Default)]
pub struct MockAdapter {
    default_script: MockScript,
    scripts: HashMap<String, MockScript>,
    live: Arc<AtomicUsize>,
    launched: Arc<AtomicUsize>,
}

impl MockAdapter {
    pub fn new(default_script: MockScript) -> Self {
        MockAdapter {
            default_script,
            ..Default::default()
        }
    }

    pub fn with_script(mut self, campaign_id: impl Into<String>, script: MockScript) -> Self {
        self.scripts.insert(campaign_id.into(), script);
        self
    }

    /// Mock fuzzers launched and not yet stopped or exited.
    pub fn live_runs(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn launched_runs(&self) -> usize {
        self.launched.load(Ordering::SeqCst)
    }
}

impl FuzzerAdapter for MockAdapter {
    fn name(&self) -> &str {
        "mock"
    }

    fn check_available(&self) -> Result<(), FuzzError> {
        Ok(())
    }

    fn launch(
        &self,
        config: &CampaignConfig,
        _plan: &ExecutionPlan,
        _seeds_dir: &Path,
    ) -> Result<Box<dyn FuzzerRun>, FuzzError> {
        let script = self
            .scripts
            .get(&config.id)
            .unwrap_or(&self.default_script)
            .clone();
        if script.spawn_fails {
            return Err(FuzzError::Spawn("mock fuzzer: scripted spawn failure".into()));
        }
        self.live.fetch_add(1, Ordering::SeqCst);
        self.launched.fetch_add(1, Ordering::SeqCst);
        Ok(Box::new(MockRun {
            script,
            cursor: 0,
            current: None,
            exit: None,
            live: Arc::clone(&self.live),
            last_crashes: 0,
        }))
    }
}

struct MockRun {
    script: MockScript,
    cursor: usize,
    current: Option<MockStep>,
    exit: Option<RunExit>,
    live: Arc<AtomicUsize>,
    last_crashes: u64,
}

impl MockRun {
    fn finish(&mut self, exit: RunExit) {
        if self.exit.is_none() {
            self.exit = Some(exit);
            self.live.fetch_sub(1, Ordering::SeqCst);
        }
    }

    /// Advances the script by one step (one poll).
    fn advance(&mut self) {
        if self.exit.is_some() {
            return;
        }
        match self.script.steps.get(self.cursor).cloned() {
            Some(MockStep::Exit(code)) => self.finish(RunExit::Code(code)),
            Some(MockStep::Signal(sig)) => self.finish(RunExit::Signal(sig)),
            Some(step) => {
                if let MockStep::Stats(text) = &step {
                    if let Ok(s) = super::parse_stats(text) {
                        self.last_crashes = s.crashes_saved;
                    }
                }
                self.current = Some(step);
            }
            // script exhausted: keep reporting the last step
            None => {}
        }
        self.cursor += 1;
    }
}

impl FuzzerRun for MockRun {
    fn read_stats(&mut self) -> io::Result<String> {
        match &self.current {
            Some(MockStep::Stats(text)) => Ok(text.clone()),
            Some(MockStep::Garbage) => Ok("\u{fffd}\u{fffd} not a stats file".into()),
            _ => Err(io::Error::new(io::ErrorKind::NotFound, "no stats yet")),
        }
    }

    fn poll_exit(&mut self) -> io::Result<Option<RunExit>> {
        // The supervisor checks liveness once per poll, before reading stats.
        self.advance();
        Ok(self.exit)
    }

    fn request_stop(&mut self) -> io::Result<()> {
        if !self.script.ignore_term {
            self.finish(RunExit::Code(0));
        }
        Ok(())
    }

    fn kill(&mut self) -> io::Result<()> {
        self.finish(RunExit::Signal(libc::SIGKILL));
        Ok(())
    }

    fn crash_inputs(&self) -> io::Result<Vec<Vec<u8>>> {
        Ok((0..self.last_crashes)
            .map(|i| format!("mock-crash-{i:06}").into_bytes())
            .collect())
    }

    fn queue_size(&self) -> io::Result<usize> {
        Ok(self.cursor)
    }
}

impl Drop for MockRun {
    fn drop(&mut self) {
        self.finish(RunExit::Signal(libc::SIGKILL));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_mock_script() {
        let s = MockScript::parse(
            "# demo\nignore-term\nstats 0 0 10 100 0\ngarbage\nexit 2 # dies\nsignal 11\n",
        )
        .unwrap();
        assert!(s.ignore_term && !s.spawn_fails);
        assert_eq!(s.steps.len(), 4);
        assert_eq!(s.steps[2], MockStep::Exit(2));
        assert!(MockScript::parse("stats 1 2").is_err());
        assert!(MockScript::parse("bogus").is_err());
        assert!(MockScript::parse("stats 1 -2 0 0 0").is_err());
    }
}
