//! Debugger adapters and the batch-transcript parser.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::exec::{command_line, Invocation};
use crate::fuzzing::{find_in_path, ExecutionPlan};
use crate::CrashSignal;

#[derive(Debug, thiserror::Error)]
pub enum DebuggerError {
    #[error("debugger unavailable: {0}")]
    Unavailable(String),
    #[error("debugger session failed: {0}")]
    Session(String),
}

/// Runs one input under a debugger and returns the batch transcript.
pub trait DebuggerAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn available(&self, plan: &ExecutionPlan) -> bool;
    fn transcript(&self, inv: &Invocation, input: &[u8]) -> Result<String, DebuggerError>;
}

/// What a transcript says about the run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedTranscript {
    /// `None` when the program did not stop on a signal.
    pub signal: Option<CrashSignal>,
    pub fault_address: Option<u64>,
    pub frames: Vec<Frame>,
    pub raw_backtrace: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Mapping {
    start: u64,
    end: u64,
    objfile: String,
}

fn frame_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^#(\d+)\s+(?:0x([0-9a-fA-F]+) in )?(\S+) \(").unwrap()
    })
}

fn signal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^Program (?:received|terminated with) signal (SIG[A-Z0-9]+)").unwrap()
    })
}

fn parse_hex(s: &str) -> Option<u64> {
    u64::from_str_radix(s.trim().trim_start_matches("0x"), 16).ok()
}

fn parse_mappings(text: &str) -> Vec<Mapping> {
    let mut out = Vec::new();
    let mut in_table = false;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with("Start Addr") {
            in_table = true;
            continue;
        }
        if !in_table {
            continue;
        }
        let cols: Vec<&str> = t.split_whitespace().collect();
        if cols.len() < 4 || !cols[..4].iter().all(|c| c.starts_with("0x")) {
            in_table = false;
            continue;
        }
        let (Some(start), Some(end)) = (parse_hex(cols[0]), parse_hex(cols[1])) else {
            continue;
        };
        // newer debuggers print a permissions column before the object file
        let rest = if cols.len() > 4 && is_perms(cols[4]) { &cols[5..] } else { &cols[4..] };
        out.push(Mapping {
            start,
            end,
            objfile: rest.join(" "),
        });
    }
    out
}

fn is_perms(s: &str) -> bool {
    s.len() == 4 && s.chars().all(|c| "rwxps-".contains(c))
}

fn module_name(objfile: &str) -> String {
    objfile.rsplit('/').next().unwrap_or(objfile).to_string()
}

/// Module and module-relative offset of `addr`, where the module base is
/// the lowest mapping of the same object file.
fn resolve(maps: &[Mapping], addr: u64) -> Option<(String, u64)> {
    let hit = maps.iter().find(|m| m.start <= addr && addr < m.end)?;
    if hit.objfile.is_empty() {
        return None;
    }
    let base = maps
        .iter()
        .filter(|m| m.objfile == hit.objfile)
        .map(|m| m.start)
        .min()
        .unwrap_or(hit.start);
    Some((module_name(&hit.objfile), addr - base))
}

/// Parses a batch transcript produced by [`GdbAdapter`] (or captured from
/// an equivalent session).
pub fn parse_transcript(text: &str) -> ParsedTranscript {
    let maps = parse_mappings(text);
    let mut out = ParsedTranscript::default();
    let mut pc = None;
    let mut bt_lines = Vec::new();
    for line in text.lines() {
        if let Some(c) = signal_re().captures(line) {
            out.signal
                .get_or_insert(CrashSignal::from_name(&c[1]).unwrap_or(CrashSignal::Other(0)));
        } else if let Some(v) = line.strip_prefix("FAULT_ADDR=") {
            out.fault_address = if v.trim() == "(nil)" { Some(0) } else { parse_hex(v) };
        } else if let Some(v) = line.strip_prefix("PC=") {
            pc = parse_hex(v);
        } else if let Some(c) = frame_re().captures(line) {
            bt_lines.push(line);
            let index: usize = c[1].parse().unwrap_or(usize::MAX);
            let addr = c
                .get(2)
                .and_then(|m| parse_hex(m.as_str()))
                .or(if index == 0 { pc } else { None });
            let symbol = match &c[3] {
                "??" => None,
                s => Some(s.to_string()),
            };
            let from = line.rsplit_once(" from ").map(|(_, lib)| module_name(lib.trim()));
            let (module, offset) = match addr.and_then(|a| resolve(&maps, a)) {
                Some(r) => r,
                None => (from.unwrap_or_else(|| "??".into()), addr.unwrap_or(0)),
            };
            out.frames.push(Frame { module, symbol, offset });
        }
    }
    out.raw_backtrace = bt_lines.join("\n");
    if out.signal.is_none() {
        out.fault_address = None;
    }
    out
}

/// Drives gdb in batch mode. Emulated plans are not supported; callers
/// fall back to a signal-only result.
#[derive(Debug, Clone)]
pub struct GdbAdapter {
    pub gdb: String,
    pub max_frames: usize,
    pub timeout: Duration,
}

impl Default for GdbAdapter {
    fn default() -> Self {
        GdbAdapter {
            gdb: "gdb".into(),
            max_frames: 512,
            timeout: Duration::from_secs(60),
        }
    }
}

impl DebuggerAdapter for GdbAdapter {
    fn name(&self) -> &str {
        &self.gdb
    }

    fn available(&self, plan: &ExecutionPlan) -> bool {
        matches!(plan, ExecutionPlan::Native) && find_in_path(&self.gdb).is_some()
    }

    fn transcript(&self, inv: &Invocation, input: &[u8]) -> Result<String, DebuggerError> {
        if !matches!(inv.plan, ExecutionPlan::Native) {
            return Err(DebuggerError::Unavailable(
                "debugging emulated targets is not supported".into(),
            ));
        }
        let session = |e: std::io::Error| DebuggerError::Session(e.to_string());
        let workdir = tempfile::Builder::new()
            .prefix("fuzzreuse-gdb")
            .tempdir()
            .map_err(session)?;
        let input_path = workdir.path().join("input");
        fs::write(&input_path, input).map_err(session)?;
        let target = std::path::absolute(&inv.target).map_err(session)?;
        let argv = command_line(&inv.plan, &inv.harness, &target, Some(&input_path));
        let run = if inv.harness.stdin_mode {
            format!("run < {}", input_path.display())
        } else {
            "run".to_string()
        };
        let out_path = workdir.path().join("transcript");
        let out = File::create(&out_path).map_err(session)?;
        let mut cmd = Command::new(&self.gdb);
        cmd.args(["-nx", "-batch", "-q"])
            .args(["-iex", "set debuginfod enabled off"])
            .args(["-iex", "set auto-load off"])
            .args(["-ex", "set pagination off"])
            .args(["-ex", "set confirm off"])
            .args(["-ex", &run])
            .args(["-ex", r#"printf "FAULT_ADDR=%p\n", $_siginfo._sifields._sigfault.si_addr"#])
            .args(["-ex", r#"printf "PC=%p\n", $pc"#])
            .args(["-ex", &format!("bt {}", self.max_frames)])
            .args(["-ex", "info proc mappings"])
            .arg("--args")
            .args(&argv)
            .current_dir(workdir.path())
            .envs(&inv.harness.env)
            .stdin(Stdio::null())
            .stdout(out.try_clone().map_err(session)?)
            .stderr(out)
            .process_group(0);
        let mut child = cmd.spawn().map_err(|e| {
            DebuggerError::Unavailable(format!("{}: {e}", self.gdb))
        })?;
        let deadline = Instant::now() + self.timeout;
        loop {
            if child.try_wait().map_err(session)?.is_some() {
                break;
            }
            if Instant::now() >= deadline {
                // SAFETY: signalling the process group we created.
                unsafe {
                    libc::kill(-(child.id() as i32), libc::SIGKILL);
                }
                let _ = child.wait();
                return Err(DebuggerError::Session("debugger timed out".into()));
            }
            thread::sleep(Duration::from_millis(5));
        }
        let mut text = String::new();
        File::open(&out_path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(session)?;
        Ok(text)
    }
}

/// Returns canned transcripts keyed by input bytes. Inputs without an
/// entry get `fallback`, or an error when there is none.
#[derive(Debug, Clone, Default)]
pub struct FixtureDebugger {
    by_input: HashMap<Vec<u8>, String>,
    fallback: Option<String>,
}

impl FixtureDebugger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, input: impl Into<Vec<u8>>, transcript: impl Into<String>) -> Self {
        self.by_input.insert(input.into(), transcript.into());
        self
    }

    pub fn with_fallback(mut self, transcript: impl Into<String>) -> Self {
        self.fallback = Some(transcript.into());
        self
    }
}

impl DebuggerAdapter for FixtureDebugger {
    fn name(&self) -> &str {
        "fixture"
    }

    fn available(&self, _plan: &ExecutionPlan) -> bool {
        true
    }

    fn transcript(&self, _inv: &Invocation, input: &[u8]) -> Result<String, DebuggerError> {
        self.by_input
            .get(input)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| DebuggerError::Session("no fixture transcript for input".into()))
    }
}

/// A debugger that is never available.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoDebugger;

impl DebuggerAdapter for NoDebugger {
    fn name(&self) -> &str {
        "none"
    }

    fn available(&self, _plan: &ExecutionPlan) -> bool {
        false
    }

    fn transcript(&self, _inv: &Invocation, _input: &[u8]) -> Result<String, DebuggerError> {
        Err(DebuggerError::Unavailable("no debugger configured".into()))
    }
}
