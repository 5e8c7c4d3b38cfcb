//! Batch supervision of an external coverage-guided fuzzer.
//!
//! A campaign is one fuzzer process against one target with a fixed seed
//! corpus. The supervisor polls the fuzzer's stats file, stops it when a
//! termination criterion fires and harvests crashes and queue size from the
//! adapter's output layout.

mod adapter;
mod batch;
mod campaign;
mod stats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::inventory::TargetBinary;
use crate::seedgen::SeedCorpus;
use crate::Arch;

pub use adapter::{
    AflAdapter, FuzzerAdapter, FuzzerRun, MockAdapter, MockScript, MockStep, ProcessRun, RunExit,
};
pub use batch::{load_batch_file, run_batch, BatchFile, CampaignEntry, StatsDump};
pub use campaign::{
    run_campaign, run_campaign_with, Clock, ClockSource, ManualClock, SupervisorOptions, SystemClock,
    DEFAULT_GRACE_PERIOD, DEFAULT_POLL_INTERVAL_S,
};
pub use stats::{parse_stats, FuzzStatsSample, StatsParseError};

/// Placeholder replaced by the path of the input file.
pub const INPUT_PLACEHOLDER: &str = "@@";
/// Placeholder replaced by the path of the target binary.
pub const TARGET_PLACEHOLDER: &str = "{target}";

#[derive(Debug, thiserror::Error)]
pub enum FuzzError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("environment: {0}")]
    Environment(String),
    #[error("fuzzer process: {0}")]
    Spawn(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl FuzzError {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        FuzzError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

/// How the target is invoked for one execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessSpec {
    /// Command line; `{target}` is the binary and `@@` the input file.
    pub argv_template: Vec<String>,
    /// Feed the input on stdin instead of through `@@`.
    #[serde(default)]
    pub stdin_mode: bool,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Loader and library root for foreign-architecture targets.
    #[serde(default)]
    pub sysroot: Option<PathBuf>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    1000
}

impl HarnessSpec {
    pub fn new(argv_template: impl IntoIterator<Item = impl Into<String>>) -> Self {
        HarnessSpec {
            argv_template: argv_template.into_iter().map(Into::into).collect(),
            stdin_mode: false,
            env: BTreeMap::new(),
            sysroot: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    /// Stock invocation for an applet of a multi-call binary. awk takes its
    /// program through `-f`; other applets get the file as an operand.
    pub fn default_profile(applet: &str) -> Self {
        match applet {
            "awk" => Self::new(["{target}", "awk", "-f", "@@"]),
            "toy" => Self::new(["{target}", "@@"]),
            "man" => Self::new(["{target}", "man", "-l", "@@"]),
            other => Self::new(["{target}", other, "@@"]),
        }
    }

    pub fn with_timeout_ms(mut self, ms: u64) -> Self {
        self.timeout_ms = ms;
        self
    }

    pub fn uses_input_placeholder(&self) -> bool {
        self.argv_template.iter().any(|a| a.contains(INPUT_PLACEHOLDER))
    }

    pub fn validate(&self) -> Result<(), FuzzError> {
        if self.argv_template.is_empty() {
            return Err(FuzzError::Config("harness argv_template is empty".into()));
        }
        if self.uses_input_placeholder() == self.stdin_mode {
            return Err(FuzzError::Config(
                "harness must use exactly one input mechanism: `@@` in argv or stdin_mode".into(),
            ));
        }
        if self.timeout_ms == 0 {
            return Err(FuzzError::Config("harness timeout_ms must be positive".into()));
        }
        Ok(())
    }

    /// Substitutes the placeholders. `input` is ignored in stdin mode.
    pub fn render_argv(&self, target: &Path, input: Option<&Path>) -> Vec<String> {
        let target = target.to_string_lossy();
        let input = input.map(|p| p.to_string_lossy().into_owned());
        self.argv_template
            .iter()
            .map(|arg| {
                let arg = arg.replace(TARGET_PLACEHOLDER, &target);
                match &input {
                    Some(i) if !self.stdin_mode => arg.replace(INPUT_PLACEHOLDER, i),
                    _ => arg,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TerminationCriteria {
    #[serde(default)]
    pub max_runtime_s: Option<u64>,
    #[serde(default)]
    pub max_crashes: Option<u64>,
    #[serde(default)]
    pub max_cycles: Option<u64>,
}

impl TerminationCriteria {
    pub fn validate(&self) -> Result<(), FuzzError> {
        let bounds = [self.max_runtime_s, self.max_crashes, self.max_cycles];
        if bounds.iter().all(Option::is_none) {
            return Err(FuzzError::Config("at least one termination bound must be set".into()));
        }
        if bounds.iter().flatten().any(|&b| b == 0) {
            return Err(FuzzError::Config("termination bounds must be positive".into()));
        }
        Ok(())
    }

    /// Name of the first bound reached by `sample` (runtime also checks
    /// supervisor wall time).
    pub fn reached(&self, sample: &FuzzStatsSample, elapsed_s: u64) -> Option<&'static str> {
        if let Some(limit) = self.max_runtime_s {
            if sample.relative_time_s >= limit || elapsed_s >= limit {
                return Some("max_runtime_s");
            }
        }
        if self.max_crashes.is_some_and(|l| sample.crashes_saved >= l) {
            return Some("max_crashes");
        }
        if self.max_cycles.is_some_and(|l| sample.cycles_done >= l) {
            return Some("max_cycles");
        }
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub id: String,
    pub target: TargetBinary,
    pub applet: String,
    pub harness: HarnessSpec,
    pub corpus: SeedCorpus,
    pub criteria: TerminationCriteria,
    pub output_dir: PathBuf,
    pub poll_interval_s: u64,
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), FuzzError> {
        self.harness.validate()?;
        self.criteria.validate()?;
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(FuzzError::Config(format!("bad campaign id {:?}", self.id)));
        }
        if self.corpus.seeds.is_empty() {
            return Err(FuzzError::Config(format!("campaign {}: empty seed corpus", self.id)));
        }
        if self.poll_interval_s == 0 {
            return Err(FuzzError::Config("poll_interval_s must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CampaignStatus {
    Completed,
    Failed,
    Catastrophic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub campaign_id: String,
    pub status: CampaignStatus,
    pub stats_series: Vec<FuzzStatsSample>,
    #[serde(skip)]
    pub crash_inputs: Vec<Vec<u8>>,
    pub queue_size: usize,
    pub failure_diagnostic: Option<String>,
    /// Criterion that ended the campaign, if any.
    pub stopped_by: Option<String>,
}

impl CampaignResult {
    pub fn final_sample(&self) -> Option<&FuzzStatsSample> {
        self.stats_series.last()
    }
}

/// Native execution, or user-mode emulation with a sysroot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionPlan {
    Native,
    Emulated { arch: Arch, sysroot: PathBuf },
}

impl ExecutionPlan {
    /// Prefix to put in front of the rendered argv.
    pub fn launcher(&self) -> Vec<String> {
        match self {
            ExecutionPlan::Native => Vec::new(),
            ExecutionPlan::Emulated { arch, sysroot } => vec![
                arch.emulator().unwrap_or("qemu-user").to_string(),
                "-L".to_string(),
                sysroot.to_string_lossy().into_owned(),
            ],
        }
    }

    /// Checks that the emulator, if any, can be found on `PATH`.
    pub fn check_launcher(&self) -> Result<(), FuzzError> {
        match self.launcher().first() {
            None => Ok(()),
            Some(emu) if find_in_path(emu).is_some() => Ok(()),
            Some(emu) => Err(FuzzError::Environment(format!(
                "user-mode emulator `{emu}` not found in PATH"
            ))),
        }
    }
}

pub fn plan_execution(
    target_arch: Arch,
    host_arch: Arch,
    sysroot: Option<&Path>,
) -> Result<ExecutionPlan, FuzzError> {
    if let Arch::Unknown(code) = target_arch {
        return Err(FuzzError::Environment(format!(
            "cannot execute target of unknown architecture (e_machine {code})"
        )));
    }
    if target_arch == host_arch {
        return Ok(ExecutionPlan::Native);
    }
    match sysroot {
        Some(root) => Ok(ExecutionPlan::Emulated {
            arch: target_arch,
            sysroot: root.to_path_buf(),
        }),
        None => Err(FuzzError::Environment(format!(
            "{target_arch} target on {host_arch} host needs a sysroot with the {target_arch} loader and shared libraries"
        ))),
    }
}

/// Locates an executable by name the way a shell would.
pub fn find_in_path(name: &str) -> Option<PathBuf> {
    let candidate = Path::new(name);
    if candidate.components().count() > 1 {
        return candidate.is_file().then(|| candidate.to_path_buf());
    }
    std::env::var_os("PATH").and_then(|paths| {
        std::env::split_paths(&paths)
            .map(|dir| dir.join(name))
            .find(|p| p.is_file())
    })
}
