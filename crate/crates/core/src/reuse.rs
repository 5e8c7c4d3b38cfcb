//! Crash reuse: screen a new variant of a component by replaying the
//! crashes already stored for it, without fuzzing.
//!
//! Detection is signal-based at the process boundary; the debugger only
//! runs afterwards, on inputs that crashed, to compute signatures.

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crashdb::{
    CrashFilter, CrashMetadata, CrashSignature, CrashStore, Discovery, RecordId, StoreError,
};
use crate::exec::{ExecStatus, Invocation};
use crate::fuzzing::{plan_execution, ExecutionPlan, FuzzError, HarnessSpec};
use crate::inventory::TargetBinary;
use crate::report::{overlap_labeled, OverlapCounts};
use crate::triage::{classify_crash, signature_from, DebuggerAdapter, TriageOptions};
use crate::Arch;

#[derive(Debug, thiserror::Error)]
pub enum ReuseError {
    #[error("empty crash set: no stored crash matches the filter")]
    EmptyCrashSet,
    #[error("invalid replay request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Environment(#[from] FuzzError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Crash(crate::CrashSignal),
    Clean(i32),
    Timeout,
    ExecError(String),
}

impl Verdict {
    pub fn is_crash(&self) -> bool {
        matches!(self, Verdict::Crash(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    /// The stored record that was replayed, if any.
    pub record_id: Option<RecordId>,
    pub input_hash: String,
    pub verdict: Verdict,
    pub wall_time_ms: u64,
    /// Filled in by screening for crashing replays.
    pub signature: Option<CrashSignature>,
}

/// Executes the target once on `input` and turns the result into a
/// verdict. Never fails per input; problems become `EXEC_ERROR`.
pub fn replay_one(plan: &ExecutionPlan, harness: &HarnessSpec, target: &std::path::Path, input: &[u8]) -> ReplayOutcome {
    let input_hash = crate::sha256_hex(input);
    let verdict_only = |verdict| ReplayOutcome {
        record_id: None,
        input_hash: input_hash.clone(),
        verdict,
        wall_time_ms: 0,
        signature: None,
    };
    if input.is_empty() {
        return verdict_only(Verdict::ExecError("empty input".into()));
    }
    if let Err(e) = harness.validate() {
        return verdict_only(Verdict::ExecError(e.to_string()));
    }
    let out = crate::exec::run_once(plan, harness, target, input);
    let verdict = match out.status {
        ExecStatus::Signaled(sig) if sig.is_crash() => Verdict::Crash(sig),
        ExecStatus::Signaled(sig) => Verdict::ExecError(format!("terminated by signal {}", sig.raw())),
        ExecStatus::Exited(code) => Verdict::Clean(code),
        ExecStatus::TimedOut => Verdict::Timeout,
        ExecStatus::LaunchFailed(msg) => Verdict::ExecError(msg),
    };
    ReplayOutcome {
        wall_time_ms: out.wall_time.as_millis() as u64,
        ..verdict_only(verdict)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub target_hash: String,
    pub total_replayed: usize,
    pub crashing: usize,
    pub unique_crashing: usize,
    pub timeouts: usize,
    pub exec_errors: usize,
    /// Distinct signatures among the crashing replays, sorted.
    pub signatures: Vec<CrashSignature>,
    pub per_outcome: Vec<ReplayOutcome>,
}

impl ReplaySummary {
    pub fn signature_set(&self) -> HashSet<CrashSignature> {
        self.signatures.iter().cloned().collect()
    }
}

pub struct ScreenOptions<'a> {
    pub parallelism: usize,
    pub host_arch: Arch,
    pub sysroot: Option<PathBuf>,
    pub debugger: &'a dyn DebuggerAdapter,
    pub triage: TriageOptions,
}

impl<'a> ScreenOptions<'a> {
    pub fn new(debugger: &'a dyn DebuggerAdapter) -> Self {
        ScreenOptions {
            parallelism: 1,
            host_arch: Arch::host(),
            sysroot: None,
            debugger,
            triage: TriageOptions::default(),
        }
    }
}

/// Replays every stored crash matching `filter` against `target`.
///
/// Each distinct input is replayed once, in query order, even when several
/// records (for instance earlier reuse hits) share it. Crashing inputs are
/// triaged for signatures and written back with discovery `REUSE` and this
/// target as the source; re-screening adds no duplicates.
pub fn screen_target(
    target: &TargetBinary,
    store: &CrashStore,
    filter: &CrashFilter,
    harness: &HarnessSpec,
    opts: &ScreenOptions,
) -> Result<ReplaySummary, ReuseError> {
    harness.validate()?;
    let mut seen = HashSet::new();
    let records: Vec<_> = store
        .query(filter)
        .into_iter()
        .filter(|r| seen.insert(r.input_hash.clone()))
        .collect();
    if records.is_empty() {
        return Err(ReuseError::EmptyCrashSet);
    }
    let plan = plan_execution(target.arch, opts.host_arch, opts.sysroot.as_deref())?;
    plan.check_launcher()?;
    let inv = Invocation::new(target.path.clone(), plan, harness.clone());

    // crashing replays keep their input for the write-back
    type Replayed = (ReplayOutcome, Option<Vec<u8>>);
    let work = || -> Result<Vec<Replayed>, ReuseError> {
        records
            .par_iter()
            .with_max_len(1)
            .map(|rec| {
                let input = store.blob(&rec.input_hash)?;
                let mut out = replay_one(&inv.plan, &inv.harness, &inv.target, &input);
                out.record_id = Some(rec.id.clone());
                if out.verdict.is_crash() {
                    match classify_crash(&inv, &input, opts.debugger, &opts.triage) {
                        Ok(r) => out.signature = Some(signature_from(&r, &opts.triage)),
                        Err(e) => log::warn!("{}: {e}", rec.id),
                    }
                    Ok((out, Some(input)))
                } else {
                    Ok((out, None))
                }
            })
            .collect()
    };
    let results = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| ReuseError::Invalid(e.to_string()))?
        .install(work)?;

    for ((out, input), rec) in results.iter().zip(&records) {
        let (Some(input), Verdict::Crash(signal)) = (input, &out.verdict) else {
            continue;
        };
        let meta = CrashMetadata {
            component: rec.component.clone(),
            applet: rec.applet.clone(),
            source_target_hash: target.content_hash.clone(),
            source_version: target.version.clone(),
            source_arch: target.arch,
            discovery: Discovery::Reuse,
            signal: *signal,
            signature: out.signature.clone(),
        };
        let (id, inserted) = store.insert(input, meta)?;
        if let (false, Some(sig)) = (inserted, &out.signature) {
            if store.get(&id).is_some_and(|r| r.signature.is_none()) {
                store.attach_signature(&id, sig.clone())?;
            }
        }
    }

    let per_outcome: Vec<ReplayOutcome> = results.into_iter().map(|(o, _)| o).collect();
    let signatures: BTreeSet<CrashSignature> = per_outcome
        .iter()
        .filter_map(|o| o.signature.clone())
        .collect();
    Ok(ReplaySummary {
        target_hash: target.content_hash.clone(),
        total_replayed: per_outcome.len(),
        crashing: per_outcome.iter().filter(|o| o.verdict.is_crash()).count(),
        unique_crashing: signatures.len(),
        timeouts: per_outcome.iter().filter(|o| o.verdict == Verdict::Timeout).count(),
        exec_errors: per_outcome
            .iter()
            .filter(|o| matches!(o.verdict, Verdict::ExecError(_)))
            .count(),
        signatures: signatures.into_iter().collect(),
        per_outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub reuse_only: usize,
    pub fuzz_only: usize,
    pub common: usize,
}

impl From<OverlapCounts> for OverlapReport {
    fn from(c: OverlapCounts) -> Self {
        OverlapReport {
            reuse_only: c.only_a,
            fuzz_only: c.only_b,
            common: c.common,
        }
    }
}

/// Unique crashes found by reuse versus by fuzzing.
pub fn compare_with_fuzzing(reuse: &ReplaySummary, fuzz: &HashSet<CrashSignature>) -> OverlapReport {
    overlap_labeled(&reuse.signature_set(), fuzz, "reuse", "fuzzing").into()
}
