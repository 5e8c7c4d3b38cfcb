//! Crash triage: debugger-backed classification, stack signatures,
//! deduplication and input minimization.

mod batch;
mod ddmin;
mod debugger;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use batch::{triage_batch, TriageEntry, TriageGroup, TriageReport};
pub use ddmin::{ddmin, minimize_input, DdminOutcome, MinimizationResult, SignatureOracle};
pub use debugger::{
    parse_transcript, DebuggerAdapter, DebuggerError, FixtureDebugger, GdbAdapter, NoDebugger,
    ParsedTranscript,
};

use crate::crashdb::CrashSignature;
use crate::exec::{ExecStatus, Invocation};
use crate::CrashSignal;

#[derive(Debug, thiserror::Error)]
pub enum TriageError {
    #[error("input did not reproduce the crash ({0})")]
    Flaky(String),
    #[error("invalid triage request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub module: String,
    pub symbol: Option<String>,
    /// Module-relative offset.
    pub offset: u64,
}

impl Frame {
    pub fn symbol(module: &str, symbol: &str) -> Self {
        Frame {
            module: module.into(),
            symbol: Some(symbol.into()),
            offset: 0,
        }
    }

    /// Address-free form: the symbol, else `module+0xOFF`.
    pub fn normalized(&self) -> String {
        match &self.symbol {
            Some(s) => s.clone(),
            None => format!("{}+{:#x}", self.module, self.offset),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrashClass {
    StackExhaustion,
    NullDeref,
    InvalidDeref,
    Abort,
    Other,
}

impl CrashClass {
    pub fn tag(self) -> &'static str {
        match self {
            CrashClass::StackExhaustion => "stack-exhaustion",
            CrashClass::NullDeref => "null-deref",
            CrashClass::InvalidDeref => "invalid-deref",
            CrashClass::Abort => "abort",
            CrashClass::Other => "other",
        }
    }
}

impl fmt::Display for CrashClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageOptions {
    /// Repeating frames needed to call a crash stack exhaustion.
    pub depth_threshold: usize,
    pub page_size: u64,
    /// Frames hashed into a signature.
    pub frames_k: usize,
    /// Oracle executions allowed per minimization.
    pub max_steps: usize,
}

impl Default for TriageOptions {
    fn default() -> Self {
        TriageOptions {
            depth_threshold: 200,
            page_size: 4096,
            frames_k: 5,
            max_steps: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageResult {
    pub signal: CrashSignal,
    pub fault_address: Option<u64>,
    pub frames: Vec<Frame>,
    pub classification: CrashClass,
    pub raw_backtrace: String,
    /// No debugger output was available; the result is signal-only.
    pub degraded: bool,
}

/// Longest periodic run of frames near the top of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cycle {
    start: usize,
    period: usize,
    /// Frames covered by the repetition, counting the first period.
    len: usize,
}

const MAX_PERIOD: usize = 8;
const MAX_CYCLE_START: usize = 8;

fn find_cycle(names: &[String]) -> Option<Cycle> {
    let mut best: Option<Cycle> = None;
    for start in 0..names.len().min(MAX_CYCLE_START) {
        for period in 1..=MAX_PERIOD {
            let mut i = start;
            while i + period < names.len() && names[i] == names[i + period] {
                i += 1;
            }
            let len = i - start + period;
            if len >= 2 * period && best.is_none_or(|b| len > b.len) {
                best = Some(Cycle { start, period, len });
            }
        }
    }
    best
}

/// Classifies a parsed crash.
pub fn classify(
    signal: CrashSignal,
    fault_address: Option<u64>,
    frames: &[Frame],
    opts: &TriageOptions,
) -> CrashClass {
    let names: Vec<String> = frames.iter().map(Frame::normalized).collect();
    if find_cycle(&names).is_some_and(|c| c.len >= opts.depth_threshold) {
        return CrashClass::StackExhaustion;
    }
    match signal {
        CrashSignal::Abrt => CrashClass::Abort,
        CrashSignal::Segv if fault_address.is_some_and(|a| a < opts.page_size) => {
            CrashClass::NullDeref
        }
        CrashSignal::Segv | CrashSignal::Bus => CrashClass::InvalidDeref,
        _ => CrashClass::Other,
    }
}

/// Builds a result from a debugger transcript; `None` when the program did
/// not stop on a signal.
pub fn result_from_transcript(text: &str, opts: &TriageOptions) -> Option<TriageResult> {
    let p = parse_transcript(text);
    let signal = p.signal?;
    Some(TriageResult {
        signal,
        fault_address: p.fault_address,
        classification: classify(signal, p.fault_address, &p.frames, opts),
        frames: p.frames,
        raw_backtrace: p.raw_backtrace,
        degraded: false,
    })
}

fn degraded(signal: CrashSignal, opts: &TriageOptions) -> TriageResult {
    TriageResult {
        signal,
        fault_address: None,
        frames: Vec::new(),
        classification: classify(signal, None, &[], opts),
        raw_backtrace: String::new(),
        degraded: true,
    }
}

/// Runs `input` under `debugger` and classifies the crash.
///
/// Without a usable debugger the target is run plainly and a signal-only
/// result flagged `degraded` is returned. An input that does not crash
/// yields [`TriageError::Flaky`].
pub fn classify_crash(
    inv: &Invocation,
    input: &[u8],
    debugger: &dyn DebuggerAdapter,
    opts: &TriageOptions,
) -> Result<TriageResult, TriageError> {
    if input.is_empty() {
        return Err(TriageError::Invalid("empty input".into()));
    }
    if debugger.available(&inv.plan) {
        match debugger.transcript(inv, input) {
            Ok(text) => {
                return result_from_transcript(&text, opts)
                    .ok_or_else(|| TriageError::Flaky("no crash under the debugger".into()))
            }
            Err(e) => log::warn!("{}: {e}; falling back to a signal-only result", debugger.name()),
        }
    }
    match inv.run(input).status {
        ExecStatus::Signaled(sig) if sig.is_crash() => Ok(degraded(sig, opts)),
        other => Err(TriageError::Flaky(format!("{other:?}"))),
    }
}

/// Frames that enter the signature. Stack-exhaustion traces are first
/// reduced to the frames above the recursion plus one canonical rotation of
/// the repeating cycle, so different recursion depths agree.
pub fn signature_frames(result: &TriageResult, opts: &TriageOptions) -> Vec<String> {
    let names: Vec<String> = result.frames.iter().map(Frame::normalized).collect();
    let mut out = match (result.classification, find_cycle(&names)) {
        (CrashClass::StackExhaustion, Some(c)) => {
            let cycle = &names[c.start..c.start + c.period];
            let rot = (0..c.period)
                .min_by(|&a, &b| {
                    let ra = cycle[a..].iter().chain(&cycle[..a]);
                    let rb = cycle[b..].iter().chain(&cycle[..b]);
                    ra.cmp(rb)
                })
                .unwrap_or(0);
            let mut v = names[..c.start].to_vec();
            v.extend(cycle[rot..].iter().chain(&cycle[..rot]).cloned());
            v
        }
        _ => names,
    };
    out.truncate(opts.frames_k);
    out
}

/// Pure function of the result: signal, a 16-byte digest of the top
/// frames, and the top frame for display.
pub fn signature_from(result: &TriageResult, opts: &TriageOptions) -> CrashSignature {
    let frames = signature_frames(result, opts);
    let mut h = Sha256::new();
    for f in &frames {
        h.update(f.as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    CrashSignature {
        signal: result.signal,
        frame_hash: hex::encode(&digest[..16]),
        top_frame: frames.first().cloned().unwrap_or_default(),
        low_confidence: result.frames.is_empty(),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn frames(names: &[&str]) -> Vec<Frame> {
        names.iter().map(|n| Frame::symbol("toy", n)).collect()
    }

    pub fn recursion(depth: usize, cycle: &[&str]) -> Vec<Frame> {
        let mut v = frames(&["memset"]);
        v.extend((0..depth).map(|i| Frame::symbol("toy", cycle[i % cycle.len()])));
        v.extend(frames(&["run_script", "main"]));
        v
    }

    fn result(signal: CrashSignal, fault: Option<u64>, fr: Vec<Frame>) -> TriageResult {
        let opts = TriageOptions::default();
        TriageResult {
            classification: classify(signal, fault, &fr, &opts),
            signal,
            fault_address: fault,
            frames: fr,
            raw_backtrace: String::new(),
            degraded: false,
        }
    }

    #[test]
    fn class_rules() {
        let o = TriageOptions::default();
        let f = frames(&["a", "b"]);
        assert_eq!(classify(CrashSignal::Segv, Some(0), &f, &o), CrashClass::NullDeref);
        assert_eq!(classify(CrashSignal::Segv, Some(4095), &f, &o), CrashClass::NullDeref);
        assert_eq!(classify(CrashSignal::Segv, Some(4096), &f, &o), CrashClass::InvalidDeref);
        assert_eq!(classify(CrashSignal::Segv, None, &f, &o), CrashClass::InvalidDeref);
        assert_eq!(classify(CrashSignal::Abrt, None, &f, &o), CrashClass::Abort);
        assert_eq!(classify(CrashSignal::Fpe, None, &f, &o), CrashClass::Other);
        let deep = recursion(250, &["nest_group"]);
        assert_eq!(classify(CrashSignal::Segv, Some(0x7ff0), &deep, &o), CrashClass::StackExhaustion);
        let shallow = recursion(150, &["nest_group"]);
        assert_eq!(classify(CrashSignal::Segv, Some(0x7ff0), &shallow, &o), CrashClass::InvalidDeref);
    }

    #[test]
    fn recursion_depths_share_a_signature() {
        let o = TriageOptions::default();
        let a = result(CrashSignal::Segv, Some(0x7000), recursion(1000, &["regcomp", "parse_expr"]));
        let b = result(CrashSignal::Segv, Some(0x7000), recursion(2001, &["regcomp", "parse_expr"]));
        assert_eq!(a.classification, CrashClass::StackExhaustion);
        assert_eq!(signature_from(&a, &o), signature_from(&b, &o));
        let c = result(CrashSignal::Segv, Some(0x7000), recursion(1000, &["other_rec"]));
        assert_ne!(signature_from(&a, &o), signature_from(&c, &o));
    }

    #[test]
    fn signal_splits_signatures() {
        let o = TriageOptions::default();
        let f = frames(&["f", "g", "main"]);
        let a = result(CrashSignal::Segv, Some(8), f.clone());
        let b = result(CrashSignal::Abrt, None, f);
        assert_ne!(signature_from(&a, &o), signature_from(&b, &o));
        assert_eq!(signature_from(&a, &o).frame_hash, signature_from(&b, &o).frame_hash);
    }

    #[test]
    fn only_top_k_frames_count() {
        let o = TriageOptions::default();
        let a = result(CrashSignal::Segv, Some(0), frames(&["a", "b", "c", "d", "e", "x"]));
        let b = result(CrashSignal::Segv, Some(0), frames(&["a", "b", "c", "d", "e", "y"]));
        assert_eq!(signature_from(&a, &o), signature_from(&b, &o));
    }

    #[test]
    fn degraded_signature() {
        let o = TriageOptions::default();
        let d = degraded(CrashSignal::Segv, &o);
        let s = signature_from(&d, &o);
        assert!(s.low_confidence);
        assert_eq!(s.frame_hash, hex::encode(&Sha256::digest(b"")[..16]));
        assert_eq!(s.top_frame, "");
    }

    #[test]
    fn stripped_frames_normalize_without_absolute_addresses() {
        let f = Frame {
            module: "busybox".into(),
            symbol: None,
            offset: 0x1a2b,
        };
        assert_eq!(f.normalized(), "busybox+0x1a2b");
    }

    #[test]
    fn tags() {
        let json = serde_json::to_string(&CrashClass::StackExhaustion).unwrap();
        assert_eq!(json, "\"stack-exhaustion\"");
        assert_eq!(CrashClass::NullDeref.tag(), "null-deref");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cycle_collapse_ignores_depth_and_phase(
                cycle in proptest::collection::vec("[a-d]", 1..4),
                d1 in 210usize..600,
                d2 in 210usize..600,
            ) {
                let cyc: Vec<&str> = cycle.iter().map(String::as_str).collect();
                // skip cycles that are themselves periodic with a shorter period
                prop_assume!(!(1..cyc.len()).any(|p| cyc.len().is_multiple_of(p)
                    && (0..cyc.len()).all(|i| cyc[i] == cyc[i % p])));
                let o = TriageOptions::default();
                let mk = |d| {
                    let mut f = recursion(d, &cyc);
                    f.remove(0);
                    result(CrashSignal::Segv, Some(0x7000), f)
                };
                prop_assert_eq!(signature_from(&mk(d1), &o), signature_from(&mk(d2), &o));
            }

            #[test]
            fn signature_is_pure(names in proptest::collection::vec("[a-z]{1,6}", 0..12)) {
                let o = TriageOptions::default();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let r = result(CrashSignal::Segv, Some(0), frames(&refs));
                prop_assert_eq!(signature_from(&r, &o), signature_from(&r.clone(), &o));
            }
        }
    }
}
