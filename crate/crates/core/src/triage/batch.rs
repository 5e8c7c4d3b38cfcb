use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{classify_crash, signature_from, CrashClass, DebuggerAdapter, Frame, TriageOptions, TriageResult};
use crate::crashdb::CrashSignature;
use crate::exec::Invocation;
use crate::sha256_hex;

/// Outcome for one input of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageEntry {
    pub label: String,
    pub input_hash: String,
    pub input_len: usize,
    pub signature: Option<CrashSignature>,
    pub classification: Option<CrashClass>,
    pub degraded: bool,
    /// Set when the input could not be triaged (flaky, invalid).
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageGroup {
    pub signature: CrashSignature,
    pub classification: CrashClass,
    pub representative: String,
    pub representative_hash: String,
    pub representative_len: usize,
    pub members: Vec<String>,
    pub frames: Vec<Frame>,
    pub raw_backtrace: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageReport {
    pub groups: Vec<TriageGroup>,
    pub entries: Vec<TriageEntry>,
}

impl TriageReport {
    pub fn flagged(&self) -> impl Iterator<Item = &TriageEntry> {
        self.entries.iter().filter(|e| e.error.is_some())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let flagged = self.flagged().count();
        let _ = writeln!(
            s,
            "{} inputs, {} unique crashes, {} flagged",
            self.entries.len(),
            self.groups.len(),
            flagged
        );
        for (i, g) in self.groups.iter().enumerate() {
            let _ = writeln!(
                s,
                "\n[{}] {} {} ({} inputs){}",
                i + 1,
                g.classification,
                g.signature,
                g.members.len(),
                if g.signature.low_confidence { " low-confidence" } else { "" }
            );
            let _ = writeln!(s, "    top frame: {}", g.signature.top_frame);
            let _ = writeln!(
                s,
                "    representative: {} ({} bytes, {})",
                g.representative, g.representative_len, g.representative_hash
            );
            for line in g.raw_backtrace.lines().take(8) {
                let _ = writeln!(s, "    {line}");
            }
        }
        if flagged > 0 {
            let _ = writeln!(s, "\nflagged:");
            for e in self.flagged() {
                let _ = writeln!(s, "    {}: {}", e.label, e.error.as_deref().unwrap_or(""));
            }
        }
        s
    }
}

/// Classifies every input, groups by signature and picks the shortest input
/// of each group as its representative. Per-input failures are recorded in
/// the entries and never abort the batch.
pub fn triage_batch(
    inv: &Invocation,
    inputs: &[(String, Vec<u8>)],
    debugger: &dyn DebuggerAdapter,
    opts: &TriageOptions,
    parallelism: usize,
) -> TriageReport {
    let run = || -> Vec<(TriageEntry, Option<TriageResult>)> {
        inputs
            .par_iter()
            .with_max_len(1)
            .map(|(label, bytes)| {
                let mut entry = TriageEntry {
                    label: label.clone(),
                    input_hash: sha256_hex(bytes),
                    input_len: bytes.len(),
                    signature: None,
                    classification: None,
                    degraded: false,
                    error: None,
                };
                match classify_crash(inv, bytes, debugger, opts) {
                    Ok(r) => {
                        entry.signature = Some(signature_from(&r, opts));
                        entry.classification = Some(r.classification);
                        entry.degraded = r.degraded;
                        (entry, Some(r))
                    }
                    Err(e) => {
                        entry.error = Some(e.to_string());
                        (entry, None)
                    }
                }
            })
            .collect()
    };
    let results = match rayon::ThreadPoolBuilder::new().num_threads(parallelism.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };

    let mut by_sig: BTreeMap<CrashSignature, Vec<usize>> = BTreeMap::new();
    for (i, (e, _)) in results.iter().enumerate() {
        if let Some(sig) = &e.signature {
            by_sig.entry(sig.clone()).or_default().push(i);
        }
    }
    let groups = by_sig
        .into_iter()
        .map(|(signature, members)| {
            let rep = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let (ea, eb) = (&results[a].0, &results[b].0);
                    (ea.input_len, &ea.input_hash).cmp(&(eb.input_len, &eb.input_hash))
                })
                .expect("groups are non-empty");
            let (entry, result) = &results[rep];
            let result = result.as_ref().expect("signed entries carry a result");
            TriageGroup {
                signature,
                classification: result.classification,
                representative: entry.label.clone(),
                representative_hash: entry.input_hash.clone(),
                representative_len: entry.input_len,
                members: members.iter().map(|&i| results[i].0.label.clone()).collect(),
                frames: result.frames.clone(),
                raw_backtrace: result.raw_backtrace.clone(),
            }
        })
        .collect();
    TriageReport {
        groups,
        entries: results.into_iter().map(|(e, _)| e).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzing::{ExecutionPlan, HarnessSpec};
    use crate::triage::FixtureDebugger;

    fn inv() -> Invocation {
        Invocation::new("/bin/true", ExecutionPlan::Native, HarnessSpec::new(["{target}", "@@"]))
    }

    fn transcript(sig: &str, fault: &str, frames: &[&str]) -> String {
        let mut t = format!("Program received signal {sig}, x.\nFAULT_ADDR={fault}\n");
        for (i, f) in frames.iter().enumerate() {
            t.push_str(&format!("#{i}  0x000000000040{i:04x} in {f} ()\n"));
        }
        t
    }

    #[test]
    fn empty_batch() {
        let r = triage_batch(&inv(), &[], &FixtureDebugger::new(), &TriageOptions::default(), 2);
        assert!(r.groups.is_empty() && r.entries.is_empty());
    }

    #[test]
    fn groups_and_representatives() {
        let boom = transcript("SIGSEGV", "(nil)", &["handle_boom", "run_script", "main"]);
        let abrt = transcript("SIGABRT", "(nil)", &["raise", "abort", "handle_abrt", "run_script", "main"]);
        let dbg = FixtureDebugger::new()
            .with(b"xBOOM".to_vec(), boom.clone())
            .with(b"BOOM".to_vec(), boom)
            .with(b"ABRT".to_vec(), abrt);
        let inputs = vec![
            ("a".to_string(), b"xBOOM".to_vec()),
            ("b".to_string(), b"ABRT".to_vec()),
            ("c".to_string(), b"BOOM".to_vec()),
        ];
        let r = triage_batch(&inv(), &inputs, &dbg, &TriageOptions::default(), 3);
        assert_eq!(r.groups.len(), 2);
        let boom = r.groups.iter().find(|g| g.classification == CrashClass::NullDeref).unwrap();
        assert_eq!(boom.representative, "c");
        assert_eq!(boom.members, ["a", "c"]);
        assert!(r.to_text().contains("2 unique crashes"));
    }

    #[test]
    fn flaky_inputs_are_flagged() {
        let dbg = FixtureDebugger::new().with_fallback("[Inferior 1 (process 1) exited normally]\n");
        let inputs: Vec<(String, Vec<u8>)> = (0..10).map(|i| (format!("i{i}"), vec![b'a' + i])).collect();
        let r = triage_batch(&inv(), &inputs, &dbg, &TriageOptions::default(), 4);
        assert_eq!(r.groups.len(), 0);
        assert_eq!(r.flagged().count(), 10);
    }
}
