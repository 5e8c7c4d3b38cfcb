//! Delta-debugging minimization of crashing inputs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{classify_crash, signature_from, DebuggerAdapter, TriageError, TriageOptions};
use crate::crashdb::CrashSignature;
use crate::exec::{ExecStatus, Invocation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DdminOutcome {
    pub input: Vec<u8>,
    /// Distinct candidates handed to the oracle.
    pub tests: usize,
    pub budget_exhausted: bool,
}

fn chunk_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len / n, (i + 1) * len / n)).filter(|(a, b)| a < b).collect()
}

/// Classic ddmin over byte chunks: granularity starts at 2, subsets are
/// tried before complements, and granularity doubles when neither reduces.
/// `test` answers "does this candidate still fail the same way"; it is
/// called at most `max_tests` times, and never twice for the same bytes.
/// On a normal return the result is 1-minimal: removing any single byte
/// makes `test` false.
pub fn ddmin<F>(input: &[u8], max_tests: usize, mut test: F) -> Result<DdminOutcome, TriageError>
where
    F: FnMut(&[u8]) -> Result<bool, TriageError>,
{
    let mut cache: HashMap<Vec<u8>, bool> = HashMap::new();
    let mut tests = 0;
    let mut cur = input.to_vec();
    let mut n = 2usize;
    let mut budget_exhausted = false;

    let mut check = |cand: Vec<u8>, tests: &mut usize| -> Result<Option<bool>, TriageError> {
        if let Some(&v) = cache.get(&cand) {
            return Ok(Some(v));
        }
        if *tests >= max_tests {
            return Ok(None);
        }
        *tests += 1;
        let v = test(&cand)?;
        cache.insert(cand, v);
        Ok(Some(v))
    };

    'outer: while cur.len() >= 2 {
        let chunks = chunk_bounds(cur.len(), n);
        for &(a, b) in &chunks {
            match check(cur[a..b].to_vec(), &mut tests)? {
                Some(true) => {
                    cur = cur[a..b].to_vec();
                    n = 2;
                    continue 'outer;
                }
                Some(false) => {}
                None => {
                    budget_exhausted = true;
                    break 'outer;
                }
            }
        }
        if chunks.len() > 2 {
            for &(a, b) in &chunks {
                let mut cand = cur[..a].to_vec();
                cand.extend_from_slice(&cur[b..]);
                match check(cand.clone(), &mut tests)? {
                    Some(true) => {
                        cur = cand;
                        n = (n - 1).max(2);
                        continue 'outer;
                    }
                    Some(false) => {}
                    None => {
                        budget_exhausted = true;
                        break 'outer;
                    }
                }
            }
        }
        if n >= cur.len() {
            break;
        }
        n = (n * 2).min(cur.len());
    }
    Ok(DdminOutcome {
        input: cur,
        tests,
        budget_exhausted,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimizationResult {
    pub original_len: usize,
    pub minimized_len: usize,
    #[serde(with = "hex::serde")]
    pub minimized_input: Vec<u8>,
    pub preserved_signature: CrashSignature,
    /// Target executions spent, including the verification replays.
    pub steps: usize,
    pub budget_exhausted: bool,
}

/// "Crashes with this signature": a plain run screens out candidates whose
/// signal differs before the debugger is consulted.
pub struct SignatureOracle<'a> {
    pub inv: &'a Invocation,
    pub debugger: &'a dyn DebuggerAdapter,
    pub opts: TriageOptions,
    pub target: CrashSignature,
    pub executions: usize,
}

impl SignatureOracle<'_> {
    pub fn check(&mut self, input: &[u8]) -> bool {
        self.executions += 1;
        match self.inv.run(input).status {
            ExecStatus::Signaled(sig) if sig == self.target.signal => {}
            _ => return false,
        }
        match classify_crash(self.inv, input, self.debugger, &self.opts) {
            Ok(r) => signature_from(&r, &self.opts) == self.target,
            Err(_) => false,
        }
    }
}

/// Shrinks `input` while it keeps crashing with `target`.
pub fn minimize_input(
    inv: &Invocation,
    input: &[u8],
    target: &CrashSignature,
    debugger: &dyn DebuggerAdapter,
    opts: &TriageOptions,
) -> Result<MinimizationResult, TriageError> {
    if input.is_empty() {
        return Err(TriageError::Invalid("empty input".into()));
    }
    let mut oracle = SignatureOracle {
        inv,
        debugger,
        opts: *opts,
        target: target.clone(),
        executions: 0,
    };
    if !oracle.check(input) {
        return Err(TriageError::Flaky("original input does not reproduce the signature".into()));
    }
    let budget = opts.max_steps.saturating_sub(2);
    let out = ddmin(input, budget, |cand| Ok(oracle.check(cand)))?;
    if !oracle.check(&out.input) {
        return Err(TriageError::Flaky("minimized input did not reproduce on verification".into()));
    }
    Ok(MinimizationResult {
        original_len: input.len(),
        minimized_len: out.input.len(),
        minimized_input: out.input,
        preserved_signature: target.clone(),
        steps: oracle.executions,
        budget_exhausted: out.budget_exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contains(hay: &[u8], needle: &[u8]) -> bool {
        hay.windows(needle.len()).any(|w| w == needle)
    }

    fn one_minimal(out: &[u8], pred: impl Fn(&[u8]) -> bool) -> bool {
        (0..out.len()).all(|i| {
            let mut c = out.to_vec();
            c.remove(i);
            !pred(&c)
        })
    }

    #[test]
    fn finds_token_in_noise() {
        let mut input = vec![b'.'; 4096];
        input[1777..1781].copy_from_slice(b"BOOM");
        let out = ddmin(&input, 5000, |c| Ok(contains(c, b"BOOM"))).unwrap();
        assert_eq!(out.input, b"BOOM");
        assert!(!out.budget_exhausted);
    }

    #[test]
    fn scattered_requirements() {
        let pred = |c: &[u8]| c.contains(&b'x') && c.contains(&b'y') && c.contains(&b'z');
        let input = b"aaxaaaaaaaaayaaaaaaaaaaaaaaaaaaaazaa";
        let out = ddmin(input, 5000, |c| Ok(pred(c))).unwrap();
        assert_eq!(out.input, b"xyz");
    }

    #[test]
    fn fixed_point_when_any_deletion_breaks_it() {
        let out = ddmin(b"BOOM", 5000, |c| Ok(c == b"BOOM")).unwrap();
        assert_eq!(out.input, b"BOOM");
        let again = ddmin(&out.input, 5000, |c| Ok(c == b"BOOM")).unwrap();
        assert_eq!(again.input, out.input);
    }

    #[test]
    fn budget_returns_best_so_far() {
        let mut input = vec![b'.'; 4096];
        input[100..104].copy_from_slice(b"BOOM");
        let out = ddmin(&input, 3, |c| Ok(contains(c, b"BOOM"))).unwrap();
        assert!(out.budget_exhausted);
        assert_eq!(out.tests, 3);
        assert!(contains(&out.input, b"BOOM"));
        assert!(out.input.len() < input.len());
    }

    #[test]
    fn oracle_never_sees_a_candidate_twice() {
        let mut seen = std::collections::HashSet::new();
        let input: Vec<u8> = (0..200u8).collect();
        ddmin(&input, 5000, |c| {
            assert!(seen.insert(c.to_vec()));
            Ok(c.contains(&7) && c.contains(&150))
        })
        .unwrap();
    }

    proptest! {
        #[test]
        fn result_fails_and_is_one_minimal(
            noise in proptest::collection::vec(0u8..4, 1..300),
            at in 0usize..300,
        ) {
            let mut input = noise;
            let at = at.min(input.len());
            input.splice(at..at, [9u8, 9, 8]);
            let pred = |c: &[u8]| contains(c, &[9, 9, 8]);
            let out = ddmin(&input, 100_000, |c| Ok(pred(c))).unwrap();
            prop_assert!(pred(&out.input));
            prop_assert!(out.input.len() <= input.len());
            prop_assert!(one_minimal(&out.input, pred));
            let again = ddmin(&out.input, 100_000, |c| Ok(pred(c))).unwrap();
            prop_assert_eq!(again.input, out.input);
        }
    }
}
