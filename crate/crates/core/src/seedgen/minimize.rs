use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rayon::prelude::*;

use super::{SeedCorpus, SeedGenError};
use crate::fuzzing::{ExecutionPlan, HarnessSpec};

#[derive(Debug, thiserror::Error)]
#[error("coverage measurement failed: {0}")]
pub struct OracleError(pub String);

/// Edge coverage of a single input on a fixed target.
pub trait CoverageOracle: Sync {
    fn edges(&self, input: &[u8]) -> Result<BTreeSet<u64>, OracleError>;
}

impl<F> CoverageOracle for F
where
    F: Fn(&[u8]) -> Result<BTreeSet<u64>, OracleError> + Sync,
{
    fn edges(&self, input: &[u8]) -> Result<BTreeSet<u64>, OracleError> {
        self(input)
    }
}

/// Greedy set cover over the seeds' edge sets.
///
/// Each round keeps the seed adding the most uncovered edges; ties go to
/// the shorter seed, then the smaller label. Seeds without coverage (or
/// whose measurement failed) are dropped. Kept seeds stay in their original
/// order, and a corpus that loses nothing is returned as is.
pub fn minimize_corpus(
    corpus: &SeedCorpus,
    oracle: &dyn CoverageOracle,
) -> Result<SeedCorpus, SeedGenError> {
    if corpus.is_empty() {
        return Err(SeedGenError::InvalidArgument("cannot minimize an empty corpus".into()));
    }
    let measured: Vec<Result<BTreeSet<u64>, OracleError>> = corpus
        .seeds
        .par_iter()
        .map(|s| oracle.edges(&s.bytes))
        .collect();
    let mut failures = Vec::new();
    let coverage: Vec<BTreeSet<u64>> = measured
        .into_iter()
        .zip(&corpus.seeds)
        .map(|(r, seed)| {
            r.unwrap_or_else(|e| {
                log::warn!("{}: {e}", seed.label);
                failures.push(seed.label.clone());
                BTreeSet::new()
            })
        })
        .collect();

    let universe: BTreeSet<u64> = coverage.iter().flatten().copied().collect();
    let mut covered: BTreeSet<u64> = BTreeSet::new();
    let mut chosen = vec![false; corpus.seeds.len()];
    while covered.len() < universe.len() {
        let best = (0..corpus.seeds.len())
            .filter(|&i| !chosen[i])
            .map(|i| (coverage[i].difference(&covered).count(), i))
            .filter(|&(gain, _)| gain > 0)
            .min_by(|&(ga, a), &(gb, b)| {
                let (sa, sb) = (&corpus.seeds[a], &corpus.seeds[b]);
                gb.cmp(&ga)
                    .then(sa.bytes.len().cmp(&sb.bytes.len()))
                    .then(sa.label.cmp(&sb.label))
            });
        let Some((_, i)) = best else { break };
        chosen[i] = true;
        covered.extend(&coverage[i]);
    }

    if chosen.iter().all(|&c| c) {
        return Ok(corpus.clone());
    }
    let mut meta = corpus.generation_metadata.clone();
    meta.insert("cmin_input_seeds".into(), corpus.len().to_string());
    meta.insert("cmin_edges".into(), universe.len().to_string());
    if !failures.is_empty() {
        meta.insert("cmin_oracle_failures".into(), failures.join(","));
    }
    let kept = corpus
        .seeds
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(s, _)| s.clone());
    Ok(SeedCorpus::new(corpus.applet.clone(), kept, meta))
}

/// Edge ids from `afl-showmap` output (`<edge>:<hits>` per line).
pub fn parse_showmap(text: &str) -> BTreeSet<u64> {
    text.lines()
        .filter_map(|l| l.split_once(':'))
        .filter_map(|(edge, _)| edge.trim().parse().ok())
        .collect()
}

/// Coverage measured with `afl-showmap` in binary-only mode.
#[derive(Debug, Clone)]
pub struct ShowmapOracle {
    pub showmap: PathBuf,
    pub target: PathBuf,
    pub harness: HarnessSpec,
    pub plan: ExecutionPlan,
}

impl ShowmapOracle {
    pub fn new(target: impl Into<PathBuf>, harness: HarnessSpec, plan: ExecutionPlan) -> Self {
        ShowmapOracle {
            showmap: "afl-showmap".into(),
            target: target.into(),
            harness,
            plan,
        }
    }

    fn run(&self, dir: &Path, input: &[u8]) -> Result<BTreeSet<u64>, OracleError> {
        let input_path = dir.join("input");
        let map_path = dir.join("map");
        std::fs::write(&input_path, input).map_err(|e| OracleError(e.to_string()))?;
        let mut cmd = Command::new(&self.showmap);
        cmd.arg("-q")
            .arg("-Q")
            .arg("-t")
            .arg(self.harness.timeout_ms.to_string())
            .arg("-o")
            .arg(&map_path)
            .arg("--")
            .args(self.harness.render_argv(&self.target, Some(&input_path)))
            .envs(&self.harness.env)
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        if let ExecutionPlan::Emulated { sysroot, .. } = &self.plan {
            cmd.env("QEMU_LD_PREFIX", sysroot);
        }
        if self.harness.stdin_mode {
            let f = std::fs::File::open(&input_path).map_err(|e| OracleError(e.to_string()))?;
            cmd.stdin(f);
        } else {
            cmd.stdin(Stdio::null());
        }
        cmd.status()
            .map_err(|e| OracleError(format!("{}: {e}", self.showmap.display())))?;
        let text = std::fs::read_to_string(&map_path).map_err(|e| OracleError(e.to_string()))?;
        Ok(parse_showmap(&text))
    }
}

impl CoverageOracle for ShowmapOracle {
    fn edges(&self, input: &[u8]) -> Result<BTreeSet<u64>, OracleError> {
        let dir = tempfile::tempdir().map_err(|e| OracleError(e.to_string()))?;
        self.run(dir.path(), input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seedgen::{Seed, SeedOrigin};
    use std::collections::{BTreeMap, HashMap};

    fn corpus(specs: &[(&str, &str)]) -> SeedCorpus {
        SeedCorpus::new(
            "awk",
            specs.iter().map(|(label, bytes)| Seed {
                bytes: bytes.as_bytes().to_vec(),
                origin: SeedOrigin::Llm,
                label: label.to_string(),
            }),
            BTreeMap::new(),
        )
    }

    fn table(entries: &[(&str, &[u64])]) -> impl Fn(&[u8]) -> Result<BTreeSet<u64>, OracleError> + Sync {
        let map: HashMap<Vec<u8>, BTreeSet<u64>> = entries
            .iter()
            .map(|(k, v)| (k.as_bytes().to_vec(), v.iter().copied().collect()))
            .collect();
        move |input: &[u8]| {
            map.get(input)
                .cloned()
                .ok_or_else(|| OracleError("unknown seed".into()))
        }
    }

    fn labels(c: &SeedCorpus) -> Vec<&str> {
        c.seeds.iter().map(|s| s.label.as_str()).collect()
    }

    #[test]
    fn dominated_seed_dropped() {
        let c = corpus(&[("A", "aa"), ("B", "b"), ("C", "c")]);
        let oracle = table(&[("aa", &[1, 2]), ("b", &[2]), ("c", &[3])]);
        let m = minimize_corpus(&c, &oracle).unwrap();
        assert_eq!(labels(&m), ["A", "C"]);
    }

    #[test]
    fn single_seed_kept() {
        let c = corpus(&[("A", "a")]);
        let m = minimize_corpus(&c, &table(&[("a", &[7])])).unwrap();
        assert_eq!(m, c);
    }

    #[test]
    fn ties_prefer_shorter_then_label() {
        let c = corpus(&[("z", "x"), ("long", "xxxxx"), ("a", "y")]);
        let oracle = table(&[("x", &[1]), ("xxxxx", &[1]), ("y", &[1])]);
        let m = minimize_corpus(&c, &oracle).unwrap();
        assert_eq!(labels(&m), ["a"]);
    }

    #[test]
    fn failures_and_empty_coverage_dropped() {
        let c = corpus(&[("A", "a"), ("B", "b"), ("C", "c")]);
        let oracle = table(&[("a", &[1]), ("b", &[])]);
        let m = minimize_corpus(&c, &oracle).unwrap();
        assert_eq!(labels(&m), ["A"]);
        assert_eq!(m.generation_metadata["cmin_oracle_failures"], "C");
    }

    #[test]
    fn idempotent() {
        let c = corpus(&[("A", "aa"), ("B", "b"), ("C", "c"), ("D", "dd")]);
        let oracle = table(&[("aa", &[1, 2]), ("b", &[2, 3]), ("c", &[3]), ("dd", &[4, 1])]);
        let once = minimize_corpus(&c, &oracle).unwrap();
        assert_eq!(minimize_corpus(&once, &oracle).unwrap(), once);
    }

    #[test]
    fn empty_corpus_rejected() {
        let c = corpus(&[]);
        assert!(minimize_corpus(&c, &table(&[])).is_err());
    }

    #[test]
    fn showmap_output() {
        let edges = parse_showmap("000001:1\n012345:3\ngarbage\n");
        assert_eq!(edges.into_iter().collect::<Vec<_>>(), [1, 12345]);
    }
}
