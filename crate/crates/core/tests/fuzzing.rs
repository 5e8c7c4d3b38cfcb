//! Supervision of a real child process, using a shell script that mimics
//! the fuzzer's command line and output layout.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fuzzreuse::fuzzing::{
    run_batch, run_campaign_with, AflAdapter, CampaignConfig, CampaignStatus, HarnessSpec,
    StatsDump, SupervisorOptions, TerminationCriteria,
};
use fuzzreuse::inventory::TargetBinary;
use fuzzreuse::seedgen::{Seed, SeedCorpus, SeedOrigin};

const FAKE_FUZZER: &str = r#"#!/bin/sh
while [ $# -gt 0 ]; do
  case "$1" in
    -i) seeds="$2"; shift 2 ;;
    -o) out="$2"; shift 2 ;;
    --) shift; break ;;
    *) shift ;;
  esac
done
[ -n "$(ls "$seeds")" ] || exit 7
d="$out/default"
mkdir -p "$d/crashes" "$d/queue"
cp "$seeds"/* "$d/queue/"
trap 'exit 0' TERM
start=$(date +%s)
i=0
while true; do
  i=$((i+1))
  printf 'run_time          : %d\nsaved_crashes     : %d\nedges_found       : %d\nexecs_done        : %d\ncycles_done       : 0\n' \
    $(( $(date +%s) - start )) $i $((i*10)) $((i*100)) > "$d/.stats"
  mv "$d/.stats" "$d/fuzzer_stats"
  echo "crash $i" > "$d/crashes/id:00000$i,sig:11,src:000000"
  sleep 0.2
done
"#;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
    p
}

fn config(dir: &Path, id: &str, criteria: TerminationCriteria) -> CampaignConfig {
    let seeds = ["BEGIN { print 1 }", "{ x = $1 }"].iter().enumerate().map(|(i, s)| Seed {
        bytes: s.as_bytes().to_vec(),
        origin: SeedOrigin::Llm,
        label: format!("toy-{i:03}"),
    });
    CampaignConfig {
        id: id.into(),
        target: TargetBinary::from_path("/bin/true").unwrap(),
        applet: "toy".into(),
        harness: HarnessSpec::new(["{target}", "@@"]),
        corpus: SeedCorpus::new("toy", seeds, BTreeMap::new()),
        criteria,
        output_dir: dir.join(id),
        poll_interval_s: 1,
    }
}

fn opts() -> SupervisorOptions {
    SupervisorOptions {
        grace_period: Duration::from_secs(2),
        ..Default::default()
    }
}

#[test]
fn stops_on_crash_bound_and_collects_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = AflAdapter::with_fuzzer(script(dir.path(), "afl-fuzz", FAKE_FUZZER));
    let cfg = config(
        dir.path(),
        "c1",
        TerminationCriteria {
            max_crashes: Some(3),
            ..Default::default()
        },
    );
    let start = Instant::now();
    let r = run_campaign_with(&cfg, &adapter, &opts());
    assert_eq!(r.status, CampaignStatus::Completed, "{:?}", r.failure_diagnostic);
    assert_eq!(r.stopped_by.as_deref(), Some("max_crashes"));
    assert!(r.final_sample().unwrap().crashes_saved >= 3);
    assert!(r.crash_inputs.len() >= 3);
    assert_eq!(r.queue_size, 2);
    assert!(r.stats_series.windows(2).all(|w| w[1].follows(&w[0])));
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn runtime_bound_uses_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = AflAdapter::with_fuzzer(script(dir.path(), "afl-fuzz", FAKE_FUZZER));
    let cfg = config(
        dir.path(),
        "c2",
        TerminationCriteria {
            max_runtime_s: Some(2),
            ..Default::default()
        },
    );
    let start = Instant::now();
    let r = run_campaign_with(&cfg, &adapter, &opts());
    assert_eq!(r.status, CampaignStatus::Completed);
    assert_eq!(r.stopped_by.as_deref(), Some("max_runtime_s"));
    let took = start.elapsed();
    assert!(took >= Duration::from_secs(2) && took < Duration::from_secs(6), "{took:?}");
}

#[test]
fn early_exit_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = AflAdapter::with_fuzzer(script(dir.path(), "afl-fuzz", "#!/bin/sh\nexit 2\n"));
    let cfg = config(
        dir.path(),
        "c3",
        TerminationCriteria {
            max_cycles: Some(1),
            ..Default::default()
        },
    );
    let r = run_campaign_with(&cfg, &adapter, &opts());
    assert_eq!(r.status, CampaignStatus::Failed);
    assert!(r.failure_diagnostic.unwrap().contains("status 2"));
}

#[test]
fn missing_fuzzer_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = AflAdapter::with_fuzzer(dir.path().join("no-such-fuzzer"));
    let cfg = config(
        dir.path(),
        "c4",
        TerminationCriteria {
            max_cycles: Some(1),
            ..Default::default()
        },
    );
    let r = run_campaign_with(&cfg, &adapter, &opts());
    assert_ne!(r.status, CampaignStatus::Completed);
    assert!(r.failure_diagnostic.is_some());
}

#[test]
fn batch_dumps_every_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let adapter = AflAdapter::with_fuzzer(script(dir.path(), "afl-fuzz", FAKE_FUZZER));
    let crit = TerminationCriteria {
        max_crashes: Some(2),
        ..Default::default()
    };
    let configs = vec![config(dir.path(), "b1", crit), config(dir.path(), "b2", crit)];
    let dump = dir.path().join("dump");
    let results = run_batch(&configs, &adapter, 2, &dump, &opts()).unwrap();
    assert_eq!(results.len(), 2);
    for id in ["b1", "b2"] {
        let text = fs::read_to_string(dump.join(format!("{id}.stats.json"))).unwrap();
        let d: StatsDump = serde_json::from_str(&text).unwrap();
        assert_eq!(d.status, CampaignStatus::Completed);
        assert!(d.final_stats.unwrap().crashes_saved >= 2);
    }
    let dup = vec![config(dir.path(), "b1", crit), config(dir.path(), "b1", crit)];
    assert!(run_batch(&dup, &adapter, 1, &dump, &opts()).is_err());
}
