//! Drives the built binary the way a user would.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fuzzreuse"));
    c.env("RUST_LOG", "error");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(dir: &Path, args: &[&str]) -> Value {
    serde_json::from_str(&ok(dir, args)).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().unwrap()
}

/// A 64-byte ELF header for `machine` followed by `body`.
fn elf(machine: u16, body: &str) -> Vec<u8> {
    let mut b = vec![0u8; 64];
    b[..4].copy_from_slice(b"\x7fELF");
    b[4] = 2;
    b[5] = 1;
    b[6] = 1;
    b[18..20].copy_from_slice(&machine.to_le_bytes());
    b.extend_from_slice(body.as_bytes());
    b
}

#[test]
fn scan_prints_the_version_table() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("fs");
    fs::create_dir_all(root.join("bin")).unwrap();
    fs::create_dir_all(root.join("usr/sbin")).unwrap();
    fs::write(root.join("bin/busybox"), elf(40, "\0BusyBox v1.22.1 (2014-01-01) multi-call\0")).unwrap();
    fs::write(root.join("usr/sbin/bb"), elf(40, "\0BusyBox v1.36.0 (2023)\0")).unwrap();
    fs::write(root.join("usr/sbin/bb2"), elf(62, "\0BusyBox v1.36.0 (2023)\0")).unwrap();
    fs::write(root.join("bin/other"), elf(40, "nothing to see")).unwrap();
    fs::write(root.join("README"), "BusyBox v9.9.9 not an elf").unwrap();

    let csv = ok(dir.path(), &["scan", "fs"]);
    assert_eq!(
        csv,
        "component,version,count\nbusybox,v1.22.1,1\nbusybox,v1.36.0,2\nunknown,unknown,1\n"
    );
    let v = json(dir.path(), &["--json", "scan", "fs"]);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);

    ok(dir.path(), &["scan", "fs", "--targets-out", "targets.json"]);
    assert_eq!(ok(dir.path(), &["report", "inventory", "targets.json"]), csv);
}

#[test]
fn seeds_from_fixture_record_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("responses");
    fs::create_dir_all(&fx).unwrap();
    fs::write(fx.join("1.txt"), "1. `BEGIN { print 1 }`\n2. `{ print $2 }`\n").unwrap();
    fs::write(fx.join("2.txt"), "- `END { print NR }`\n").unwrap();
    fs::write(dir.path().join("tool.json"), r#"{"provider": {"model_id": "fixture-model"}}"#).unwrap();

    let v = json(
        dir.path(),
        &["--config", "tool.json", "--json", "seeds", "--applet", "awk", "--mode", "llm",
          "--fixture", "responses", "--out", "corpus", "--min-seeds", "3"],
    );
    assert_eq!(v["seeds"], 3);
    let meta: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("corpus/corpus.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["model_id"], "fixture-model");
    assert_eq!(meta["origin"], "LLM");
    assert_eq!(fs::read(dir.path().join("corpus/awk-002")).unwrap(), b"END { print NR }");
}

#[test]
fn random_seeds_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["seeds", "--applet", "dc", "--mode", "random", "--count", "5", "--rng-seed", "7"];
    let first = ok(dir.path(), &[&args[..], &["--out", "a"]].concat());
    ok(dir.path(), &[&args[..], &["--out", "b"]].concat());
    assert!(first.contains("5 seeds"));
    for i in 0..5 {
        let name = format!("dc-rnd-{i:03}");
        assert_eq!(
            fs::read(dir.path().join("a").join(&name)).unwrap(),
            fs::read(dir.path().join("b").join(&name)).unwrap()
        );
    }
    assert_eq!(
        fs::read(dir.path().join("a/corpus.meta.json")).unwrap(),
        fs::read(dir.path().join("b/corpus.meta.json")).unwrap()
    );
}

fn build_toys(dir: &Path) {
    json(dir, &["--json", "toy", "build", "--out", "toy"]);
    assert!(dir.join("toy/toy_a").exists() && dir.join("toy/toy_b").exists());
}

#[test]
fn reuse_on_toy_b_finds_the_shared_bug_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    build_toys(d);
    let imported = json(d, &["--json", "--store", "st", "store", "import", "toy/crashes",
                             "--target", "toy/toy_a", "--applet", "toy"]);
    assert_eq!(imported["inserted"], 3);

    let args = ["--json", "--store", "st", "reuse", "--target", "toy/toy_b", "--applet", "toy", "--no-debugger"];
    let first = ok(d, &args);
    let v: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["total_replayed"], 3);
    assert_eq!(v["crashing"], 1);
    assert_eq!(v["unique_crashing"], 1);
    assert_eq!(v["signatures"][0]["signal"], "SEGV");

    let listed = json(d, &["--json", "--store", "st", "store", "list"]);
    assert_eq!(listed.as_array().unwrap().len(), 4);
    assert_eq!(ok(d, &args), first);
    let listed = json(d, &["--json", "--store", "st", "store", "list"]);
    assert_eq!(listed.as_array().unwrap().len(), 4);

    let screened = json(d, &["--json", "--store", "st", "reuse", "screen", "--target", "toy/toy_b",
                             "--applet", "toy", "--no-debugger", "--discovery", "fuzzing"]);
    assert_eq!(screened["crashing"], 1);
}

#[test]
fn triage_groups_toy_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    build_toys(d);
    let v = json(d, &["--json", "triage", "--target", "toy/toy_a", "--applet", "toy",
                      "--inputs", "toy/crashes", "--no-debugger", "--out", "tri"]);
    // signal-only signatures: SEGV (boom, nest) and ABRT
    assert_eq!(v["report"]["groups"].as_array().unwrap().len(), 2);
    assert_eq!(v["report"]["entries"].as_array().unwrap().len(), 3);
    assert!(d.join("tri/report.json").exists() && d.join("tri/report.txt").exists());
}

#[test]
fn overlap_of_two_screenings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sig = |h: &str| format!(r#"{{"signal": "SEGV", "frame_hash": "{h}", "top_frame": "f"}}"#);
    fs::write(d.join("a.json"), format!(r#"{{"signatures": [{}, {}]}}"#, sig("1"), sig("2"))).unwrap();
    fs::write(d.join("b.json"), format!("[{}, {}, {}]", sig("2"), sig("3"), sig("4"))).unwrap();
    let csv = ok(d, &["report", "overlap", "a.json", "b.json", "--label-a", "reuse", "--label-b", "fuzzing"]);
    assert_eq!(csv, "label_a,label_b,only_a,only_b,common\nreuse,fuzzing,1,2,1\n");
}

fn write_batch(d: &Path) {
    fs::create_dir_all(d.join("corpus")).unwrap();
    fs::write(d.join("corpus/s1"), "BEGIN { print 1 }").unwrap();
    fs::write(d.join("corpus/corpus.meta.json"), r#"{"applet": "awk", "origin": "LLM"}"#).unwrap();
    fs::write(
        d.join("batch.json"),
        r#"{"campaigns": [{"target": "/bin/true", "applet": "awk", "corpus_dir": "corpus",
            "criteria": {"max_crashes": 2}, "output_dir": "out/c1"}]}"#,
    )
    .unwrap();
}

#[test]
fn fuzz_with_mock_script_dumps_series() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_batch(d);
    fs::write(d.join("mock.txt"), "stats 0 0 10 100 0\nstats 60 1 20 900 0\nstats 120 2 25 1800 1\n").unwrap();
    let v = json(d, &["--json", "--store", "st", "--dump-dir", "dump", "fuzz", "batch.json", "--mock-script", "mock.txt"]);
    assert_eq!(v[0]["campaign_id"], "c1");
    assert_eq!(v[0]["status"], "COMPLETED");
    assert_eq!(v[0]["stopped_by"], "max_crashes");
    assert!(d.join("dump/c1.stats.json").exists());
    let series: Value = serde_json::from_str(&fs::read_to_string(d.join("dump/c1.series.json")).unwrap()).unwrap();
    assert_eq!(series["condition"], "WITH_LLM");
    assert_eq!(series["series"].as_array().unwrap().len(), 3);

    let csv = ok(d, &["report", "compare", "dump/c1.series.json", "dump/c1.series.json"]);
    assert!(csv.starts_with("t,crashes_a,crashes_b,edges_a,edges_b,execs_a,execs_b\n0,0,0,10,10,100,100\n"));
}

#[test]
fn exit_code_contract() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &["scan"]), 1);
    assert_eq!(code(d, &["scan", "no-such-root"]), 1);
    assert_eq!(code(d, &["--store", "x", "--dump-dir", "x", "scan", "."]), 1);
    assert_eq!(code(d, &["report", "overlap", "missing.json", "missing.json"]), 1);
    assert_eq!(code(d, &["seeds", "--applet", "awk", "--mode", "random", "--out", "o", "--count", "0"]), 1);

    // credentials only come from the environment
    let out = bin()
        .current_dir(d)
        .env_remove("OPENAI_API_KEY")
        .args(["seeds", "--applet", "awk", "--mode", "llm", "--out", "o"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    write_batch(d);
    assert_eq!(code(d, &["--store", "st", "fuzz", "batch.json", "--fuzzer", "/no/such/afl-fuzz"]), 2);

    // an empty store is a usage problem, not a crash
    fs::write(d.join("t"), elf(62, "")).unwrap();
    assert_eq!(code(d, &["--store", "st", "reuse", "--target", "t", "--applet", "awk", "--no-debugger"]), 1);

    // a foreign-architecture target without a sysroot is an environment problem
    fs::write(d.join("arm"), elf(40, "")).unwrap();
    let out = run(d, &["--store", "st", "triage", "--target", "arm", "--applet", "awk", "--inputs", "corpus", "--no-debugger"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}
