//! End-to-end checks against the bundled toy target, with the real
//! debugger when one is installed.

use std::path::PathBuf;
use std::sync::OnceLock;

use fuzzreuse::crashdb::{CrashFilter, CrashMetadata, CrashStore, Discovery};
use fuzzreuse::exec::Invocation;
use fuzzreuse::fuzzing::{find_in_path, ExecutionPlan, HarnessSpec};
use fuzzreuse::inventory::TargetBinary;
use fuzzreuse::reuse::{replay_one, screen_target, ScreenOptions, Verdict};
use fuzzreuse::toy::{abrt_input, boom_input, build_toy, nest_input, ToyVariant};
use fuzzreuse::triage::{
    classify_crash, minimize_input, signature_from, triage_batch, CrashClass, GdbAdapter,
    NoDebugger, TriageOptions,
};
use fuzzreuse::{Arch, CrashSignal};

struct Toys {
    _dir: tempfile::TempDir,
    a: PathBuf,
    b: PathBuf,
}

fn toys() -> &'static Toys {
    static T: OnceLock<Toys> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let a = build_toy(ToyVariant::A, dir.path()).unwrap();
        let b = build_toy(ToyVariant::B, dir.path()).unwrap();
        Toys { _dir: dir, a, b }
    })
}

fn harness() -> HarnessSpec {
    HarnessSpec::new(["{target}", "@@"]).with_timeout_ms(5000)
}

fn have_gdb() -> bool {
    let ok = find_in_path("gdb").is_some();
    if !ok {
        eprintln!("gdb not installed; skipping");
    }
    ok
}

#[test]
fn replay_verdicts_on_toy() {
    let p = ExecutionPlan::Native;
    let a = &toys().a;
    assert_eq!(replay_one(&p, &harness(), a, &boom_input()).verdict, Verdict::Crash(CrashSignal::Segv));
    assert_eq!(replay_one(&p, &harness(), a, b"benign text").verdict, Verdict::Clean(0));
    let hang = replay_one(&p, &harness().with_timeout_ms(200), a, b"LOOP");
    assert_eq!(hang.verdict, Verdict::Timeout);
    assert!(hang.wall_time_ms >= 200);
}

#[test]
fn stdin_harness() {
    let mut h = HarnessSpec::new(["{target}"]).with_timeout_ms(5000);
    h.stdin_mode = true;
    let out = replay_one(&ExecutionPlan::Native, &h, &toys().a, &abrt_input());
    assert_eq!(out.verdict, Verdict::Crash(CrashSignal::Abrt));
}

#[test]
fn gdb_classifies_each_planted_bug() {
    if !have_gdb() {
        return;
    }
    let inv = Invocation::new(&toys().a, ExecutionPlan::Native, harness());
    let opts = TriageOptions::default();
    let gdb = GdbAdapter::default();

    let boom = classify_crash(&inv, &boom_input(), &gdb, &opts).unwrap();
    assert_eq!(boom.classification, CrashClass::NullDeref);
    assert_eq!(boom.fault_address, Some(0));
    assert_eq!(boom.frames[0].symbol.as_deref(), Some("handle_boom"));
    assert!(!boom.degraded);

    let nest = classify_crash(&inv, &nest_input(), &gdb, &opts).unwrap();
    assert_eq!(nest.classification, CrashClass::StackExhaustion);
    assert_eq!(signature_from(&nest, &opts).top_frame, "nest_group");

    let abrt = classify_crash(&inv, &abrt_input(), &gdb, &opts).unwrap();
    assert_eq!(abrt.classification, CrashClass::Abort);
    assert!(abrt.frames.iter().any(|f| f.symbol.as_deref() == Some("handle_abrt")));
}

#[test]
fn recursion_depth_does_not_split_groups() {
    if !have_gdb() {
        return;
    }
    let inv = Invocation::new(&toys().a, ExecutionPlan::Native, harness());
    let opts = TriageOptions::default();
    let gdb = GdbAdapter::default();
    let mut deeper = b"junk ".to_vec();
    deeper.extend(nest_input());
    deeper.extend(std::iter::repeat_n(b'(', 3000));
    let s1 = signature_from(&classify_crash(&inv, &nest_input(), &gdb, &opts).unwrap(), &opts);
    let s2 = signature_from(&classify_crash(&inv, &deeper, &gdb, &opts).unwrap(), &opts);
    assert_eq!(s1, s2);
}

#[test]
fn degraded_without_debugger() {
    let inv = Invocation::new(&toys().a, ExecutionPlan::Native, harness());
    let opts = TriageOptions::default();
    let r = classify_crash(&inv, &boom_input(), &NoDebugger, &opts).unwrap();
    assert!(r.degraded && r.frames.is_empty());
    assert!(signature_from(&r, &opts).low_confidence);
    assert!(classify_crash(&inv, b"benign", &NoDebugger, &opts).is_err());
}

#[test]
fn batch_with_flaky_members() {
    if !have_gdb() {
        return;
    }
    let inv = Invocation::new(&toys().a, ExecutionPlan::Native, harness());
    let inputs = vec![
        ("boom".to_string(), boom_input()),
        ("benign".to_string(), b"nothing here".to_vec()),
        ("abrt".to_string(), abrt_input()),
    ];
    let r = triage_batch(&inv, &inputs, &GdbAdapter::default(), &TriageOptions::default(), 2);
    assert_eq!(r.groups.len(), 2);
    assert_eq!(r.flagged().count(), 1);
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["groups"].as_array().unwrap().len(), 2);
}

#[test]
fn minimization_keeps_the_bug() {
    if !have_gdb() {
        return;
    }
    let inv = Invocation::new(&toys().a, ExecutionPlan::Native, harness());
    let opts = TriageOptions::default();
    let gdb = GdbAdapter::default();
    let input = b"aaaaBOOMbbbbABRTcccc".to_vec();
    // the first token reached decides which bug fires
    let sig = signature_from(&classify_crash(&inv, &input, &gdb, &opts).unwrap(), &opts);
    let m = minimize_input(&inv, &input, &sig, &gdb, &opts).unwrap();
    assert_eq!(m.minimized_input, b"BOOM");
    assert!(!m.budget_exhausted);

    let again = minimize_input(&inv, &m.minimized_input, &sig, &gdb, &opts).unwrap();
    assert_eq!(again.minimized_input, m.minimized_input);
}

#[test]
fn screening_writes_back_once() {
    let store_dir = tempfile::tempdir().unwrap();
    let store = CrashStore::open(store_dir.path()).unwrap();
    let a = TargetBinary::from_path(&toys().a).unwrap();
    let b = TargetBinary::from_path(&toys().b).unwrap();
    for input in [boom_input(), abrt_input(), nest_input()] {
        let meta = CrashMetadata {
            component: "toy".into(),
            applet: "toy".into(),
            source_target_hash: a.content_hash.clone(),
            source_version: None,
            source_arch: Arch::host(),
            discovery: Discovery::Fuzzing,
            signal: CrashSignal::Segv,
            signature: None,
        };
        store.insert(&input, meta).unwrap();
    }
    let filter = CrashFilter {
        applet: Some("toy".into()),
        ..Default::default()
    };
    let opts = ScreenOptions::new(&NoDebugger);
    let first = screen_target(&b, &store, &filter, &harness(), &opts).unwrap();
    assert_eq!((first.total_replayed, first.crashing, first.unique_crashing), (3, 1, 1));
    assert_eq!(store.len(), 4);
    let reuse = store.query(&CrashFilter {
        discovery: Some(Discovery::Reuse),
        ..Default::default()
    });
    assert_eq!(reuse[0].source_target_hash, b.content_hash);

    let second = screen_target(&b, &store, &filter, &harness(), &opts).unwrap();
    assert_eq!(store.len(), 4);
    assert_eq!(second.signatures, first.signatures);
    assert_eq!(second.total_replayed, 3);

    let other = CrashFilter {
        applet: Some("dc".into()),
        ..Default::default()
    };
    assert!(screen_target(&b, &store, &other, &harness(), &opts).is_err());
}
