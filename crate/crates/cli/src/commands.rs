use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;

use fuzzreuse::crashdb::{
    CrashFilter, CrashMetadata, CrashRecord, CrashSignature, CrashStore, Discovery, ImportSummary,
    RecordId, StoreError, VersionRange,
};
use fuzzreuse::exec::Invocation;
use fuzzreuse::fuzzing::{
    find_in_path, load_batch_file, plan_execution, run_batch, AflAdapter, CampaignConfig,
    CampaignStatus, ExecutionPlan, FuzzStatsSample, FuzzerAdapter, HarnessSpec, MockAdapter, MockScript,
    SupervisorOptions,
};
use fuzzreuse::inventory::{inventory_report, scan_filesystem, ScanOutcome, TargetBinary};
use fuzzreuse::report::{compare_conditions, emit, overlap_labeled, Condition, ConditionSeries, Format};
use fuzzreuse::reuse::{replay_one, screen_target, ReplaySummary, ScreenOptions, Verdict};
use fuzzreuse::seedgen::{
    generate_llm_corpus, generate_random_corpus, minimize_corpus, FixtureProvider, HttpProvider,
    RecordingProvider, SeedCorpus, SeedOrigin, ShowmapOracle,
};
use fuzzreuse::toy::{abrt_input, boom_input, build_toy, nest_input, ToyVariant};
use fuzzreuse::triage::{
    minimize_input, triage_batch, DebuggerAdapter, GdbAdapter, MinimizationResult, NoDebugger,
    TriageOptions, TriageReport,
};
use fuzzreuse::{Arch, CrashSignal, VersionInfo};

use crate::config::ToolConfig;
use crate::{env_error, usage_error, Cli, Command, GlobalOpts};

/// Resolved settings shared by every command.
struct Ctx {
    cfg: ToolConfig,
    json: bool,
    jobs: usize,
}

impl Ctx {
    fn new(global: &GlobalOpts) -> anyhow::Result<Self> {
        let mut cfg = match &global.config {
            Some(path) => ToolConfig::load(path)?,
            None => ToolConfig::default(),
        };
        if let Some(s) = &global.store {
            cfg.store_dir = Some(s.clone());
        }
        if let Some(d) = &global.dump_dir {
            cfg.dump_dir = Some(d.clone());
        }
        cfg.validate()?;
        let jobs = match global.jobs {
            Some(0) => return Err(usage_error("--jobs must be at least 1")),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, usize::from),
        };
        Ok(Ctx {
            cfg,
            json: global.json,
            jobs,
        })
    }

    fn store(&self) -> anyhow::Result<CrashStore> {
        let dir = self.cfg.store_dir();
        CrashStore::open(&dir).with_context(|| format!("opening crash store {}", dir.display()))
    }

    fn format(&self, requested: Option<Format>) -> Format {
        if self.json {
            Format::Json
        } else {
            requested.unwrap_or(Format::Csv)
        }
    }

    /// JSON when `--json` is set, otherwise the human text.
    fn print<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> anyhow::Result<()> {
        let text = if self.json {
            let mut s = serde_json::to_string_pretty(value)?;
            s.push('\n');
            s
        } else {
            human()
        };
        std::io::stdout().write_all(text.as_bytes())?;
        Ok(())
    }

    fn plan_for(&self, target: &TargetBinary) -> anyhow::Result<ExecutionPlan> {
        let sysroot = self.cfg.sysroot(target.arch)?;
        let plan = plan_execution(target.arch, Arch::host(), sysroot.as_deref())?;
        plan.check_launcher()?;
        Ok(plan)
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Scan(a) => scan(&ctx, a),
        Command::Seeds(a) => seeds(&ctx, a),
        Command::Fuzz(a) => fuzz(&ctx, a),
        Command::Store(c) => store(&ctx, c),
        Command::Reuse(a) => reuse(&ctx, a),
        Command::Triage(a) => triage(&ctx, a),
        Command::Report(c) => report(&ctx, c),
        Command::Toy(c) => toy(&ctx, c),
    }
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: fuzzreuse::report::ReportError| e.to_string())
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
        }
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn load_target(path: &Path) -> anyhow::Result<TargetBinary> {
    TargetBinary::from_path(path)
        .map_err(|e| usage_error(format!("target {}: {e}", path.display())))
}

fn select_debugger(no_debugger: bool) -> anyhow::Result<Box<dyn DebuggerAdapter>> {
    if no_debugger {
        return Ok(Box::new(NoDebugger));
    }
    let gdb = GdbAdapter::default();
    if find_in_path(&gdb.gdb).is_none() {
        return Err(env_error(
            "gdb not found in PATH; pass --no-debugger for signal-only triage",
        ));
    }
    Ok(Box::new(gdb))
}

// ---- scan ----

#[derive(Args, Debug)]
pub struct ScanArgs {
    /// Root of an extracted firmware file system.
    pub root: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub max_depth: usize,
    /// csv, json or gnuplot.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<Format>,
    /// Count distinct file contents instead of files.
    #[arg(long)]
    pub unique: bool,
    /// Also save the full target list as JSON (input for `report inventory`).
    #[arg(long, value_name = "FILE")]
    pub targets_out: Option<PathBuf>,
}

fn scan(ctx: &Ctx, a: ScanArgs) -> anyhow::Result<()> {
    let outcome = scan_filesystem(&a.root, a.max_depth)?;
    for d in &outcome.diagnostics {
        log::warn!("{}: {}", d.path.display(), d.message);
    }
    if let Some(path) = &a.targets_out {
        write_output(Some(path), &serde_json::to_vec_pretty(&outcome)?)?;
    }
    let mut table = inventory_report(&outcome.targets);
    table.count_unique = a.unique;
    write_output(None, &emit(&table, ctx.format(a.format))?)
}

// ---- seeds ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeedMode {
    Llm,
    Random,
}

#[derive(Args, Debug)]
pub struct SeedsArgs {
    #[arg(long)]
    pub applet: String,
    #[arg(long, value_enum)]
    pub mode: SeedMode,
    /// Corpus output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Replay recorded model responses (`1.txt`, `2.txt`, ...) instead of
    /// calling the provider.
    #[arg(long, value_name = "DIR", conflicts_with = "record")]
    pub fixture: Option<PathBuf>,
    /// Save live model responses for later replay.
    #[arg(long, value_name = "DIR")]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub min_seeds: usize,
    #[arg(long, default_value_t = 5)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub min_len: usize,
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    /// Minimize the corpus by edge coverage on this target (needs afl-showmap).
    #[arg(long, value_name = "PATH")]
    pub minimize_target: Option<PathBuf>,
}

#[derive(Serialize)]
struct SeedsOutput<'a> {
    applet: &'a str,
    out_dir: &'a Path,
    seeds: usize,
    generated: usize,
    metadata: &'a std::collections::BTreeMap<String, String>,
}

fn seeds(ctx: &Ctx, a: SeedsArgs) -> anyhow::Result<()> {
    if a.mode == SeedMode::Random && (a.fixture.is_some() || a.record.is_some()) {
        return Err(usage_error("--fixture and --record only apply to --mode llm"));
    }
    let model_id = ctx.cfg.provider.model_id.clone();
    let corpus = match (a.mode, &a.fixture, &a.record) {
        (SeedMode::Random, ..) => {
            generate_random_corpus(&a.applet, a.count, a.min_len, a.max_len, a.rng_seed)?
        }
        (SeedMode::Llm, Some(dir), _) => {
            let provider = FixtureProvider::load(dir, model_id)?;
            generate_llm_corpus(&provider, &a.applet, a.min_seeds, a.max_attempts)?
        }
        (SeedMode::Llm, None, Some(dir)) => {
            let provider = RecordingProvider::new(HttpProvider::new(ctx.cfg.provider.clone())?, dir);
            generate_llm_corpus(&provider, &a.applet, a.min_seeds, a.max_attempts)?
        }
        (SeedMode::Llm, None, None) => {
            let provider = HttpProvider::new(ctx.cfg.provider.clone())?;
            generate_llm_corpus(&provider, &a.applet, a.min_seeds, a.max_attempts)?
        }
    };
    let generated = corpus.len();
    let corpus = match &a.minimize_target {
        Some(path) => {
            let target = load_target(path)?;
            let plan = ctx.plan_for(&target)?;
            let oracle = ShowmapOracle::new(&target.path, ctx.cfg.harness(&a.applet), plan);
            if find_in_path(&oracle.showmap.to_string_lossy()).is_none() {
                return Err(env_error("afl-showmap not found in PATH"));
            }
            minimize_corpus(&corpus, &oracle)?
        }
        None => corpus,
    };
    corpus.save(&a.out)?;
    let out = SeedsOutput {
        applet: &a.applet,
        out_dir: &a.out,
        seeds: corpus.len(),
        generated,
        metadata: &corpus.generation_metadata,
    };
    ctx.print(&out, || {
        format!("{}: {} seeds ({} generated) in {}\n", a.applet, out.seeds, generated, a.out.display())
    })
}

// ---- fuzz ----

#[derive(Args, Debug)]
pub struct FuzzArgs {
    /// Batch description (JSON).
    pub batch: PathBuf,
    /// Fuzzer executable.
    #[arg(long, default_value = "afl-fuzz")]
    pub fuzzer: String,
    /// Run instrumented targets without binary-only mode.
    #[arg(long)]
    pub no_qemu: bool,
    /// Drive campaigns from a scripted mock fuzzer instead of a real one.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["fuzzer", "no_qemu"])]
    pub mock_script: Option<PathBuf>,
}

#[derive(Serialize)]
struct CampaignOutput {
    campaign_id: String,
    status: CampaignStatus,
    stopped_by: Option<String>,
    failure_diagnostic: Option<String>,
    final_stats: Option<FuzzStatsSample>,
    imported: ImportSummary,
}

fn condition_of(corpus: &SeedCorpus) -> Condition {
    let llm = corpus.generation_metadata.get("origin").map(String::as_str) == Some("LLM")
        || corpus.seeds.iter().all(|s| s.origin == SeedOrigin::Llm);
    if llm {
        Condition::WithLlm
    } else {
        Condition::WithoutLlm
    }
}

fn crash_template(target: &TargetBinary, applet: &str, component: Option<&str>) -> CrashMetadata {
    CrashMetadata {
        component: component
            .map(str::to_string)
            .or_else(|| target.component.clone())
            .unwrap_or_else(|| applet.to_string()),
        applet: applet.to_string(),
        source_target_hash: target.content_hash.clone(),
        source_version: target.version.clone(),
        source_arch: target.arch,
        discovery: Discovery::Fuzzing,
        signal: CrashSignal::Segv,
        signature: None,
    }
}

fn ingest(store: &CrashStore, c: &CampaignConfig, crash_inputs: &[Vec<u8>]) -> anyhow::Result<ImportSummary> {
    let template = crash_template(&c.target, &c.applet, None);
    let dir = AflAdapter::instance_dir(&c.output_dir).join("crashes");
    if dir.is_dir() {
        return Ok(store.import_crash_dir(&dir, &template)?);
    }
    let mut summary = ImportSummary::default();
    for input in crash_inputs {
        if input.is_empty() {
            summary.skipped += 1;
        } else if store.insert(input, template.clone())?.1 {
            summary.inserted += 1;
        } else {
            summary.existing += 1;
        }
    }
    Ok(summary)
}

fn fuzz(ctx: &Ctx, a: FuzzArgs) -> anyhow::Result<()> {
    let (batch, configs) = load_batch_file(&a.batch)?;
    let dump_dir = match (&ctx.cfg.dump_dir, &batch.dump_dir) {
        (None, Some(d)) => a.batch.parent().unwrap_or(Path::new(".")).join(d),
        _ => ctx.cfg.dump_dir(),
    };
    let store = ctx.store()?;
    let parallelism = batch.parallelism.unwrap_or(ctx.jobs).min(ctx.jobs);

    let mock;
    let afl;
    let (adapter, opts): (&dyn FuzzerAdapter, SupervisorOptions) = match &a.mock_script {
        Some(path) => {
            mock = MockAdapter::new(MockScript::load(path)?);
            (&mock, SupervisorOptions::virtual_time())
        }
        None => {
            if find_in_path(&a.fuzzer).is_none() {
                return Err(env_error(format!("fuzzer `{}` not found", a.fuzzer)));
            }
            afl = AflAdapter {
                qemu_mode: !a.no_qemu,
                ..AflAdapter::with_fuzzer(&a.fuzzer)
            };
            (&afl, SupervisorOptions::default())
        }
    };

    let results = run_batch(&configs, adapter, parallelism, &dump_dir, &opts)?;
    let mut outputs = Vec::with_capacity(results.len());
    for (r, c) in results.iter().zip(&configs) {
        let series = ConditionSeries {
            condition: condition_of(&c.corpus),
            target: c.target.content_hash.clone(),
            applet: c.applet.clone(),
            series: r.stats_series.clone(),
        };
        let path = dump_dir.join(format!("{}.series.json", r.campaign_id));
        write_output(Some(&path), &serde_json::to_vec_pretty(&series)?)?;
        let imported = ingest(&store, c, &r.crash_inputs)
            .with_context(|| format!("ingesting crashes of campaign {}", r.campaign_id))?;
        outputs.push(CampaignOutput {
            campaign_id: r.campaign_id.clone(),
            status: r.status,
            stopped_by: r.stopped_by.clone(),
            failure_diagnostic: r.failure_diagnostic.clone(),
            final_stats: r.final_sample().copied(),
            imported,
        });
    }
    ctx.print(&outputs, || {
        let mut s = String::new();
        for o in &outputs {
            s.push_str(&format!(
                "{}: {:?} stopped_by={} crashes +{} new, {} known\n",
                o.campaign_id,
                o.status,
                o.stopped_by.as_deref().unwrap_or("-"),
                o.imported.inserted,
                o.imported.existing
            ));
            if let Some(d) = &o.failure_diagnostic {
                s.push_str(&format!("  flagged: {d}\n"));
            }
        }
        s
    })
}

// ---- store ----

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DiscoveryArg {
    Fuzzing,
    Reuse,
}

impl From<DiscoveryArg> for Discovery {
    fn from(d: DiscoveryArg) -> Self {
        match d {
            DiscoveryArg::Fuzzing => Discovery::Fuzzing,
            DiscoveryArg::Reuse => Discovery::Reuse,
        }
    }
}

/// Record selection shared by `store list`, `reuse` and `triage`.
#[derive(Args, Debug, Clone, Default)]
pub struct FilterArgs {
    #[arg(long)]
    pub component: Option<String>,
    /// Lowest source version to include, e.g. 1.22.0.
    #[arg(long, value_name = "VERSION")]
    pub min_version: Option<String>,
    /// First source version to exclude.
    #[arg(long, value_name = "VERSION")]
    pub max_version: Option<String>,
    /// Source architecture, e.g. ARM_32 or X86_64.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long, value_enum)]
    pub discovery: Option<DiscoveryArg>,
}

impl FilterArgs {
    fn to_filter(&self, applet: Option<&str>) -> anyhow::Result<CrashFilter> {
        let version = |v: &Option<String>| -> anyhow::Result<Option<VersionInfo>> {
            v.as_deref()
                .map(|s| s.parse().map_err(|e| usage_error(format!("{e}"))))
                .transpose()
        };
        let (min, max_exclusive) = (version(&self.min_version)?, version(&self.max_version)?);
        let version_range =
            (min.is_some() || max_exclusive.is_some()).then_some(VersionRange { min, max_exclusive });
        let arch = self
            .arch
            .as_deref()
            .map(|s| s.parse::<Arch>().map_err(usage_error))
            .transpose()?;
        Ok(CrashFilter {
            component: self.component.clone(),
            applet: applet.map(str::to_string),
            version_range,
            arch,
            discovery: self.discovery.map(Into::into),
        })
    }
}

#[derive(Subcommand, Debug)]
pub enum StoreCommand {
    /// Import a fuzzer `crashes/` directory found for a target.
    Import {
        dir: PathBuf,
        /// Binary the crashes were found on.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        applet: String,
        /// Defaults to the component detected in the target, else the applet.
        #[arg(long)]
        component: Option<String>,
        /// Trust AFL-style file names for the signal instead of replaying
        /// each input on the target.
        #[arg(long)]
        no_replay: bool,
        #[arg(long, value_name = "MS")]
        timeout_ms: Option<u64>,
    },
    /// List stored records.
    List {
        #[arg(long)]
        applet: Option<String>,
        #[command(flatten)]
        filter: FilterArgs,
    },
}

fn record_line(r: &CrashRecord) -> String {
    format!(
        "{} {} {} {:?} {} {}\n",
        r.id,
        r.applet,
        r.signal,
        r.discovery,
        r.input_len,
        r.signature.as_ref().map_or_else(|| "-".to_string(), ToString::to_string)
    )
}

/// Imports the inputs of `dir` that crash `target`, each with the signal
/// it actually dies from. Inputs that do not crash are skipped.
fn import_replayed(
    store: &CrashStore,
    dir: &Path,
    target: &TargetBinary,
    plan: &ExecutionPlan,
    harness: &HarnessSpec,
    template: &CrashMetadata,
) -> anyhow::Result<ImportSummary> {
    harness.validate()?;
    let mut summary = ImportSummary::default();
    for (label, bytes) in read_input_dir(dir)? {
        match replay_one(plan, harness, &target.path, &bytes).verdict {
            Verdict::Crash(signal) => {
                let meta = CrashMetadata {
                    signal,
                    ..template.clone()
                };
                if store.insert(&bytes, meta)?.1 {
                    summary.inserted += 1;
                } else {
                    summary.existing += 1;
                }
            }
            other => {
                log::warn!("{label}: not imported, replay gave {other:?}");
                summary.skipped += 1;
            }
        }
    }
    Ok(summary)
}

fn store(ctx: &Ctx, c: StoreCommand) -> anyhow::Result<()> {
    let store = ctx.store()?;
    match c {
        StoreCommand::Import {
            dir,
            target,
            applet,
            component,
            no_replay,
            timeout_ms,
        } => {
            if !dir.is_dir() {
                return Err(usage_error(format!("{} is not a directory", dir.display())));
            }
            let target = load_target(&target)?;
            let template = crash_template(&target, &applet, component.as_deref());
            let summary = if no_replay {
                store.import_crash_dir(&dir, &template)?
            } else {
                let plan = ctx.plan_for(&target)?;
                let harness = harness_for(ctx, &applet, timeout_ms);
                import_replayed(&store, &dir, &target, &plan, &harness, &template)?
            };
            ctx.print(&summary, || {
                format!(
                    "{} inserted, {} already stored, {} skipped\n",
                    summary.inserted, summary.existing, summary.skipped
                )
            })
        }
        StoreCommand::List { applet, filter } => {
            let records = store.query(&filter.to_filter(applet.as_deref())?);
            ctx.print(&records, || records.iter().map(record_line).collect())
        }
    }
}

// ---- reuse ----

#[derive(Args, Debug)]
pub struct ReuseArgs {
    /// Optional action name; `screen` is the only one.
    #[arg(value_parser = ["screen"], hide = true)]
    pub action: Option<String>,
    /// New target variant to screen.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub applet: String,
    #[command(flatten)]
    pub filter: FilterArgs,
    /// Per-replay timeout.
    #[arg(long, value_name = "MS")]
    pub timeout_ms: Option<u64>,
    /// Signal-only signatures; do not run gdb on crashing replays.
    #[arg(long)]
    pub no_debugger: bool,
}

#[derive(Serialize)]
struct OutcomeView<'a> {
    record_id: Option<&'a RecordId>,
    input_hash: &'a str,
    verdict: &'a Verdict,
    signature: Option<&'a CrashSignature>,
}

/// The screening summary without wall times, so reruns compare equal.
#[derive(Serialize)]
struct ReuseView<'a> {
    target: &'a Path,
    target_hash: &'a str,
    total_replayed: usize,
    crashing: usize,
    unique_crashing: usize,
    timeouts: usize,
    exec_errors: usize,
    signatures: &'a [CrashSignature],
    outcomes: Vec<OutcomeView<'a>>,
}

impl<'a> ReuseView<'a> {
    fn new(target: &'a Path, s: &'a ReplaySummary) -> Self {
        ReuseView {
            target,
            target_hash: &s.target_hash,
            total_replayed: s.total_replayed,
            crashing: s.crashing,
            unique_crashing: s.unique_crashing,
            timeouts: s.timeouts,
            exec_errors: s.exec_errors,
            signatures: &s.signatures,
            outcomes: s
                .per_outcome
                .iter()
                .map(|o| OutcomeView {
                    record_id: o.record_id.as_ref(),
                    input_hash: &o.input_hash,
                    verdict: &o.verdict,
                    signature: o.signature.as_ref(),
                })
                .collect(),
        }
    }
}

fn harness_for(ctx: &Ctx, applet: &str, timeout_ms: Option<u64>) -> HarnessSpec {
    let h = ctx.cfg.harness(applet);
    match timeout_ms {
        Some(ms) => h.with_timeout_ms(ms),
        None => h,
    }
}

fn reuse(ctx: &Ctx, a: ReuseArgs) -> anyhow::Result<()> {
    let target = load_target(&a.target)?;
    let store = ctx.store()?;
    let filter = a.filter.to_filter(Some(&a.applet))?;
    let debugger = select_debugger(a.no_debugger)?;
    let opts = ScreenOptions {
        parallelism: ctx.jobs,
        sysroot: ctx.cfg.sysroot(target.arch)?,
        ..ScreenOptions::new(debugger.as_ref())
    };
    let harness = harness_for(ctx, &a.applet, a.timeout_ms);
    let summary = screen_target(&target, &store, &filter, &harness, &opts)?;
    let view = ReuseView::new(&a.target, &summary);
    ctx.print(&view, || {
        let mut s = format!(
            "{}: replayed {}, crashing {} ({} unique), {} timeouts, {} errors\n",
            a.target.display(),
            view.total_replayed,
            view.crashing,
            view.unique_crashing,
            view.timeouts,
            view.exec_errors
        );
        for sig in view.signatures {
            s.push_str(&format!("  {sig} {}\n", sig.top_frame));
        }
        s
    })
}

// ---- triage ----

#[derive(Args, Debug)]
pub struct TriageArgs {
    /// Binary to triage against.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub applet: String,
    /// Directory of crashing inputs; without it, stored crashes are used.
    #[arg(long, value_name = "DIR")]
    pub inputs: Option<PathBuf>,
    #[command(flatten)]
    pub filter: FilterArgs,
    /// Shrink each group's representative with delta debugging.
    #[arg(long)]
    pub minimize: bool,
    /// Oracle executions allowed per minimization.
    #[arg(long, default_value_t = 5000)]
    pub max_steps: usize,
    /// Write report.json, report.txt and minimized inputs here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "MS")]
    pub timeout_ms: Option<u64>,
    #[arg(long)]
    pub no_debugger: bool,
}

#[derive(Serialize)]
struct Minimized {
    group: usize,
    representative: String,
    result: Option<MinimizationResult>,
    error: Option<String>,
}

#[derive(Serialize)]
struct TriageOutput {
    report: TriageReport,
    minimized: Vec<Minimized>,
    signatures_attached: usize,
}

fn read_input_dir(dir: &Path) -> anyhow::Result<Vec<(String, Vec<u8>)>> {
    let mut inputs = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| usage_error(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "README.txt"))
        .collect();
    paths.sort();
    for p in paths {
        let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
        if !bytes.is_empty() {
            inputs.push((p.file_name().unwrap().to_string_lossy().into_owned(), bytes));
        }
    }
    Ok(inputs)
}

fn triage(ctx: &Ctx, a: TriageArgs) -> anyhow::Result<()> {
    let target = load_target(&a.target)?;
    let debugger = select_debugger(a.no_debugger)?;
    let (store, inputs) = match &a.inputs {
        Some(dir) => (None, read_input_dir(dir)?),
        None => {
            let store = ctx.store()?;
            let mut seen = HashSet::new();
            let mut inputs = Vec::new();
            for r in store.query(&a.filter.to_filter(Some(&a.applet))?) {
                if seen.insert(r.input_hash.clone()) {
                    inputs.push((r.id.to_string(), store.blob(&r.input_hash)?));
                }
            }
            (Some(store), inputs)
        }
    };
    if inputs.is_empty() {
        return Err(usage_error("no crashing inputs selected"));
    }
    let plan = ctx.plan_for(&target)?;
    let inv = Invocation::new(target.path.clone(), plan, harness_for(ctx, &a.applet, a.timeout_ms));
    inv.harness.validate()?;
    let opts = TriageOptions {
        max_steps: a.max_steps,
        ..Default::default()
    };
    let report = triage_batch(&inv, &inputs, debugger.as_ref(), &opts, ctx.jobs);

    let mut attached = 0;
    if let Some(store) = &store {
        attached = attach_signatures(store, &target, &report)?;
    }

    let mut minimized = Vec::new();
    if a.minimize {
        for (i, g) in report.groups.iter().enumerate() {
            let bytes = &inputs.iter().find(|(l, _)| *l == g.representative).expect("representative is an input").1;
            let (result, error) = match minimize_input(&inv, bytes, &g.signature, debugger.as_ref(), &opts) {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            minimized.push(Minimized {
                group: i,
                representative: g.representative.clone(),
                result,
                error,
            });
        }
    }

    let output = TriageOutput {
        report,
        minimized,
        signatures_attached: attached,
    };
    if let Some(dir) = &a.out {
        write_output(Some(&dir.join("report.json")), &serde_json::to_vec_pretty(&output)?)?;
        write_output(Some(&dir.join("report.txt")), output.report.to_text().as_bytes())?;
        for m in &output.minimized {
            if let Some(r) = &m.result {
                let name = format!("group-{:03}.min", m.group);
                write_output(Some(&dir.join("minimized").join(name)), &r.minimized_input)?;
            }
        }
    }
    ctx.print(&output, || {
        let mut s = output.report.to_text();
        for m in &output.minimized {
            match (&m.result, &m.error) {
                (Some(r), _) => s.push_str(&format!(
                    "group {}: minimized {} -> {} bytes in {} executions{}\n",
                    m.group,
                    r.original_len,
                    r.minimized_len,
                    r.steps,
                    if r.budget_exhausted { " (budget exhausted)" } else { "" }
                )),
                (None, Some(e)) => s.push_str(&format!("group {}: not minimized: {e}\n", m.group)),
                (None, None) => {}
            }
        }
        s
    })
}

/// Stores each signature on the unsigned records of this target that hold
/// the triaged input.
fn attach_signatures(store: &CrashStore, target: &TargetBinary, report: &TriageReport) -> anyhow::Result<usize> {
    let mut attached = 0;
    let records = store.query(&CrashFilter::default());
    for e in &report.entries {
        let Some(sig) = &e.signature else { continue };
        for r in records.iter().filter(|r| {
            r.input_hash == e.input_hash
                && r.source_target_hash == target.content_hash
                && r.signature.is_none()
        }) {
            match store.attach_signature(&r.id, sig.clone()) {
                Ok(()) => attached += 1,
                Err(StoreError::AlreadySigned(id)) => log::warn!("{id}: keeps its earlier signature"),
                Err(err) => return Err(err.into()),
            }
        }
    }
    Ok(attached)
}

// ---- report ----

#[derive(Subcommand, Debug)]
pub enum ReportCommand {
    /// Align two campaign series (`<id>.series.json`) on time.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: Option<Format>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Unique-crash overlap of two signature sets (reuse or triage JSON
    /// output, or a JSON array of signatures).
    Overlap {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "a")]
        label_a: String,
        #[arg(long, default_value = "b")]
        label_b: String,
        #[arg(long, value_parser = parse_format)]
        format: Option<Format>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Version table from a firmware root or a saved target list.
    Inventory {
        input: PathBuf,
        #[arg(long)]
        unique: bool,
        #[arg(long, value_parser = parse_format)]
        format: Option<Format>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn read_json(path: &Path) -> anyhow::Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| usage_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage_error(format!("{}: {e}", path.display())))
}

/// Signatures from any of the JSON shapes this tool writes.
fn signatures_in(path: &Path) -> anyhow::Result<HashSet<CrashSignature>> {
    let v = read_json(path)?;
    let v = v.get("report").cloned().unwrap_or(v);
    let items: Vec<serde_json::Value> = if let Some(sigs) = v.get("signatures").and_then(|s| s.as_array()) {
        sigs.clone()
    } else if let Some(groups) = v.get("groups").and_then(|g| g.as_array()) {
        groups.iter().filter_map(|g| g.get("signature").cloned()).collect()
    } else if let Some(arr) = v.as_array() {
        arr.clone()
    } else {
        return Err(usage_error(format!("{}: no signatures found", path.display())));
    };
    items
        .into_iter()
        .map(|s| {
            serde_json::from_value(s)
                .map_err(|e| usage_error(format!("{}: bad signature: {e}", path.display())))
        })
        .collect()
}

fn report(ctx: &Ctx, c: ReportCommand) -> anyhow::Result<()> {
    match c {
        ReportCommand::Compare { a, b, format, out } => {
            let load = |p: &Path| -> anyhow::Result<ConditionSeries> {
                serde_json::from_value(read_json(p)?)
                    .map_err(|e| usage_error(format!("{}: {e}", p.display())))
            };
            let table = compare_conditions(&load(&a)?, &load(&b)?)?;
            write_output(out.as_deref(), &emit(&table, ctx.format(format))?)
        }
        ReportCommand::Overlap {
            a,
            b,
            label_a,
            label_b,
            format,
            out,
        } => {
            let counts = overlap_labeled(&signatures_in(&a)?, &signatures_in(&b)?, &label_a, &label_b);
            write_output(out.as_deref(), &emit(&counts, ctx.format(format))?)
        }
        ReportCommand::Inventory {
            input,
            unique,
            format,
            out,
        } => {
            let targets = if input.is_dir() {
                scan_filesystem(&input, 64)?.targets
            } else {
                let v = read_json(&input)?;
                let parsed = match v.get("targets") {
                    Some(_) => serde_json::from_value::<ScanOutcome>(v).map(|o| o.targets),
                    None => serde_json::from_value::<Vec<TargetBinary>>(v),
                };
                parsed.map_err(|e| usage_error(format!("{}: {e}", input.display())))?
            };
            let mut table = inventory_report(&targets);
            table.count_unique = unique;
            write_output(out.as_deref(), &emit(&table, ctx.format(format))?)
        }
    }
}

// ---- toy ----

#[derive(Subcommand, Debug)]
pub enum ToyCommand {
    /// Compile both toy variants and write one sample input per planted bug.
    Build {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct ToyOutput {
    variant_a: PathBuf,
    variant_b: PathBuf,
    crash_inputs: PathBuf,
}

fn toy(ctx: &Ctx, c: ToyCommand) -> anyhow::Result<()> {
    let ToyCommand::Build { out } = c;
    let build = |v| build_toy(v, &out).map_err(|e| env_error(format!("building toy target: {e}")));
    let variant_a = build(ToyVariant::A)?;
    let variant_b = build(ToyVariant::B)?;
    let crash_inputs = out.join("crashes");
    for (name, bytes) in [("boom", boom_input()), ("abrt", abrt_input()), ("nest", nest_input())] {
        write_output(Some(&crash_inputs.join(name)), &bytes)?;
    }
    let o = ToyOutput {
        variant_a,
        variant_b,
        crash_inputs,
    };
    ctx.print(&o, || {
        format!(
            "{}\n{}\n{}\n",
            o.variant_a.display(),
            o.variant_b.display(),
            o.crash_inputs.display()
        )
    })
}
