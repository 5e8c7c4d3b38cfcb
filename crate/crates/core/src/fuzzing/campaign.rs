use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::{
    parse_stats, plan_execution, CampaignConfig, CampaignResult, CampaignStatus, FuzzError,
    FuzzStatsSample, FuzzerAdapter, FuzzerRun, RunExit,
};
use crate::Arch;

pub const DEFAULT_POLL_INTERVAL_S: u64 = 5;
pub const DEFAULT_GRACE_PERIOD: Duration = Duration::from_secs(5);

/// Consecutive unparsable stats reads that mark the fuzzer as broken.
const MAX_BAD_POLLS: u32 = 3;
/// Polls tolerated before the stats file first appears.
const STARTUP_POLLS: u32 = 12;

/// Time source for the supervisor.
pub trait Clock: Send + Sync {
    /// Time since the clock was created.
    fn elapsed(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn elapsed(&self) -> Duration {
        self.0.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Virtual clock: `sleep` advances time instantly.
#[derive(Debug, Default, Clone)]
pub struct ManualClock(Arc<Mutex<Duration>>);

impl Clock for ManualClock {
    fn elapsed(&self) -> Duration {
        *self.0.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        *self.0.lock().unwrap() += d;
    }
}

/// Where each campaign gets its clock from.
#[derive(Clone)]
pub enum ClockSource {
    /// Wall clock.
    System,
    /// A fresh [`ManualClock`] per campaign.
    Virtual,
    /// One clock shared by every campaign.
    Shared(Arc<dyn Clock>),
}

impl ClockSource {
    fn instantiate(&self) -> Arc<dyn Clock> {
        match self {
            ClockSource::System => Arc::new(SystemClock::default()),
            ClockSource::Virtual => Arc::new(ManualClock::default()),
            ClockSource::Shared(c) => Arc::clone(c),
        }
    }
}

#[derive(Clone)]
pub struct SupervisorOptions {
    pub clock: ClockSource,
    pub grace_period: Duration,
    pub host_arch: Arch,
}

impl Default for SupervisorOptions {
    fn default() -> Self {
        SupervisorOptions {
            clock: ClockSource::System,
            grace_period: DEFAULT_GRACE_PERIOD,
            host_arch: Arch::host(),
        }
    }
}

impl SupervisorOptions {
    /// Options driven by virtual time, one clock per campaign.
    pub fn virtual_time() -> Self {
        SupervisorOptions {
            clock: ClockSource::Virtual,
            ..Default::default()
        }
    }
}

pub fn run_campaign(config: &CampaignConfig, adapter: &dyn FuzzerAdapter) -> CampaignResult {
    run_campaign_with(config, adapter, &SupervisorOptions::default())
}

fn failed(config: &CampaignConfig, status: CampaignStatus, diagnostic: String) -> CampaignResult {
    CampaignResult {
        campaign_id: config.id.clone(),
        status,
        stats_series: Vec::new(),
        crash_inputs: Vec::new(),
        queue_size: 0,
        failure_diagnostic: Some(diagnostic),
        stopped_by: None,
    }
}

/// Runs one campaign to completion. Errors are folded into the result's
/// status so that a batch can carry on.
pub fn run_campaign_with(
    config: &CampaignConfig,
    adapter: &dyn FuzzerAdapter,
    opts: &SupervisorOptions,
) -> CampaignResult {
    if let Err(e) = config.validate() {
        return failed(config, CampaignStatus::Failed, e.to_string());
    }
    let plan = match plan_execution(
        config.target.arch,
        opts.host_arch,
        config.harness.sysroot.as_deref(),
    ) {
        Ok(p) => p,
        Err(e) => return failed(config, CampaignStatus::Failed, e.to_string()),
    };
    let seeds_dir = config.output_dir.join("seeds");
    if let Err(e) = materialize(config, &seeds_dir) {
        return failed(config, CampaignStatus::Failed, e.to_string());
    }
    let mut run = match adapter.launch(config, &plan, &seeds_dir) {
        Ok(r) => r,
        Err(e) => return failed(config, CampaignStatus::Failed, e.to_string()),
    };
    info!("campaign {}: {} fuzzer launched", config.id, adapter.name());
    let clock = opts.clock.instantiate();
    supervise(config, run.as_mut(), clock.as_ref(), opts.grace_period)
}

fn materialize(config: &CampaignConfig, seeds_dir: &Path) -> Result<(), FuzzError> {
    fs::create_dir_all(seeds_dir).map_err(|e| FuzzError::io(seeds_dir, e))?;
    config
        .corpus
        .write_seeds(seeds_dir)
        .map_err(|e| FuzzError::io(seeds_dir, e))
}

fn supervise(
    config: &CampaignConfig,
    run: &mut dyn FuzzerRun,
    clock: &dyn Clock,
    grace: Duration,
) -> CampaignResult {
    let poll = Duration::from_secs(config.poll_interval_s);
    let start = clock.elapsed();
    let mut series: Vec<FuzzStatsSample> = Vec::new();
    let mut bad_polls = 0u32;
    let mut missing_polls = 0u32;

    let finish = |run: &mut dyn FuzzerRun,
                      series: Vec<FuzzStatsSample>,
                      status: CampaignStatus,
                      diagnostic: Option<String>,
                      stopped_by: Option<String>| {
        let crash_inputs = run.crash_inputs().unwrap_or_else(|e| {
            warn!("campaign {}: reading crashes: {e}", config.id);
            Vec::new()
        });
        let queue_size = run.queue_size().unwrap_or(0);
        CampaignResult {
            campaign_id: config.id.clone(),
            status,
            stats_series: series,
            crash_inputs,
            queue_size,
            failure_diagnostic: diagnostic,
            stopped_by,
        }
    };

    loop {
        clock.sleep(poll);
        let exit = match run.poll_exit() {
            Ok(e) => e,
            Err(e) => {
                stop(run, clock, grace);
                return finish(
                    run,
                    series,
                    CampaignStatus::Catastrophic,
                    Some(format!("lost track of fuzzer process: {e}")),
                    None,
                );
            }
        };

        match exit {
            Some(RunExit::Signal(sig)) => {
                return finish(
                    run,
                    series,
                    CampaignStatus::Catastrophic,
                    Some(format!("fuzzer terminated by signal {sig}")),
                    None,
                );
            }
            Some(RunExit::Code(code)) if code != 0 => {
                return finish(
                    run,
                    series,
                    CampaignStatus::Failed,
                    Some(format!("fuzzer exited with status {code} before any termination criterion")),
                    None,
                );
            }
            _ => {}
        }

        match run.read_stats() {
            Ok(text) => match parse_stats(&text) {
                Ok(sample) => {
                    bad_polls = 0;
                    if let Some(&prev) = series.last() {
                        if !sample.follows(&prev) {
                            stop(run, clock, grace);
                            return finish(
                                run,
                                series,
                                CampaignStatus::Catastrophic,
                                Some(format!(
                                    "stats went backwards: {prev:?} then {sample:?}"
                                )),
                                None,
                            );
                        }
                    }
                    debug!("campaign {}: {sample:?}", config.id);
                    series.push(sample);
                }
                Err(e) => {
                    bad_polls += 1;
                    debug!("campaign {}: unparsable stats ({e}), {bad_polls} in a row", config.id);
                }
            },
            Err(e) => {
                if series.is_empty() && exit.is_none() {
                    missing_polls += 1;
                    if missing_polls > STARTUP_POLLS {
                        bad_polls = MAX_BAD_POLLS;
                    }
                } else {
                    bad_polls += 1;
                }
                debug!("campaign {}: stats unavailable: {e}", config.id);
            }
        }

        if bad_polls >= MAX_BAD_POLLS {
            stop(run, clock, grace);
            return finish(
                run,
                series,
                CampaignStatus::Catastrophic,
                Some(format!("stats file unparsable for {MAX_BAD_POLLS} consecutive polls")),
                None,
            );
        }

        if exit.is_some() {
            // clean exit on its own
            return if series.is_empty() {
                finish(
                    run,
                    series,
                    CampaignStatus::Failed,
                    Some("fuzzer exited without writing stats".into()),
                    None,
                )
            } else {
                finish(run, series, CampaignStatus::Completed, None, None)
            };
        }

        let elapsed_s = (clock.elapsed() - start).as_secs();
        if let Some(last) = series.last() {
            if let Some(criterion) = config.criteria.reached(last, elapsed_s) {
                info!("campaign {}: {criterion} reached", config.id);
                stop(run, clock, grace);
                return finish(
                    run,
                    series,
                    CampaignStatus::Completed,
                    None,
                    Some(criterion.to_string()),
                );
            }
        } else if config
            .criteria
            .max_runtime_s
            .is_some_and(|limit| elapsed_s >= limit)
        {
            stop(run, clock, grace);
            return finish(
                run,
                series,
                CampaignStatus::Failed,
                Some("runtime limit reached before the fuzzer wrote any stats".into()),
                Some("max_runtime_s".into()),
            );
        }
    }
}

/// Graceful stop, then a forced kill once the grace period runs out.
fn stop(run: &mut dyn FuzzerRun, clock: &dyn Clock, grace: Duration) {
    if let Err(e) = run.request_stop() {
        warn!("graceful stop failed: {e}");
    }
    let deadline = clock.elapsed() + grace;
    let step = Duration::from_millis(50);
    loop {
        match run.poll_exit() {
            Ok(Some(_)) => return,
            Ok(None) if clock.elapsed() < deadline => clock.sleep(step),
            _ => break,
        }
    }
    warn!("fuzzer ignored stop request, killing");
    if let Err(e) = run.kill() {
        warn!("kill failed: {e}");
    }
}
