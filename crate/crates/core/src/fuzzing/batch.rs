use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    run_campaign_with, CampaignConfig, CampaignResult, CampaignStatus, FuzzError,
    FuzzStatsSample, FuzzerAdapter, HarnessSpec, SupervisorOptions, TerminationCriteria,
    DEFAULT_POLL_INTERVAL_S,
};
use crate::inventory::TargetBinary;
use crate::seedgen::SeedCorpus;

/// Final stats of one campaign as written to the shared dump directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsDump {
    pub campaign_id: String,
    pub status: CampaignStatus,
    pub final_stats: Option<FuzzStatsSample>,
    pub samples: usize,
    pub crashes: usize,
    pub queue_size: usize,
    pub stopped_by: Option<String>,
    pub failure_diagnostic: Option<String>,
}

impl From<&CampaignResult> for StatsDump {
    fn from(r: &CampaignResult) -> Self {
        StatsDump {
            campaign_id: r.campaign_id.clone(),
            status: r.status,
            final_stats: r.final_sample().copied(),
            samples: r.stats_series.len(),
            crashes: r.crash_inputs.len(),
            queue_size: r.queue_size,
            stopped_by: r.stopped_by.clone(),
            failure_diagnostic: r.failure_diagnostic.clone(),
        }
    }
}

/// Runs every campaign with at most `parallelism` running at once and
/// writes `<dump_dir>/<campaign_id>.stats.json` for each. Results come back
/// in input order; one campaign failing never stops the others.
pub fn run_batch(
    configs: &[CampaignConfig],
    adapter: &dyn FuzzerAdapter,
    parallelism: usize,
    dump_dir: &Path,
    opts: &SupervisorOptions,
) -> Result<Vec<CampaignResult>, FuzzError> {
    if parallelism == 0 {
        return Err(FuzzError::Config("parallelism must be at least 1".into()));
    }
    let mut dirs = HashSet::new();
    let mut ids = HashSet::new();
    for c in configs {
        if !dirs.insert(normalize(&c.output_dir)) {
            return Err(FuzzError::Config(format!(
                "output_dir {} used by more than one campaign",
                c.output_dir.display()
            )));
        }
        if !ids.insert(c.id.as_str()) {
            return Err(FuzzError::Config(format!("duplicate campaign id {}", c.id)));
        }
    }
    fs::create_dir_all(dump_dir).map_err(|e| FuzzError::io(dump_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| FuzzError::Environment(format!("worker pool: {e}")))?;
    let results: Vec<CampaignResult> = pool.install(|| {
        configs
            .par_iter()
            .with_max_len(1)
            .map(|c| run_campaign_with(c, adapter, opts))
            .collect()
    });

    for r in &results {
        let path = dump_dir.join(format!("{}.stats.json", r.campaign_id));
        let mut text = serde_json::to_string_pretty(&StatsDump::from(r))
            .expect("stats dump serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| FuzzError::io(&path, e))?;
        info!("campaign {}: {:?}", r.campaign_id, r.status);
    }
    Ok(results)
}

fn normalize(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| {
        p.components().collect::<PathBuf>()
    })
}

/// On-disk batch description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchFile {
    #[serde(default)]
    pub dump_dir: Option<PathBuf>,
    #[serde(default)]
    pub parallelism: Option<usize>,
    pub campaigns: Vec<CampaignEntry>,
}

/// One campaign in a batch file. Paths are relative to the batch file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignEntry {
    /// Defaults to the last component of `output_dir`.
    #[serde(default)]
    pub id: Option<String>,
    pub target: PathBuf,
    pub applet: String,
    /// Defaults to the applet's stock profile.
    #[serde(default)]
    pub harness: Option<HarnessSpec>,
    pub corpus_dir: PathBuf,
    pub criteria: TerminationCriteria,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub poll_interval_s: Option<u64>,
}

/// Reads a batch file and resolves every entry into a [`CampaignConfig`]
/// (fingerprinting targets and loading corpora).
pub fn load_batch_file(path: &Path) -> Result<(BatchFile, Vec<CampaignConfig>), FuzzError> {
    let text = fs::read_to_string(path).map_err(|e| FuzzError::io(path, e))?;
    let batch: BatchFile = serde_json::from_str(&text)
        .map_err(|e| FuzzError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let mut configs = Vec::with_capacity(batch.campaigns.len());
    for entry in &batch.campaigns {
        let target_path = resolve(&entry.target);
        let target =
            TargetBinary::from_path(&target_path).map_err(|e| FuzzError::io(&target_path, e))?;
        let corpus_dir = resolve(&entry.corpus_dir);
        let corpus = SeedCorpus::load(&corpus_dir)
            .map_err(|e| FuzzError::Config(format!("corpus {}: {e}", corpus_dir.display())))?;
        let output_dir = resolve(&entry.output_dir);
        let id = match &entry.id {
            Some(id) => id.clone(),
            None => output_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| FuzzError::Config("campaign without id or output_dir name".into()))?,
        };
        configs.push(CampaignConfig {
            id,
            target,
            applet: entry.applet.clone(),
            harness: entry
                .harness
                .clone()
                .unwrap_or_else(|| HarnessSpec::default_profile(&entry.applet)),
            corpus,
            criteria: entry.criteria,
            output_dir,
            poll_interval_s: entry.poll_interval_s.unwrap_or(DEFAULT_POLL_INTERVAL_S),
        });
    }
    Ok((batch, configs))
}
