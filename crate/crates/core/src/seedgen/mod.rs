//! Initial seed corpora: model-generated seeds, random control seeds, and
//! coverage-based corpus minimization.

mod minimize;
mod provider;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sha256_hex;

pub use minimize::{minimize_corpus, parse_showmap, CoverageOracle, OracleError, ShowmapOracle};
pub use provider::{
    parse_chat_response, ChatMessage, FixtureProvider, HttpProvider, ProviderConfig,
    ProviderError, RecordingProvider, Role, SeedProvider,
};

/// Name of the metadata sidecar inside a corpus directory.
pub const META_FILE: &str = "corpus.meta.json";

/// Transport retries per attempt before giving up on the provider.
const TRANSPORT_RETRIES: u32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum SeedGenError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("no seeds after {attempts} attempts")]
    NoSeeds { attempts: u32 },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("corpus metadata: {0}")]
    Meta(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SeedGenError + '_ {
    move |source| SeedGenError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SeedOrigin {
    Llm,
    Random,
    CrashImport,
}

impl fmt::Display for SeedOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeedOrigin::Llm => "LLM",
            SeedOrigin::Random => "RANDOM",
            SeedOrigin::CrashImport => "CRASH_IMPORT",
        })
    }
}

impl FromStr for SeedOrigin {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LLM" => Ok(SeedOrigin::Llm),
            "RANDOM" => Ok(SeedOrigin::Random),
            "CRASH_IMPORT" => Ok(SeedOrigin::CrashImport),
            other => Err(format!("unknown seed origin {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub bytes: Vec<u8>,
    pub origin: SeedOrigin,
    pub label: String,
}

/// A deduplicated set of seeds for one applet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedCorpus {
    pub seeds: Vec<Seed>,
    pub applet: String,
    pub generation_metadata: BTreeMap<String, String>,
}

impl SeedCorpus {
    /// Builds a corpus, dropping empty seeds and byte-identical repeats
    /// (first occurrence wins).
    pub fn new(
        applet: impl Into<String>,
        seeds: impl IntoIterator<Item = Seed>,
        generation_metadata: BTreeMap<String, String>,
    ) -> Self {
        let mut seen = HashSet::new();
        let seeds = seeds
            .into_iter()
            .filter(|s| !s.bytes.is_empty() && seen.insert(s.bytes.clone()))
            .collect();
        SeedCorpus {
            seeds,
            applet: applet.into(),
            generation_metadata,
        }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// Writes one file per seed, named by label.
    pub fn write_seeds(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for seed in &self.seeds {
            fs::write(dir.join(&seed.label), &seed.bytes)?;
        }
        Ok(())
    }

    /// Seed files plus the `corpus.meta.json` sidecar.
    pub fn save(&self, dir: &Path) -> Result<(), SeedGenError> {
        self.write_seeds(dir).map_err(io_err(dir))?;
        let mut meta = serde_json::Map::new();
        meta.insert("applet".into(), self.applet.clone().into());
        let origin = self.common_origin().map(|o| o.to_string());
        meta.insert("origin".into(), origin.into());
        for key in ["model_id", "prompt_sha256", "rng_seed", "created_at"] {
            meta.insert(key.into(), self.generation_metadata.get(key).cloned().into());
        }
        for (k, v) in &self.generation_metadata {
            meta.entry(k.clone()).or_insert_with(|| v.clone().into());
        }
        let path = dir.join(META_FILE);
        let mut text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Reads a directory written by [`SeedCorpus::save`]. Seed files are
    /// taken in file-name order.
    pub fn load(dir: &Path) -> Result<Self, SeedGenError> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| SeedGenError::Meta(e.to_string()))?;
        let applet = meta
            .get("applet")
            .and_then(|v| v.as_str())
            .ok_or_else(|| SeedGenError::Meta("missing applet".into()))?
            .to_string();
        let origin: SeedOrigin = meta
            .get("origin")
            .and_then(|v| v.as_str())
            .unwrap_or("CRASH_IMPORT")
            .parse()
            .map_err(SeedGenError::Meta)?;
        let generation_metadata = meta
            .iter()
            .filter(|(k, _)| k.as_str() != "applet")
            .filter_map(|(k, v)| match v {
                serde_json::Value::String(s) => Some((k.clone(), s.clone())),
                serde_json::Value::Null => None,
                other => Some((k.clone(), other.to_string())),
            })
            .collect();

        let mut names: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(Result::ok)
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name())
            .filter(|n| n != META_FILE)
            .collect();
        names.sort();
        let mut seeds = Vec::with_capacity(names.len());
        for name in names {
            let path = dir.join(&name);
            seeds.push(Seed {
                bytes: fs::read(&path).map_err(io_err(&path))?,
                origin,
                label: name.to_string_lossy().into_owned(),
            });
        }
        Ok(SeedCorpus::new(applet, seeds, generation_metadata))
    }

    fn common_origin(&self) -> Option<SeedOrigin> {
        let first = self.seeds.first()?.origin;
        self.seeds.iter().all(|s| s.origin == first).then_some(first)
    }
}

/// The two-message prompt asking the model for seeds for `applet`.
pub fn build_prompt(applet: &str) -> Result<Vec<ChatMessage>, SeedGenError> {
    if applet.trim().is_empty() {
        return Err(SeedGenError::InvalidArgument("applet name is empty".into()));
    }
    Ok(vec![
        ChatMessage {
            role: Role::System,
            content: format!(
                "You are initial seed generator for a fuzzer that has to fuzz BusyBox {applet} applet. \
                 In response only provide the list of {applet} scripts"
            ),
        },
        ChatMessage {
            role: Role::User,
            content: format!("Generate initial seed to fuzz BusyBox {applet} applet"),
        },
    ])
}

fn list_item(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    let rest = if digits > 0 {
        t[digits..].strip_prefix(['.', ')'])?
    } else {
        t.strip_prefix(['-', '*', '+', '•'])?
    };
    rest.starts_with([' ', '\t']).then(|| rest.trim())
}

fn unwrap_inline_code(s: &str) -> &str {
    match s.strip_prefix('`').and_then(|x| x.strip_suffix('`')) {
        Some(inner) if !inner.contains('`') => inner,
        _ => s,
    }
}

/// Splits a model response into seeds: fenced code blocks if there are
/// any, otherwise list items, otherwise non-empty lines.
pub fn parse_seed_response(response: &str) -> Vec<Seed> {
    let mut blocks: Vec<String> = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in response.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(body) => blocks.push(body.join("\n")),
                None => current = Some(Vec::new()),
            }
        } else if let Some(body) = current.as_mut() {
            body.push(line);
        }
    }

    let candidates: Vec<String> = if !blocks.is_empty() {
        blocks
    } else {
        let mut items: Vec<String> = Vec::new();
        let mut in_item = false;
        for line in response.lines() {
            if let Some(item) = list_item(line) {
                items.push(unwrap_inline_code(item).to_string());
                in_item = true;
            } else if in_item && line.starts_with([' ', '\t']) && !line.trim().is_empty() {
                let last = items.last_mut().expect("in_item implies an item");
                last.push('\n');
                last.push_str(line.trim());
            } else {
                in_item = false;
            }
        }
        if items.is_empty() {
            response.lines().map(str::to_string).collect()
        } else {
            items
        }
    };

    let mut seen = HashSet::new();
    candidates
        .iter()
        .map(|c| c.trim())
        .filter(|c| !c.is_empty() && seen.insert(c.to_string()))
        .enumerate()
        .map(|(i, c)| Seed {
            bytes: c.as_bytes().to_vec(),
            origin: SeedOrigin::Llm,
            label: format!("llm-{i:03}"),
        })
        .collect()
}

/// Queries `provider` until at least `min_seeds` distinct seeds are
/// collected or `max_attempts` queries have been made.
pub fn generate_llm_corpus(
    provider: &dyn SeedProvider,
    applet: &str,
    min_seeds: usize,
    max_attempts: u32,
) -> Result<SeedCorpus, SeedGenError> {
    if min_seeds == 0 || max_attempts == 0 {
        return Err(SeedGenError::InvalidArgument(
            "min_seeds and max_attempts must be at least 1".into(),
        ));
    }
    let messages = build_prompt(applet)?;
    let prompt_hash = sha256_hex(&serde_json::to_vec(&messages).expect("prompt serializes"));

    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let mut collected: Vec<Vec<u8>> = Vec::new();
    let mut attempts = 0;
    while attempts < max_attempts && collected.len() < min_seeds {
        attempts += 1;
        let text = query_with_retries(provider, &messages)?;
        for seed in parse_seed_response(&text) {
            if seen.insert(seed.bytes.clone()) {
                collected.push(seed.bytes);
            }
        }
    }
    if collected.is_empty() {
        return Err(SeedGenError::NoSeeds { attempts });
    }

    let mut meta = BTreeMap::new();
    meta.insert("origin".into(), SeedOrigin::Llm.to_string());
    meta.insert("model_id".into(), provider.model_id().to_string());
    meta.insert("prompt_sha256".into(), prompt_hash);
    meta.insert("created_at".into(), chrono::Utc::now().to_rfc3339());
    meta.insert("attempts".into(), attempts.to_string());
    if collected.len() < min_seeds {
        let note = format!("partial corpus: {} of {min_seeds} requested seeds", collected.len());
        warn!("{applet}: {note}");
        meta.insert("warning".into(), note);
    }
    let seeds = collected.into_iter().enumerate().map(|(i, bytes)| Seed {
        bytes,
        origin: SeedOrigin::Llm,
        label: format!("{applet}-{i:03}"),
    });
    Ok(SeedCorpus::new(applet, seeds, meta))
}

fn query_with_retries(
    provider: &dyn SeedProvider,
    messages: &[ChatMessage],
) -> Result<String, ProviderError> {
    let mut tries = 0;
    loop {
        match provider.complete(messages) {
            Err(e) if e.is_transient() && tries < TRANSPORT_RETRIES => {
                tries += 1;
                warn!("provider error ({e}), retry {tries}/{TRANSPORT_RETRIES}");
                thread::sleep(Duration::from_millis(250 << tries));
            }
            other => return other,
        }
    }
}

/// `count` distinct seeds of printable ASCII with lengths uniform in
/// `[min_len, max_len]`. Output depends only on the arguments.
pub fn generate_random_corpus(
    applet: &str,
    count: usize,
    min_len: usize,
    max_len: usize,
    rng_seed: u64,
) -> Result<SeedCorpus, SeedGenError> {
    if count == 0 || min_len == 0 || min_len > max_len {
        return Err(SeedGenError::InvalidArgument(format!(
            "need count >= 1 and 1 <= min_len <= max_len (got {count}, {min_len}, {max_len})"
        )));
    }
    // 95 printable characters
    let capacity: f64 = (min_len..=max_len).map(|l| 95f64.powi(l.min(64) as i32)).sum();
    if (count as f64) > capacity {
        return Err(SeedGenError::InvalidArgument(format!(
            "cannot draw {count} distinct seeds of length {min_len}..={max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut seen = HashSet::new();
    let mut seeds = Vec::with_capacity(count);
    while seeds.len() < count {
        let len = rng.random_range(min_len..=max_len);
        let bytes: Vec<u8> = (0..len).map(|_| rng.random_range(0x20u8..=0x7e)).collect();
        if seen.insert(bytes.clone()) {
            seeds.push(Seed {
                bytes,
                origin: SeedOrigin::Random,
                label: format!("{applet}-rnd-{:03}", seeds.len()),
            });
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert("origin".into(), SeedOrigin::Random.to_string());
    meta.insert("rng_seed".into(), rng_seed.to_string());
    meta.insert("length_range".into(), format!("{min_len}..={max_len}"));
    Ok(SeedCorpus::new(applet, seeds, meta))
}
