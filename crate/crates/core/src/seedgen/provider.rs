//! Chat-completion providers: the live HTTP client and a record/replay
//! fixture used by tests and offline runs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("credentials: {0}")]
    Credentials(String),
    #[error("unexpected response: {0}")]
    BadResponse(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
}

impl ProviderError {
    /// Worth another try with the same request.
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_response_bytes: u64,
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub credentials_env_var: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            model_id: "gpt-4-0613".into(),
            temperature: 0.7,
            max_response_bytes: 1 << 20,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            credentials_env_var: "OPENAI_API_KEY".into(),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.model_id.trim().is_empty() {
            return Err(ProviderError::Config("model_id is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ProviderError::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_response_bytes == 0 {
            return Err(ProviderError::Config("max_response_bytes must be positive".into()));
        }
        Ok(())
    }
}

/// Something that answers a chat prompt with text.
pub trait SeedProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError>;
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: &'a [ChatMessage],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

/// Live chat-completions client. The API key is read from the environment
/// at call time and never stored.
pub struct HttpProvider {
    config: ProviderConfig,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(180)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpProvider { config, agent })
    }
}

impl SeedProvider for HttpProvider {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        let var = &self.config.credentials_env_var;
        let key = std::env::var(var)
            .map_err(|_| ProviderError::Credentials(format!("environment variable {var} is not set")))?;
        let request = ChatRequest {
            model: &self.config.model_id,
            temperature: self.config.temperature,
            messages,
        };
        let mut response = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&request)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let mut body = String::new();
        response
            .body_mut()
            .as_reader()
            .take(self.config.max_response_bytes)
            .read_to_string(&mut body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(ProviderError::Credentials(format!("HTTP {status}"))),
            429 | 500..=599 => return Err(ProviderError::Transport(format!("HTTP {status}"))),
            _ => return Err(ProviderError::BadResponse(format!("HTTP {status}: {body}"))),
        }
        parse_chat_response(&body)
    }
}

/// Pulls the first choice's text out of a chat-completions response body.
pub fn parse_chat_response(body: &str) -> Result<String, ProviderError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| ProviderError::BadResponse(e.to_string()))?;
    parsed
        .choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| ProviderError::BadResponse("no choices in response".into()))
}

/// Replays canned responses from a directory of numbered text files
/// (`1.txt`, `2.txt`, ...), in numeric order, wrapping around at the end.
#[derive(Debug)]
pub struct FixtureProvider {
    model_id: String,
    responses: Vec<String>,
    cursor: AtomicUsize,
}

impl FixtureProvider {
    pub fn new(model_id: impl Into<String>, responses: Vec<String>) -> Self {
        FixtureProvider {
            model_id: model_id.into(),
            responses,
            cursor: AtomicUsize::new(0),
        }
    }

    pub fn load(dir: &Path, model_id: impl Into<String>) -> Result<Self, ProviderError> {
        let entries = fs::read_dir(dir)
            .map_err(|e| ProviderError::Config(format!("{}: {e}", dir.display())))?;
        let mut numbered: Vec<(u64, PathBuf)> = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            let number = path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(|s| s.trim_start_matches(|c: char| !c.is_ascii_digit()))
                .and_then(|s| {
                    s.split(|c: char| !c.is_ascii_digit())
                        .next()
                        .and_then(|d| d.parse().ok())
                });
            if let (Some(n), true) = (number, path.is_file()) {
                numbered.push((n, path));
            }
        }
        if numbered.is_empty() {
            return Err(ProviderError::Config(format!(
                "no numbered response files in {}",
                dir.display()
            )));
        }
        numbered.sort();
        let responses = numbered
            .iter()
            .map(|(_, p)| {
                fs::read_to_string(p)
                    .map_err(|e| ProviderError::Config(format!("{}: {e}", p.display())))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(model_id, responses))
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }
}

impl SeedProvider for FixtureProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, _messages: &[ChatMessage]) -> Result<String, ProviderError> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        Ok(self.responses[i % self.responses.len()].clone())
    }
}

/// Wraps a provider and saves every response as `<n>.txt` so the session
/// can later be replayed with [`FixtureProvider`].
pub struct RecordingProvider<P> {
    inner: P,
    dir: PathBuf,
    next: Mutex<usize>,
}

impl<P: SeedProvider> RecordingProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        RecordingProvider {
            inner,
            dir: dir.into(),
            next: Mutex::new(1),
        }
    }
}

impl<P: SeedProvider> SeedProvider for RecordingProvider<P> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String, ProviderError> {
        let text = self.inner.complete(messages)?;
        let mut next = self.next.lock().unwrap();
        fs::create_dir_all(&self.dir)
            .and_then(|_| fs::write(self.dir.join(format!("{}.txt", *next)), &text))
            .map_err(|e| ProviderError::Config(format!("recording to {}: {e}", self.dir.display())))?;
        *next += 1;
        Ok(text)
    }
}
