//! Completion backends: an HTTP client for a real inference server and an
//! in-process stub selected with the `stub:` URL scheme.

use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::template::{render_pair, InstructionResponsePair, PairFormat, SentinelConfig};

/// Environment variable holding the bearer token for HTTP backends.
pub const TOKEN_ENV: &str = "IPT_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub stop: Vec<String>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
struct CompletionResponse {
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Network or server-side failure worth retrying.
    #[error("transport: {0}")]
    Transport(String),
    /// The request itself was rejected.
    #[error("rejected: {0}")]
    Rejected(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// Returns only the generated continuation, with any hit stop string removed.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;
}

/// Truncates `text` at the first occurrence of any stop string.
pub fn apply_stop<'a>(text: &'a str, stop: &[String]) -> &'a str {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Delays before each retry; its length is the number of retries.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            backoff_ms: vec![1_000, 4_000, 16_000],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { backoff_ms: Vec::new() }
    }

    pub fn run(
        &self,
        backend: &dyn CompletionBackend,
        req: &CompletionRequest,
    ) -> (Result<String, BackendError>, usize) {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match backend.complete(req) {
                Err(e) if e.is_retryable() && attempts <= self.backoff_ms.len() => {
                    std::thread::sleep(Duration::from_millis(self.backoff_ms[attempts - 1]));
                }
                other => return (other, attempts),
            }
        }
    }
}

pub struct HttpBackend {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        HttpBackend {
            url: url.into(),
            token,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let mut call = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            call = call.set("Authorization", &format!("Bearer {token}"));
        }
        let body = serde_json::to_value(req).map_err(|e| BackendError::Rejected(e.to_string()))?;
        match call.send_json(body) {
            Ok(resp) => {
                let parsed: CompletionResponse = resp
                    .into_json()
                    .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
                Ok(apply_stop(&parsed.text, &req.stop).to_string())
            }
            Err(ureq::Error::Status(code, resp)) => {
                let msg = format!("{code}: {}", resp.into_string().unwrap_or_default());
                if code == 429 || code >= 500 {
                    Err(BackendError::Transport(msg))
                } else {
                    Err(BackendError::Rejected(msg))
                }
            }
            Err(e) => Err(BackendError::Transport(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StubMode {
    /// Builds pairs from words of the text being synthesized for.
    Echo { pairs: usize, seed: u64 },
    /// Always returns the same continuation.
    Fixed(String),
    /// Returns text with no pair structure.
    Garbage,
}

/// Deterministic stand-in for the synthesizer model.
///
/// URL forms: `stub:`, `stub:echo?pairs=3&seed=1`, `stub:garbage`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StubBackend {
    mode: StubMode,
    cfg: SentinelConfig,
}

impl StubBackend {
    pub fn new(mode: StubMode, cfg: SentinelConfig) -> Self {
        StubBackend { mode, cfg }
    }

    pub fn echo(pairs: usize, seed: u64) -> Self {
        StubBackend::new(StubMode::Echo { pairs, seed }, SentinelConfig::default())
    }

    pub fn parse(url: &str, cfg: &SentinelConfig) -> Result<Self> {
        let rest = url
            .strip_prefix("stub:")
            .ok_or_else(|| Error::Backend(format!("not a stub url: {url}")))?;
        let (kind, query) = rest.split_once('?').unwrap_or((rest, ""));
        let mut pairs = 3;
        let mut seed = 0;
        for kv in query.split('&').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Backend(format!("bad stub parameter {kv:?}")))?;
            let n: u64 = v
                .parse()
                .map_err(|_| Error::Backend(format!("bad stub value {kv:?}")))?;
            match k {
                "pairs" => pairs = n as usize,
                "seed" => seed = n,
                _ => return Err(Error::Backend(format!("unknown stub parameter {k:?}"))),
            }
        }
        let mode = match kind {
            "" | "echo" => StubMode::Echo { pairs, seed },
            "garbage" => StubMode::Garbage,
            other => return Err(Error::Backend(format!("unknown stub mode {other:?}"))),
        };
        Ok(StubBackend::new(mode, cfg.clone()))
    }

    /// Text of the last context span in the prompt.
    fn current_text<'a>(&self, prompt: &'a str) -> &'a str {
        let Some(open) = prompt.rfind(self.cfg.context_open.as_str()) else {
            return "";
        };
        let body = &prompt[open + self.cfg.context_open.len()..];
        let close = body.find(self.cfg.context_close.as_str()).unwrap_or(body.len());
        body[..close].trim()
    }

    fn echo_pairs(&self, text: &str, n: usize, seed: u64) -> Vec<InstructionResponsePair> {
        let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(text).finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        let words: Vec<&str> = text
            .split_whitespace()
            .filter(|w| self.cfg.find_collision(w).is_none())
            .collect();
        let pick = |rng: &mut ChaCha8Rng| -> String {
            words.choose(rng).map_or_else(|| "nothing".to_string(), |w| w.to_string())
        };
        (0..n)
            .map(|i| {
                let topic = pick(&mut rng);
                let answer = (0..rng.gen_range(1..=4)).map(|_| pick(&mut rng)).collect::<Vec<_>>().join(" ");
                let instruction = format!("Question {}: what does the text say about {topic}?", i + 1);
                match PairFormat::ALL[rng.gen_range(0..4)] {
                    PairFormat::FreeForm => InstructionResponsePair::free_form(instruction, answer),
                    PairFormat::MultipleChoice => {
                        InstructionResponsePair::multiple_choice(instruction, vec![answer.clone(), pick(&mut rng)], answer)
                    }
                    PairFormat::FreeFormCot => {
                        InstructionResponsePair::free_form(instruction, answer).with_cot(format!("The text mentions {topic}."))
                    }
                    PairFormat::MultipleChoiceCot => {
                        InstructionResponsePair::multiple_choice(instruction, vec![pick(&mut rng), answer.clone()], answer)
                            .with_cot(format!("The text mentions {topic}."))
                    }
                }
            })
            .collect()
    }
}

impl CompletionBackend for StubBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let generated = match &self.mode {
            StubMode::Fixed(s) => s.clone(),
            StubMode::Garbage => "lorem ipsum without any structure".to_string(),
            StubMode::Echo { pairs, seed } => {
                let text = self.current_text(&req.prompt);
                // Pairs whose random words happen to form a template marker
                // are dropped rather than rendered ambiguously.
                let rendered: Vec<String> = self
                    .echo_pairs(text, *pairs, *seed)
                    .iter()
                    .filter_map(|p| render_pair(p, &self.cfg).ok())
                    .collect();
                format!("{} {}", rendered.join(&self.cfg.joiner), self.cfg.example_close)
            }
        };
        Ok(apply_stop(&generated, &req.stop).to_string())
    }
}

/// Opens a backend from a URL: `stub:...` or `http(s)://...`.
pub fn open_backend(url: &str, cfg: &SentinelConfig, timeout: Duration) -> Result<Box<dyn CompletionBackend>> {
    if url.starts_with("stub:") {
        return Ok(Box::new(StubBackend::parse(url, cfg)?));
    }
    if url.starts_with("http://") || url.starts_with("https://") {
        let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        return Ok(Box::new(HttpBackend::new(url, token, timeout)));
    }
    Err(Error::Backend(format!("unsupported backend url {url:?}")))
}
