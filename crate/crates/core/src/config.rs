//! Pipeline configuration: one JSON file, validated in full so that every
//! problem is reported at once.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::RetryPolicy;
use crate::error::{Error, Result};
use crate::mixing::Repeat;
use crate::packing::WhitespaceCounter;
use crate::synthesis::SynthesisSettings;
use crate::template::SentinelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterChoice {
    /// 1.3 tokens per whitespace word.
    Whitespace,
    /// One token per whitespace word.
    Words,
}

impl CounterChoice {
    pub fn counter(self) -> WhitespaceCounter {
        match self {
            CounterChoice::Whitespace => WhitespaceCounter::default(),
            CounterChoice::Words => WhitespaceCounter::words(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    /// `stub:...`, `http://...` or `https://...`.
    pub url: String,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: Vec<u64>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            url: "stub:echo".into(),
            in_flight: default_in_flight(),
            max_new_tokens: default_max_new_tokens(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
            retry_backoff_ms: default_backoff(),
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceLengths {
    /// Packed synthesizer-tuning sequences.
    pub tuning: usize,
    /// Prompt plus generation during synthesis.
    pub inference: usize,
}

impl Default for SequenceLengths {
    fn default() -> Self {
        SequenceLengths { tuning: 4096, inference: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub sentinels: SentinelConfig,
    pub num_rounds: usize,
    #[serde(default = "one")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Built-in pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_pool: Option<PathBuf>,
    /// Extra mix sources (e.g. general instructions) added next to the
    /// pipeline's own augmented and raw streams.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_spec: Option<PathBuf>,
    #[serde(default = "repeat_one")]
    pub augmented_repeat: Repeat,
    #[serde(default = "repeat_one")]
    pub raw_repeat: Repeat,
    #[serde(default = "default_counter")]
    pub token_counter: CounterChoice,
    #[serde(default)]
    pub max_seq_len: SequenceLengths,
}

fn one() -> f64 {
    1.0
}
fn repeat_one() -> Repeat {
    Repeat::whole(1).expect("1 is a valid repeat")
}
fn default_counter() -> CounterChoice {
    CounterChoice::Whitespace
}
fn default_in_flight() -> usize {
    16
}
fn default_max_new_tokens() -> usize {
    700
}
fn default_timeout() -> u64 {
    120
}
fn default_backoff() -> Vec<u64> {
    RetryPolicy::default().backoff_ms
}

impl PipelineConfig {
    pub fn new(corpus: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, num_rounds: usize) -> Self {
        PipelineConfig {
            corpus: corpus.into(),
            out_dir: out_dir.into(),
            sentinels: SentinelConfig::default(),
            num_rounds,
            fraction: 1.0,
            seed: 0,
            backend: BackendConfig::default(),
            template_pool: None,
            mix_spec: None,
            augmented_repeat: repeat_one(),
            raw_repeat: repeat_one(),
            token_counter: default_counter(),
            max_seq_len: SequenceLengths::default(),
        }
    }

    /// Parses a config file; relative paths are resolved against its
    /// directory. No validation beyond the JSON shape.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&raw).map_err(|e| Error::ConfigInvalid(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() && p.as_os_str() != "-" {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.corpus);
        resolve(&mut cfg.out_dir);
        cfg.template_pool.as_mut().map(resolve);
        cfg.mix_spec.as_mut().map(resolve);
        Ok(cfg)
    }

    /// Every violation, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.corpus.is_file() {
            v.push(format!("corpus: {} does not exist", self.corpus.display()));
        }
        if let Err(e) = self.sentinels.validate() {
            v.push(format!("sentinels: {e}"));
        }
        if self.num_rounds < 1 {
            v.push("num_rounds: must be at least 1".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            v.push(format!("fraction: {} is outside (0, 1]", self.fraction));
        }
        let url = &self.backend.url;
        if !(url.starts_with("stub:") || url.starts_with("http://") || url.starts_with("https://")) {
            v.push(format!("backend.url: unsupported scheme in {url:?}"));
        }
        if self.backend.in_flight == 0 {
            v.push("backend.in_flight: must be at least 1".into());
        }
        if self.backend.max_new_tokens == 0 {
            v.push("backend.max_new_tokens: must be at least 1".into());
        }
        if let Some(p) = &self.template_pool {
            if !p.is_file() {
                v.push(format!("template_pool: {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.mix_spec {
            if !p.is_file() {
                v.push(format!("mix_spec: {} does not exist", p.display()));
            }
        }
        if self.max_seq_len.tuning == 0 {
            v.push("max_seq_len.tuning: must be at least 1".into());
        }
        if self.max_seq_len.inference <= self.backend.max_new_tokens {
            v.push(format!(
                "max_seq_len.inference: {} leaves no room for prompts after {} new tokens",
                self.max_seq_len.inference, self.backend.max_new_tokens
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(v))
        }
    }

    pub fn synthesis_settings(&self) -> SynthesisSettings {
        SynthesisSettings {
            sentinels: self.sentinels.clone(),
            max_new_tokens: self.backend.max_new_tokens,
            prompt_budget: self.max_seq_len.inference.saturating_sub(self.backend.max_new_tokens),
            temperature: self.backend.temperature,
            in_flight: self.backend.in_flight,
            retry: RetryPolicy { backoff_ms: self.backend.retry_backoff_ms.clone() },
        }
    }
}

/// Loads and fully validates a config file.
pub fn validate_config(path: &Path) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}
