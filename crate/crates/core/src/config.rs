//! Application configuration: one TOML file holding every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{PhaticPolicy, SegmenterConfig};
use crate::asr::{AsrMode, DEFAULT_WINDOW};
use crate::bus::DEFAULT_QUEUE_CAPACITY;
use crate::mock::{LatencyProfile, MockProfiles};
use crate::side::{DEFAULT_CAPTION_PERIOD_MS, DEFAULT_EMA_ALPHA, DEFAULT_SIMILARITY_THRESHOLD};
use crate::tts::DEFAULT_CONCURRENCY;
use crate::turn::FalseInterruptRules;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8765";
pub const DEFAULT_MAX_SESSIONS: usize = 16;
pub const DEFAULT_CHUNK_MS: u64 = 100;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config at `{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimiterConfig {
    pub max_sessions: usize,
}

impl Default for LimiterConfig {
    fn default() -> Self {
        Self {
            max_sessions: DEFAULT_MAX_SESSIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsrConfig {
    pub mode: AsrMode,
    pub window: usize,
    pub latency: LatencyProfile,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            mode: AsrMode::PseudoStreaming,
            window: DEFAULT_WINDOW,
            latency: LatencyProfile::new(30.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub latency: LatencyProfile,
    pub segmenter: SegmenterConfig,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            latency: LatencyProfile::new(80.0, 15.0),
            segmenter: SegmenterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsSection {
    pub latency: LatencyProfile,
    pub chars_per_second: f64,
    pub concurrency: usize,
    pub native_emotion_control: bool,
}

impl Default for TtsSection {
    fn default() -> Self {
        Self {
            latency: LatencyProfile::new(60.0, 2.0),
            chars_per_second: 5.0,
            concurrency: DEFAULT_CONCURRENCY,
            native_emotion_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SideChannelConfig {
    pub caption_enabled: bool,
    pub caption_period_ms: u64,
    pub captioner_latency: LatencyProfile,
    pub rewriter_enabled: bool,
    pub speaker_enabled: bool,
    pub embedder_latency: LatencyProfile,
    pub ema_alpha: f64,
    pub similarity_threshold: f64,
    /// Reserved slot for a paralinguistic channel; no backend ships.
    pub paralinguistic_enabled: bool,
}

impl Default for SideChannelConfig {
    fn default() -> Self {
        Self {
            caption_enabled: true,
            caption_period_ms: DEFAULT_CAPTION_PERIOD_MS,
            captioner_latency: LatencyProfile::fixed(400.0),
            rewriter_enabled: false,
            speaker_enabled: true,
            embedder_latency: LatencyProfile::fixed(50.0),
            ema_alpha: DEFAULT_EMA_ALPHA,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            paralinguistic_enabled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThinkingConfig {
    pub latency: LatencyProfile,
}

impl Default for ThinkingConfig {
    fn default() -> Self {
        Self {
            latency: LatencyProfile::fixed(2000.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TelemetryConfig {
    pub enabled: bool,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub listen: String,
    /// Scenario directory holding the scripts the mock backends follow.
    pub scenario: Option<PathBuf>,
    pub chunk_ms: u64,
    pub seed: u64,
    pub queue_capacity: usize,
    pub limiter: LimiterConfig,
    pub asr: AsrConfig,
    pub llm: LlmConfig,
    pub tts: TtsSection,
    pub rules: FalseInterruptRules,
    pub side_channels: SideChannelConfig,
    pub phatic: PhaticPolicy,
    pub thinking: ThinkingConfig,
    pub telemetry: TelemetryConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.to_string(),
            scenario: None,
            chunk_ms: DEFAULT_CHUNK_MS,
            seed: 0,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            limiter: LimiterConfig::default(),
            asr: AsrConfig::default(),
            llm: LlmConfig::default(),
            tts: TtsSection::default(),
            rules: FalseInterruptRules::default(),
            side_channels: SideChannelConfig::default(),
            phatic: PhaticPolicy::default(),
            thinking: ThinkingConfig::default(),
            telemetry: TelemetryConfig::default(),
        }
    }
}

/// The slice of configuration a session's managers read.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub chunk_ms: u64,
    pub asr_mode: AsrMode,
    pub window: usize,
    pub tts_concurrency: usize,
    pub rules: FalseInterruptRules,
    pub phatic: PhaticPolicy,
    pub segmenter: SegmenterConfig,
    pub caption_enabled: bool,
    pub caption_period_ms: u64,
    pub speaker_enabled: bool,
    pub ema_alpha: f64,
    pub similarity_threshold: f64,
    pub telemetry_enabled: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        AppConfig::default().session_config()
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chunk_ms == 0 {
            return Err(invalid("chunk_ms", "must be positive"));
        }
        if self.window == 0 {
            return Err(invalid("asr.window", "must be at least 1"));
        }
        if self.tts_concurrency == 0 {
            return Err(invalid("tts.concurrency", "must be at least 1"));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha <= 1.0) {
            return Err(invalid("side_channels.ema_alpha", "must lie in (0, 1]"));
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return Err(invalid("side_channels.similarity_threshold", "must lie in [-1, 1]"));
        }
        if self.caption_period_ms == 0 {
            return Err(invalid("side_channels.caption_period_ms", "must be positive"));
        }
        if self.segmenter.min_len == 0 || self.segmenter.min_len > self.segmenter.max_len {
            return Err(invalid("llm.segmenter", "need 0 < min_len <= max_len"));
        }
        if self.phatic.phrases.is_empty() {
            return Err(invalid("phatic.phrases", "at least one phrase is required"));
        }
        Ok(())
    }
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| invalid("", e.message()))?;
        let cfg: AppConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            invalid(&key, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative scenario paths are taken from the config file's directory
        if let (Some(s), Some(dir)) = (&cfg.scenario, path.parent()) {
            if s.is_relative() {
                cfg.scenario = Some(dir.join(s));
            }
        }
        cfg.validate_paths()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.limiter.max_sessions == 0 {
            return Err(invalid("limiter.max_sessions", "must be positive"));
        }
        if self.queue_capacity == 0 {
            return Err(invalid("queue_capacity", "must be positive"));
        }
        if !(self.tts.chars_per_second.is_finite() && self.tts.chars_per_second > 0.0) {
            return Err(invalid("tts.chars_per_second", "must be positive"));
        }
        for (key, p) in [
            ("asr.latency", &self.asr.latency),
            ("llm.latency", &self.llm.latency),
            ("tts.latency", &self.tts.latency),
            ("side_channels.captioner_latency", &self.side_channels.captioner_latency),
            ("side_channels.embedder_latency", &self.side_channels.embedder_latency),
            ("thinking.latency", &self.thinking.latency),
        ] {
            if !p.is_valid() {
                return Err(invalid(key, "latencies must be finite and non-negative"));
            }
        }
        if self.side_channels.paralinguistic_enabled {
            return Err(invalid(
                "side_channels.paralinguistic_enabled",
                "no paralinguistic backend is available",
            ));
        }
        self.session_config().validate()
    }

    pub fn validate_paths(&self) -> Result<(), ConfigError> {
        match &self.scenario {
            Some(p) if !p.is_dir() => Err(invalid("scenario", format!("{} does not exist", p.display()))),
            _ => Ok(()),
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            chunk_ms: self.chunk_ms,
            asr_mode: self.asr.mode,
            window: self.asr.window,
            tts_concurrency: self.tts.concurrency,
            rules: self.rules.clone(),
            phatic: self.phatic.clone(),
            segmenter: self.llm.segmenter,
            caption_enabled: self.side_channels.caption_enabled,
            caption_period_ms: self.side_channels.caption_period_ms,
            speaker_enabled: self.side_channels.speaker_enabled,
            ema_alpha: self.side_channels.ema_alpha,
            similarity_threshold: self.side_channels.similarity_threshold,
            telemetry_enabled: self.telemetry.enabled,
        }
    }

    pub fn mock_profiles(&self) -> MockProfiles {
        MockProfiles {
            asr: self.asr.latency,
            llm: self.llm.latency,
            tts: self.tts.latency,
            captioner: self.side_channels.captioner_latency,
            embedder: self.side_channels.embedder_latency,
            thinker: self.thinking.latency,
            tts_chars_per_second: self.tts.chars_per_second,
            native_emotion_control: self.tts.native_emotion_control,
            asr_streaming: self.asr.mode == AsrMode::Streaming,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(AppConfig::from_toml_str("").unwrap(), AppConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = AppConfig::default();
        cfg.asr.mode = AsrMode::Streaming;
        cfg.asr.latency.jitter_ms = 3.5;
        cfg.rules.filler_words.push("well".into());
        let again = AppConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(AppConfig::from_toml_str(&again.to_toml_string()).unwrap(), again);
    }

    #[test]
    fn wrong_type_names_the_key() {
        let err = AppConfig::from_toml_str("[rules]\nfiller_words = 3\n").unwrap_err();
        match err {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "rules.filler_words"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(AppConfig::from_toml_str("[limiter]\nmax = 3\n").is_err());
    }

    #[test]
    fn range_checks() {
        assert!(AppConfig::from_toml_str("[limiter]\nmax_sessions = 0\n").is_err());
        assert!(AppConfig::from_toml_str("[side_channels]\nema_alpha = 0.0\n").is_err());
        assert!(AppConfig::from_toml_str("[asr.latency]\nfixed_ms = -1.0\n").is_err());
    }

    #[test]
    fn missing_scenario_dir_rejected() {
        let cfg = AppConfig {
            scenario: Some("/definitely/not/here".into()),
            ..AppConfig::default()
        };
        assert!(cfg.validate_paths().is_err());
    }
}
