//! Deterministic, latency-configurable stand-ins for every model category.
//!
//! Latencies are realized with `tokio::time::sleep`, so on a paused
//! runtime clock they cost no wall time and are exact.

mod asr;
mod llm;
mod side;
mod tts;

pub use asr::{AsrCall, AsrCallKind, MockAsr};
pub use llm::MockLlm;
pub use side::{
    normalize, tiered_filter, MockCaptioner, MockEmbedder, MockRewriter, MockThinker, MockTools,
    COVERAGE_HIGH, COVERAGE_MID, EMBEDDING_DIM,
};
pub use tts::{MockTts, TtsCall};

use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Models;
use crate::scenario::Scenario;

/// Per-call latency: `fixed_ms + per_unit_ms × units`, plus uniform jitter
/// in `[0, jitter_ms]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    #[serde(default)]
    pub fixed_ms: f64,
    #[serde(default)]
    pub per_unit_ms: f64,
    #[serde(default)]
    pub jitter_ms: f64,
}

impl LatencyProfile {
    pub const ZERO: LatencyProfile = LatencyProfile {
        fixed_ms: 0.0,
        per_unit_ms: 0.0,
        jitter_ms: 0.0,
    };

    pub fn fixed(ms: f64) -> Self {
        Self {
            fixed_ms: ms,
            ..Self::ZERO
        }
    }

    pub fn new(fixed_ms: f64, per_unit_ms: f64) -> Self {
        Self {
            fixed_ms,
            per_unit_ms,
            jitter_ms: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.fixed_ms, self.per_unit_ms, self.jitter_ms]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    /// Latency without jitter.
    pub fn nominal(&self, units: f64) -> Duration {
        Duration::from_secs_f64((self.fixed_ms + self.per_unit_ms * units).max(0.0) / 1000.0)
    }
}

/// Seeded jitter source shared by one backend instance.
#[derive(Debug)]
pub struct Jitter {
    rng: Mutex<ChaCha8Rng>,
}

impl Jitter {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn latency(&self, profile: &LatencyProfile, units: f64) -> Duration {
        let base = profile.nominal(units);
        if profile.jitter_ms <= 0.0 {
            return base;
        }
        let extra: f64 = self.rng.lock().random_range(0.0..=profile.jitter_ms);
        base + Duration::from_secs_f64(extra / 1000.0)
    }
}

/// Latency profiles for a full mock model set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MockProfiles {
    pub asr: LatencyProfile,
    pub llm: LatencyProfile,
    pub tts: LatencyProfile,
    pub captioner: LatencyProfile,
    pub embedder: LatencyProfile,
    pub thinker: LatencyProfile,
    pub tts_chars_per_second: f64,
    pub native_emotion_control: bool,
    pub asr_streaming: bool,
    pub seed: u64,
}

/// Typed handles to a mock model set, kept alongside the erased [`Models`]
/// so tests and the bench can read call logs.
#[derive(Clone)]
pub struct MockModels {
    pub asr: Arc<MockAsr>,
    pub llm: Arc<MockLlm>,
    pub tts: Arc<MockTts>,
    pub captioner: Arc<MockCaptioner>,
    pub embedder: Arc<MockEmbedder>,
    pub thinker: Arc<MockThinker>,
    pub tools: Arc<MockTools>,
    pub rewriter: Arc<MockRewriter>,
}

impl MockModels {
    pub fn new(scenario: &Scenario, p: &MockProfiles) -> Self {
        let scenario = Arc::new(scenario.clone());
        Self {
            asr: Arc::new(MockAsr::new(scenario.clone(), p.asr, p.seed).with_streaming(p.asr_streaming)),
            llm: Arc::new(MockLlm::new(scenario.clone(), p.llm, p.seed.wrapping_add(1))),
            tts: Arc::new(
                MockTts::new(p.tts, p.tts_chars_per_second, p.seed.wrapping_add(2))
                    .with_native_emotion(p.native_emotion_control),
            ),
            captioner: Arc::new(MockCaptioner::new(scenario.clone(), p.captioner)),
            embedder: Arc::new(MockEmbedder::new(scenario.clone(), p.embedder)),
            thinker: Arc::new(MockThinker::new(p.thinker)),
            tools: Arc::new(MockTools::new(scenario.clone())),
            rewriter: Arc::new(MockRewriter::new(scenario)),
        }
    }

    pub fn models(&self, rewriter_enabled: bool) -> Models {
        Models {
            asr: self.asr.clone(),
            llm: self.llm.clone(),
            tts: self.tts.clone(),
            captioner: self.captioner.clone(),
            rewriter: rewriter_enabled.then(|| self.rewriter.clone() as _),
            embedder: self.embedder.clone(),
            thinker: self.thinker.clone(),
            tools: self.tools.clone(),
        }
    }
}
