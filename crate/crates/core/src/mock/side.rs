use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Jitter, LatencyProfile};
use crate::audio::{decode_watermark, WatermarkPos, WATERMARK_GROUP};
use crate::backend::{
    AudioSpan, BackendError, Captioner, Embedder, Rewriter, ThinkingBackend, ToolBackend,
};
use crate::scenario::{Scenario, SearchHit, Utterance};

pub const EMBEDDING_DIM: usize = 64;

/// Coverage at or above which a hit contributes its snippet.
pub const COVERAGE_HIGH: f64 = 0.7;
/// Coverage at or above which a hit contributes its full page.
pub const COVERAGE_MID: f64 = 0.4;

/// Watermark of the most recent tagged group in a span.
fn last_tag(samples: &[i16]) -> Option<WatermarkPos> {
    let groups = samples.len() / WATERMARK_GROUP;
    (0..groups)
        .rev()
        .find_map(|g| decode_watermark(&samples[g * WATERMARK_GROUP..]))
}

fn tagged_utterance<'a>(scenario: &'a Scenario, span: &AudioSpan) -> Result<&'a Utterance, BackendError> {
    let pos = last_tag(&span.samples).ok_or(BackendError::UntaggedAudio)?;
    scenario
        .utterances
        .get(pos.utterance as usize)
        .ok_or(BackendError::UntaggedAudio)
}

/// Scene captioner: maps the scene tag of the newest audio in the window
/// to its scripted description.
pub struct MockCaptioner {
    scenario: Arc<Scenario>,
    profile: LatencyProfile,
    jitter: Jitter,
}

impl MockCaptioner {
    pub fn new(scenario: Arc<Scenario>, profile: LatencyProfile) -> Self {
        Self {
            scenario,
            profile,
            jitter: Jitter::new(11),
        }
    }

    pub fn caption_for_scene(&self, scene: &str) -> String {
        self.scenario
            .scenes
            .captions
            .get(scene)
            .cloned()
            .unwrap_or_else(|| scene.to_string())
    }
}

#[async_trait]
impl Captioner for MockCaptioner {
    async fn caption(&self, window: AudioSpan) -> Result<String, BackendError> {
        let latency = self.jitter.latency(&self.profile, window.seconds());
        tokio::time::sleep(latency).await;
        let utt = tagged_utterance(&self.scenario, &window)?;
        Ok(self.caption_for_scene(&utt.scene))
    }
}

/// Caption condenser backed by the scene table's rewrite map.
pub struct MockRewriter {
    scenario: Arc<Scenario>,
}

impl MockRewriter {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        Self { scenario }
    }
}

#[async_trait]
impl Rewriter for MockRewriter {
    async fn rewrite(&self, text: String) -> Result<String, BackendError> {
        Ok(self.scenario.scenes.rewrites.get(&text).cloned().unwrap_or(text))
    }
}

/// Voiceprint extractor: one fixed unit vector per voice tag.
pub struct MockEmbedder {
    scenario: Arc<Scenario>,
    profile: LatencyProfile,
    jitter: Jitter,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-12 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

impl MockEmbedder {
    pub fn new(scenario: Arc<Scenario>, profile: LatencyProfile) -> Self {
        Self {
            scenario,
            profile,
            jitter: Jitter::new(13),
        }
    }

    /// The embedding every utterance of `voice` maps to.
    pub fn voice_embedding(&self, voice: &str) -> Vec<f64> {
        if let Some(v) = self.scenario.voices.speakers.get(voice).and_then(|v| normalize(v)) {
            return v;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(voice));
        let raw: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&raw).expect("random vector is nonzero")
    }
}

#[async_trait]
impl Embedder for MockEmbedder {
    async fn embed(&self, audio: AudioSpan) -> Result<Vec<f64>, BackendError> {
        let latency = self.jitter.latency(&self.profile, audio.seconds());
        tokio::time::sleep(latency).await;
        let utt = tagged_utterance(&self.scenario, &audio)?;
        Ok(self.voice_embedding(&utt.voice))
    }
}

/// Deliberation stub: waits, then summarizes the query verbatim.
pub struct MockThinker {
    profile: LatencyProfile,
}

impl MockThinker {
    pub fn new(profile: LatencyProfile) -> Self {
        Self { profile }
    }

    pub fn summary_for(query: &str) -> String {
        format!("considered: {query}")
    }
}

#[async_trait]
impl ThinkingBackend for MockThinker {
    async fn think(&self, query: String) -> String {
        tokio::time::sleep(self.profile.nominal(0.0)).await;
        Self::summary_for(&query)
    }
}

/// Tiered semantic filtering: high-coverage hits contribute their snippet,
/// middle-coverage hits their full page, the rest are discarded.
pub fn tiered_filter(hits: &[SearchHit]) -> Vec<String> {
    hits.iter()
        .filter_map(|h| {
            if h.coverage >= COVERAGE_HIGH {
                Some(h.snippet.clone())
            } else if h.coverage >= COVERAGE_MID {
                Some(h.page.clone())
            } else {
                None
            }
        })
        .collect()
}

/// Search and utility tool stubs driven by the tool registry.
pub struct MockTools {
    scenario: Arc<Scenario>,
}

impl MockTools {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        Self { scenario }
    }
}

#[async_trait]
impl ToolBackend for MockTools {
    async fn call(&self, name: &str, _args: &BTreeMap<String, String>) -> Result<String, BackendError> {
        let spec = self
            .scenario
            .tools
            .tools
            .get(name)
            .ok_or_else(|| BackendError::Failure(format!("unknown tool {name}")))?;
        tokio::time::sleep(Duration::from_millis(spec.latency_ms())).await;
        if spec.fail {
            return Err(BackendError::Failure(format!("{name} failed")));
        }
        if spec.hits.is_empty() {
            return Ok("ok".into());
        }
        let kept = tiered_filter(&spec.hits);
        if kept.is_empty() {
            Ok("no relevant results".into())
        } else {
            Ok(kept.join(" | "))
        }
    }
}
