use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use parking_lot::Mutex;

use super::{Jitter, LatencyProfile};
use crate::audio::{SAMPLE_RATE, BYTES_PER_SAMPLE};
use crate::backend::{
    BackendError, SynthesisMeta, SynthesisOutput, SynthesisRequest, TtsBackend, TtsCapabilities,
};

/// One recorded synthesis job as the backend saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct TtsCall {
    pub text: String,
    pub meta: SynthesisMeta,
    pub latency: Duration,
    pub pcm_bytes: usize,
}

type LatencyHook = Arc<dyn Fn(&SynthesisRequest) -> Option<Duration> + Send + Sync>;

/// Content-blind synthesizer: silence whose length follows the text length.
pub struct MockTts {
    profile: LatencyProfile,
    chars_per_second: f64,
    native_emotion: bool,
    jitter: Jitter,
    calls: Mutex<Vec<TtsCall>>,
    hook: Mutex<Option<LatencyHook>>,
}

impl MockTts {
    pub fn new(profile: LatencyProfile, chars_per_second: f64, seed: u64) -> Self {
        Self {
            profile,
            chars_per_second: if chars_per_second > 0.0 { chars_per_second } else { 5.0 },
            native_emotion: false,
            jitter: Jitter::new(seed),
            calls: Mutex::new(Vec::new()),
            hook: Mutex::new(None),
        }
    }

    pub fn with_native_emotion(mut self, native: bool) -> Self {
        self.native_emotion = native;
        self
    }

    pub fn profile(&self) -> LatencyProfile {
        self.profile
    }

    pub fn chars_per_second(&self) -> f64 {
        self.chars_per_second
    }

    /// Replaces the profile latency for requests where the hook returns
    /// `Some`. Used to force completion orders in tests.
    pub fn set_latency_hook<F>(&self, hook: Option<F>)
    where
        F: Fn(&SynthesisRequest) -> Option<Duration> + Send + Sync + 'static,
    {
        *self.hook.lock() = hook.map(|f| Arc::new(f) as LatencyHook);
    }

    pub fn calls(&self) -> Vec<TtsCall> {
        self.calls.lock().clone()
    }

    pub fn take_calls(&self) -> Vec<TtsCall> {
        std::mem::take(&mut *self.calls.lock())
    }

    pub fn char_count(text: &str) -> usize {
        text.trim().chars().count()
    }

    /// Output duration in whole seconds for a text.
    pub fn output_seconds(&self, text: &str) -> u64 {
        (Self::char_count(text) as f64 / self.chars_per_second).ceil() as u64
    }

    pub fn output_bytes(&self, text: &str) -> usize {
        self.output_seconds(text) as usize * SAMPLE_RATE as usize * BYTES_PER_SAMPLE
    }

    /// Synthesis latency for a text, without jitter.
    pub fn nominal_latency(&self, text: &str) -> Duration {
        self.profile.nominal(Self::char_count(text) as f64)
    }
}

#[async_trait]
impl TtsBackend for MockTts {
    async fn synthesize(&self, req: SynthesisRequest) -> Result<SynthesisOutput, BackendError> {
        let chars = Self::char_count(&req.text);
        if chars == 0 {
            return Err(BackendError::EmptyText);
        }
        let hook = self.hook.lock().clone();
        let latency = match hook.and_then(|h| h(&req)) {
            Some(d) => d,
            None => self.jitter.latency(&self.profile, chars as f64),
        };
        let meta = SynthesisMeta {
            timbre: req.timbre.clone(),
            emotion: req.emotion.clone(),
            emotion_mechanism: if self.native_emotion { "native_vector" } else { "reference_audio" }.into(),
        };
        let pcm = Bytes::from(vec![0u8; self.output_bytes(&req.text)]);
        self.calls.lock().push(TtsCall {
            text: req.text,
            meta: meta.clone(),
            latency,
            pcm_bytes: pcm.len(),
        });
        tokio::time::sleep(latency).await;
        Ok(SynthesisOutput { pcm, meta })
    }

    fn capabilities(&self) -> TtsCapabilities {
        TtsCapabilities {
            native_emotion_control: self.native_emotion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str, emotion: &str) -> SynthesisRequest {
        SynthesisRequest {
            text: text.into(),
            timbre: "ref_default".into(),
            emotion: emotion.into(),
        }
    }

    #[tokio::test(start_paused = true)]
    async fn duration_rule_and_latency() {
        let tts = MockTts::new(LatencyProfile::new(40.0, 10.0), 5.0, 0);
        let t0 = tokio::time::Instant::now();
        let out = tts.synthesize(req("你好。", "neutral")).await.unwrap();
        assert_eq!(out.pcm.len(), 32000);
        assert!(out.pcm.iter().all(|b| *b == 0));
        assert_eq!(t0.elapsed(), Duration::from_millis(70));
        let six = tts.synthesize(req("abcdef", "neutral")).await.unwrap();
        assert_eq!(six.pcm.len(), 64000);
    }

    #[tokio::test(start_paused = true)]
    async fn empty_text_rejected() {
        let tts = MockTts::new(LatencyProfile::ZERO, 5.0, 0);
        assert_eq!(tts.synthesize(req("", "neutral")).await.unwrap_err(), BackendError::EmptyText);
    }

    #[tokio::test(start_paused = true)]
    async fn emotion_only_changes_metadata() {
        let tts = MockTts::new(LatencyProfile::ZERO, 5.0, 0);
        let a = tts.synthesize(req("今天很好。", "happy")).await.unwrap();
        let b = tts.synthesize(req("今天很好。", "sad")).await.unwrap();
        assert_eq!(a.pcm, b.pcm);
        assert_ne!(a.meta, b.meta);
        assert_eq!(a.meta.emotion_mechanism, "reference_audio");
        let native = MockTts::new(LatencyProfile::ZERO, 5.0, 0).with_native_emotion(true);
        let c = native.synthesize(req("今天很好。", "happy")).await.unwrap();
        assert_eq!(c.meta.emotion_mechanism, "native_vector");
        assert_eq!(c.meta.emotion, a.meta.emotion);
    }

    #[tokio::test(start_paused = true)]
    async fn hook_overrides_latency() {
        let tts = MockTts::new(LatencyProfile::fixed(500.0), 5.0, 0);
        tts.set_latency_hook(Some(|r: &SynthesisRequest| {
            (r.text == "fast.").then_some(Duration::from_millis(1))
        }));
        let t0 = tokio::time::Instant::now();
        tts.synthesize(req("fast.", "neutral")).await.unwrap();
        assert_eq!(t0.elapsed(), Duration::from_millis(1));
    }
}
