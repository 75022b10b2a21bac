//! ASR manager and the pseudo-streaming adapter.
//!
//! In pseudo-streaming mode every completed call re-recognizes the whole
//! unflushed buffer. The longest common prefix of the last W hypotheses is
//! finalized; once it ends at sentence-final punctuation its audio is
//! flushed, so later calls only see the tail.

use std::collections::VecDeque;
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audio::{samples_to_ms, WATERMARK_GROUP};
use crate::backend::{AsrBackend, AsrStream, AudioSpan, BackendError};
use crate::bus::{BusError, EventKind, Payload, SessionBus, Subscription};

pub const DEFAULT_WINDOW: usize = 3;

/// Sentence-final punctuation that allows an audio flush.
pub const SENTENCE_BOUNDARIES: [char; 8] = ['。', '！', '？', '；', '!', '?', '.', ';'];

pub fn is_sentence_boundary(c: char) -> bool {
    SENTENCE_BOUNDARIES.contains(&c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrMode {
    /// Natively streaming backend: one call per chunk, no re-inference.
    Streaming,
    /// Offline backend re-run on the cumulative buffer.
    #[default]
    PseudoStreaming,
    /// One whole-utterance call at VadEnd.
    Offline,
}

/// Longest common prefix of the last `w` hypotheses, or empty when fewer
/// than `w` are available.
pub fn stable_prefix<S: AsRef<str>>(hypotheses: &[S], w: usize) -> String {
    if w == 0 || hypotheses.len() < w {
        return String::new();
    }
    let recent = &hypotheses[hypotheses.len() - w..];
    let first = recent[0].as_ref();
    let mut end = first.len();
    for h in &recent[1..] {
        let common: usize = first
            .char_indices()
            .zip(h.as_ref().chars())
            .take_while(|((_, a), b)| a == b)
            .map(|((_, a), _)| a.len_utf8())
            .sum();
        end = end.min(common);
    }
    first[..end].to_string()
}

/// Per-utterance recognition state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptState {
    /// Unflushed audio of the current utterance.
    pub cumulative: Vec<i16>,
    /// Chunks received while a call is in flight.
    pub incremental: Vec<i16>,
    /// Recent hypotheses over the unflushed region with the buffer length
    /// each was computed on.
    pub cache: VecDeque<(String, usize)>,
    /// Text whose audio has been flushed.
    pub committed: String,
    /// Finalized text over the unflushed region.
    pub region_finalized: String,
    pub volatile: String,
    pub flushed_samples: usize,
    pub total_samples: usize,
}

impl TranscriptState {
    pub fn finalized_text(&self) -> String {
        format!("{}{}", self.committed, self.region_finalized)
    }

    pub fn flushed_ms(&self) -> f64 {
        samples_to_ms(self.flushed_samples)
    }

    pub fn total_ms(&self) -> f64 {
        samples_to_ms(self.total_samples)
    }

    pub fn is_empty(&self) -> bool {
        *self == TranscriptState::default()
    }

    pub fn receive(&mut self, samples: &[i16]) {
        self.total_samples += samples.len();
        self.incremental.extend_from_slice(samples);
    }

    /// Moves staged chunks into the cumulative buffer and returns the whole
    /// unflushed buffer.
    pub fn stage(&mut self) -> AudioSpan {
        self.cumulative.append(&mut self.incremental);
        AudioSpan::new(self.cumulative.clone())
    }

    /// Folds in a hypothesis computed on the first `buf_len` unflushed
    /// samples. Returns the number of samples flushed, if any.
    pub fn absorb(&mut self, hypothesis: String, buf_len: usize, w: usize, flush: bool) -> Option<usize> {
        self.cache.push_back((hypothesis.clone(), buf_len));
        while self.cache.len() > w {
            self.cache.pop_front();
        }
        let texts: Vec<&str> = self.cache.iter().map(|(h, _)| h.as_str()).collect();
        let stable = stable_prefix(&texts, w);
        if stable.starts_with(&self.region_finalized) {
            self.region_finalized = stable;
        }
        self.volatile = hypothesis
            .strip_prefix(self.region_finalized.as_str())
            .unwrap_or("")
            .to_string();
        if !flush || !self.region_finalized.chars().last().is_some_and(is_sentence_boundary) {
            return None;
        }
        let exact = self
            .cache
            .iter()
            .find(|(h, _)| *h == self.region_finalized)
            .map(|(_, n)| *n);
        let n = exact.unwrap_or_else(|| {
            let total = hypothesis.chars().count().max(1);
            let fin = self.region_finalized.chars().count();
            let n = buf_len * fin / total;
            n - n % WATERMARK_GROUP
        });
        let n = n.min(self.cumulative.len());
        self.cumulative.drain(..n);
        self.flushed_samples += n;
        self.committed.push_str(&self.region_finalized);
        self.region_finalized.clear();
        self.cache.clear();
        Some(n)
    }

    /// The transcript after the final whole-tail hypothesis.
    pub fn final_text(&self, tail: &str) -> String {
        format!("{}{}", self.committed, tail)
    }
}

type CallFuture = Pin<Box<dyn Future<Output = CallOutcome> + Send>>;

struct CallOutcome {
    buf_len: usize,
    stream: Option<AsrStream>,
    result: Result<String, BackendError>,
}

/// Subscribes the ASR manager; done before `SessionOpen` so no audio is missed.
pub fn subscribe(bus: &SessionBus) -> Result<Subscription, BusError> {
    bus.subscribe(
        "asr_manager",
        [EventKind::VadStart, EventKind::AudioIn, EventKind::VadEnd],
    )
}

pub struct AsrManager {
    bus: SessionBus,
    sub: Subscription,
    backend: Arc<dyn AsrBackend>,
    mode: AsrMode,
    w: usize,
    state: TranscriptState,
    open: bool,
    stream: Option<AsrStream>,
    last_partial: (String, String),
}

impl AsrManager {
    pub fn new(
        bus: SessionBus,
        sub: Subscription,
        backend: Arc<dyn AsrBackend>,
        mode: AsrMode,
        w: usize,
        state: TranscriptState,
    ) -> Self {
        let mode = if mode == AsrMode::Streaming && !backend.supports_streaming() {
            tracing::warn!("backend cannot stream natively; using pseudo-streaming");
            AsrMode::PseudoStreaming
        } else {
            mode
        };
        Self {
            bus,
            sub,
            backend,
            mode,
            w: w.max(2),
            state,
            open: false,
            stream: None,
            last_partial: Default::default(),
        }
    }

    fn launch(&mut self) -> Option<CallFuture> {
        if self.state.incremental.is_empty() {
            return None;
        }
        let backend = self.backend.clone();
        match self.mode {
            AsrMode::Offline => None,
            AsrMode::PseudoStreaming => {
                let span = self.state.stage();
                let buf_len = span.len();
                Some(Box::pin(async move {
                    CallOutcome {
                        buf_len,
                        stream: None,
                        result: backend.recognize(span).await,
                    }
                }))
            }
            AsrMode::Streaming => {
                let stream = self.stream.take()?;
                let chunk = AudioSpan::new(std::mem::take(&mut self.state.incremental));
                Some(Box::pin(async move {
                    let (stream, result) = backend.recognize_streaming(chunk, stream).await;
                    CallOutcome {
                        buf_len: 0,
                        stream: Some(stream),
                        result,
                    }
                }))
            }
        }
    }

    async fn on_outcome(&mut self, out: CallOutcome) {
        if out.stream.is_some() {
            self.stream = out.stream;
        }
        match out.result {
            Ok(h) => {
                let flush = self.mode == AsrMode::PseudoStreaming;
                self.state.absorb(h, out.buf_len, self.w, flush);
                let partial = (self.state.finalized_text(), self.state.volatile.clone());
                if partial != self.last_partial {
                    self.last_partial = partial.clone();
                    self.bus
                        .publish(Payload::AsrPartial {
                            finalized: partial.0,
                            volatile: partial.1,
                        })
                        .await;
                }
            }
            Err(e) => {
                tracing::warn!(session = %self.bus.session, error = %e, "asr call failed");
                self.bus.metric(None, "asr_backend_failure", 0.0).await;
            }
        }
    }

    async fn finalize(&mut self) {
        let audio_ms = self.state.total_ms().round() as u64;
        let result = match self.mode {
            AsrMode::Streaming => match self.stream.take() {
                Some(stream) => {
                    let tail = AudioSpan::new(std::mem::take(&mut self.state.incremental));
                    self.backend.recognize_streaming(tail, stream).await.1
                }
                None => Err(BackendError::Failure("stream lost".into())),
            },
            _ => {
                let span = self.state.stage();
                if span.is_empty() {
                    Ok(String::new())
                } else {
                    self.backend.recognize(span).await
                }
            }
        };
        let (text, degraded) = match result {
            Ok(tail) => (self.state.final_text(&tail), false),
            Err(e) => {
                tracing::warn!(session = %self.bus.session, error = %e, "final asr call failed");
                self.bus.metric(None, "asr_backend_failure", 0.0).await;
                (self.state.finalized_text(), true)
            }
        };
        self.state = TranscriptState::default();
        self.last_partial = Default::default();
        self.bus
            .publish(Payload::AsrFinal {
                text,
                audio_ms,
                degraded,
            })
            .await;
    }

    pub async fn run(mut self) {
        let mut in_flight: Option<CallFuture> = None;
        loop {
            let event = tokio::select! {
                biased;
                out = async { in_flight.as_mut().expect("guarded").await }, if in_flight.is_some() => {
                    in_flight = None;
                    self.on_outcome(out).await;
                    if self.open {
                        in_flight = self.launch();
                    }
                    continue;
                }
                ev = self.sub.next() => ev,
            };
            let Ok(event) = event else { break };
            match &event.payload {
                Payload::VadStart => {
                    in_flight = None;
                    self.state = TranscriptState::default();
                    self.last_partial = Default::default();
                    self.stream = Some(self.backend.open_stream());
                    self.open = true;
                }
                Payload::AudioIn(frame) if self.open => {
                    self.state.receive(&frame.samples());
                    if in_flight.is_none() {
                        in_flight = self.launch();
                    }
                }
                Payload::VadEnd if self.open => {
                    self.open = false;
                    if self.mode == AsrMode::Streaming {
                        if let Some(f) = in_flight.take() {
                            let out = f.await;
                            self.on_outcome(out).await;
                        }
                    } else {
                        in_flight = None;
                    }
                    self.finalize().await;
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcp_oracle(hs: &[&str]) -> String {
        let mut out = String::new();
        let chars: Vec<Vec<char>> = hs.iter().map(|h| h.chars().collect()).collect();
        for i in 0.. {
            let Some(c) = chars[0].get(i) else { break };
            if chars.iter().all(|h| h.get(i) == Some(c)) {
                out.push(*c);
            } else {
                break;
            }
        }
        out
    }

    #[test]
    fn stable_prefix_examples() {
        assert_eq!(stable_prefix(&["abc"], 3), "");
        assert_eq!(stable_prefix(&["abcd", "abce", "abcf"], 3), "abc");
        assert_eq!(stable_prefix(&["x", "x", "x"], 3), "x");
        assert_eq!(stable_prefix(&["你好今", "你好今天", "你好今天天"], 3), "你好今");
        assert_eq!(stable_prefix(&["zzz", "ab", "ab", "ab"], 3), "ab");
    }

    proptest! {
        #[test]
        fn stable_prefix_matches_oracle(hs in prop::collection::vec("[ab你好]{0,6}", 3..6)) {
            let refs: Vec<&str> = hs.iter().map(String::as_str).collect();
            let recent = &refs[refs.len() - 3..];
            prop_assert_eq!(stable_prefix(&refs, 3), lcp_oracle(recent));
        }
    }

    #[test]
    fn window_not_full_keeps_everything_volatile() {
        let mut st = TranscriptState::default();
        st.receive(&[0; 1600]);
        st.stage();
        assert_eq!(st.absorb("你好".into(), 1600, 3, true), None);
        assert_eq!(st.finalized_text(), "");
        assert_eq!(st.volatile, "你好");
    }

    #[test]
    fn identical_hypotheses_flush_exactly() {
        let mut st = TranscriptState::default();
        for (i, h) in ["你好。", "你好。", "你好。"].iter().enumerate() {
            st.receive(&[0; 1600]);
            st.stage();
            let r = st.absorb(h.to_string(), 1600 * (i + 1), 3, true);
            if i < 2 {
                assert_eq!(r, None);
            } else {
                assert_eq!(r, Some(1600));
            }
        }
        assert_eq!(st.committed, "你好。");
        assert_eq!(st.cumulative.len(), 3200);
        assert_eq!(st.flushed_ms(), 100.0);
    }

    #[test]
    fn proportional_flush_when_no_hypothesis_matches() {
        let mut st = TranscriptState::default();
        st.receive(&[0; 4800]);
        st.stage();
        // stable prefix "ab." (3 of 4 chars) never equals a whole hypothesis
        for h in ["ab.x", "ab.y", "ab.z"] {
            st.absorb(h.to_string(), 4800, 3, true);
        }
        assert_eq!(st.committed, "ab.");
        assert_eq!(st.flushed_samples, 4800 * 3 / 4);
    }

    #[test]
    fn finalized_never_shrinks() {
        let mut st = TranscriptState::default();
        let mut prev = String::new();
        for h in ["abc", "abc", "abc", "abx", "abx", "abx"] {
            st.absorb(h.to_string(), 0, 3, false);
            assert!(st.finalized_text().starts_with(&prev));
            prev = st.finalized_text();
        }
        assert_eq!(st.finalized_text(), "abc");
    }
}
