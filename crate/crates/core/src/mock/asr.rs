use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;

use super::{Jitter, LatencyProfile};
use crate::audio::decode_watermark;
use crate::backend::{AsrBackend, AsrStream, AudioSpan, BackendError};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsrCallKind {
    Offline,
    Streaming,
}

/// One recorded recognizer call, in utterance sample coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsrCall {
    pub utterance: u16,
    pub start_sample: usize,
    pub end_sample: usize,
    pub latency: Duration,
    pub kind: AsrCallKind,
}

/// Recognizer that reads the watermark of the audio it is given and
/// returns the scripted transcript for exactly that span.
pub struct MockAsr {
    scenario: Arc<Scenario>,
    profile: LatencyProfile,
    jitter: Jitter,
    streaming: bool,
    calls: Mutex<Vec<AsrCall>>,
    fail_next: AtomicUsize,
}

#[derive(Default)]
struct MockStream {
    origin: Option<(u16, usize)>,
    end: usize,
}

impl MockAsr {
    pub fn new(scenario: Arc<Scenario>, profile: LatencyProfile, seed: u64) -> Self {
        Self {
            scenario,
            profile,
            jitter: Jitter::new(seed),
            streaming: false,
            calls: Mutex::new(Vec::new()),
            fail_next: AtomicUsize::new(0),
        }
    }

    pub fn with_streaming(mut self, streaming: bool) -> Self {
        self.streaming = streaming;
        self
    }

    pub fn profile(&self) -> LatencyProfile {
        self.profile
    }

    pub fn calls(&self) -> Vec<AsrCall> {
        self.calls.lock().clone()
    }

    pub fn take_calls(&self) -> Vec<AsrCall> {
        std::mem::take(&mut *self.calls.lock())
    }

    /// Makes the next `n` calls fail with `BackendError::Failure`.
    pub fn fail_next(&self, n: usize) {
        self.fail_next.store(n, Ordering::SeqCst);
    }

    fn take_failure(&self) -> bool {
        self.fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }

    /// The transcript a single offline call over the whole span would give,
    /// without latency or logging.
    pub fn transcribe_now(&self, span: &AudioSpan) -> Result<String, BackendError> {
        if span.is_empty() {
            return Ok(String::new());
        }
        let pos = decode_watermark(&span.samples).ok_or(BackendError::UntaggedAudio)?;
        let utt = self
            .scenario
            .utterances
            .get(pos.utterance as usize)
            .ok_or(BackendError::UntaggedAudio)?;
        Ok(utt.text_for_range(pos.sample_offset, pos.sample_offset + span.len()))
    }
}

#[async_trait]
impl AsrBackend for MockAsr {
    async fn recognize(&self, span: AudioSpan) -> Result<String, BackendError> {
        if span.is_empty() {
            return Ok(String::new());
        }
        let pos = decode_watermark(&span.samples).ok_or(BackendError::UntaggedAudio)?;
        let latency = self.jitter.latency(&self.profile, span.seconds());
        self.calls.lock().push(AsrCall {
            utterance: pos.utterance,
            start_sample: pos.sample_offset,
            end_sample: pos.sample_offset + span.len(),
            latency,
            kind: AsrCallKind::Offline,
        });
        tokio::time::sleep(latency).await;
        if self.take_failure() {
            return Err(BackendError::Failure("injected".into()));
        }
        self.transcribe_now(&span)
    }

    fn supports_streaming(&self) -> bool {
        self.streaming
    }

    fn open_stream(&self) -> AsrStream {
        Box::new(MockStream::default())
    }

    async fn recognize_streaming(
        &self,
        chunk: AudioSpan,
        stream: AsrStream,
    ) -> (AsrStream, Result<String, BackendError>) {
        let mut st = match stream.downcast::<MockStream>() {
            Ok(st) => st,
            Err(other) => return (other, Err(BackendError::Unsupported)),
        };
        let latency = self.jitter.latency(&self.profile, chunk.seconds());
        if !chunk.is_empty() {
            let Some(pos) = decode_watermark(&chunk.samples) else {
                return (st, Err(BackendError::UntaggedAudio));
            };
            let origin = *st.origin.get_or_insert((pos.utterance, pos.sample_offset));
            st.end = pos.sample_offset + chunk.len();
            self.calls.lock().push(AsrCall {
                utterance: origin.0,
                start_sample: pos.sample_offset,
                end_sample: st.end,
                latency,
                kind: AsrCallKind::Streaming,
            });
        }
        tokio::time::sleep(latency).await;
        if self.take_failure() {
            return (st, Err(BackendError::Failure("injected".into())));
        }
        let text = match st.origin {
            Some((u, start)) => self
                .scenario
                .utterances
                .get(u as usize)
                .map(|utt| utt.text_for_range(start, st.end))
                .unwrap_or_default(),
            None => String::new(),
        };
        (st, Ok(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_utterance;
    use crate::scenario::Lang;

    fn mock() -> (MockAsr, crate::scenario::Utterance) {
        let u = build_utterance("w", Lang::Cn, "v", "cafe", &["今天天气怎么样"], 5000);
        let s = Scenario {
            utterances: vec![u.clone()],
            ..Default::default()
        };
        (MockAsr::new(Arc::new(s), LatencyProfile::new(10.0, 5.0), 0), u)
    }

    fn span(u: &crate::scenario::Utterance, from: usize, to: usize) -> AudioSpan {
        let all = crate::audio::watermark_samples(0, u.total_samples());
        AudioSpan::new(all[from..to].to_vec())
    }

    #[tokio::test(start_paused = true)]
    async fn full_span_returns_transcript() {
        let (asr, u) = mock();
        let t0 = tokio::time::Instant::now();
        let text = asr.recognize(span(&u, 0, u.total_samples())).await.unwrap();
        assert_eq!(text, "今天天气怎么样");
        // 10 ms + 5 ms/s × 5 s
        assert_eq!(t0.elapsed(), Duration::from_millis(35));
    }

    #[tokio::test(start_paused = true)]
    async fn partial_span_is_alignment_prefix() {
        let (asr, u) = mock();
        let forty = u.total_samples() * 2 / 5;
        let text = asr.recognize(span(&u, 0, forty)).await.unwrap();
        let covered = u.alignment[forty / u.chunk_samples() - 1] as usize;
        assert_eq!(text, u.transcript.chars().take(covered).collect::<String>());
        assert!(u.transcript.starts_with(&text));
    }

    #[tokio::test(start_paused = true)]
    async fn empty_and_untagged_spans() {
        let (asr, _) = mock();
        assert_eq!(asr.recognize(AudioSpan::default()).await.unwrap(), "");
        assert_eq!(
            asr.recognize(AudioSpan::new(vec![0; 1600])).await,
            Err(BackendError::UntaggedAudio)
        );
    }

    #[tokio::test(start_paused = true)]
    async fn prefixes_are_monotone_in_span_length() {
        let (asr, u) = mock();
        let mut prev = String::new();
        for end in (0..=u.total_samples()).step_by(800) {
            let t = asr.transcribe_now(&span(&u, 0, end)).unwrap();
            assert!(t.starts_with(&prev));
            prev = t;
        }
    }

    #[tokio::test(start_paused = true)]
    async fn streaming_accumulates() {
        let (asr, u) = mock();
        let mut stream = asr.open_stream();
        let cs = u.chunk_samples();
        let mut last = String::new();
        for j in 0..u.alignment.len() {
            let (s, r) = asr.recognize_streaming(span(&u, j * cs, (j + 1) * cs), stream).await;
            stream = s;
            last = r.unwrap();
        }
        assert_eq!(last, u.transcript);
    }
}
