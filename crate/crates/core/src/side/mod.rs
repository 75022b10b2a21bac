//! Side channels: environment captioning over a rolling audio window and
//! speaker identification with EMA voiceprint adaptation. Both run beside
//! the ASR/LLM/TTS path and only ever publish; nothing waits on them.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use tokio::sync::mpsc;
use tokio::task::JoinSet;
use tokio::time::{interval_at, Instant, MissedTickBehavior};

use crate::audio::{ms_to_samples, samples_to_ms, AudioFrame};
use crate::backend::{AudioSpan, BackendError, Captioner, Embedder, Rewriter};
use crate::bus::{BusError, EventKind, Payload, SessionBus, Subscription};

pub const CAPTION_WINDOW_MS: u64 = 15_000;
pub const DEFAULT_CAPTION_PERIOD_MS: u64 = 10_000;
pub const DEFAULT_EMA_ALPHA: f64 = 0.1;
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.6;

/// The most recent `window_ms` of session audio.
#[derive(Debug, Clone)]
pub struct RollingAudioBuffer {
    window_samples: usize,
    frames: VecDeque<AudioFrame>,
    total_samples: usize,
}

impl Default for RollingAudioBuffer {
    fn default() -> Self {
        Self::new(CAPTION_WINDOW_MS)
    }
}

impl RollingAudioBuffer {
    pub fn new(window_ms: u64) -> Self {
        Self {
            window_samples: ms_to_samples(window_ms),
            frames: VecDeque::new(),
            total_samples: 0,
        }
    }

    pub fn push(&mut self, frame: AudioFrame) {
        let frame = if frame.sample_count() > self.window_samples {
            let s = frame.samples();
            AudioFrame::from_samples(&s[s.len() - self.window_samples..])
        } else {
            frame
        };
        self.total_samples += frame.sample_count();
        self.frames.push_back(frame);
        while self.total_samples > self.window_samples {
            let Some(old) = self.frames.pop_front() else { break };
            self.total_samples -= old.sample_count();
        }
    }

    pub fn duration_ms(&self) -> f64 {
        samples_to_ms(self.total_samples)
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn span(&self) -> AudioSpan {
        AudioSpan::new(self.frames.iter().flat_map(|f| f.samples()).collect())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("blended embedding is numerically zero")]
pub struct ZeroVector;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// `normalize(alpha·observed + (1−alpha)·old)`.
pub fn ema_update(old: &[f64], observed: &[f64], alpha: f64) -> Result<Vec<f64>, ZeroVector> {
    let blend: Vec<f64> = old
        .iter()
        .zip(observed)
        .map(|(o, n)| alpha * n + (1.0 - alpha) * o)
        .collect();
    crate::mock::normalize(&blend).ok_or(ZeroVector)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerMatch {
    pub speaker_id: String,
    pub similarity: f64,
    pub is_new: bool,
}

#[derive(Debug, Clone)]
pub struct SpeakerRegistry {
    entries: Vec<(String, Vec<f64>)>,
    pub similarity_threshold: f64,
    pub alpha: f64,
}

impl Default for SpeakerRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_SIMILARITY_THRESHOLD, DEFAULT_EMA_ALPHA)
    }
}

impl SpeakerRegistry {
    pub fn new(similarity_threshold: f64, alpha: f64) -> Self {
        Self {
            entries: Vec::new(),
            similarity_threshold,
            alpha,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding(&self, id: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(k, _)| k == id).map(|(_, v)| v.as_slice())
    }

    /// Matches `observed` against every entry; the best match at or above
    /// the threshold is EMA-updated, otherwise a new speaker is registered.
    pub fn identify(&mut self, observed: &[f64]) -> SpeakerMatch {
        let best = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (_, e))| (i, cosine(e, observed)))
            .fold(None::<(usize, f64)>, |acc, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        match best {
            Some((i, sim)) if sim >= self.similarity_threshold => {
                let (id, stored) = &mut self.entries[i];
                if let Ok(next) = ema_update(stored, observed, self.alpha) {
                    *stored = next;
                }
                SpeakerMatch {
                    speaker_id: id.clone(),
                    similarity: sim,
                    is_new: false,
                }
            }
            _ => {
                let id = format!("spk_{:02}", self.entries.len() + 1);
                let stored = crate::mock::normalize(observed).unwrap_or_else(|| observed.to_vec());
                self.entries.push((id.clone(), stored));
                SpeakerMatch {
                    speaker_id: id,
                    similarity: best.map_or(0.0, |b| b.1),
                    is_new: true,
                }
            }
        }
    }
}

pub fn subscribe_captioner(bus: &SessionBus) -> Result<Subscription, BusError> {
    bus.subscribe("caption_channel", [EventKind::AudioIn])
}

pub struct CaptionChannel {
    pub bus: SessionBus,
    pub sub: Subscription,
    pub captioner: Arc<dyn Captioner>,
    pub rewriter: Option<Arc<dyn Rewriter>>,
    pub period: Duration,
    pub buffer: RollingAudioBuffer,
}

async fn caption_once(
    captioner: Arc<dyn Captioner>,
    rewriter: Option<Arc<dyn Rewriter>>,
    window: AudioSpan,
) -> Result<(String, bool), BackendError> {
    let text = captioner.caption(window).await?;
    match rewriter {
        Some(r) => Ok((r.rewrite(text).await?, true)),
        None => Ok((text, false)),
    }
}

impl CaptionChannel {
    pub async fn run(self) {
        let mut buffer = self.buffer.clone();
        let mut ticks = interval_at(Instant::now() + self.period, self.period);
        ticks.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let mut calls = JoinSet::new();
        loop {
            tokio::select! {
                biased;
                ev = self.sub.next() => {
                    let Ok(ev) = ev else { break };
                    if let Payload::AudioIn(frame) = &ev.payload {
                        buffer.push(frame.clone());
                    }
                }
                _ = ticks.tick() => {
                    if !buffer.is_empty() {
                        calls.spawn(caption_once(self.captioner.clone(), self.rewriter.clone(), buffer.span()));
                    }
                }
                Some(done) = calls.join_next() => match done {
                    Ok(Ok((text, rewritten))) if !text.is_empty() => {
                        self.bus.publish(Payload::CaptionUpdated { text, rewritten }).await;
                    }
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => {
                        tracing::debug!(session = %self.bus.session, error = %e, "captioner failed");
                        self.bus.metric(None, "captioner_failure", 0.0).await;
                    }
                    Err(_) => {}
                },
            }
        }
    }
}

pub fn subscribe_speaker(bus: &SessionBus) -> Result<Subscription, BusError> {
    bus.subscribe(
        "speaker_channel",
        [EventKind::VadStart, EventKind::AudioIn, EventKind::AsrFinal],
    )
}

pub struct SpeakerChannel {
    pub bus: SessionBus,
    pub sub: Subscription,
    pub embedder: Arc<dyn Embedder>,
    pub registry: SpeakerRegistry,
}

impl SpeakerChannel {
    pub async fn run(mut self) {
        let mut utterance: Vec<i16> = Vec::new();
        let (tx, mut rx) = mpsc::unbounded_channel();
        let mut calls = JoinSet::new();
        loop {
            tokio::select! {
                biased;
                ev = self.sub.next() => {
                    let Ok(ev) = ev else { break };
                    match &ev.payload {
                        Payload::VadStart => utterance.clear(),
                        Payload::AudioIn(frame) => utterance.extend(frame.samples()),
                        Payload::AsrFinal { audio_ms, .. } if *audio_ms > 0 && !utterance.is_empty() => {
                            let span = AudioSpan::new(std::mem::take(&mut utterance));
                            let embedder = self.embedder.clone();
                            let tx = tx.clone();
                            calls.spawn(async move {
                                let _ = tx.send(embedder.embed(span).await);
                            });
                        }
                        _ => {}
                    }
                }
                Some(result) = rx.recv() => match result {
                    Ok(v) => {
                        let m = self.registry.identify(&v);
                        self.bus.publish(Payload::SpeakerIdentified {
                            speaker_id: m.speaker_id,
                            similarity: m.similarity,
                            is_new: m.is_new,
                        }).await;
                    }
                    Err(e) => {
                        tracing::debug!(session = %self.bus.session, error = %e, "embedder failed");
                        self.bus.metric(None, "embedder_failure", 0.0).await;
                    }
                },
                Some(_) = calls.join_next() => {}
            }
        }
    }
}
