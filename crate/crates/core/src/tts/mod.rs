//! TTS manager: clause-level synthesis with bounded concurrency and a
//! reorder buffer that releases audio strictly in clause order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Semaphore};
use tokio::task::{AbortHandle, JoinSet};

use crate::audio::ms_to_samples;
use crate::backend::{BackendError, SynthesisOutput, SynthesisRequest, TtsBackend};
use crate::bus::{BusError, EventKind, Payload, SessionBus, Subscription, TtsChunk, TurnId};
use crate::scenario::VoiceRegistry;

pub const DEFAULT_CONCURRENCY: usize = 2;

/// The session's current voice selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtsConfig {
    pub voice: String,
    pub profile_tag: String,
    pub emotion: String,
}

impl TtsConfig {
    pub fn initial(voices: &VoiceRegistry) -> Self {
        let voice = if voices.voices.contains_key("default") {
            "default".to_string()
        } else {
            voices.voices.keys().next().cloned().unwrap_or_default()
        };
        Self {
            profile_tag: voices.voices.get(&voice).cloned().unwrap_or_default(),
            voice,
            emotion: voices
                .emotions
                .iter()
                .find(|e| *e == "neutral")
                .or(voices.emotions.first())
                .cloned()
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Synthesizing,
    Done,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisJob {
    pub turn_id: TurnId,
    pub clause_index: u16,
    pub text: String,
    pub timbre: String,
    pub emotion: String,
    pub status: JobStatus,
}

/// Reorder buffer for one turn.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlaybackQueue {
    pub next_emit_index: u16,
    pub completed: BTreeMap<u16, Bytes>,
}

impl PlaybackQueue {
    pub fn complete(&mut self, clause: u16, pcm: Bytes) {
        if clause >= self.next_emit_index {
            self.completed.insert(clause, pcm);
        }
    }

    /// The next clause in order, if it has completed.
    pub fn pop_ready(&mut self) -> Option<(u16, Bytes)> {
        let pcm = self.completed.remove(&self.next_emit_index)?;
        let idx = self.next_emit_index;
        self.next_emit_index += 1;
        Some((idx, pcm))
    }

    pub fn clear(&mut self) {
        self.completed.clear();
    }
}

/// Splits clause PCM into fixed-duration chunks.
pub fn split_chunks(pcm: &Bytes, chunk_ms: u64) -> Vec<Bytes> {
    let step = (ms_to_samples(chunk_ms) * 2).max(2);
    (0..pcm.len())
        .step_by(step)
        .map(|i| pcm.slice(i..(i + step).min(pcm.len())))
        .collect()
}

#[derive(Default)]
struct TurnJobs {
    next_clause: u16,
    queue: PlaybackQueue,
    jobs: Vec<SynthesisJob>,
    handles: Vec<AbortHandle>,
    llm_done: bool,
}

struct JobResult {
    turn: TurnId,
    clause: u16,
    result: Result<SynthesisOutput, BackendError>,
}

pub fn subscribe(bus: &SessionBus) -> Result<Subscription, BusError> {
    bus.subscribe(
        "tts_manager",
        [
            EventKind::LlmSentence,
            EventKind::PhaticUtterance,
            EventKind::LlmDone,
            EventKind::PausePlayback,
            EventKind::Resume,
            EventKind::Flush,
            EventKind::Stop,
            EventKind::TimbreSwitch,
            EventKind::EmotionSwitch,
        ],
    )
}

pub struct TtsManager {
    bus: SessionBus,
    sub: Subscription,
    backend: Arc<dyn TtsBackend>,
    config: TtsConfig,
    chunk_ms: u64,
    permits: Arc<Semaphore>,
    paused: bool,
    turns: HashMap<TurnId, TurnJobs>,
    dead: HashSet<TurnId>,
    tasks: JoinSet<()>,
    tx: mpsc::UnboundedSender<JobResult>,
    rx: mpsc::UnboundedReceiver<JobResult>,
}

impl TtsManager {
    pub fn new(
        bus: SessionBus,
        sub: Subscription,
        backend: Arc<dyn TtsBackend>,
        config: TtsConfig,
        concurrency: usize,
        chunk_ms: u64,
    ) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        Self {
            bus,
            sub,
            backend,
            config,
            chunk_ms,
            permits: Arc::new(Semaphore::new(concurrency.max(1))),
            paused: false,
            turns: HashMap::new(),
            dead: HashSet::new(),
            tasks: JoinSet::new(),
            tx,
            rx,
        }
    }

    fn schedule(&mut self, turn: TurnId, text: String) {
        if self.dead.contains(&turn) || text.trim().is_empty() {
            return;
        }
        let jobs = self.turns.entry(turn).or_default();
        let clause = jobs.next_clause;
        jobs.next_clause += 1;
        let job = SynthesisJob {
            turn_id: turn,
            clause_index: clause,
            text,
            timbre: self.config.profile_tag.clone(),
            emotion: self.config.emotion.clone(),
            status: JobStatus::Queued,
        };
        let req = SynthesisRequest {
            text: job.text.clone(),
            timbre: job.timbre.clone(),
            emotion: job.emotion.clone(),
        };
        jobs.jobs.push(job);
        let backend = self.backend.clone();
        let permits = self.permits.clone();
        let tx = self.tx.clone();
        let handle = self.tasks.spawn(async move {
            let Ok(_permit) = permits.acquire_owned().await else { return };
            let result = backend.synthesize(req).await;
            let _ = tx.send(JobResult { turn, clause, result });
        });
        jobs.handles.push(handle);
        if let Some(j) = jobs.jobs.last_mut() {
            j.status = JobStatus::Synthesizing;
        }
    }

    fn cancel(&mut self, turn: TurnId) {
        self.dead.insert(turn);
        if let Some(mut jobs) = self.turns.remove(&turn) {
            for h in jobs.handles.drain(..) {
                h.abort();
            }
            for j in &mut jobs.jobs {
                if j.status != JobStatus::Done {
                    j.status = JobStatus::Cancelled;
                }
            }
            jobs.queue.clear();
        }
    }

    async fn emit_ready(&mut self, turn: TurnId) {
        if self.paused {
            return;
        }
        let Some(jobs) = self.turns.get_mut(&turn) else { return };
        let mut out = Vec::new();
        while let Some((clause, pcm)) = jobs.queue.pop_ready() {
            for (i, chunk) in split_chunks(&pcm, self.chunk_ms).into_iter().enumerate() {
                out.push(Payload::TtsChunk(TtsChunk {
                    turn_id: turn,
                    clause_index: clause,
                    chunk_index: i as u16,
                    pcm: chunk,
                }));
            }
        }
        let done = jobs.llm_done && jobs.queue.next_emit_index == jobs.next_clause;
        let clauses = jobs.next_clause;
        if done {
            self.turns.remove(&turn);
            self.dead.insert(turn);
            out.push(Payload::TtsDone {
                turn_id: turn,
                clauses: clauses as u32,
            });
        }
        for p in out {
            self.bus.publish(p).await;
        }
    }

    async fn on_result(&mut self, r: JobResult) {
        let Some(jobs) = self.turns.get_mut(&r.turn) else { return };
        if let Some(j) = jobs.jobs.iter_mut().find(|j| j.clause_index == r.clause) {
            j.status = JobStatus::Done;
        }
        let pcm = match r.result {
            Ok(out) => out.pcm,
            Err(e) => {
                tracing::warn!(session = %self.bus.session, error = %e, "synthesis failed");
                self.bus.metric(Some(r.turn), "tts_backend_failure", 0.0).await;
                Bytes::new()
            }
        };
        if let Some(jobs) = self.turns.get_mut(&r.turn) {
            jobs.queue.complete(r.clause, pcm);
        }
        self.emit_ready(r.turn).await;
    }

    async fn resume_all(&mut self) {
        let mut turns: Vec<TurnId> = self.turns.keys().copied().collect();
        turns.sort_unstable();
        for t in turns {
            self.emit_ready(t).await;
        }
    }

    pub async fn run(mut self) {
        loop {
            while self.tasks.try_join_next().is_some() {}
            let event = tokio::select! {
                biased;
                ev = self.sub.next() => ev,
                Some(r) = self.rx.recv() => {
                    self.on_result(r).await;
                    continue;
                }
            };
            let Ok(event) = event else { break };
            match &event.payload {
                Payload::LlmSentence { turn_id, text, .. }
                | Payload::PhaticUtterance { turn_id, text } => self.schedule(*turn_id, text.clone()),
                Payload::LlmDone { turn_id, .. } => {
                    if !self.dead.contains(turn_id) {
                        self.turns.entry(*turn_id).or_default().llm_done = true;
                        self.emit_ready(*turn_id).await;
                    }
                }
                Payload::PausePlayback { .. } => self.paused = true,
                Payload::Resume { .. } => {
                    self.paused = false;
                    self.resume_all().await;
                }
                Payload::Flush { turn_id } => {
                    self.cancel(*turn_id);
                    self.paused = false;
                }
                Payload::Stop { turn_id: Some(t) } => self.cancel(*t),
                Payload::Stop { turn_id: None } => {
                    let all: Vec<TurnId> = self.turns.keys().copied().collect();
                    for t in all {
                        self.cancel(t);
                    }
                }
                Payload::TimbreSwitch { voice, profile_tag } => {
                    self.config.voice = voice.clone();
                    self.config.profile_tag = profile_tag.clone();
                }
                Payload::EmotionSwitch { emotion } => self.config.emotion = emotion.clone(),
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn out_of_order_completions_are_held() {
        let mut q = PlaybackQueue::default();
        q.complete(1, Bytes::from_static(b"b"));
        assert_eq!(q.pop_ready(), None);
        q.complete(0, Bytes::from_static(b"a"));
        assert_eq!(q.pop_ready().unwrap().0, 0);
        assert_eq!(q.pop_ready().unwrap().0, 1);
        assert_eq!(q.pop_ready(), None);
    }

    proptest! {
        #[test]
        fn reorder_buffer_emits_in_order(perm in Just((0u16..12).collect::<Vec<_>>()).prop_shuffle()) {
            let mut q = PlaybackQueue::default();
            let mut emitted = Vec::new();
            for c in perm {
                q.complete(c, Bytes::new());
                while let Some((i, _)) = q.pop_ready() {
                    emitted.push(i);
                }
            }
            prop_assert_eq!(emitted, (0u16..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn chunking_is_loss_free() {
        let pcm = Bytes::from(vec![0u8; 32000 + 100]);
        let chunks = split_chunks(&pcm, 100);
        assert_eq!(chunks.len(), 11);
        assert_eq!(chunks[0].len(), 3200);
        assert_eq!(chunks.iter().map(Bytes::len).sum::<usize>(), pcm.len());
    }

    #[test]
    fn initial_voice_from_registry() {
        let c = TtsConfig::initial(&VoiceRegistry::default());
        assert_eq!((c.voice.as_str(), c.profile_tag.as_str(), c.emotion.as_str()), ("default", "ref_default", "neutral"));
    }
}
