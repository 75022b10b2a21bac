//! The dialogue manager: owns a session's [`TurnState`], executes its
//! actions, and keeps the context the agent layer builds prompts from.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use tokio::sync::mpsc;
use tokio::task::{AbortHandle, JoinSet};
use tokio::time::{sleep_until, Instant};

use crate::agent::{AgentTurn, PhaticPolicy, Registries, Role, SegmenterConfig, TurnContext};
use crate::audio::samples_to_ms;
use crate::backend::Models;
use crate::bus::{BusError, EventKind, Payload, SessionBus, Subscription, TurnId};
use crate::tts::TtsConfig;
use crate::turn::{FalseInterruptRules, PhaseCell, TurnAction, TurnInput, TurnState, VERIFY_DEADLINE};

pub fn subscribe(bus: &SessionBus) -> Result<Subscription, BusError> {
    bus.subscribe(
        "dialogue_manager",
        [
            EventKind::VadStart,
            EventKind::AsrFinal,
            EventKind::InterruptCandidate,
            EventKind::LlmSentence,
            EventKind::LlmDone,
            EventKind::TtsChunk,
            EventKind::TtsDone,
            EventKind::ThinkingStart,
            EventKind::ThinkingEnd,
            EventKind::CaptionUpdated,
            EventKind::SpeakerIdentified,
            EventKind::TimbreSwitch,
            EventKind::EmotionSwitch,
        ],
    )
}

/// Estimate of where client playback of the current turn stands, from
/// the durations of the chunks sent so far.
#[derive(Debug, Default)]
struct PlaybackClock {
    turn: TurnId,
    ends_at: Option<Instant>,
    paused_at: Option<Instant>,
}

impl PlaybackClock {
    fn reset(&mut self, turn: TurnId) {
        *self = Self {
            turn,
            ..Self::default()
        };
    }

    fn on_chunk(&mut self, now: Instant, pcm_len: usize) {
        let dur = Duration::from_secs_f64(samples_to_ms(pcm_len / 2) / 1000.0);
        let start = self.ends_at.map_or(now, |e| e.max(now));
        self.ends_at = Some(start + dur);
    }

    fn pause(&mut self, now: Instant) {
        self.paused_at.get_or_insert(now);
    }

    fn resume(&mut self, now: Instant) {
        if let (Some(p), Some(e)) = (self.paused_at.take(), self.ends_at.as_mut()) {
            *e += now.saturating_duration_since(p);
        }
    }
}

pub struct DialogueManager {
    pub bus: SessionBus,
    pub sub: Subscription,
    pub state: TurnState,
    pub phase: PhaseCell,
    pub rules: FalseInterruptRules,
    pub models: Models,
    pub registries: Arc<Registries>,
    pub phatic: PhaticPolicy,
    pub segmenter: SegmenterConfig,
    pub tts_config: TtsConfig,
}

struct Running {
    ctx: TurnContext,
    tasks: JoinSet<()>,
    agents: HashMap<TurnId, AbortHandle>,
    reply: HashMap<TurnId, Vec<String>>,
    clock: PlaybackClock,
    deadline: Option<Instant>,
    playback_ended_fired: bool,
    tts_done: Option<TurnId>,
    thoughts: mpsc::UnboundedSender<(TurnId, String)>,
}

impl DialogueManager {
    fn input(&mut self, input: TurnInput) -> Vec<TurnAction> {
        let now = self.bus.now_ns();
        let actions = self.state.on(input, now, &self.rules);
        self.phase.set(self.state.phase);
        actions
    }

    fn close_reply(&self, r: &mut Running, turn: TurnId) {
        if let Some(parts) = r.reply.remove(&turn) {
            if !parts.is_empty() {
                r.ctx.history.push((Role::Assistant, parts.concat()));
            }
        }
    }

    async fn execute(&mut self, r: &mut Running, actions: Vec<TurnAction>) {
        for action in actions {
            match action {
                TurnAction::PausePlayback(t) => {
                    r.clock.pause(Instant::now());
                    self.bus.publish(Payload::PausePlayback { turn_id: t }).await;
                }
                TurnAction::Resume(t) => {
                    r.clock.resume(Instant::now());
                    self.bus.publish(Payload::Resume { turn_id: t }).await;
                }
                TurnAction::FalseInterrupt(t, reason) => {
                    tracing::debug!(session = %self.bus.session, turn = t, ?reason, "false interrupt");
                    self.bus.publish(Payload::FalseInterrupt { turn_id: t, reason }).await;
                }
                TurnAction::Confirm { old, new, transcript } => {
                    if let Some(h) = r.agents.remove(&old) {
                        h.abort();
                    }
                    self.close_reply(r, old);
                    self.bus
                        .publish(Payload::InterruptConfirmed {
                            old_turn: old,
                            new_turn: new,
                            transcript,
                        })
                        .await;
                    self.bus.publish(Payload::Flush { turn_id: old }).await;
                    self.bus.publish(Payload::Stop { turn_id: Some(old) }).await;
                    r.clock.reset(new);
                    r.tts_done = None;
                }
                TurnAction::StartTurn { turn, text } => {
                    r.clock.reset(turn);
                    r.tts_done = None;
                    r.playback_ended_fired = false;
                    let mut ctx = r.ctx.clone();
                    ctx.voice = self.tts_config.voice.clone();
                    ctx.emotion = self.tts_config.emotion.clone();
                    r.ctx.thinking = None;
                    r.ctx.history.push((Role::User, text.clone()));
                    r.reply.insert(turn, Vec::new());
                    let agent = AgentTurn {
                        bus: self.bus.clone(),
                        turn,
                        user_text: text,
                        ctx,
                        llm: self.models.llm.clone(),
                        tools: self.models.tools.clone(),
                        registries: self.registries.clone(),
                        phatic: self.phatic.clone(),
                        segmenter: self.segmenter,
                    };
                    let h = r.tasks.spawn(agent.run());
                    r.agents.insert(turn, h);
                }
                TurnAction::ArmDeadline { started_at_ns } => {
                    r.deadline = Some(self.bus.bus.instant_of(started_at_ns) + VERIFY_DEADLINE);
                }
                TurnAction::DisarmDeadline => r.deadline = None,
            }
        }
    }

    /// When the playback-ended timer should fire, if it is armed.
    fn playback_timer(&self, r: &Running) -> Option<Instant> {
        if r.playback_ended_fired || r.clock.paused_at.is_some() {
            return None;
        }
        let done = r.tts_done?;
        if done != self.state.current_turn_id || r.clock.turn != done {
            return None;
        }
        r.clock.ends_at
    }

    async fn on_event(&mut self, r: &mut Running, payload: &Payload) {
        let actions = match payload {
            Payload::VadStart => self.input(TurnInput::VadStart),
            Payload::InterruptCandidate => self.input(TurnInput::InterruptCandidate),
            Payload::AsrFinal { text, audio_ms, .. } => self.input(TurnInput::AsrFinal {
                text: text.clone(),
                audio_ms: *audio_ms,
            }),
            Payload::TtsChunk(c) => {
                if c.turn_id != self.state.current_turn_id {
                    return;
                }
                if r.clock.turn != c.turn_id {
                    r.clock.reset(c.turn_id);
                }
                let first = r.clock.ends_at.is_none();
                r.clock.on_chunk(Instant::now(), c.pcm.len());
                if first {
                    self.input(TurnInput::FirstAudio(c.turn_id))
                } else {
                    Vec::new()
                }
            }
            Payload::TtsDone { turn_id, .. } => {
                r.agents.remove(turn_id);
                r.tts_done = Some(*turn_id);
                self.input(TurnInput::TtsDone(*turn_id))
            }
            Payload::LlmSentence { turn_id, text, .. } => {
                if let Some(parts) = r.reply.get_mut(turn_id) {
                    parts.push(text.clone());
                }
                Vec::new()
            }
            Payload::LlmDone { turn_id, .. } => {
                self.close_reply(r, *turn_id);
                Vec::new()
            }
            Payload::ThinkingStart { turn_id, query } => {
                let thinker = self.models.thinker.clone();
                let tx = r.thoughts.clone();
                let (turn, query) = (*turn_id, query.clone());
                r.tasks.spawn(async move {
                    let summary = thinker.think(query).await;
                    let _ = tx.send((turn, summary));
                });
                Vec::new()
            }
            Payload::ThinkingEnd { summary, .. } => {
                r.ctx.thinking = Some(summary.clone());
                Vec::new()
            }
            Payload::CaptionUpdated { text, .. } => {
                r.ctx.caption = Some(text.clone());
                Vec::new()
            }
            Payload::SpeakerIdentified { speaker_id, .. } => {
                r.ctx.speaker_id = Some(speaker_id.clone());
                Vec::new()
            }
            Payload::TimbreSwitch { voice, profile_tag } => {
                self.tts_config.voice = voice.clone();
                self.tts_config.profile_tag = profile_tag.clone();
                Vec::new()
            }
            Payload::EmotionSwitch { emotion } => {
                self.tts_config.emotion = emotion.clone();
                Vec::new()
            }
            _ => Vec::new(),
        };
        self.execute(r, actions).await;
    }

    pub async fn run(mut self) {
        let (thoughts, mut thought_rx) = mpsc::unbounded_channel();
        let mut r = Running {
            ctx: TurnContext {
                voice: self.tts_config.voice.clone(),
                emotion: self.tts_config.emotion.clone(),
                ..TurnContext::default()
            },
            tasks: JoinSet::new(),
            agents: HashMap::new(),
            reply: HashMap::new(),
            clock: PlaybackClock::default(),
            deadline: None,
            playback_ended_fired: false,
            tts_done: None,
            thoughts,
        };
        self.phase.set(self.state.phase);
        loop {
            while r.tasks.try_join_next().is_some() {}
            let playback = self.playback_timer(&r);
            let deadline = r.deadline;
            tokio::select! {
                biased;
                ev = self.sub.next() => {
                    let Ok(ev) = ev else { break };
                    self.on_event(&mut r, &ev.payload).await;
                }
                Some((turn, summary)) = thought_rx.recv() => {
                    self.bus.publish(Payload::ThinkingEnd { turn_id: turn, summary }).await;
                }
                _ = sleep_until(deadline.unwrap_or_else(Instant::now)), if deadline.is_some() => {
                    r.deadline = None;
                    let actions = self.input(TurnInput::Deadline);
                    self.execute(&mut r, actions).await;
                }
                _ = sleep_until(playback.unwrap_or_else(Instant::now)), if playback.is_some() => {
                    r.playback_ended_fired = true;
                    let turn = r.clock.turn;
                    let actions = self.input(TurnInput::PlaybackEnded(turn));
                    self.execute(&mut r, actions).await;
                }
            }
        }
        r.tasks.shutdown().await;
    }
}
