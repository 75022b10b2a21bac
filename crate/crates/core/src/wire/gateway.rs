//! Input and output gateways for one connection.

use std::collections::HashSet;
use std::sync::Arc;

use serde_json::Value;
use tokio::sync::mpsc;

use super::{
    decode_client_frame, encode_server_event, ClientBody, ClientMessage, Frame, SeqTracker,
    WireError,
};
use crate::agent::{emotion_switch, timbre_switch, Registries};
use crate::bus::{BusError, EventKind, KindSet, Payload, SessionBus, Subscription, TurnId};
use crate::turn::{PhaseCell, TurnPhase};

/// Publishes `Stop` then `SessionClose` if the session is still open.
pub async fn close_routes(bus: &SessionBus) -> bool {
    if !bus.bus.is_open(bus.session) {
        return false;
    }
    bus.publish(Payload::Stop { turn_id: None }).await;
    bus.publish(Payload::SessionClose).await
}

/// Turns client messages into bus events.
pub struct InputGateway {
    bus: SessionBus,
    phase: PhaseCell,
    registries: Arc<Registries>,
    seq: SeqTracker,
    closed: bool,
}

impl InputGateway {
    pub fn new(bus: SessionBus, phase: PhaseCell, registries: Arc<Registries>) -> Self {
        Self {
            bus,
            phase,
            registries,
            seq: SeqTracker::default(),
            closed: false,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Decodes, sequence-checks and ingests one frame.
    pub async fn handle_frame(&mut self, frame: &Frame) -> Result<Vec<Payload>, WireError> {
        let msg = decode_client_frame(frame)?;
        if self.closed {
            return Err(WireError::UnknownSession);
        }
        self.seq.check(msg.seq)?;
        self.ingest(msg).await
    }

    fn config_events(&self, payload: &serde_json::Map<String, Value>) -> Result<Vec<Payload>, WireError> {
        let mut out = Vec::new();
        for (key, value) in payload {
            let v = value
                .as_str()
                .ok_or_else(|| WireError::InvalidConfig(format!("{key} must be a string")))?;
            let ev = match key.as_str() {
                "voice" => timbre_switch(&self.registries.voices, v),
                "emotion" => emotion_switch(&self.registries.voices, v),
                other => return Err(WireError::InvalidConfig(format!("unknown key {other}"))),
            };
            out.push(ev.map_err(|e| WireError::InvalidConfig(e.to_string()))?);
        }
        Ok(out)
    }

    /// Publishes the events for `msg` and returns them.
    pub async fn ingest(&mut self, msg: ClientMessage) -> Result<Vec<Payload>, WireError> {
        if self.closed || !self.bus.bus.is_open(self.bus.session) {
            return Err(WireError::UnknownSession);
        }
        let events = match msg.body {
            ClientBody::Hello => Vec::new(),
            ClientBody::Audio(frame) => vec![Payload::AudioIn(frame)],
            ClientBody::VadStart => {
                let mut v = vec![Payload::VadStart];
                if self.phase.get() == TurnPhase::AgentSpeaking {
                    v.push(Payload::InterruptCandidate);
                }
                v
            }
            ClientBody::VadEnd => vec![Payload::VadEnd],
            ClientBody::BargeIn => vec![Payload::InterruptCandidate],
            ClientBody::TextInput { text } => vec![Payload::AsrFinal {
                text,
                audio_ms: 0,
                degraded: false,
            }],
            ClientBody::Config(map) => self.config_events(&map)?,
            ClientBody::Bye => {
                self.closed = true;
                close_routes(&self.bus).await;
                return Ok(vec![Payload::SessionClose]);
            }
        };
        for e in &events {
            self.bus.publish(e.clone()).await;
        }
        Ok(events)
    }
}

/// Every kind the output gateway listens to.
pub fn output_kinds() -> KindSet {
    [
        EventKind::AsrPartial,
        EventKind::AsrFinal,
        EventKind::LlmToken,
        EventKind::LlmSentence,
        EventKind::TtsChunk,
        EventKind::TtsDone,
        EventKind::PausePlayback,
        EventKind::Resume,
        EventKind::InterruptConfirmed,
        EventKind::ThinkingStart,
        EventKind::ThinkingEnd,
        EventKind::CaptionUpdated,
        EventKind::SpeakerIdentified,
        EventKind::Metric,
        EventKind::Flush,
        EventKind::Stop,
    ]
    .into()
}

pub fn subscribe_output(bus: &SessionBus) -> Result<Subscription, BusError> {
    bus.subscribe("output_gateway", output_kinds())
}

/// Forwards client-visible events as frames, dropping anything that
/// belongs to a cancelled turn.
pub struct OutputGateway {
    sub: Subscription,
    out: mpsc::Sender<Frame>,
    current_turn: TurnId,
    dead: HashSet<TurnId>,
    stopped: bool,
}

impl OutputGateway {
    pub fn new(sub: Subscription, out: mpsc::Sender<Frame>) -> Self {
        Self {
            sub,
            out,
            current_turn: 0,
            dead: HashSet::new(),
            stopped: false,
        }
    }

    pub async fn run(mut self) {
        while let Ok(ev) = self.sub.next().await {
            let p = &ev.payload;
            match p {
                Payload::Flush { turn_id } | Payload::Stop { turn_id: Some(turn_id) } => {
                    self.dead.insert(*turn_id);
                    continue;
                }
                Payload::Stop { turn_id: None } => {
                    self.stopped = true;
                    continue;
                }
                Payload::InterruptConfirmed { old_turn, new_turn, .. } => {
                    self.dead.insert(*old_turn);
                    self.current_turn = self.current_turn.max(*new_turn);
                }
                Payload::Metric { .. } => {}
                _ => {
                    if let Some(t) = p.turn_id() {
                        if self.dead.contains(&t) || (self.stopped && matches!(p, Payload::TtsChunk(_))) {
                            continue;
                        }
                        self.current_turn = self.current_turn.max(t);
                    }
                }
            }
            match encode_server_event(p, self.current_turn) {
                Ok(frame) => {
                    if self.out.send(frame).await.is_err() {
                        break;
                    }
                }
                Err(e) => tracing::error!(error = %e, "internal event reached the output gateway"),
            }
        }
    }
}
