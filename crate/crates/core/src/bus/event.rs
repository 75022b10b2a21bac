//! Typed events flowing on the bus.

use std::collections::BTreeMap;
use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::audio::AudioFrame;

/// Opaque per-connection session handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{:04}", self.0)
    }
}

/// Dialogue turn counter. Turn 0 means "no turn yet".
pub type TurnId = u32;

/// Delivery class. Lower values are dequeued first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Priority {
    Control = 0,
    Data = 1,
    Telemetry = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    SessionOpen,
    SessionClose,
    AudioIn,
    VadStart,
    VadEnd,
    AsrPartial,
    AsrFinal,
    LlmToken,
    LlmSentence,
    LlmDone,
    ToolCallStart,
    ToolCallEnd,
    PhaticUtterance,
    TtsChunk,
    TtsDone,
    InterruptCandidate,
    InterruptConfirmed,
    FalseInterrupt,
    Resume,
    PausePlayback,
    Flush,
    Stop,
    TimbreSwitch,
    EmotionSwitch,
    ThinkingStart,
    ThinkingEnd,
    CaptionUpdated,
    SpeakerIdentified,
    Metric,
}

impl EventKind {
    pub const ALL: [EventKind; 29] = [
        EventKind::SessionOpen,
        EventKind::SessionClose,
        EventKind::AudioIn,
        EventKind::VadStart,
        EventKind::VadEnd,
        EventKind::AsrPartial,
        EventKind::AsrFinal,
        EventKind::LlmToken,
        EventKind::LlmSentence,
        EventKind::LlmDone,
        EventKind::ToolCallStart,
        EventKind::ToolCallEnd,
        EventKind::PhaticUtterance,
        EventKind::TtsChunk,
        EventKind::TtsDone,
        EventKind::InterruptCandidate,
        EventKind::InterruptConfirmed,
        EventKind::FalseInterrupt,
        EventKind::Resume,
        EventKind::PausePlayback,
        EventKind::Flush,
        EventKind::Stop,
        EventKind::TimbreSwitch,
        EventKind::EmotionSwitch,
        EventKind::ThinkingStart,
        EventKind::ThinkingEnd,
        EventKind::CaptionUpdated,
        EventKind::SpeakerIdentified,
        EventKind::Metric,
    ];

    /// Fixed kind → priority mapping.
    pub const fn priority(self) -> Priority {
        match self {
            EventKind::Flush
            | EventKind::Stop
            | EventKind::PausePlayback
            | EventKind::Resume
            | EventKind::InterruptConfirmed
            | EventKind::SessionClose => Priority::Control,
            EventKind::Metric => Priority::Telemetry,
            _ => Priority::Data,
        }
    }

    /// Kinds that the output gateway may put on the wire.
    pub const fn is_client_visible(self) -> bool {
        matches!(
            self,
            EventKind::AsrPartial
                | EventKind::AsrFinal
                | EventKind::LlmToken
                | EventKind::LlmSentence
                | EventKind::TtsChunk
                | EventKind::TtsDone
                | EventKind::PausePlayback
                | EventKind::Resume
                | EventKind::InterruptConfirmed
                | EventKind::ThinkingStart
                | EventKind::ThinkingEnd
                | EventKind::CaptionUpdated
                | EventKind::SpeakerIdentified
                | EventKind::Metric
        )
    }
}

/// Reason a barge-in candidate was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FalseReason {
    TooShort,
    EmptyAsr,
    SingleChar,
    FillerOnly,
}

impl FalseReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FalseReason::TooShort => "too_short",
            FalseReason::EmptyAsr => "empty_asr",
            FalseReason::SingleChar => "single_char",
            FalseReason::FillerOnly => "filler_only",
        }
    }
}

/// One synthesized slice of agent audio, released in playback order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtsChunk {
    pub turn_id: TurnId,
    pub clause_index: u16,
    pub chunk_index: u16,
    pub pcm: Bytes,
}

impl TtsChunk {
    /// Packed `(clause, chunk)` ordering index carried on the wire; numeric
    /// order equals lexicographic order of the pair.
    pub fn wire_index(&self) -> u32 {
        (self.clause_index as u32) << 16 | self.chunk_index as u32
    }

    pub fn split_index(index: u32) -> (u16, u16) {
        ((index >> 16) as u16, index as u16)
    }
}

/// Kind-specific event body. The variant determines the [`EventKind`].
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    SessionOpen,
    SessionClose,
    AudioIn(AudioFrame),
    VadStart,
    VadEnd,
    AsrPartial {
        finalized: String,
        volatile: String,
    },
    AsrFinal {
        text: String,
        audio_ms: u64,
        degraded: bool,
    },
    LlmToken {
        turn_id: TurnId,
        text: String,
    },
    LlmSentence {
        turn_id: TurnId,
        index: u32,
        text: String,
    },
    LlmDone {
        turn_id: TurnId,
        sentences: u32,
    },
    ToolCallStart {
        turn_id: TurnId,
        tool: String,
        args: BTreeMap<String, String>,
    },
    ToolCallEnd {
        turn_id: TurnId,
        tool: String,
        ok: bool,
        result: String,
    },
    PhaticUtterance {
        turn_id: TurnId,
        text: String,
    },
    TtsChunk(TtsChunk),
    TtsDone {
        turn_id: TurnId,
        clauses: u32,
    },
    InterruptCandidate,
    InterruptConfirmed {
        old_turn: TurnId,
        new_turn: TurnId,
        transcript: String,
    },
    FalseInterrupt {
        turn_id: TurnId,
        reason: FalseReason,
    },
    Resume {
        turn_id: TurnId,
    },
    PausePlayback {
        turn_id: TurnId,
    },
    Flush {
        turn_id: TurnId,
    },
    Stop {
        turn_id: Option<TurnId>,
    },
    TimbreSwitch {
        voice: String,
        profile_tag: String,
    },
    EmotionSwitch {
        emotion: String,
    },
    ThinkingStart {
        turn_id: TurnId,
        query: String,
    },
    ThinkingEnd {
        turn_id: TurnId,
        summary: String,
    },
    CaptionUpdated {
        text: String,
        rewritten: bool,
    },
    SpeakerIdentified {
        speaker_id: String,
        similarity: f64,
        is_new: bool,
    },
    Metric {
        turn_id: Option<TurnId>,
        name: String,
        value_ms: f64,
    },
}

impl Payload {
    pub fn kind(&self) -> EventKind {
        match self {
            Payload::SessionOpen => EventKind::SessionOpen,
            Payload::SessionClose => EventKind::SessionClose,
            Payload::AudioIn(_) => EventKind::AudioIn,
            Payload::VadStart => EventKind::VadStart,
            Payload::VadEnd => EventKind::VadEnd,
            Payload::AsrPartial { .. } => EventKind::AsrPartial,
            Payload::AsrFinal { .. } => EventKind::AsrFinal,
            Payload::LlmToken { .. } => EventKind::LlmToken,
            Payload::LlmSentence { .. } => EventKind::LlmSentence,
            Payload::LlmDone { .. } => EventKind::LlmDone,
            Payload::ToolCallStart { .. } => EventKind::ToolCallStart,
            Payload::ToolCallEnd { .. } => EventKind::ToolCallEnd,
            Payload::PhaticUtterance { .. } => EventKind::PhaticUtterance,
            Payload::TtsChunk(_) => EventKind::TtsChunk,
            Payload::TtsDone { .. } => EventKind::TtsDone,
            Payload::InterruptCandidate => EventKind::InterruptCandidate,
            Payload::InterruptConfirmed { .. } => EventKind::InterruptConfirmed,
            Payload::FalseInterrupt { .. } => EventKind::FalseInterrupt,
            Payload::Resume { .. } => EventKind::Resume,
            Payload::PausePlayback { .. } => EventKind::PausePlayback,
            Payload::Flush { .. } => EventKind::Flush,
            Payload::Stop { .. } => EventKind::Stop,
            Payload::TimbreSwitch { .. } => EventKind::TimbreSwitch,
            Payload::EmotionSwitch { .. } => EventKind::EmotionSwitch,
            Payload::ThinkingStart { .. } => EventKind::ThinkingStart,
            Payload::ThinkingEnd { .. } => EventKind::ThinkingEnd,
            Payload::CaptionUpdated { .. } => EventKind::CaptionUpdated,
            Payload::SpeakerIdentified { .. } => EventKind::SpeakerIdentified,
            Payload::Metric { .. } => EventKind::Metric,
        }
    }

    /// The dialogue turn this payload belongs to, if it is turn-scoped.
    pub fn turn_id(&self) -> Option<TurnId> {
        match self {
            Payload::LlmToken { turn_id, .. }
            | Payload::LlmSentence { turn_id, .. }
            | Payload::LlmDone { turn_id, .. }
            | Payload::ToolCallStart { turn_id, .. }
            | Payload::ToolCallEnd { turn_id, .. }
            | Payload::PhaticUtterance { turn_id, .. }
            | Payload::TtsDone { turn_id, .. }
            | Payload::FalseInterrupt { turn_id, .. }
            | Payload::Resume { turn_id }
            | Payload::PausePlayback { turn_id }
            | Payload::Flush { turn_id }
            | Payload::ThinkingStart { turn_id, .. }
            | Payload::ThinkingEnd { turn_id, .. } => Some(*turn_id),
            Payload::TtsChunk(c) => Some(c.turn_id),
            Payload::InterruptConfirmed { new_turn, .. } => Some(*new_turn),
            Payload::Stop { turn_id } => *turn_id,
            Payload::Metric { turn_id, .. } => *turn_id,
            _ => None,
        }
    }
}

/// A published event. Identity and timestamp are assigned by the bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub event_id: u64,
    pub session_id: SessionId,
    pub created_at_ns: u64,
    pub payload: Payload,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }

    pub fn priority(&self) -> Priority {
        self.kind().priority()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_set_is_exactly_the_documented_six() {
        let control: Vec<_> = EventKind::ALL
            .iter()
            .copied()
            .filter(|k| k.priority() == Priority::Control)
            .collect();
        assert_eq!(
            control,
            vec![
                EventKind::SessionClose,
                EventKind::InterruptConfirmed,
                EventKind::Resume,
                EventKind::PausePlayback,
                EventKind::Flush,
                EventKind::Stop,
            ]
        );
        let telemetry: Vec<_> = EventKind::ALL
            .iter()
            .copied()
            .filter(|k| k.priority() == Priority::Telemetry)
            .collect();
        assert_eq!(telemetry, vec![EventKind::Metric]);
    }

    #[test]
    fn internal_kinds_are_not_client_visible() {
        for k in [
            EventKind::Flush,
            EventKind::Stop,
            EventKind::AudioIn,
            EventKind::SessionOpen,
            EventKind::ToolCallStart,
            EventKind::PhaticUtterance,
            EventKind::FalseInterrupt,
        ] {
            assert!(!k.is_client_visible(), "{k:?}");
        }
    }
}
