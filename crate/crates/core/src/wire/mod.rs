//! Client/server framing over WebSocket messages.
//!
//! Control traffic is JSON text; audio is tagged binary. Client frames are
//! `{type, seq, payload}` envelopes or `[0x01][seq u32 BE][PCM]`; server
//! frames are `{type, turn_id, payload}` or `[0x02][turn u32 BE][index u32 BE][PCM]`.

pub mod gateway;

use bytes::{BufMut, Bytes, BytesMut};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::audio::AudioFrame;
use crate::bus::{EventKind, Payload, SessionId, TtsChunk, TurnId};

pub const SESSION_PATH: &str = "/session";
pub const SUBPROTOCOL: &str = "xtalk.v1";
pub const CLIENT_AUDIO_TAG: u8 = 0x01;
pub const SERVER_TTS_TAG: u8 = 0x02;
pub const CLIENT_AUDIO_HEADER: usize = 5;
pub const SERVER_TTS_HEADER: usize = 9;

/// A complete WebSocket message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Text(String),
    Binary(Bytes),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("sequence regression: {got} after {last}")]
    SequenceRegression { last: u32, got: u32 },
    #[error("{0:?} is internal and never goes on the wire")]
    NotClientVisible(EventKind),
    #[error("unknown session")]
    UnknownSession,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl WireError {
    /// Code carried in the `error` frame sent back to the client.
    pub fn code(&self) -> &'static str {
        match self {
            WireError::MalformedFrame(_) => "malformed_frame",
            WireError::SequenceRegression { .. } => "sequence_regression",
            WireError::NotClientVisible(_) => "internal_event",
            WireError::UnknownSession => "unknown_session",
            WireError::InvalidConfig(_) => "invalid_config",
        }
    }
}

fn malformed(msg: impl Into<String>) -> WireError {
    WireError::MalformedFrame(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientBody {
    Hello,
    Audio(AudioFrame),
    VadStart,
    VadEnd,
    BargeIn,
    TextInput { text: String },
    Config(Map<String, Value>),
    Bye,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientMessage {
    pub seq: u32,
    pub body: ClientBody,
}

impl ClientMessage {
    pub fn new(seq: u32, body: ClientBody) -> Self {
        Self { seq, body }
    }

    pub fn msg_type(&self) -> &'static str {
        match self.body {
            ClientBody::Hello => "hello",
            ClientBody::Audio(_) => "audio",
            ClientBody::VadStart => "vad_start",
            ClientBody::VadEnd => "vad_end",
            ClientBody::BargeIn => "barge_in",
            ClientBody::TextInput { .. } => "text_input",
            ClientBody::Config(_) => "config",
            ClientBody::Bye => "bye",
        }
    }
}

pub fn decode_client_frame(frame: &Frame) -> Result<ClientMessage, WireError> {
    match frame {
        Frame::Binary(b) => {
            if b.len() < CLIENT_AUDIO_HEADER {
                return Err(malformed("short binary frame"));
            }
            if b[0] != CLIENT_AUDIO_TAG {
                return Err(malformed(format!("unknown binary tag 0x{:02x}", b[0])));
            }
            let seq = u32::from_be_bytes([b[1], b[2], b[3], b[4]]);
            let pcm = AudioFrame::from_bytes(b.slice(CLIENT_AUDIO_HEADER..))
                .ok_or_else(|| malformed("odd PCM length"))?;
            Ok(ClientMessage::new(seq, ClientBody::Audio(pcm)))
        }
        Frame::Text(t) => {
            let v: Value = serde_json::from_str(t).map_err(|e| malformed(e.to_string()))?;
            let obj = v.as_object().ok_or_else(|| malformed("envelope is not an object"))?;
            let ty = obj
                .get("type")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("missing type"))?;
            let seq = obj
                .get("seq")
                .and_then(Value::as_u64)
                .and_then(|s| u32::try_from(s).ok())
                .ok_or_else(|| malformed("missing or invalid seq"))?;
            let payload = match obj.get("payload") {
                Some(Value::Object(m)) => m.clone(),
                Some(_) => return Err(malformed("payload is not an object")),
                None => return Err(malformed("missing payload")),
            };
            let body = match ty {
                "hello" => ClientBody::Hello,
                "vad_start" => ClientBody::VadStart,
                "vad_end" => ClientBody::VadEnd,
                "barge_in" => ClientBody::BargeIn,
                "bye" => ClientBody::Bye,
                "text_input" => ClientBody::TextInput {
                    text: payload
                        .get("text")
                        .and_then(Value::as_str)
                        .ok_or_else(|| malformed("text_input without text"))?
                        .to_string(),
                },
                "config" => ClientBody::Config(payload),
                "audio" => return Err(malformed("audio must be sent as a binary frame")),
                other => return Err(malformed(format!("unknown type {other}"))),
            };
            Ok(ClientMessage::new(seq, body))
        }
    }
}

pub fn encode_client_message(msg: &ClientMessage) -> Frame {
    let payload = match &msg.body {
        ClientBody::Audio(a) => {
            let mut b = BytesMut::with_capacity(CLIENT_AUDIO_HEADER + a.bytes().len());
            b.put_u8(CLIENT_AUDIO_TAG);
            b.put_u32(msg.seq);
            b.put_slice(a.bytes());
            return Frame::Binary(b.freeze());
        }
        ClientBody::TextInput { text } => json!({ "text": text }),
        ClientBody::Config(m) => Value::Object(m.clone()),
        _ => json!({}),
    };
    Frame::Text(json!({ "type": msg.msg_type(), "seq": msg.seq, "payload": payload }).to_string())
}

/// Enforces strictly increasing client sequence numbers per connection.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: Option<u32>,
}

impl SeqTracker {
    pub fn check(&mut self, seq: u32) -> Result<(), WireError> {
        match self.last {
            Some(last) if seq <= last => Err(WireError::SequenceRegression { last, got: seq }),
            _ => {
                self.last = Some(seq);
                Ok(())
            }
        }
    }
}

/// Wire type name of a client-visible payload.
pub fn server_type(payload: &Payload) -> Result<&'static str, WireError> {
    Ok(match payload {
        Payload::AsrPartial { .. } => "asr_partial",
        Payload::AsrFinal { .. } => "asr_final",
        Payload::LlmToken { .. } => "llm_token",
        Payload::LlmSentence { .. } => "llm_sentence",
        Payload::TtsChunk(_) => "tts_chunk",
        Payload::TtsDone { .. } => "tts_done",
        Payload::PausePlayback { .. } => "pause_playback",
        Payload::Resume { .. } => "resume",
        Payload::InterruptConfirmed { .. } => "interrupt_confirmed",
        Payload::ThinkingStart { .. } | Payload::ThinkingEnd { .. } => "thinking",
        Payload::CaptionUpdated { .. } => "caption",
        Payload::SpeakerIdentified { .. } => "speaker",
        Payload::Metric { .. } => "metric",
        other => return Err(WireError::NotClientVisible(other.kind())),
    })
}

/// Encodes a client-visible event. `current_turn` stamps events that are
/// not turn-scoped themselves.
pub fn encode_server_event(payload: &Payload, current_turn: TurnId) -> Result<Frame, WireError> {
    let ty = server_type(payload)?;
    if let Payload::TtsChunk(c) = payload {
        let mut b = BytesMut::with_capacity(SERVER_TTS_HEADER + c.pcm.len());
        b.put_u8(SERVER_TTS_TAG);
        b.put_u32(c.turn_id);
        b.put_u32(c.wire_index());
        b.put_slice(&c.pcm);
        return Ok(Frame::Binary(b.freeze()));
    }
    let body = match payload {
        Payload::AsrPartial { finalized, volatile } => {
            json!({ "text": format!("{finalized}{volatile}"), "finalized": finalized })
        }
        Payload::AsrFinal {
            text,
            audio_ms,
            degraded,
        } => json!({ "text": text, "audio_ms": audio_ms, "degraded": degraded }),
        Payload::LlmToken { text, .. } => json!({ "text": text }),
        Payload::LlmSentence { index, text, .. } => json!({ "index": index, "text": text }),
        Payload::TtsDone { clauses, .. } => json!({ "clauses": clauses }),
        Payload::PausePlayback { .. } | Payload::Resume { .. } => json!({}),
        Payload::InterruptConfirmed {
            old_turn,
            transcript,
            ..
        } => json!({ "old_turn": old_turn, "transcript": transcript }),
        Payload::ThinkingStart { query, .. } => json!({ "state": "start", "query": query }),
        Payload::ThinkingEnd { summary, .. } => json!({ "state": "end", "summary": summary }),
        Payload::CaptionUpdated { text, rewritten } => json!({ "text": text, "rewritten": rewritten }),
        Payload::SpeakerIdentified {
            speaker_id,
            similarity,
            is_new,
        } => json!({ "speaker_id": speaker_id, "similarity": similarity, "is_new": is_new }),
        Payload::Metric { name, value_ms, .. } => json!({ "name": name, "value_ms": value_ms }),
        _ => unreachable!("server_type accepted it"),
    };
    let turn = match payload {
        Payload::Metric { turn_id, .. } => json!(turn_id),
        p => json!(p.turn_id().unwrap_or(current_turn)),
    };
    Ok(Frame::Text(
        json!({ "type": ty, "turn_id": turn, "payload": body }).to_string(),
    ))
}

pub fn encode_hello_ack(session: SessionId) -> Frame {
    Frame::Text(json!({ "type": "hello_ack", "payload": { "session_id": session.to_string() } }).to_string())
}

pub fn encode_error(code: &str) -> Frame {
    Frame::Text(json!({ "type": "error", "payload": { "code": code } }).to_string())
}

/// A decoded server frame, as a client sees it.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    HelloAck { session_id: String },
    Error { code: String },
    Event { turn_id: Option<TurnId>, payload: Payload },
}

impl ServerMessage {
    pub fn msg_type(&self) -> &'static str {
        match self {
            ServerMessage::HelloAck { .. } => "hello_ack",
            ServerMessage::Error { .. } => "error",
            ServerMessage::Event { payload, .. } => server_type(payload).unwrap_or("internal"),
        }
    }
}

fn field<'a>(m: &'a Map<String, Value>, key: &str) -> Result<&'a Value, WireError> {
    m.get(key).ok_or_else(|| malformed(format!("missing {key}")))
}

fn str_field(m: &Map<String, Value>, key: &str) -> Result<String, WireError> {
    field(m, key)?
        .as_str()
        .map(String::from)
        .ok_or_else(|| malformed(format!("{key} is not a string")))
}

fn u64_field(m: &Map<String, Value>, key: &str) -> Result<u64, WireError> {
    field(m, key)?
        .as_u64()
        .ok_or_else(|| malformed(format!("{key} is not an unsigned integer")))
}

fn u32_field(m: &Map<String, Value>, key: &str) -> Result<u32, WireError> {
    u32::try_from(u64_field(m, key)?).map_err(|_| malformed(format!("{key} out of range")))
}

fn bool_field(m: &Map<String, Value>, key: &str) -> Result<bool, WireError> {
    field(m, key)?
        .as_bool()
        .ok_or_else(|| malformed(format!("{key} is not a boolean")))
}

fn f64_field(m: &Map<String, Value>, key: &str) -> Result<f64, WireError> {
    field(m, key)?
        .as_f64()
        .ok_or_else(|| malformed(format!("{key} is not a number")))
}

pub fn decode_server_frame(frame: &Frame) -> Result<ServerMessage, WireError> {
    let text = match frame {
        Frame::Binary(b) => {
            if b.len() < SERVER_TTS_HEADER || b[0] != SERVER_TTS_TAG {
                return Err(malformed("not a tts_chunk frame"));
            }
            if !(b.len() - SERVER_TTS_HEADER).is_multiple_of(2) {
                return Err(malformed("odd PCM length"));
            }
            let turn_id = u32::from_be_bytes([b[1], b[2], b[3], b[4]]);
            let (clause_index, chunk_index) =
                TtsChunk::split_index(u32::from_be_bytes([b[5], b[6], b[7], b[8]]));
            return Ok(ServerMessage::Event {
                turn_id: Some(turn_id),
                payload: Payload::TtsChunk(TtsChunk {
                    turn_id,
                    clause_index,
                    chunk_index,
                    pcm: b.slice(SERVER_TTS_HEADER..),
                }),
            });
        }
        Frame::Text(t) => t,
    };
    let v: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| malformed("envelope is not an object"))?;
    let ty = str_field(obj, "type")?;
    let p = match obj.get("payload") {
        Some(Value::Object(m)) => m,
        _ => return Err(malformed("payload is not an object")),
    };
    match ty.as_str() {
        "hello_ack" => {
            return Ok(ServerMessage::HelloAck {
                session_id: str_field(p, "session_id")?,
            })
        }
        "error" => return Ok(ServerMessage::Error { code: str_field(p, "code")? }),
        _ => {}
    }
    let turn_id = match obj.get("turn_id") {
        Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .and_then(|t| u32::try_from(t).ok())
                .ok_or_else(|| malformed("turn_id out of range"))?,
        ),
        None => return Err(malformed("missing turn_id")),
    };
    let turn = || turn_id.ok_or_else(|| malformed("turn_id required"));
    let payload = match ty.as_str() {
        "asr_partial" => {
            let text = str_field(p, "text")?;
            let finalized = str_field(p, "finalized")?;
            let volatile = text
                .strip_prefix(finalized.as_str())
                .ok_or_else(|| malformed("finalized is not a prefix of text"))?
                .to_string();
            Payload::AsrPartial { finalized, volatile }
        }
        "asr_final" => Payload::AsrFinal {
            text: str_field(p, "text")?,
            audio_ms: u64_field(p, "audio_ms")?,
            degraded: bool_field(p, "degraded")?,
        },
        "llm_token" => Payload::LlmToken {
            turn_id: turn()?,
            text: str_field(p, "text")?,
        },
        "llm_sentence" => Payload::LlmSentence {
            turn_id: turn()?,
            index: u32_field(p, "index")?,
            text: str_field(p, "text")?,
        },
        "tts_done" => Payload::TtsDone {
            turn_id: turn()?,
            clauses: u32_field(p, "clauses")?,
        },
        "pause_playback" => Payload::PausePlayback { turn_id: turn()? },
        "resume" => Payload::Resume { turn_id: turn()? },
        "interrupt_confirmed" => Payload::InterruptConfirmed {
            old_turn: u32_field(p, "old_turn")?,
            new_turn: turn()?,
            transcript: str_field(p, "transcript")?,
        },
        "thinking" => match str_field(p, "state")?.as_str() {
            "start" => Payload::ThinkingStart {
                turn_id: turn()?,
                query: str_field(p, "query")?,
            },
            "end" => Payload::ThinkingEnd {
                turn_id: turn()?,
                summary: str_field(p, "summary")?,
            },
            s => return Err(malformed(format!("unknown thinking state {s}"))),
        },
        "caption" => Payload::CaptionUpdated {
            text: str_field(p, "text")?,
            rewritten: bool_field(p, "rewritten")?,
        },
        "speaker" => Payload::SpeakerIdentified {
            speaker_id: str_field(p, "speaker_id")?,
            similarity: f64_field(p, "similarity")?,
            is_new: bool_field(p, "is_new")?,
        },
        "metric" => Payload::Metric {
            turn_id,
            name: str_field(p, "name")?,
            value_ms: f64_field(p, "value_ms")?,
        },
        other => return Err(malformed(format!("unknown type {other}"))),
    };
    Ok(ServerMessage::Event { turn_id, payload })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(s: &str) -> Frame {
        Frame::Text(s.to_string())
    }

    #[test]
    fn decodes_text_envelope() {
        let m = decode_client_frame(&text(r#"{"type":"vad_start","seq":7,"payload":{}}"#)).unwrap();
        assert_eq!(m, ClientMessage::new(7, ClientBody::VadStart));
    }

    #[test]
    fn decodes_binary_audio() {
        let mut b = vec![0x01, 0, 0, 0, 8];
        b.extend(std::iter::repeat_n(0u8, 3200));
        let m = decode_client_frame(&Frame::Binary(b.into())).unwrap();
        assert_eq!(m.seq, 8);
        let ClientBody::Audio(a) = m.body else { panic!() };
        assert_eq!(a.duration_ms(), 100.0);
    }

    #[test]
    fn rejects_malformed() {
        let mut odd = vec![0x01, 0, 0, 0, 8];
        odd.extend(std::iter::repeat_n(0u8, 3201));
        for f in [
            Frame::Binary(odd.into()),
            Frame::Binary(vec![0x03, 0, 0, 0, 1].into()),
            text("{not json"),
            text(r#"{"type":"dance","seq":1,"payload":{}}"#),
            text(r#"{"type":"vad_end","payload":{}}"#),
        ] {
            assert!(matches!(decode_client_frame(&f), Err(WireError::MalformedFrame(_))), "{f:?}");
        }
    }

    #[test]
    fn sequence_must_increase() {
        let mut t = SeqTracker::default();
        t.check(1).unwrap();
        t.check(5).unwrap();
        assert_eq!(t.check(5), Err(WireError::SequenceRegression { last: 5, got: 5 }));
        assert!(t.check(3).is_err());
    }

    #[test]
    fn asr_partial_encoding() {
        let f = encode_server_event(
            &Payload::AsrPartial {
                finalized: String::new(),
                volatile: "hel".into(),
            },
            3,
        )
        .unwrap();
        let Frame::Text(t) = f else { panic!() };
        let v: Value = serde_json::from_str(&t).unwrap();
        assert_eq!(v["type"], "asr_partial");
        assert_eq!(v["turn_id"], 3);
        assert_eq!(v["payload"]["text"], "hel");
    }

    #[test]
    fn internal_kinds_refused() {
        assert_eq!(
            encode_server_event(&Payload::Flush { turn_id: 1 }, 1),
            Err(WireError::NotClientVisible(EventKind::Flush))
        );
    }

    #[test]
    fn tts_chunk_header_is_nine_bytes() {
        let c = TtsChunk {
            turn_id: 2,
            clause_index: 0,
            chunk_index: 0,
            pcm: Bytes::from(vec![0u8; 3200]),
        };
        let Frame::Binary(b) = encode_server_event(&Payload::TtsChunk(c.clone()), 2).unwrap() else {
            panic!()
        };
        assert_eq!(b.len(), 9 + 3200);
        assert_eq!(
            decode_server_frame(&Frame::Binary(b)).unwrap(),
            ServerMessage::Event {
                turn_id: Some(2),
                payload: Payload::TtsChunk(c)
            }
        );
    }

    #[test]
    fn client_messages_round_trip() {
        let mut cfg = Map::new();
        cfg.insert("voice".into(), json!("warm_female"));
        for m in [
            ClientMessage::new(1, ClientBody::Hello),
            ClientMessage::new(2, ClientBody::Audio(AudioFrame::from_samples(&[1, -2, 3]))),
            ClientMessage::new(3, ClientBody::TextInput { text: "你好".into() }),
            ClientMessage::new(4, ClientBody::Config(cfg)),
            ClientMessage::new(5, ClientBody::Bye),
        ] {
            assert_eq!(decode_client_frame(&encode_client_message(&m)).unwrap(), m);
        }
    }

    #[test]
    fn hello_ack_and_error_shapes() {
        assert_eq!(
            decode_server_frame(&encode_hello_ack(SessionId(3))).unwrap(),
            ServerMessage::HelloAck {
                session_id: "s0003".into()
            }
        );
        let Frame::Text(t) = encode_error("over_capacity") else { panic!() };
        assert_eq!(t, r#"{"payload":{"code":"over_capacity"},"type":"error"}"#);
    }
}
