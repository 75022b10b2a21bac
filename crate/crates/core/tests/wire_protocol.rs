mod common;

use std::time::Duration;

use bytes::Bytes;
use proptest::prelude::*;
use serde_json::{json, Map, Value};
use tokio::sync::mpsc;

use common::paused;
use xtalk_core::audio::AudioFrame;
use xtalk_core::bus::{Payload, TtsChunk};
use xtalk_core::config::AppConfig;
use xtalk_core::corpus::dialogue_base;
use xtalk_core::loopback::mock_host;
use xtalk_core::session::serve_connection;
use xtalk_core::wire::{
    decode_client_frame, decode_server_frame, encode_client_message, encode_server_event, ClientBody,
    ClientMessage, Frame, ServerMessage,
};

fn client_body() -> impl Strategy<Value = ClientBody> {
    prop_oneof![
        Just(ClientBody::Hello),
        Just(ClientBody::VadStart),
        Just(ClientBody::VadEnd),
        Just(ClientBody::BargeIn),
        Just(ClientBody::Bye),
        ".{0,40}".prop_map(|text| ClientBody::TextInput { text }),
        prop::collection::vec(any::<i16>(), 0..400).prop_map(|s| ClientBody::Audio(AudioFrame::from_samples(&s))),
        prop::collection::btree_map("[a-z]{1,8}", "[a-z_]{0,12}", 0..3).prop_map(|m| {
            ClientBody::Config(m.into_iter().map(|(k, v)| (k, Value::String(v))).collect::<Map<_, _>>())
        }),
    ]
}

fn server_payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        (".{0,20}", ".{0,20}").prop_map(|(finalized, volatile)| Payload::AsrPartial { finalized, volatile }),
        (".{0,30}", 0u64..100_000, any::<bool>())
            .prop_map(|(text, audio_ms, degraded)| Payload::AsrFinal { text, audio_ms, degraded }),
        (1u32..1000, 0u32..50, ".{1,30}").prop_map(|(turn_id, index, text)| Payload::LlmSentence {
            turn_id,
            index,
            text
        }),
        (1u32..1000, 0u32..50).prop_map(|(turn_id, clauses)| Payload::TtsDone { turn_id, clauses }),
        (1u32..1000).prop_map(|turn_id| Payload::PausePlayback { turn_id }),
        (1u32..1000).prop_map(|turn_id| Payload::Resume { turn_id }),
        (proptest::option::of(1u32..1000), "[a-z_]{1,12}", 0.0f64..10_000.0)
            .prop_map(|(turn_id, name, value_ms)| Payload::Metric { turn_id, name, value_ms }),
    ]
}

proptest! {
    #[test]
    fn client_messages_round_trip(seq in any::<u32>(), body in client_body()) {
        let msg = ClientMessage::new(seq, body);
        let frame = encode_client_message(&msg);
        prop_assert_eq!(decode_client_frame(&frame).unwrap(), msg);
    }

    #[test]
    fn server_events_round_trip(payload in server_payload()) {
        let frame = encode_server_event(&payload, 7).unwrap();
        let ServerMessage::Event { payload: back, .. } = decode_server_frame(&frame).unwrap() else {
            panic!("not an event");
        };
        prop_assert_eq!(back, payload);
    }

    #[test]
    fn tts_chunk_header_matches_layout(
        turn in any::<u32>(),
        clause in any::<u16>(),
        chunk in any::<u16>(),
        samples in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let mut pcm = samples;
        if pcm.len() % 2 == 1 {
            pcm.pop();
        }
        let c = TtsChunk { turn_id: turn, clause_index: clause, chunk_index: chunk, pcm: Bytes::from(pcm.clone()) };
        let Frame::Binary(b) = encode_server_event(&Payload::TtsChunk(c.clone()), 0).unwrap() else {
            panic!("tts_chunk must be binary");
        };
        // independent header parse: tag, big-endian turn, packed index
        prop_assert_eq!(b[0], 0x02);
        prop_assert_eq!(u32::from_be_bytes(b[1..5].try_into().unwrap()), turn);
        let packed = u32::from_be_bytes(b[5..9].try_into().unwrap());
        prop_assert_eq!(packed, ((clause as u32) << 16) | chunk as u32);
        prop_assert_eq!(&b[9..], pcm.as_slice());
        prop_assert_eq!(decode_server_frame(&Frame::Binary(b)).unwrap(), ServerMessage::Event {
            turn_id: Some(turn),
            payload: Payload::TtsChunk(c),
        });
    }

    #[test]
    fn client_audio_header_matches_layout(seq in any::<u32>(), s in prop::collection::vec(any::<i16>(), 0..64)) {
        let msg = ClientMessage::new(seq, ClientBody::Audio(AudioFrame::from_samples(&s)));
        let Frame::Binary(b) = encode_client_message(&msg) else { panic!("audio must be binary") };
        prop_assert_eq!(b[0], 0x01);
        prop_assert_eq!(u32::from_be_bytes(b[1..5].try_into().unwrap()), seq);
        let le: Vec<u8> = s.iter().flat_map(|v| v.to_le_bytes()).collect();
        prop_assert_eq!(&b[5..], le.as_slice());
    }
}

/// Drives a connection with raw frames and returns the decoded replies.
async fn exchange(frames: Vec<Frame>) -> Vec<ServerMessage> {
    let (host, _) = mock_host(&AppConfig::default(), &dialogue_base()).unwrap();
    let (tx, incoming) = mpsc::channel(64);
    let (out, mut rx) = mpsc::channel(4096);
    let driver = tokio::spawn(serve_connection(host, incoming, out));
    for f in frames {
        tx.send(f).await.unwrap();
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    drop(tx);
    driver.await.unwrap();
    let mut got = Vec::new();
    while let Some(f) = rx.recv().await {
        got.push(decode_server_frame(&f).unwrap());
    }
    got
}

fn text(v: Value) -> Frame {
    Frame::Text(v.to_string())
}

fn errors(msgs: &[ServerMessage]) -> Vec<String> {
    msgs.iter()
        .filter_map(|m| match m {
            ServerMessage::Error { code } => Some(code.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn first_frame_must_be_hello() {
    let got = paused(exchange(vec![text(json!({"type": "vad_start", "seq": 1, "payload": {}}))]));
    assert_eq!(errors(&got), vec!["expected_hello"]);
}

#[test]
fn protocol_errors_are_reported_and_session_survives() {
    let got = paused(exchange(vec![
        text(json!({"type": "hello", "seq": 0, "payload": {}})),
        Frame::Text("{not json".into()),
        text(json!({"type": "vad_start", "seq": 5, "payload": {}})),
        text(json!({"type": "vad_end", "seq": 3, "payload": {}})),
        text(json!({"type": "config", "seq": 6, "payload": {"voice": "no_such_voice"}})),
        text(json!({"type": "config", "seq": 7, "payload": {"volume": "loud"}})),
        Frame::Binary(Bytes::from_static(&[0x01, 0, 0, 0])),
        text(json!({"type": "bye", "seq": 8, "payload": {}})),
        text(json!({"type": "vad_start", "seq": 9, "payload": {}})),
    ]));
    assert!(matches!(got[0], ServerMessage::HelloAck { ref session_id } if session_id == "s0001"));
    assert_eq!(
        errors(&got),
        vec![
            "malformed_frame",
            "sequence_regression",
            "invalid_config",
            "invalid_config",
            "malformed_frame",
            "unknown_session"
        ]
    );
}

#[test]
fn text_input_starts_a_turn() {
    let got = paused(exchange(vec![
        text(json!({"type": "hello", "seq": 0, "payload": {}})),
        text(json!({"type": "text_input", "seq": 1, "payload": {"text": "今天天气怎么样"}})),
    ]));
    assert!(got.iter().any(|m| matches!(m,
        ServerMessage::Event { payload: Payload::AsrFinal { text, audio_ms: 0, .. }, .. } if text == "今天天气怎么样")));
}
