mod common;

use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::{json, Map, Value};

use common::{paused, WAIT};
use xtalk_core::bus::Payload;
use xtalk_core::config::AppConfig;
use xtalk_core::corpus::{dialogue_base, replay_scenarios};
use xtalk_core::loopback::{mock_host, run_scenario, ClientConn};
use xtalk_core::scenario::Scenario;
use xtalk_core::telemetry::{TracePoint, TraceSink};
use xtalk_core::wire::{ClientBody, ServerMessage};

fn scenario(name: &str) -> Scenario {
    replay_scenarios()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| s)
        .unwrap()
}

async fn say(conn: &mut ClientConn, s: &Scenario, id: &str) {
    let from = conn.received_count();
    conn.speak(s.utterance(id).unwrap(), s.utterance_index(id).unwrap()).await;
    assert!(conn.wait_for("tts_done", from, WAIT).await, "{id} never finished");
}

#[test]
fn thinking_summary_reaches_a_later_prompt() {
    paused(async {
        let s = dialogue_base();
        let (host, mocks) = mock_host(&AppConfig::default(), &s).unwrap();
        let mut conn = ClientConn::connect(host).await.unwrap();
        say(&mut conn, &s, "ask_think").await;
        let thought = conn
            .wait_until(0, WAIT, |r| {
                matches!(r.msg, ServerMessage::Event { payload: Payload::ThinkingEnd { .. }, .. })
            })
            .await;
        assert!(thought);
        say(&mut conn, &s, "ask_weather").await;
        conn.finish().await;
        let prompts = mocks.llm.prompts();
        assert!(!prompts[0].contains("considered:"));
        assert!(prompts.last().unwrap().contains("considered: 周末规划"), "{prompts:?}");
    });
}

#[test]
fn timbre_tool_switches_later_clauses() {
    paused(async {
        let s = scenario("timbre_switch");
        let (host, mocks) = mock_host(&AppConfig::default(), &s).unwrap();
        run_scenario(host, &s).await.unwrap();
        let calls = mocks.tts.calls();
        let first = calls.iter().find(|c| c.text.contains("没问题")).unwrap();
        assert_ne!(first.meta.timbre, "ref_warm_female");
        let after: Vec<_> = calls.iter().filter(|c| c.text.contains("温柔")).collect();
        assert!(!after.is_empty());
        assert!(after.iter().all(|c| c.meta.timbre == "ref_warm_female"));
    });
}

#[test]
fn voice_config_frame_changes_timbre() {
    paused(async {
        let s = dialogue_base();
        let (host, mocks) = mock_host(&AppConfig::default(), &s).unwrap();
        let mut conn = ClientConn::connect(host).await.unwrap();
        let mut cfg = Map::new();
        cfg.insert("voice".into(), json!("warm_female"));
        conn.send(ClientBody::Config(cfg)).await;
        let from = conn.received_count();
        conn.send(ClientBody::TextInput { text: "今天天气怎么样".into() }).await;
        assert!(conn.wait_for("tts_done", from, WAIT).await);
        conn.finish().await;
        let calls = mocks.tts.calls();
        assert!(!calls.is_empty());
        assert!(calls.iter().all(|c| c.meta.timbre == "ref_warm_female"));
    });
}

#[test]
fn closing_releases_the_session_slot() {
    paused(async {
        let s = dialogue_base();
        let (host, _) = mock_host(&AppConfig::default(), &s).unwrap();
        let mut conn = ClientConn::connect(host.clone()).await.unwrap();
        say(&mut conn, &s, "ask_weather").await;
        assert_eq!(host.limiter.active(), 1);
        conn.send(ClientBody::Bye).await;
        conn.finish().await;
        assert_eq!(host.limiter.active(), 0);
        assert_eq!(host.sessions_closed(), 1);
    });
}

#[test]
fn same_voice_keeps_its_speaker_id() {
    paused(async {
        let s = dialogue_base();
        let (host, _) = mock_host(&AppConfig::default(), &s).unwrap();
        let mut conn = ClientConn::connect(host).await.unwrap();
        say(&mut conn, &s, "ask_weather").await;
        say(&mut conn, &s, "ask_story").await;
        tokio::time::sleep(Duration::from_secs(1)).await;
        let log = conn.finish().await;
        let ids: Vec<(String, bool)> = log
            .events()
            .filter_map(|(_, p, _)| match p {
                Payload::SpeakerIdentified { speaker_id, is_new, .. } => Some((speaker_id.clone(), *is_new)),
                _ => None,
            })
            .collect();
        assert_eq!(ids.len(), 2, "{ids:?}");
        assert_eq!(ids[0].0, ids[1].0);
        assert!(ids[0].1);
        assert!(!ids[1].1);
    });
}

fn client_e2e_ms(config: &AppConfig) -> f64 {
    paused(async {
        let s = dialogue_base();
        let (host, _) = mock_host(config, &s).unwrap();
        let mut conn = ClientConn::connect(host).await.unwrap();
        let from = conn.received_count();
        let sent = conn
            .speak(s.utterance("ask_weather").unwrap(), s.utterance_index("ask_weather").unwrap())
            .await;
        assert!(conn.wait_for("tts_chunk", from, WAIT).await);
        let first = conn.received()[from..]
            .iter()
            .find(|r| r.msg_type() == "tts_chunk")
            .unwrap()
            .at;
        conn.finish().await;
        (first - sent).as_secs_f64() * 1000.0
    })
}

#[test]
fn telemetry_overhead_is_under_five_ms() {
    let mut on = AppConfig::default();
    on.telemetry.enabled = true;
    let mut off = AppConfig::default();
    off.telemetry.enabled = false;
    let (a, b) = (client_e2e_ms(&on), client_e2e_ms(&off));
    assert!((a - b).abs() < 5.0, "on {a} off {b}");
}

#[test]
fn traces_are_ordered_and_stages_sum_to_e2e() {
    paused(async {
        let s = scenario("barge_in");
        let (host, _) = mock_host(&AppConfig::default(), &s).unwrap();
        let sink: TraceSink = Arc::new(Mutex::new(Vec::new()));
        let host = host.with_traces(sink.clone());
        run_scenario(host, &s).await.unwrap();
        let traces = sink.lock().clone();
        assert!(traces.len() >= 2, "{traces:?}");
        for t in &traces {
            assert!(t.is_ordered(), "{t:?}");
            let Ok(e2e) = t.compute_e2e() else { continue };
            let stages: f64 = TracePoint::ALL
                .iter()
                .filter(|p| **p > TracePoint::VadEnd && **p <= TracePoint::TtsFirstChunk)
                .filter_map(|p| t.stage_ms(*p))
                .sum();
            assert!((stages - e2e).abs() < 1e-6, "stages {stages} e2e {e2e}");
        }
    });
}

#[test]
fn rejected_config_leaves_session_usable() {
    paused(async {
        let (host, _) = mock_host(&AppConfig::default(), &dialogue_base()).unwrap();
        let mut conn = ClientConn::connect(host).await.unwrap();
        let mut cfg = Map::new();
        cfg.insert("volume".into(), Value::String("loud".into()));
        conn.send(ClientBody::Config(cfg)).await;
        let from = conn.received_count();
        conn.send(ClientBody::TextInput { text: "今天天气怎么样".into() }).await;
        assert!(conn.wait_for("tts_done", from, WAIT).await);
        conn.finish().await;
    });
}
