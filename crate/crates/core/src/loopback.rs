//! In-process client that talks to a [`Host`] through the same connection
//! driver as the WebSocket server, without a network.

use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::{mpsc, Notify};
use tokio::task::JoinHandle;
use tokio::time::{sleep, Instant};

use crate::agent::Registries;
use crate::bus::{Payload, TurnId};
use crate::config::{AppConfig, ConfigError};
use crate::mock::MockModels;
use crate::scenario::{ClientScript, ClientStep, Scenario, Utterance};
use crate::session::{serve_connection, Host};
use crate::wire::{
    decode_server_frame, encode_client_message, ClientBody, ClientMessage, Frame, ServerMessage,
};

const INCOMING_BUFFER: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("server refused the session: {0}")]
    Refused(String),
    #[error("connection closed during handshake")]
    Closed,
    #[error("unknown utterance {0}")]
    UnknownUtterance(String),
}

/// A server frame with its arrival time.
#[derive(Debug, Clone)]
pub struct Received {
    pub at: Duration,
    pub msg: ServerMessage,
}

impl Received {
    pub fn msg_type(&self) -> &'static str {
        self.msg.msg_type()
    }
}

#[derive(Debug, Default)]
struct Shared {
    received: Vec<Received>,
    log: Vec<String>,
}

/// One line of the normalized log for a server frame.
pub fn log_line_received(msg: &ServerMessage, frame: &Frame) -> String {
    match (msg, frame) {
        (ServerMessage::Event { payload: Payload::TtsChunk(c), .. }, _) => format!(
            "< tts_chunk turn={} clause={} chunk={} bytes={}",
            c.turn_id,
            c.clause_index,
            c.chunk_index,
            c.pcm.len()
        ),
        (_, Frame::Text(t)) => format!("< {t}"),
        (_, Frame::Binary(b)) => format!("< binary bytes={}", b.len()),
    }
}

pub fn log_line_sent(msg: &ClientMessage, frame: &Frame) -> String {
    match frame {
        Frame::Binary(b) => format!("> audio seq={} bytes={}", msg.seq, b.len() - crate::wire::CLIENT_AUDIO_HEADER),
        Frame::Text(t) => format!("> {t}"),
    }
}

/// A connected loopback client.
pub struct ClientConn {
    tx: Option<mpsc::Sender<Frame>>,
    seq: u32,
    epoch: Instant,
    shared: Arc<Mutex<Shared>>,
    arrived: Arc<Notify>,
    reader: JoinHandle<()>,
    driver: JoinHandle<()>,
    pub session_id: String,
    sent_log: Vec<(Duration, String)>,
}

impl ClientConn {
    /// Connects and completes the hello handshake. The handshake is not
    /// part of the log.
    pub async fn connect(host: Arc<Host>) -> Result<Self, ClientError> {
        let (to_server, incoming) = mpsc::channel(INCOMING_BUFFER);
        let (out, mut from_server) = mpsc::channel(crate::session::OUTPUT_BUFFER);
        let driver = tokio::spawn(serve_connection(host, incoming, out));
        let hello = ClientMessage::new(0, ClientBody::Hello);
        to_server
            .send(encode_client_message(&hello))
            .await
            .map_err(|_| ClientError::Closed)?;
        let session_id = match from_server.recv().await.map(|f| decode_server_frame(&f)) {
            Some(Ok(ServerMessage::HelloAck { session_id })) => session_id,
            Some(Ok(ServerMessage::Error { code })) => return Err(ClientError::Refused(code)),
            _ => return Err(ClientError::Closed),
        };
        let epoch = Instant::now();
        let shared = Arc::new(Mutex::new(Shared::default()));
        let arrived = Arc::new(Notify::new());
        let reader = {
            let shared = shared.clone();
            let arrived = arrived.clone();
            tokio::spawn(async move {
                while let Some(frame) = from_server.recv().await {
                    let at = epoch.elapsed();
                    let Ok(msg) = decode_server_frame(&frame) else {
                        tracing::error!("undecodable server frame");
                        continue;
                    };
                    let line = log_line_received(&msg, &frame);
                    let mut s = shared.lock();
                    s.log.push(line);
                    s.received.push(Received { at, msg });
                    drop(s);
                    arrived.notify_waiters();
                }
            })
        };
        Ok(Self {
            tx: Some(to_server),
            seq: 0,
            epoch,
            shared,
            arrived,
            reader,
            driver,
            session_id,
            sent_log: Vec::new(),
        })
    }

    pub fn elapsed(&self) -> Duration {
        self.epoch.elapsed()
    }

    /// Sends a message and returns its send time.
    pub async fn send(&mut self, body: ClientBody) -> Duration {
        self.seq += 1;
        let msg = ClientMessage::new(self.seq, body);
        let frame = encode_client_message(&msg);
        let at = self.elapsed();
        let line = log_line_sent(&msg, &frame);
        self.shared.lock().log.push(line.clone());
        self.sent_log.push((at, line));
        if let Some(tx) = &self.tx {
            let _ = tx.send(frame).await;
        }
        at
    }

    /// Sends raw frame bytes outside the sequence counter.
    pub async fn send_raw(&mut self, frame: Frame) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(frame).await;
        }
    }

    /// vad_start, the utterance's audio paced at its chunk duration, then
    /// vad_end one chunk later. Returns the vad_end send time.
    pub async fn speak(&mut self, utt: &Utterance, index: u16) -> Duration {
        self.speak_paced(utt, index, Duration::from_millis(utt.chunk_ms as u64)).await
    }

    /// Like [`speak`](Self::speak) with an explicit gap between chunks.
    pub async fn speak_paced(&mut self, utt: &Utterance, index: u16, pace: Duration) -> Duration {
        self.send(ClientBody::VadStart).await;
        for frame in utt.frames(index) {
            self.send(ClientBody::Audio(frame)).await;
            if pace.is_zero() {
                tokio::task::yield_now().await;
            } else {
                sleep(pace).await;
            }
        }
        self.send(ClientBody::VadEnd).await
    }

    pub fn received(&self) -> Vec<Received> {
        self.shared.lock().received.clone()
    }

    pub fn received_count(&self) -> usize {
        self.shared.lock().received.len()
    }

    /// Waits until a frame of type `ty` is among the frames received after
    /// the first `from`. Returns whether it arrived before `timeout`.
    pub async fn wait_for(&self, ty: &str, from: usize, timeout: Duration) -> bool {
        self.wait_until(from, timeout, |r| r.msg_type() == ty).await
    }

    pub async fn wait_until<F>(&self, from: usize, timeout: Duration, pred: F) -> bool
    where
        F: Fn(&Received) -> bool,
    {
        let deadline = Instant::now() + timeout;
        loop {
            let notified = self.arrived.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if self.shared.lock().received.iter().skip(from).any(&pred) {
                return true;
            }
            tokio::select! {
                biased;
                _ = notified => {}
                _ = tokio::time::sleep_until(deadline) => return false,
            }
        }
    }

    /// Runs a client script step by step.
    pub async fn run_script(&mut self, scenario: &Scenario, script: &ClientScript) -> Result<(), ClientError> {
        for step in &script.steps {
            match step {
                ClientStep::Speak { utterance } => {
                    let index = scenario
                        .utterance_index(utterance)
                        .ok_or_else(|| ClientError::UnknownUtterance(utterance.clone()))?;
                    let utt = &scenario.utterances[index as usize];
                    self.speak(utt, index).await;
                }
                ClientStep::BargeIn => {
                    self.send(ClientBody::BargeIn).await;
                }
                ClientStep::TextInput { text } => {
                    self.send(ClientBody::TextInput { text: text.clone() }).await;
                }
                ClientStep::Config { payload } => {
                    let map = payload.as_object().cloned().unwrap_or_default();
                    self.send(ClientBody::Config(map)).await;
                }
                ClientStep::WaitMs { ms } => sleep(Duration::from_millis(*ms)).await,
                ClientStep::WaitFor { frame, timeout_ms } => {
                    let from = self.received_count();
                    self.wait_for(frame, from, Duration::from_millis(*timeout_ms)).await;
                }
                ClientStep::Bye => {
                    self.send(ClientBody::Bye).await;
                }
            }
        }
        Ok(())
    }

    /// Disconnects and waits for the server side to finish. Returns the
    /// normalized frame log and everything received.
    pub async fn finish(mut self) -> ClientLog {
        self.tx = None;
        let _ = self.driver.await;
        let _ = self.reader.await;
        let shared = std::mem::take(&mut *self.shared.lock());
        ClientLog {
            lines: shared.log,
            received: shared.received,
            sent: self.sent_log,
        }
    }
}

/// Everything a loopback client saw.
#[derive(Debug, Clone, Default)]
pub struct ClientLog {
    /// Normalized frame log in arrival/send order, without timestamps.
    pub lines: Vec<String>,
    pub received: Vec<Received>,
    pub sent: Vec<(Duration, String)>,
}

impl ClientLog {
    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }

    /// Received events in order, skipping handshake and error frames.
    pub fn events(&self) -> impl Iterator<Item = (Option<TurnId>, &Payload, Duration)> {
        self.received.iter().filter_map(|r| match &r.msg {
            ServerMessage::Event { turn_id, payload } => Some((*turn_id, payload, r.at)),
            _ => None,
        })
    }
}

/// Connects, runs the scenario's client script, and disconnects.
pub async fn run_scenario(host: Arc<Host>, scenario: &Scenario) -> Result<ClientLog, ClientError> {
    let script = scenario.client.clone().unwrap_or_default();
    let mut conn = ClientConn::connect(host).await?;
    let result = conn.run_script(scenario, &script).await;
    let log = conn.finish().await;
    result.map(|_| log)
}

/// A host over mock models built from `config` and `scenario`. The typed
/// mocks are returned too so callers can read their call logs.
pub fn mock_host(config: &AppConfig, scenario: &Scenario) -> Result<(Arc<Host>, MockModels), ConfigError> {
    config.validate()?;
    let mocks = MockModels::new(scenario, &config.mock_profiles());
    let registries = Registries {
        voices: scenario.voices.clone(),
        tools: scenario.tools.clone(),
    };
    let host = Host::new(
        mocks.models(config.side_channels.rewriter_enabled),
        registries,
        config.session_config(),
        config.limiter.max_sessions,
        config.queue_capacity,
    );
    Ok((host, mocks))
}

/// Replays a scenario directory against mock models and returns the
/// normalized frame log. Must run on a paused clock for the log to be
/// reproducible.
pub async fn replay(config: &AppConfig, scenario: &Scenario) -> Result<String, ReplayError> {
    let (host, _) = mock_host(config, scenario)?;
    let log = run_scenario(host, scenario).await?;
    Ok(log.text())
}

/// Runs [`replay`] on a fresh current-thread runtime with a paused clock.
pub fn replay_blocking(config: &AppConfig, scenario: &Scenario) -> Result<String, ReplayError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .map_err(|e| ReplayError::Runtime(e.to_string()))?;
    rt.block_on(replay(config, scenario))
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("runtime: {0}")]
    Runtime(String),
}
