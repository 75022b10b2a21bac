//! Per-connection sessions: concurrency capping, fresh pipeline state per
//! session, manager wiring, and the connection driver shared by the
//! WebSocket server and the in-process loopback.

pub mod dialogue;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use thiserror::Error;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinSet;

use crate::agent::Registries;
use crate::asr::{self, AsrManager, TranscriptState};
use crate::backend::Models;
use crate::bus::{BusError, EventBus, Payload, SessionBus, SessionId};
use crate::config::{ConfigError, SessionConfig};
use crate::side::{self, CaptionChannel, RollingAudioBuffer, SpeakerChannel, SpeakerRegistry};
use crate::telemetry::{self, TelemetryManager, TraceSink};
use crate::tts::{self, TtsConfig, TtsManager};
use crate::turn::{PhaseCell, TurnState};
use crate::wire::gateway::{close_routes, subscribe_output, InputGateway, OutputGateway};
use crate::wire::{decode_client_frame, encode_error, encode_hello_ack, ClientBody, Frame};

pub use dialogue::DialogueManager;

/// How long closing waits for managers to drain before aborting them.
pub const CLOSE_GRACE: Duration = Duration::from_secs(2);
pub const OUTPUT_BUFFER: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("over capacity")]
    OverCapacity,
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// Caps the number of concurrently open sessions.
#[derive(Debug)]
pub struct SessionLimiter {
    max: usize,
    active: AtomicUsize,
    peak: AtomicUsize,
}

impl SessionLimiter {
    pub fn new(max: usize) -> Arc<Self> {
        Arc::new(Self {
            max,
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        })
    }

    pub fn try_acquire(self: &Arc<Self>) -> Option<SessionPermit> {
        self.active
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| (n < self.max).then_some(n + 1))
            .ok()
            .map(|prev| {
                self.peak.fetch_max(prev + 1, Ordering::AcqRel);
                SessionPermit {
                    limiter: self.clone(),
                }
            })
    }

    pub fn active(&self) -> usize {
        self.active.load(Ordering::Acquire)
    }

    /// Highest `active` value ever reached.
    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Acquire)
    }

    pub fn max(&self) -> usize {
        self.max
    }
}

/// One occupied slot; released on drop.
#[derive(Debug)]
pub struct SessionPermit {
    limiter: Arc<SessionLimiter>,
}

impl Drop for SessionPermit {
    fn drop(&mut self) {
        self.limiter.active.fetch_sub(1, Ordering::AcqRel);
    }
}

static LIVE_PIPELINE_STATES: AtomicUsize = AtomicUsize::new(0);

/// Number of pipeline states some session still holds a part of.
pub fn live_pipeline_states() -> usize {
    LIVE_PIPELINE_STATES.load(Ordering::Acquire)
}

/// Shared by every part split off one [`PipelineState`]; the live count
/// drops once the last part is gone.
#[derive(Debug)]
pub struct StateToken(());

impl StateToken {
    fn new() -> Arc<Self> {
        LIVE_PIPELINE_STATES.fetch_add(1, Ordering::AcqRel);
        Arc::new(Self(()))
    }
}

impl Drop for StateToken {
    fn drop(&mut self) {
        LIVE_PIPELINE_STATES.fetch_sub(1, Ordering::AcqRel);
    }
}

/// All mutable per-session state, built fresh for each session and handed
/// out piecewise to that session's managers.
#[derive(Debug)]
pub struct PipelineState {
    pub transcript_state: TranscriptState,
    pub turn_state: TurnState,
    pub rolling_buffer: RollingAudioBuffer,
    pub speakers: SpeakerRegistry,
    pub tts_config: TtsConfig,
    pub token: Arc<StateToken>,
}

impl PipelineState {
    pub fn fork(config: &SessionConfig, registries: &Registries) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            transcript_state: TranscriptState::default(),
            turn_state: TurnState::default(),
            rolling_buffer: RollingAudioBuffer::default(),
            speakers: SpeakerRegistry::new(config.similarity_threshold, config.ema_alpha),
            tts_config: TtsConfig::initial(&registries.voices),
            token: StateToken::new(),
        })
    }
}

/// Process-wide resources shared by all sessions.
pub struct Host {
    pub bus: EventBus,
    pub models: Models,
    pub registries: Arc<Registries>,
    pub config: SessionConfig,
    pub limiter: Arc<SessionLimiter>,
    /// Receives every session's latency traces when set.
    pub traces: Option<TraceSink>,
    next_session: AtomicU64,
    closed: Arc<AtomicU64>,
    shutdown: watch::Sender<bool>,
}

impl Host {
    pub fn new(
        models: Models,
        registries: Registries,
        config: SessionConfig,
        max_sessions: usize,
        queue_capacity: usize,
    ) -> Arc<Self> {
        Arc::new(Self {
            bus: EventBus::with_capacity(queue_capacity),
            models,
            registries: Arc::new(registries),
            config,
            limiter: SessionLimiter::new(max_sessions),
            traces: None,
            next_session: AtomicU64::new(1),
            closed: Arc::new(AtomicU64::new(0)),
            shutdown: watch::channel(false).0,
        })
    }

    pub fn with_traces(mut self: Arc<Self>, sink: TraceSink) -> Arc<Self> {
        Arc::get_mut(&mut self)
            .expect("traces are attached before the host is shared")
            .traces = Some(sink);
        self
    }

    /// Asks every connection driver to close its session.
    pub fn shutdown(&self) {
        self.shutdown.send_replace(true);
    }

    /// Sessions closed since the host started.
    pub fn sessions_closed(&self) -> u64 {
        self.closed.load(Ordering::Acquire)
    }

    pub fn is_shutting_down(&self) -> bool {
        *self.shutdown.borrow()
    }

    /// Opens a session whose client-visible frames go to `out`.
    pub async fn open_session(&self, out: mpsc::Sender<Frame>) -> Result<Session, SessionError> {
        let permit = self.limiter.try_acquire().ok_or(SessionError::OverCapacity)?;
        let id = SessionId(self.next_session.fetch_add(1, Ordering::AcqRel));
        let bus = SessionBus::new(self.bus.clone(), id);
        self.bus.register_session(id);
        let state = PipelineState::fork(&self.config, &self.registries)
            .expect("host config was validated at startup");
        let phase = PhaseCell::default();
        let cfg = &self.config;
        let mut tasks = JoinSet::new();

        // every subscription exists before SessionOpen, so nothing is missed
        let out_sub = subscribe_output(&bus)?;
        let asr_sub = asr::subscribe(&bus)?;
        let dlg_sub = dialogue::subscribe(&bus)?;
        let tts_sub = tts::subscribe(&bus)?;
        let tel_sub = cfg.telemetry_enabled.then(|| telemetry::subscribe(&bus)).transpose()?;
        let cap_sub = cfg.caption_enabled.then(|| side::subscribe_captioner(&bus)).transpose()?;
        let spk_sub = cfg.speaker_enabled.then(|| side::subscribe_speaker(&bus)).transpose()?;

        tasks.spawn(OutputGateway::new(out_sub, out).run());
        let token = state.token.clone();
        let asr_mgr = AsrManager::new(
            bus.clone(),
            asr_sub,
            self.models.asr.clone(),
            cfg.asr_mode,
            cfg.window,
            state.transcript_state,
        );
        tasks.spawn(async move {
            let _t = token;
            asr_mgr.run().await
        });
        let token = state.token.clone();
        let dlg = DialogueManager {
            bus: bus.clone(),
            sub: dlg_sub,
            state: state.turn_state,
            phase: phase.clone(),
            rules: cfg.rules.clone(),
            models: self.models.clone(),
            registries: self.registries.clone(),
            phatic: cfg.phatic.clone(),
            segmenter: cfg.segmenter,
            tts_config: state.tts_config.clone(),
        };
        tasks.spawn(async move {
            let _t = token;
            dlg.run().await
        });
        let token = state.token.clone();
        let tts_mgr = TtsManager::new(
            bus.clone(),
            tts_sub,
            self.models.tts.clone(),
            state.tts_config,
            cfg.tts_concurrency,
            cfg.chunk_ms,
        );
        tasks.spawn(async move {
            let _t = token;
            tts_mgr.run().await
        });
        if let Some(sub) = tel_sub {
            let mgr = TelemetryManager::new(bus.clone(), sub, self.traces.clone());
            tasks.spawn(mgr.run());
        }
        if let Some(sub) = cap_sub {
            let token = state.token.clone();
            let ch = CaptionChannel {
                bus: bus.clone(),
                sub,
                captioner: self.models.captioner.clone(),
                rewriter: self.models.rewriter.clone(),
                period: Duration::from_millis(cfg.caption_period_ms),
                buffer: state.rolling_buffer,
            };
            tasks.spawn(async move {
                let _t = token;
                ch.run().await
            });
        }
        if let Some(sub) = spk_sub {
            let token = state.token.clone();
            let ch = SpeakerChannel {
                bus: bus.clone(),
                sub,
                embedder: self.models.embedder.clone(),
                registry: state.speakers,
            };
            tasks.spawn(async move {
                let _t = token;
                ch.run().await
            });
        }
        drop(state.token);

        bus.publish(Payload::SessionOpen).await;
        tracing::info!(session = %id, active = self.limiter.active(), "session opened");
        Ok(Session {
            id,
            opened_at: SystemTime::now(),
            bus,
            phase,
            tasks,
            permit: Some(permit),
            closed: self.closed.clone(),
        })
    }
}

/// An open session and the tasks of its managers.
pub struct Session {
    pub id: SessionId,
    pub opened_at: SystemTime,
    pub bus: SessionBus,
    pub phase: PhaseCell,
    tasks: JoinSet<()>,
    permit: Option<SessionPermit>,
    closed: Arc<AtomicU64>,
}

impl Session {
    pub fn input_gateway(&self, registries: Arc<Registries>) -> InputGateway {
        InputGateway::new(self.bus.clone(), self.phase.clone(), registries)
    }

    pub fn is_closed(&self) -> bool {
        self.permit.is_none()
    }

    /// Publishes `Stop` then `SessionClose`, lets managers drain, cancels
    /// whatever is left, and frees the limiter slot. Idempotent.
    pub async fn close(&mut self) {
        let Some(permit) = self.permit.take() else { return };
        close_routes(&self.bus).await;
        let drained = tokio::time::timeout(CLOSE_GRACE, async {
            while self.tasks.join_next().await.is_some() {}
        })
        .await;
        if drained.is_err() {
            tracing::warn!(session = %self.id, "managers did not drain; aborting");
            self.tasks.shutdown().await;
        }
        drop(permit);
        self.closed.fetch_add(1, Ordering::AcqRel);
        tracing::info!(session = %self.id, "session closed");
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.permit.is_some() {
            // dropped without close: abort the managers outright
            self.tasks.abort_all();
        }
    }
}

/// Runs one client connection: hello handshake, session open, frame
/// ingestion until bye/disconnect/shutdown, then close.
pub async fn serve_connection(host: Arc<Host>, mut incoming: mpsc::Receiver<Frame>, out: mpsc::Sender<Frame>) {
    let Some(first) = incoming.recv().await else { return };
    match decode_client_frame(&first) {
        Ok(m) if m.body == ClientBody::Hello => {}
        Ok(_) => {
            let _ = out.send(encode_error("expected_hello")).await;
            return;
        }
        Err(e) => {
            let _ = out.send(encode_error(e.code())).await;
            return;
        }
    }
    let mut session = match host.open_session(out.clone()).await {
        Ok(s) => s,
        Err(e) => {
            let code = match e {
                SessionError::OverCapacity => "over_capacity",
                SessionError::Bus(_) => "internal",
            };
            let _ = out.send(encode_error(code)).await;
            return;
        }
    };
    if out.send(encode_hello_ack(session.id)).await.is_err() {
        session.close().await;
        return;
    }
    let mut input = session.input_gateway(host.registries.clone());
    let mut shutdown = host.shutdown.subscribe();
    loop {
        let frame = tokio::select! {
            biased;
            f = incoming.recv() => f,
            _ = shutdown.wait_for(|s| *s) => None,
        };
        let Some(frame) = frame else { break };
        let was_open = !input.is_closed();
        if let Err(e) = input.handle_frame(&frame).await {
            let _ = out.send(encode_error(e.code())).await;
        }
        if was_open && input.is_closed() {
            session.close().await;
        }
    }
    session.close().await;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limiter_caps_and_releases() {
        let l = SessionLimiter::new(1);
        let a = l.try_acquire().unwrap();
        assert!(l.try_acquire().is_none());
        drop(a);
        assert!(l.try_acquire().is_some());
        assert_eq!(l.peak(), 1);
    }

    #[test]
    fn forked_states_are_disjoint() {
        let cfg = SessionConfig::default();
        let reg = Registries::default();
        let mut a = PipelineState::fork(&cfg, &reg).unwrap();
        let b = PipelineState::fork(&cfg, &reg).unwrap();
        a.transcript_state.receive(&[1, 2, 3, 4]);
        a.rolling_buffer.push(crate::audio::AudioFrame::silence(16));
        assert!(b.transcript_state.is_empty());
        assert!(b.rolling_buffer.is_empty());
        assert_eq!(b.turn_state.phase, crate::turn::TurnPhase::Idle);
    }

    #[test]
    fn invalid_config_refused() {
        let cfg = SessionConfig {
            window: 0,
            ..SessionConfig::default()
        };
        assert!(PipelineState::fork(&cfg, &Registries::default()).is_err());
    }
}
