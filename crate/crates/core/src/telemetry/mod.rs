//! Per-turn latency tracing.
//!
//! A trace records when each stage of the critical path first produced
//! output. VadEnd and AsrFinal carry no turn id; they are held as pending
//! and attached to the next turn whose first LLM output appears.

pub mod bench;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, EventKind, Payload, SessionBus, Subscription, TurnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracePoint {
    VadEnd,
    AsrFinal,
    LlmFirstToken,
    LlmFirstSentence,
    TtsFirstChunk,
    TurnDone,
}

impl TracePoint {
    pub const ALL: [TracePoint; 6] = [
        TracePoint::VadEnd,
        TracePoint::AsrFinal,
        TracePoint::LlmFirstToken,
        TracePoint::LlmFirstSentence,
        TracePoint::TtsFirstChunk,
        TracePoint::TurnDone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TracePoint::VadEnd => "vad_end",
            TracePoint::AsrFinal => "asr_final",
            TracePoint::LlmFirstToken => "llm_first_token",
            TracePoint::LlmFirstSentence => "llm_first_sentence",
            TracePoint::TtsFirstChunk => "tts_first_chunk",
            TracePoint::TurnDone => "turn_done",
        }
    }
}

impl fmt::Display for TracePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TelemetryError {
    #[error("{0} already marked")]
    DuplicateMark(TracePoint),
    #[error("trace lacks vad_end or tts_first_chunk")]
    IncompleteTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub turn_id: TurnId,
    points: BTreeMap<TracePoint, u64>,
}

fn ns_to_ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

impl LatencyTrace {
    pub fn new(turn_id: TurnId) -> Self {
        Self {
            turn_id,
            points: BTreeMap::new(),
        }
    }

    pub fn get(&self, point: TracePoint) -> Option<u64> {
        self.points.get(&point).copied()
    }

    pub fn mark(&mut self, point: TracePoint, t_ns: u64) -> Result<(), TelemetryError> {
        if self.points.contains_key(&point) {
            return Err(TelemetryError::DuplicateMark(point));
        }
        self.points.insert(point, t_ns);
        Ok(())
    }

    /// Present timestamps are non-decreasing in stage order.
    pub fn is_ordered(&self) -> bool {
        let v: Vec<u64> = self.points.values().copied().collect();
        v.windows(2).all(|w| w[0] <= w[1])
    }

    /// Milliseconds from `point` back to the nearest earlier marked stage.
    pub fn stage_ms(&self, point: TracePoint) -> Option<f64> {
        let t = self.get(point)?;
        let prev = self.points.range(..point).next_back().map_or(t, |(_, v)| *v);
        Some(ns_to_ms(t.saturating_sub(prev)))
    }

    pub fn compute_e2e(&self) -> Result<f64, TelemetryError> {
        match (self.get(TracePoint::VadEnd), self.get(TracePoint::TtsFirstChunk)) {
            (Some(a), Some(b)) => Ok(ns_to_ms(b.saturating_sub(a))),
            _ => Err(TelemetryError::IncompleteTrace),
        }
    }
}

/// Completed traces, collected when a session's telemetry manager stops.
pub type TraceSink = Arc<Mutex<Vec<LatencyTrace>>>;

pub fn subscribe(bus: &SessionBus) -> Result<Subscription, BusError> {
    bus.subscribe(
        "telemetry",
        [
            EventKind::VadEnd,
            EventKind::AsrFinal,
            EventKind::LlmToken,
            EventKind::LlmSentence,
            EventKind::PhaticUtterance,
            EventKind::TtsChunk,
            EventKind::TtsDone,
        ],
    )
}

pub struct TelemetryManager {
    bus: SessionBus,
    sub: Subscription,
    sink: Option<TraceSink>,
    traces: BTreeMap<TurnId, LatencyTrace>,
    pending_vad_end: Option<u64>,
    pending_asr_final: Option<u64>,
}

impl TelemetryManager {
    pub fn new(bus: SessionBus, sub: Subscription, sink: Option<TraceSink>) -> Self {
        Self {
            bus,
            sub,
            sink,
            traces: BTreeMap::new(),
            pending_vad_end: None,
            pending_asr_final: None,
        }
    }

    fn trace(&mut self, turn: TurnId) -> &mut LatencyTrace {
        let (vad, asr) = (&mut self.pending_vad_end, &mut self.pending_asr_final);
        self.traces.entry(turn).or_insert_with(|| {
            let mut t = LatencyTrace::new(turn);
            if let Some(v) = vad.take() {
                let _ = t.mark(TracePoint::VadEnd, v);
            }
            if let Some(a) = asr.take() {
                let _ = t.mark(TracePoint::AsrFinal, a);
            }
            t
        })
    }

    async fn mark_once(&mut self, turn: TurnId, points: &[TracePoint], t_ns: u64) {
        let fresh = !self.traces.contains_key(&turn);
        let trace = self.trace(turn);
        let mut marked = Vec::new();
        if fresh {
            marked.extend(trace.points.keys().copied());
        }
        for p in points {
            if trace.mark(*p, t_ns).is_ok() {
                marked.push(*p);
            }
        }
        let trace = trace.clone();
        for p in marked {
            let ms = trace.stage_ms(p).unwrap_or(0.0);
            self.bus.metric(Some(turn), p.name(), ms).await;
            if p == TracePoint::TtsFirstChunk {
                if let Ok(e2e) = trace.compute_e2e() {
                    self.bus.metric(Some(turn), "e2e", e2e).await;
                }
            }
        }
    }

    pub async fn run(mut self) {
        while let Ok(ev) = self.sub.next().await {
            let t = ev.created_at_ns;
            match &ev.payload {
                Payload::VadEnd => {
                    self.pending_vad_end = Some(t);
                    self.pending_asr_final = None;
                }
                Payload::AsrFinal { .. } => self.pending_asr_final = Some(t),
                Payload::LlmToken { turn_id, .. } => {
                    self.mark_once(*turn_id, &[TracePoint::LlmFirstToken], t).await
                }
                Payload::LlmSentence { turn_id, .. } | Payload::PhaticUtterance { turn_id, .. } => {
                    self.mark_once(*turn_id, &[TracePoint::LlmFirstToken, TracePoint::LlmFirstSentence], t)
                        .await
                }
                Payload::TtsChunk(c) => {
                    if self.traces.contains_key(&c.turn_id) {
                        self.mark_once(c.turn_id, &[TracePoint::TtsFirstChunk], t).await
                    }
                }
                Payload::TtsDone { turn_id, .. } if self.traces.contains_key(turn_id) => {
                    self.mark_once(*turn_id, &[TracePoint::TurnDone], t).await
                }
                _ => {}
            }
        }
        if let Some(sink) = &self.sink {
            sink.lock().extend(std::mem::take(&mut self.traces).into_values());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MS: u64 = 1_000_000;

    #[test]
    fn e2e_is_difference() {
        let mut t = LatencyTrace::new(1);
        t.mark(TracePoint::VadEnd, 1000 * MS).unwrap();
        assert_eq!(t.compute_e2e(), Err(TelemetryError::IncompleteTrace));
        t.mark(TracePoint::TtsFirstChunk, 1450 * MS).unwrap();
        assert_eq!(t.compute_e2e(), Ok(450.0));
    }

    #[test]
    fn duplicate_mark_rejected() {
        let mut t = LatencyTrace::new(1);
        t.mark(TracePoint::AsrFinal, 5).unwrap();
        assert_eq!(
            t.mark(TracePoint::AsrFinal, 6),
            Err(TelemetryError::DuplicateMark(TracePoint::AsrFinal))
        );
        assert_eq!(t.get(TracePoint::AsrFinal), Some(5));
    }

    #[test]
    fn partial_trace_is_valid() {
        let mut t = LatencyTrace::new(1);
        t.mark(TracePoint::VadEnd, 1).unwrap();
        t.mark(TracePoint::AsrFinal, 2).unwrap();
        assert!(t.is_ordered());
        assert!(t.compute_e2e().is_err());
    }

    proptest! {
        #[test]
        fn decomposition_telescopes(gaps in proptest::collection::vec(0u64..5_000_000_000, 3)) {
            let mut t = LatencyTrace::new(1);
            let mut now = 123 * MS;
            t.mark(TracePoint::VadEnd, now).unwrap();
            for (p, g) in [TracePoint::AsrFinal, TracePoint::LlmFirstSentence, TracePoint::TtsFirstChunk].into_iter().zip(&gaps) {
                now += g;
                t.mark(p, now).unwrap();
            }
            let g = |p| t.get(p).unwrap() as i128;
            let sum = (g(TracePoint::AsrFinal) - g(TracePoint::VadEnd))
                + (g(TracePoint::LlmFirstSentence) - g(TracePoint::AsrFinal))
                + (g(TracePoint::TtsFirstChunk) - g(TracePoint::LlmFirstSentence));
            prop_assert_eq!(sum, g(TracePoint::TtsFirstChunk) - g(TracePoint::VadEnd));
            prop_assert!(t.is_ordered());
            prop_assert!(t.compute_e2e().is_ok());
        }
    }
}
