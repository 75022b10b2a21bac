//! Bench harness: drives scripted sessions through a loopback client over
//! a grid of profile combos, utterance lengths and languages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::AsrMode;
use crate::bus::Payload;
use crate::config::{AppConfig, ConfigError};
use crate::loopback::{mock_host, ClientConn, ClientError, ClientLog};
use crate::mock::LatencyProfile;
use crate::scenario::{Lang, Scenario};
use crate::session::Host;
use crate::wire::ServerMessage;

pub const DEFAULT_LENGTHS_S: [u64; 4] = [5, 10, 30, 60];
pub const RUNS_PER_CELL: usize = 3;
/// Per-turn wait for tts_done before the run counts as failed.
pub const TURN_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no {lang} utterance of {length_s} s in the corpus")]
    ScenarioMissing { lang: &'static str, length_s: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("turn for {0} produced no audio")]
    NoAudio(String),
}

/// A named configuration to bench.
#[derive(Debug, Clone)]
pub struct BenchCombo {
    pub name: String,
    pub config: AppConfig,
}

impl BenchCombo {
    pub fn new(name: &str, config: AppConfig) -> Self {
        Self {
            name: name.to_string(),
            config,
        }
    }
}

/// The standard combos derived from `base`: each ASR mode, plus slow LLM
/// and slow TTS variants of the pseudo-streaming baseline.
pub fn standard_combos(base: &AppConfig) -> Vec<BenchCombo> {
    let with = |f: &dyn Fn(&mut AppConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        BenchCombo::new("pseudo_streaming", with(&|c| c.asr.mode = AsrMode::PseudoStreaming)),
        BenchCombo::new("streaming", with(&|c| c.asr.mode = AsrMode::Streaming)),
        BenchCombo::new("offline", with(&|c| c.asr.mode = AsrMode::Offline)),
        BenchCombo::new(
            "slow_llm",
            with(&|c| {
                c.asr.mode = AsrMode::PseudoStreaming;
                c.llm.latency = LatencyProfile::new(300.0, 40.0);
            }),
        ),
        BenchCombo::new(
            "slow_tts",
            with(&|c| {
                c.asr.mode = AsrMode::PseudoStreaming;
                c.tts.latency = LatencyProfile::new(250.0, 8.0);
            }),
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchGrid {
    pub lengths_s: Vec<u64>,
    pub langs: Vec<Lang>,
    pub runs: usize,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            lengths_s: DEFAULT_LENGTHS_S.to_vec(),
            langs: vec![Lang::Cn, Lang::En],
            runs: RUNS_PER_CELL,
        }
    }
}

/// What one scripted turn measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMeasurement {
    pub utterance: String,
    /// Server-side e2e from the session's trace.
    pub e2e_ms: f64,
    /// First tts_chunk arrival minus the vad_end send, at the client.
    pub client_e2e_ms: f64,
    /// Stage spans reported in metric frames, keyed by trace point.
    pub stages: BTreeMap<String, f64>,
}

fn as_ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn extract(utterance: &str, vad_end_at: Duration, from: usize, log: &ClientLog) -> Result<TurnMeasurement, BenchError> {
    let mut first_chunk = None;
    let mut stages = BTreeMap::new();
    for r in log.received.iter().skip(from) {
        let ServerMessage::Event { payload, .. } = &r.msg else { continue };
        match payload {
            Payload::TtsChunk(_) if first_chunk.is_none() => first_chunk = Some(r.at),
            Payload::Metric { name, value_ms, .. } => {
                stages.entry(name.clone()).or_insert(*value_ms);
            }
            _ => {}
        }
    }
    let first_chunk = first_chunk.ok_or_else(|| BenchError::NoAudio(utterance.to_string()))?;
    let client_e2e_ms = as_ms(first_chunk.saturating_sub(vad_end_at));
    let e2e_ms = stages.get("e2e").copied().unwrap_or(client_e2e_ms);
    Ok(TurnMeasurement {
        utterance: utterance.to_string(),
        e2e_ms,
        client_e2e_ms,
        stages,
    })
}

/// Speaks one utterance in a fresh session and measures the reply.
pub async fn measure_turn(host: std::sync::Arc<Host>, scenario: &Scenario, index: u16) -> Result<TurnMeasurement, BenchError> {
    let utt = &scenario.utterances[index as usize];
    let mut conn = ClientConn::connect(host).await?;
    let from = conn.received_count();
    let vad_end_at = conn.speak(utt, index).await;
    conn.wait_for("tts_done", from, TURN_TIMEOUT).await;
    conn.send(crate::wire::ClientBody::Bye).await;
    let log = conn.finish().await;
    extract(&utt.id, vad_end_at, from, &log)
}

/// One cell of the report: the rounded mean over its runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub config: String,
    pub length_s: u64,
    pub lang: Lang,
    pub e2e_ms: u64,
    pub runs_ms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn cell(&self, config: &str, lang: Lang, length_s: u64) -> Option<&BenchCell> {
        self.cells
            .iter()
            .find(|c| c.config == config && c.lang == lang && c.length_s == length_s)
    }

    /// Aligned text table, one row per (config, language), one column per
    /// length.
    pub fn table(&self) -> String {
        let mut lengths: Vec<u64> = self.cells.iter().map(|c| c.length_s).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let mut rows: Vec<(String, Lang)> = Vec::new();
        for c in &self.cells {
            if !rows.iter().any(|(n, l)| *n == c.config && *l == c.lang) {
                rows.push((c.config.clone(), c.lang));
            }
        }
        let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("config".len());
        let mut out = format!("{:<name_w$}  lang", "config");
        for l in &lengths {
            let _ = write!(out, "  {:>8}", format!("{l}s"));
        }
        out.push('\n');
        for (name, lang) in rows {
            let _ = write!(out, "{name:<name_w$}  {:<4}", lang.as_str());
            for &l in &lengths {
                let v = self
                    .cell(&name, lang, l)
                    .map_or_else(|| "-".to_string(), |c| format!("{} ms", c.e2e_ms));
                let _ = write!(out, "  {v:>8}");
            }
            out.push('\n');
        }
        out
    }

    /// One JSON object per cell, newline separated.
    pub fn jsonl(&self) -> String {
        self.cells
            .iter()
            .map(|c| serde_json::to_string(c).expect("cells serialize") + "\n")
            .collect()
    }
}

/// Utterances of exactly `length_s` seconds in `lang`, in corpus order.
pub fn utterances_of(corpus: &Scenario, lang: Lang, length_s: u64) -> Vec<u16> {
    corpus
        .utterances
        .iter()
        .enumerate()
        .filter(|(_, u)| u.lang == lang && u.duration_ms() == length_s * 1000)
        .map(|(i, _)| i as u16)
        .collect()
}

/// Runs the grid. Sessions run one at a time so that runs do not share
/// the clock.
pub async fn run_bench(corpus: &Scenario, combos: &[BenchCombo], grid: &BenchGrid) -> Result<BenchReport, BenchError> {
    let mut report = BenchReport::default();
    for combo in combos {
        let (host, _) = mock_host(&combo.config, corpus)?;
        for &lang in &grid.langs {
            for &length_s in &grid.lengths_s {
                let pool = utterances_of(corpus, lang, length_s);
                if pool.is_empty() {
                    return Err(BenchError::ScenarioMissing {
                        lang: lang.as_str(),
                        length_s,
                    });
                }
                let mut runs_ms = Vec::with_capacity(grid.runs);
                for run in 0..grid.runs {
                    let index = pool[run % pool.len()];
                    let m = measure_turn(host.clone(), corpus, index).await?;
                    tracing::debug!(config = %combo.name, utterance = %m.utterance, e2e_ms = m.e2e_ms, "bench run");
                    runs_ms.push(m.e2e_ms);
                }
                let mean = runs_ms.iter().sum::<f64>() / runs_ms.len().max(1) as f64;
                report.cells.push(BenchCell {
                    config: combo.name.clone(),
                    length_s,
                    lang,
                    e2e_ms: mean.round() as u64,
                    runs_ms,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(config: &str, lang: Lang, length_s: u64, e2e_ms: u64) -> BenchCell {
        BenchCell {
            config: config.into(),
            length_s,
            lang,
            e2e_ms,
            runs_ms: vec![e2e_ms as f64; 3],
        }
    }

    #[test]
    fn table_has_one_column_per_length() {
        let r = BenchReport {
            cells: vec![
                cell("streaming", Lang::Cn, 5, 120),
                cell("streaming", Lang::Cn, 10, 121),
                cell("streaming", Lang::En, 5, 130),
            ],
        };
        let t = r.table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("5s") && lines[0].contains("10s"));
        assert!(lines[1].contains("120 ms") && lines[1].contains("121 ms"));
        assert!(lines[2].ends_with('-'));
    }

    #[test]
    fn jsonl_is_one_object_per_cell() {
        let r = BenchReport {
            cells: vec![cell("a", Lang::Cn, 5, 1), cell("a", Lang::En, 5, 2)],
        };
        let rows: Vec<BenchCell> = r
            .jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows, r.cells);
    }

    #[test]
    fn standard_combos_cover_every_asr_mode() {
        let combos = standard_combos(&AppConfig::default());
        for mode in [AsrMode::Streaming, AsrMode::PseudoStreaming, AsrMode::Offline] {
            assert!(combos.iter().any(|c| c.config.asr.mode == mode));
        }
    }
}
