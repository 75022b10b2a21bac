#![allow(dead_code)]

use std::future::Future;
use std::path::PathBuf;
use std::time::Duration;

use xtalk_core::bus::{Payload, TurnId};
use xtalk_core::loopback::ClientLog;

pub const WAIT: Duration = Duration::from_secs(60);

/// Runs `f` on a current-thread runtime with a paused clock.
pub fn paused<F: Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .expect("runtime")
        .block_on(f)
}

pub fn multi_thread<F: Future>(f: F) -> F::Output {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .expect("runtime")
        .block_on(f)
}

pub fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

/// (clause, chunk, bytes) of every tts_chunk of `turn`, in arrival order.
pub fn chunks_of(log: &ClientLog, turn: TurnId) -> Vec<(u16, u16, usize)> {
    log.events()
        .filter_map(|(_, p, _)| match p {
            Payload::TtsChunk(c) if c.turn_id == turn => Some((c.clause_index, c.chunk_index, c.pcm.len())),
            _ => None,
        })
        .collect()
}

/// Position of the first received event matching `pred`.
pub fn position<F: Fn(&Payload) -> bool>(log: &ClientLog, pred: F) -> Option<usize> {
    log.events().position(|(_, p, _)| pred(p))
}

/// Expected PCM bytes for a clause: whole seconds of 16 kHz 16-bit audio
/// at `cps` characters per second.
pub fn clause_bytes(text: &str, cps: f64) -> usize {
    let chars = text.trim().chars().count() as f64;
    (chars / cps).ceil() as usize * 16_000 * 2
}
