//! PCM audio frames and the sample watermark used by the scripted corpus.
//!
//! All audio in the engine is mono 16-bit little-endian PCM at 16 kHz.
//! Scripted utterances carry a watermark in their samples so that mock
//! backends can recover which utterance, and which position inside it, a
//! span of audio came from. The watermark is a repeating group of four
//! samples: `[MAGIC, utterance, group_hi, group_lo]`.

use bytes::{Bytes, BytesMut};

pub const SAMPLE_RATE: u32 = 16_000;
pub const BYTES_PER_SAMPLE: usize = 2;
pub const SAMPLES_PER_MS: usize = 16;

/// Samples per watermark group. Cuts into watermarked audio must be
/// multiples of this value.
pub const WATERMARK_GROUP: usize = 4;
const WATERMARK_MAGIC: i16 = 0x2D2D;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioFrame {
    pcm: Bytes,
}

impl AudioFrame {
    /// Wraps raw little-endian PCM bytes. Returns `None` for odd lengths.
    pub fn from_bytes(pcm: Bytes) -> Option<Self> {
        pcm.len().is_multiple_of(BYTES_PER_SAMPLE).then_some(Self { pcm })
    }

    pub fn from_samples(samples: &[i16]) -> Self {
        Self {
            pcm: samples_to_bytes(samples),
        }
    }

    pub fn silence(samples: usize) -> Self {
        Self {
            pcm: Bytes::from(vec![0u8; samples * BYTES_PER_SAMPLE]),
        }
    }

    pub fn bytes(&self) -> &Bytes {
        &self.pcm
    }

    pub fn sample_count(&self) -> usize {
        self.pcm.len() / BYTES_PER_SAMPLE
    }

    /// Duration in milliseconds (`sample_count / 16`).
    pub fn duration_ms(&self) -> f64 {
        self.sample_count() as f64 / SAMPLES_PER_MS as f64
    }

    pub fn samples(&self) -> Vec<i16> {
        bytes_to_samples(&self.pcm)
    }

    pub fn is_empty(&self) -> bool {
        self.pcm.is_empty()
    }
}

pub fn samples_to_bytes(samples: &[i16]) -> Bytes {
    let mut out = BytesMut::with_capacity(samples.len() * BYTES_PER_SAMPLE);
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.freeze()
}

pub fn bytes_to_samples(pcm: &[u8]) -> Vec<i16> {
    pcm.chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect()
}

pub fn ms_to_samples(ms: u64) -> usize {
    ms as usize * SAMPLES_PER_MS
}

pub fn samples_to_ms(samples: usize) -> f64 {
    samples as f64 / SAMPLES_PER_MS as f64
}

/// Position of a watermarked span inside its source utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatermarkPos {
    pub utterance: u16,
    /// Absolute sample offset of the span's first sample.
    pub sample_offset: usize,
}

/// Renders `n_samples` of watermarked audio for utterance `utterance`.
pub fn watermark_samples(utterance: u16, n_samples: usize) -> Vec<i16> {
    assert!(
        utterance < WATERMARK_MAGIC as u16,
        "utterance index out of range"
    );
    (0..n_samples)
        .map(|i| {
            let group = (i / WATERMARK_GROUP) as u32;
            match i % WATERMARK_GROUP {
                0 => WATERMARK_MAGIC,
                1 => utterance as i16,
                2 => (group >> 15) as i16,
                _ => (group & 0x7fff) as i16,
            }
        })
        .collect()
}

/// Decodes the watermark from the first group of `samples`.
///
/// The span must start on a group boundary of its utterance.
pub fn decode_watermark(samples: &[i16]) -> Option<WatermarkPos> {
    if samples.len() < WATERMARK_GROUP || samples[0] != WATERMARK_MAGIC {
        return None;
    }
    let utterance = samples[1];
    if !(0..WATERMARK_MAGIC).contains(&utterance) {
        return None;
    }
    let hi = samples[2] as u32;
    let lo = samples[3] as u32;
    let group = (hi << 15) | lo;
    Some(WatermarkPos {
        utterance: utterance as u16,
        sample_offset: group as usize * WATERMARK_GROUP,
    })
}
