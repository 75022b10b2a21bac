//! Model-agnostic backend contracts.
//!
//! Managers only talk to models through these traits, so any backend
//! (the shipped mocks, or a real model server) can be swapped in without
//! touching orchestration code. Backends are shared by all sessions and
//! must not keep per-session state; streaming state lives in caller-held
//! handles.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;
use bytes::Bytes;
use futures::stream::BoxStream;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("audio carries no recognizable tag")]
    UntaggedAudio,
    #[error("empty text")]
    EmptyText,
    #[error("operation not supported by this backend")]
    Unsupported,
    #[error("backend failure: {0}")]
    Failure(String),
}

/// A contiguous span of mono 16 kHz PCM.
#[derive(Debug, Clone, Default)]
pub struct AudioSpan {
    pub samples: Arc<Vec<i16>>,
}

impl AudioSpan {
    pub fn new(samples: Vec<i16>) -> Self {
        Self {
            samples: Arc::new(samples),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / crate::audio::SAMPLE_RATE as f64
    }
}

/// Opaque per-utterance state of a natively streaming recognizer.
pub type AsrStream = Box<dyn Any + Send>;

#[async_trait]
pub trait AsrBackend: Send + Sync {
    /// Offline recognition of a whole span.
    async fn recognize(&self, span: AudioSpan) -> Result<String, BackendError>;

    fn supports_streaming(&self) -> bool {
        false
    }

    fn open_stream(&self) -> AsrStream {
        Box::new(())
    }

    /// Feeds one chunk to a streaming recognizer and returns the running
    /// partial transcript.
    async fn recognize_streaming(
        &self,
        _chunk: AudioSpan,
        stream: AsrStream,
    ) -> (AsrStream, Result<String, BackendError>) {
        (stream, Err(BackendError::Unsupported))
    }
}

/// One item of a language-model stream.
#[derive(Debug, Clone, PartialEq)]
pub enum LlmItem {
    Token(String),
    ToolCall {
        name: String,
        args: BTreeMap<String, String>,
    },
    Think(String),
}

pub trait LlmBackend: Send + Sync {
    /// Streams items for a prompt. A `ToolCall` item ends the stream; the
    /// caller restarts generation with the tool result in the prompt.
    fn stream(&self, prompt: String) -> BoxStream<'static, LlmItem>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisRequest {
    pub text: String,
    pub timbre: String,
    pub emotion: String,
}

/// What the backend actually did, recorded for inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisMeta {
    pub timbre: String,
    pub emotion: String,
    /// `reference_audio` or `native_vector`.
    pub emotion_mechanism: String,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    pub pcm: Bytes,
    pub meta: SynthesisMeta,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TtsCapabilities {
    pub native_emotion_control: bool,
}

#[async_trait]
pub trait TtsBackend: Send + Sync {
    async fn synthesize(&self, req: SynthesisRequest) -> Result<SynthesisOutput, BackendError>;

    fn capabilities(&self) -> TtsCapabilities;
}

#[async_trait]
pub trait Captioner: Send + Sync {
    async fn caption(&self, window: AudioSpan) -> Result<String, BackendError>;
}

#[async_trait]
pub trait Rewriter: Send + Sync {
    async fn rewrite(&self, text: String) -> Result<String, BackendError>;
}

#[async_trait]
pub trait Embedder: Send + Sync {
    /// Returns a unit-norm voiceprint for the audio.
    async fn embed(&self, audio: AudioSpan) -> Result<Vec<f64>, BackendError>;
}

#[async_trait]
pub trait ThinkingBackend: Send + Sync {
    async fn think(&self, query: String) -> String;
}

#[async_trait]
pub trait ToolBackend: Send + Sync {
    async fn call(&self, name: &str, args: &BTreeMap<String, String>) -> Result<String, BackendError>;
}

/// The process-wide model handles shared read-only by every session.
#[derive(Clone)]
pub struct Models {
    pub asr: Arc<dyn AsrBackend>,
    pub llm: Arc<dyn LlmBackend>,
    pub tts: Arc<dyn TtsBackend>,
    pub captioner: Arc<dyn Captioner>,
    pub rewriter: Option<Arc<dyn Rewriter>>,
    pub embedder: Arc<dyn Embedder>,
    pub thinker: Arc<dyn ThinkingBackend>,
    pub tools: Arc<dyn ToolBackend>,
}
