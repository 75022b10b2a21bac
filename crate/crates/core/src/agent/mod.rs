//! Dialogue agent: prompt assembly, token streaming, sentence segmentation,
//! tool dispatch with phatic masking, and voice switching.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::is_sentence_boundary;
use crate::backend::{LlmBackend, LlmItem, ToolBackend};
use crate::bus::{Payload, SessionBus, TurnId};
use crate::scenario::{script_class, ToolRegistry, VoiceRegistry};

pub const DEFAULT_MIN_LEN: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 80;
pub const DEFAULT_PHATIC_THRESHOLD_MS: u64 = 300;
pub const MAX_TOOL_ROUNDS: usize = 4;
pub const PERSONA: &str = "You are a helpful voice assistant. Keep answers short and speakable.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

/// What the agent knows when a turn starts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TurnContext {
    pub history: Vec<(Role, String)>,
    pub caption: Option<String>,
    pub speaker_id: Option<String>,
    pub voice: String,
    pub emotion: String,
    /// Summary of the latest finished deliberation.
    pub thinking: Option<String>,
}

/// Deterministic prompt: system block, history, then the user text on
/// its own last line.
pub fn build_prompt(ctx: &TurnContext, user_text: &str, tools: &ToolRegistry) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "[system] {PERSONA}");
    if let Some(c) = &ctx.caption {
        let _ = writeln!(p, "[environment] {c}");
    }
    if let Some(s) = &ctx.speaker_id {
        let _ = writeln!(p, "[speaker] {s}");
    }
    if !ctx.voice.is_empty() || !ctx.emotion.is_empty() {
        let _ = writeln!(p, "[voice] timbre={} emotion={}", ctx.voice, ctx.emotion);
    }
    if !tools.tools.is_empty() {
        let list: Vec<String> = tools
            .tools
            .iter()
            .map(|(name, spec)| format!("{name}({} ms)", spec.expected_latency_ms))
            .collect();
        let _ = writeln!(p, "[tools] {}", list.join(", "));
    }
    if let Some(t) = &ctx.thinking {
        let _ = writeln!(p, "[thinking] {t}");
    }
    if !ctx.history.is_empty() {
        p.push_str("[history]\n");
        for (role, text) in &ctx.history {
            let r = match role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let _ = writeln!(p, "{r}: {text}");
        }
    }
    p.push_str("[user]\n");
    p.push_str(user_text);
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Splits a token stream into clauses. Emitted clauses followed by
/// `pending` always equal the input exactly.
#[derive(Debug, Clone, Default)]
pub struct SentenceSegmenter {
    pub pending: String,
    cfg: SegmenterConfig,
}

impl SentenceSegmenter {
    pub fn new(cfg: SegmenterConfig) -> Self {
        Self {
            pending: String::new(),
            cfg: SegmenterConfig {
                min_len: cfg.min_len.max(1),
                max_len: cfg.max_len.max(cfg.min_len.max(1)),
            },
        }
    }

    pub fn push(&mut self, token: &str) -> Vec<String> {
        self.pending.push_str(token);
        let mut out = Vec::new();
        loop {
            let mut cut = None;
            for (n, (i, c)) in self.pending.char_indices().enumerate() {
                if n >= self.cfg.max_len {
                    // hard split once max_len characters are pending
                    cut = Some(i);
                    break;
                }
                if is_sentence_boundary(c) && n + 1 >= self.cfg.min_len {
                    cut = Some(i + c.len_utf8());
                    break;
                }
            }
            if cut.is_none() && self.pending.chars().count() == self.cfg.max_len {
                cut = Some(self.pending.len());
            }
            let Some(cut) = cut else { break };
            let rest = self.pending.split_off(cut);
            out.push(std::mem::replace(&mut self.pending, rest));
        }
        out
    }

    /// Emits whatever is pending.
    pub fn flush(&mut self) -> Option<String> {
        (!self.pending.is_empty()).then(|| std::mem::take(&mut self.pending))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaticPolicy {
    pub threshold_ms: u64,
    pub phrases: Vec<String>,
}

impl Default for PhaticPolicy {
    fn default() -> Self {
        Self {
            threshold_ms: DEFAULT_PHATIC_THRESHOLD_MS,
            phrases: vec!["Let me check this for you…".into(), "让我查一下…".into()],
        }
    }
}

impl PhaticPolicy {
    pub fn needs_phatic(&self, expected_latency_ms: u64) -> bool {
        expected_latency_ms > self.threshold_ms
    }

    /// The first phrase written in the same script as the user's text.
    pub fn phrase_for(&self, user_text: &str) -> Option<&str> {
        let class = script_class(user_text);
        self.phrases
            .iter()
            .find(|p| script_class(p) == class)
            .or(self.phrases.first())
            .map(String::as_str)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("unknown voice {0}")]
    UnknownVoice(String),
    #[error("unknown emotion {0}")]
    UnknownEmotion(String),
}

/// Voice and tool tables shared by all sessions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registries {
    pub voices: VoiceRegistry,
    pub tools: ToolRegistry,
}

/// A validated tool invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub tool_name: String,
    pub args: BTreeMap<String, String>,
    pub expected_latency_ms: u64,
}

impl ToolCall {
    pub fn new(
        registry: &ToolRegistry,
        name: &str,
        args: BTreeMap<String, String>,
    ) -> Result<Self, AgentError> {
        let spec = registry
            .tools
            .get(name)
            .ok_or_else(|| AgentError::UnknownTool(name.to_string()))?;
        Ok(Self {
            tool_name: name.to_string(),
            args,
            expected_latency_ms: spec.expected_latency_ms,
        })
    }
}

pub fn timbre_switch(voices: &VoiceRegistry, voice: &str) -> Result<Payload, AgentError> {
    voices
        .voices
        .get(voice)
        .map(|tag| Payload::TimbreSwitch {
            voice: voice.to_string(),
            profile_tag: tag.clone(),
        })
        .ok_or_else(|| AgentError::UnknownVoice(voice.to_string()))
}

pub fn emotion_switch(voices: &VoiceRegistry, emotion: &str) -> Result<Payload, AgentError> {
    if voices.emotions.iter().any(|e| e == emotion) {
        Ok(Payload::EmotionSwitch {
            emotion: emotion.to_string(),
        })
    } else {
        Err(AgentError::UnknownEmotion(emotion.to_string()))
    }
}

/// Everything one turn of the agent loop needs.
pub struct AgentTurn {
    pub bus: SessionBus,
    pub turn: TurnId,
    pub user_text: String,
    pub ctx: TurnContext,
    pub llm: Arc<dyn LlmBackend>,
    pub tools: Arc<dyn ToolBackend>,
    pub registries: Arc<Registries>,
    pub phatic: PhaticPolicy,
    pub segmenter: SegmenterConfig,
}

impl AgentTurn {
    async fn sentence(&self, index: &mut u32, text: String) {
        self.bus
            .publish(Payload::LlmSentence {
                turn_id: self.turn,
                index: *index,
                text,
            })
            .await;
        *index += 1;
    }

    /// Runs the tool and returns the text fed back to the model.
    async fn dispatch(&self, call: ToolCall) -> String {
        if self.phatic.needs_phatic(call.expected_latency_ms) {
            if let Some(p) = self.phatic.phrase_for(&self.user_text) {
                self.bus
                    .publish(Payload::PhaticUtterance {
                        turn_id: self.turn,
                        text: p.to_string(),
                    })
                    .await;
            }
        }
        self.bus
            .publish(Payload::ToolCallStart {
                turn_id: self.turn,
                tool: call.tool_name.clone(),
                args: call.args.clone(),
            })
            .await;
        let arg = |k: &str| call.args.get(k).map(String::as_str).unwrap_or("");
        let switch = match call.tool_name.as_str() {
            "timbre_switch" => Some(timbre_switch(&self.registries.voices, arg("voice"))),
            "emotion_switch" => Some(emotion_switch(&self.registries.voices, arg("emotion"))),
            _ => None,
        };
        let (ok, text) = match switch {
            Some(Ok(event)) => {
                let text = match &event {
                    Payload::TimbreSwitch { voice, .. } => format!("timbre set to {voice}"),
                    Payload::EmotionSwitch { emotion } => format!("emotion set to {emotion}"),
                    _ => unreachable!("switch handlers only build switch events"),
                };
                self.bus.publish(event).await;
                (true, text)
            }
            Some(Err(e)) => (false, format!("error: {e}")),
            None => match self.tools.call(&call.tool_name, &call.args).await {
                Ok(r) => (true, r),
                Err(e) => (false, format!("error: {e}")),
            },
        };
        self.bus
            .publish(Payload::ToolCallEnd {
                turn_id: self.turn,
                tool: call.tool_name,
                ok,
                result: text.clone(),
            })
            .await;
        text
    }

    pub async fn run(self) {
        let mut prompt = build_prompt(&self.ctx, &self.user_text, &self.registries.tools);
        let mut seg = SentenceSegmenter::new(self.segmenter);
        let mut index = 0u32;
        for _round in 0..=MAX_TOOL_ROUNDS {
            let mut stream = self.llm.stream(prompt.clone());
            let mut tool = None;
            while let Some(item) = stream.next().await {
                match item {
                    LlmItem::Token(t) => {
                        self.bus
                            .publish(Payload::LlmToken {
                                turn_id: self.turn,
                                text: t.clone(),
                            })
                            .await;
                        for s in seg.push(&t) {
                            self.sentence(&mut index, s).await;
                        }
                    }
                    LlmItem::Think(query) => {
                        self.bus
                            .publish(Payload::ThinkingStart {
                                turn_id: self.turn,
                                query,
                            })
                            .await;
                    }
                    LlmItem::ToolCall { name, args } => {
                        tool = Some((name, args));
                        break;
                    }
                }
            }
            if let Some(s) = seg.flush() {
                self.sentence(&mut index, s).await;
            }
            let Some((name, args)) = tool else { break };
            let result = match ToolCall::new(&self.registries.tools, &name, args) {
                Ok(call) => self.dispatch(call).await,
                Err(e) => format!("error: {e}"),
            };
            let _ = write!(prompt, "\n[tool {name}] {result}");
        }
        self.bus
            .publish(Payload::LlmDone {
                turn_id: self.turn,
                sentences: index,
            })
            .await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(min: usize, max: usize) -> SentenceSegmenter {
        SentenceSegmenter::new(SegmenterConfig {
            min_len: min,
            max_len: max,
        })
    }

    #[test]
    fn boundary_emission() {
        let mut s = seg(1, 80);
        assert!(s.push("你").is_empty());
        assert!(s.push("好").is_empty());
        assert_eq!(s.push("。"), vec!["你好。"]);
    }

    #[test]
    fn short_clause_waits_for_min_len() {
        let mut s = seg(4, 80);
        assert!(s.push("好。").is_empty());
        assert_eq!(s.push("走吧。"), vec!["好。走吧。"]);
    }

    #[test]
    fn hard_split_at_max_len() {
        let mut s = seg(4, 80);
        let text: String = std::iter::repeat_n('字', 85).collect();
        let mut out = Vec::new();
        for c in text.chars() {
            out.extend(s.push(&c.to_string()));
        }
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].chars().count(), 80);
        assert_eq!(s.pending.chars().count(), 5);
    }

    #[test]
    fn flush_at_end() {
        let mut s = seg(4, 80);
        s.push("再见");
        assert_eq!(s.flush(), Some("再见".to_string()));
        assert_eq!(s.flush(), None);
    }

    proptest! {
        #[test]
        fn reassembly_is_exact(tokens in prop::collection::vec("[a-c 。!你]{0,4}", 0..40), min in 1usize..6, extra in 0usize..20) {
            let mut s = seg(min, min + extra);
            let mut out = String::new();
            for t in &tokens {
                for x in s.push(t) {
                    prop_assert!(x.chars().count() <= min + extra);
                    out.push_str(&x);
                }
            }
            out.push_str(&s.pending);
            prop_assert_eq!(out, tokens.concat());
        }
    }

    fn ctx() -> TurnContext {
        TurnContext::default()
    }

    #[test]
    fn prompt_sections() {
        let tools = ToolRegistry::default();
        let bare = build_prompt(&ctx(), "你好", &tools);
        assert!(!bare.contains("[environment]") && !bare.contains("[speaker]"));
        assert!(bare.ends_with("\n你好"));
        let full = TurnContext {
            caption: Some("rainy street ambience".into()),
            speaker_id: Some("spk_01".into()),
            ..ctx()
        };
        let p = build_prompt(&full, "你好", &tools);
        assert!(p.contains("rainy street ambience") && p.contains("spk_01"));
        assert_eq!(p, build_prompt(&full, "你好", &tools));
    }

    #[test]
    fn phatic_threshold_and_phrase() {
        let p = PhaticPolicy::default();
        assert!(p.needs_phatic(800));
        assert!(!p.needs_phatic(5));
        assert!(!p.needs_phatic(300));
        assert_eq!(p.phrase_for("明天天气"), Some("让我查一下…"));
        assert_eq!(p.phrase_for("weather tomorrow"), Some("Let me check this for you…"));
    }

    #[test]
    fn registry_checks() {
        let reg = Registries::default();
        assert!(ToolCall::new(&reg.tools, "web_search", BTreeMap::new()).is_ok());
        assert_eq!(
            ToolCall::new(&reg.tools, "rm_rf", BTreeMap::new()),
            Err(AgentError::UnknownTool("rm_rf".into()))
        );
        assert!(timbre_switch(&reg.voices, "warm_female").is_ok());
        assert_eq!(timbre_switch(&reg.voices, "xyz"), Err(AgentError::UnknownVoice("xyz".into())));
        assert!(emotion_switch(&reg.voices, "happy").is_ok());
        assert_eq!(
            emotion_switch(&reg.voices, "ecstatic"),
            Err(AgentError::UnknownEmotion("ecstatic".into()))
        );
    }
}
