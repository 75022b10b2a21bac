//! Scenario corpus files.
//!
//! A scenario directory holds the scripts that drive the mock backends:
//!
//! * `utterances.json`: tagged utterances with transcripts and per-chunk alignments
//! * `llm_script.json`: pattern → token / tool-call / think items
//! * `scene_tags.json`: scene tag → caption table
//! * `voices.json`: voice registry, emotion set, optional speaker embeddings
//! * `tools.json`: tool registry (optional; defaults are used when absent)
//! * `script.json`: loopback client steps (optional; only replay scenarios)

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioFrame};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario missing: {0}")]
    Missing(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Cn,
    En,
}

impl Lang {
    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Cn => "cn",
            Lang::En => "en",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cn" | "zh" => Some(Lang::Cn),
            "en" => Some(Lang::En),
            _ => None,
        }
    }
}

/// A scripted utterance. `alignment[i]` is the number of transcript
/// characters fully spoken by the end of chunk `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub lang: Lang,
    pub voice: String,
    pub scene: String,
    pub transcript: String,
    pub chunk_ms: u32,
    pub alignment: Vec<u32>,
}

impl Utterance {
    pub fn duration_ms(&self) -> u64 {
        self.alignment.len() as u64 * self.chunk_ms as u64
    }

    pub fn chunk_samples(&self) -> usize {
        audio::ms_to_samples(self.chunk_ms as u64)
    }

    pub fn total_samples(&self) -> usize {
        self.alignment.len() * self.chunk_samples()
    }

    /// Renders the utterance as watermarked PCM frames of `chunk_ms` each.
    pub fn frames(&self, index: u16) -> Vec<AudioFrame> {
        let all = audio::watermark_samples(index, self.total_samples());
        all.chunks(self.chunk_samples())
            .map(AudioFrame::from_samples)
            .collect()
    }

    /// Transcript characters attributed to the sample range `[start, end)`.
    /// A chunk belongs to the range when its midpoint does, which makes the
    /// mapping additive over adjacent ranges.
    pub fn text_for_range(&self, start: usize, end: usize) -> String {
        let cs = self.chunk_samples();
        let mut first = None;
        let mut last = None;
        for j in 0..self.alignment.len() {
            let mid = j * cs + cs / 2;
            if mid >= start && mid < end {
                first.get_or_insert(j);
                last = Some(j);
            }
        }
        let (Some(first), Some(last)) = (first, last) else {
            return String::new();
        };
        let from = if first == 0 { 0 } else { self.alignment[first - 1] } as usize;
        let to = self.alignment[last] as usize;
        self.transcript.chars().skip(from).take(to.saturating_sub(from)).collect()
    }

    fn validate(&self) -> Result<(), String> {
        if self.chunk_ms == 0 {
            return Err(format!("{}: chunk_ms must be positive", self.id));
        }
        let n = self.transcript.chars().count() as u32;
        let mut prev = 0;
        for &a in &self.alignment {
            if a < prev {
                return Err(format!("{}: alignment not monotone", self.id));
            }
            prev = a;
        }
        if prev != n {
            return Err(format!(
                "{}: alignment ends at {prev} but transcript has {n} chars",
                self.id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtteranceFile {
    pub utterances: Vec<Utterance>,
}

/// One scripted LLM output item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptItem {
    /// Text that is split into tokens by [`tokenize`].
    Text(String),
    Token(String),
    Tool {
        name: String,
        #[serde(default)]
        args: BTreeMap<String, String>,
    },
    Think(String),
}

/// Restricts a rule to inputs written mostly in one script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptClass {
    Cjk,
    Latin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRule {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptClass>,
    pub items: Vec<ScriptItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmScript {
    pub rules: Vec<LlmRule>,
    pub fallback: Vec<ScriptItem>,
}

impl Default for LlmScript {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            fallback: vec![ScriptItem::Text("我不确定。".into())],
        }
    }
}

impl LlmScript {
    /// Items of the first rule matching `input`, or the fallback.
    pub fn lookup(&self, input: &str) -> &[ScriptItem] {
        let class = script_class(input);
        self.rules
            .iter()
            .find(|r| input.contains(&r.pattern) && r.script.is_none_or(|s| Some(s) == class))
            .map(|r| r.items.as_slice())
            .unwrap_or(&self.fallback)
    }
}

/// Dominant script of a text, if it has any letters.
pub fn script_class(text: &str) -> Option<ScriptClass> {
    let cjk = text.chars().filter(|c| is_cjk(*c)).count();
    let latin = text.chars().filter(|c| c.is_ascii_alphabetic()).count();
    match (cjk, latin) {
        (0, 0) => None,
        (c, l) if c >= l => Some(ScriptClass::Cjk),
        _ => Some(ScriptClass::Latin),
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0xAC00..=0xD7AF)
}

/// Splits text into LLM-style tokens: each token is optional leading
/// whitespace followed by a run of ASCII alphanumerics or by a single other
/// character. Concatenating the tokens gives back the input.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let word = |c: char| c.is_ascii_alphanumeric() || c == '\'';
    for c in text.chars() {
        if c.is_whitespace() {
            if !cur.trim().is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            cur.push(c);
        } else if word(c) {
            if cur.chars().last().is_some_and(|p| !p.is_whitespace() && !word(p)) {
                tokens.push(std::mem::take(&mut cur));
            }
            cur.push(c);
        } else {
            if !cur.trim().is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            cur.push(c);
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneTable {
    /// scene tag → captioner output
    pub captions: BTreeMap<String, String>,
    /// captioner output → condensed rewrite
    #[serde(default)]
    pub rewrites: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiceRegistry {
    /// voice name → TTS profile tag
    pub voices: BTreeMap<String, String>,
    pub emotions: Vec<String>,
    /// voice tag → explicit embedding; tags not listed get a hashed one
    #[serde(default)]
    pub speakers: BTreeMap<String, Vec<f64>>,
}

impl Default for VoiceRegistry {
    fn default() -> Self {
        Self {
            voices: [
                ("default", "ref_default"),
                ("warm_female", "ref_warm_female"),
                ("calm_male", "ref_calm_male"),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
            emotions: ["neutral", "happy", "sad", "angry", "surprised"]
                .into_iter()
                .map(String::from)
                .collect(),
            speakers: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub title: String,
    pub snippet: String,
    pub page: String,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub expected_latency_ms: u64,
    /// Actual stub latency; defaults to the expected latency.
    #[serde(default)]
    pub latency_ms: Option<u64>,
    #[serde(default)]
    pub hits: Vec<SearchHit>,
    #[serde(default)]
    pub fail: bool,
}

impl ToolSpec {
    pub fn latency_ms(&self) -> u64 {
        self.latency_ms.unwrap_or(self.expected_latency_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRegistry {
    #[serde(flatten)]
    pub tools: BTreeMap<String, ToolSpec>,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        let spec = |ms, hits| ToolSpec {
            expected_latency_ms: ms,
            latency_ms: None,
            hits,
            fail: false,
        };
        let web = vec![
            SearchHit {
                title: "Forecast".into(),
                snippet: "Cloudy, 20 degrees.".into(),
                page: "Today: cloudy, 20 degrees, light wind from the east.".into(),
                coverage: 0.9,
            },
            SearchHit {
                title: "Climate archive".into(),
                snippet: "Monthly averages.".into(),
                page: "Historical monthly averages for the region.".into(),
                coverage: 0.5,
            },
            SearchHit {
                title: "Unrelated".into(),
                snippet: "Sports scores.".into(),
                page: "Sports scores.".into(),
                coverage: 0.1,
            },
        ];
        let local = vec![SearchHit {
            title: "Handbook".into(),
            snippet: "Office hours are 9 to 5.".into(),
            page: "Office hours are 9 to 5 on weekdays.".into(),
            coverage: 0.8,
        }];
        Self {
            tools: [
                ("web_search", spec(800, web)),
                ("local_search", spec(400, local)),
                ("timbre_switch", spec(5, vec![])),
                ("emotion_switch", spec(5, vec![])),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        }
    }
}

/// One step of the loopback client's script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientStep {
    /// vad_start, paced audio frames, vad_end.
    Speak { utterance: String },
    /// Explicit barge-in button.
    BargeIn,
    TextInput { text: String },
    Config { payload: serde_json::Value },
    WaitMs { ms: u64 },
    /// Waits until a server frame of this type arrives (counted from the
    /// start of the step), or the timeout elapses.
    WaitFor {
        frame: String,
        #[serde(default = "default_wait_timeout")]
        timeout_ms: u64,
    },
    Bye,
}

fn default_wait_timeout() -> u64 {
    30_000
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientScript {
    pub steps: Vec<ClientStep>,
}

/// Everything loaded from one scenario directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub utterances: Vec<Utterance>,
    pub llm: LlmScript,
    pub scenes: SceneTable,
    pub voices: VoiceRegistry,
    pub tools: ToolRegistry,
    pub client: Option<ClientScript>,
}

impl Scenario {
    pub fn load(dir: &Path) -> Result<Self, ScenarioError> {
        if !dir.is_dir() {
            return Err(ScenarioError::Missing(dir.to_path_buf()));
        }
        let utterances: UtteranceFile = read_json(&dir.join("utterances.json"))?;
        for u in &utterances.utterances {
            u.validate().map_err(|message| ScenarioError::Invalid {
                path: dir.join("utterances.json"),
                message,
            })?;
        }
        Ok(Self {
            utterances: utterances.utterances,
            llm: read_json(&dir.join("llm_script.json"))?,
            scenes: read_json(&dir.join("scene_tags.json"))?,
            voices: read_json(&dir.join("voices.json"))?,
            tools: read_optional(&dir.join("tools.json"))?.unwrap_or_default(),
            client: read_optional(&dir.join("script.json"))?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), ScenarioError> {
        fs::create_dir_all(dir).map_err(|source| ScenarioError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_json(
            &dir.join("utterances.json"),
            &UtteranceFile {
                utterances: self.utterances.clone(),
            },
        )?;
        write_json(&dir.join("llm_script.json"), &self.llm)?;
        write_json(&dir.join("scene_tags.json"), &self.scenes)?;
        write_json(&dir.join("voices.json"), &self.voices)?;
        write_json(&dir.join("tools.json"), &self.tools)?;
        if let Some(client) = &self.client {
            write_json(&dir.join("script.json"), client)?;
        }
        Ok(())
    }

    pub fn utterance_index(&self, id: &str) -> Option<u16> {
        self.utterances
            .iter()
            .position(|u| u.id == id)
            .map(|i| i as u16)
    }

    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, ScenarioError> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ScenarioError> {
    let text = serde_json::to_string_pretty(value).expect("scenario types serialize");
    fs::write(path, text + "\n").map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(transcript: &str, alignment: Vec<u32>) -> Utterance {
        Utterance {
            id: "u".into(),
            lang: Lang::Cn,
            voice: "v".into(),
            scene: "s".into(),
            transcript: transcript.into(),
            chunk_ms: 100,
            alignment,
        }
    }

    #[test]
    fn tokenize_round_trips() {
        for s in ["今天多云，气温二十度。", "Hello world. It's 20 degrees!", "  a  b ", ""] {
            assert_eq!(tokenize(s).concat(), s);
        }
        assert_eq!(tokenize("你好。"), vec!["你", "好", "。"]);
        assert_eq!(tokenize("I am not sure."), vec!["I", " am", " not", " sure", "."]);
    }

    #[test]
    fn range_text_is_additive() {
        // 7 chars over 10 chunks
        let u = utt("今天天气怎么样", vec![0, 1, 1, 2, 3, 3, 4, 5, 6, 7]);
        let cs = u.chunk_samples();
        assert_eq!(u.text_for_range(0, 10 * cs), "今天天气怎么样");
        assert_eq!(u.text_for_range(0, 4 * cs), "今天");
        assert_eq!(u.text_for_range(0, 0), "");
        for cut in (0..=10 * cs).step_by(400) {
            let joined = u.text_for_range(0, cut) + &u.text_for_range(cut, 10 * cs);
            assert_eq!(joined, u.transcript, "cut {cut}");
        }
    }

    #[test]
    fn rule_lookup_prefers_first_match_then_fallback() {
        let script = LlmScript {
            rules: vec![
                LlmRule {
                    pattern: "天气".into(),
                    script: None,
                    items: vec![ScriptItem::Text("多云。".into())],
                },
                LlmRule {
                    pattern: "".into(),
                    script: Some(ScriptClass::Latin),
                    items: vec![ScriptItem::Text("Sure.".into())],
                },
            ],
            ..LlmScript::default()
        };
        assert_eq!(script.lookup("今天天气"), &[ScriptItem::Text("多云。".into())]);
        assert_eq!(script.lookup("hello"), &[ScriptItem::Text("Sure.".into())]);
        assert_eq!(script.lookup("你好"), script.fallback.as_slice());
    }

    #[test]
    fn client_script_json_shape() {
        let s: ClientScript = serde_json::from_str(
            r#"{"steps":[{"speak":{"utterance":"a"}},{"wait_for":{"frame":"tts_done"}},"barge_in","bye"]}"#,
        )
        .unwrap();
        assert_eq!(s.steps.len(), 4);
        assert_eq!(s.steps[2], ClientStep::BargeIn);
    }
}
