//! Deterministic generator for the scripted utterance corpus and the
//! shipped replay scenarios.
//!
//! Utterances are laid out chunk by chunk: leading silence, then each
//! sentence's speech chunks followed by a short pause, then trailing
//! silence long enough for the client VAD to fire.

use crate::scenario::{
    ClientScript, ClientStep, Lang, LlmRule, LlmScript, SceneTable, ScriptClass, ScriptItem,
    Scenario, ToolRegistry, Utterance, VoiceRegistry,
};

pub const CHUNK_MS: u32 = 100;
/// Silence after the last sentence; the client VAD fires inside it.
pub const TRAILING_CHUNKS: usize = 6;
pub const MIN_PAUSE_CHUNKS: usize = 3;

/// Speaking rate in characters per 100 ms chunk.
fn chars_per_chunk(lang: Lang) -> f64 {
    match lang {
        Lang::Cn => 0.4,
        Lang::En => 1.4,
    }
}

fn speech_chunks(lang: Lang, sentence: &str) -> usize {
    let n = sentence.chars().count() as f64;
    (n / chars_per_chunk(lang)).ceil().max(1.0) as usize
}

/// Lays out `sentences` into an utterance of exactly `target_ms`
/// (rounded up to fit the speech if it is too short). Slack goes into the
/// inter-sentence pauses, or into leading silence for single sentences.
pub fn build_utterance(
    id: &str,
    lang: Lang,
    voice: &str,
    scene: &str,
    sentences: &[&str],
    target_ms: u64,
) -> Utterance {
    let lead = 1usize;
    let speech: Vec<usize> = sentences.iter().map(|s| speech_chunks(lang, s)).collect();
    let pauses = sentences.len().saturating_sub(1);
    let fixed = lead + speech.iter().sum::<usize>() + pauses * MIN_PAUSE_CHUNKS + TRAILING_CHUNKS;
    let target = (target_ms / CHUNK_MS as u64) as usize;
    let slack = target.saturating_sub(fixed);
    let mut pause_len = vec![MIN_PAUSE_CHUNKS; pauses];
    let mut lead_len = lead;
    if pauses == 0 {
        lead_len += slack;
    } else {
        for i in 0..slack {
            pause_len[i % pauses] += 1;
        }
    }

    let mut alignment = Vec::new();
    let mut done = 0u32;
    alignment.extend(std::iter::repeat_n(0, lead_len));
    for (i, s) in sentences.iter().enumerate() {
        let n = s.chars().count() as u32;
        let m = speech[i] as u32;
        for k in 0..m {
            // characters complete by the end of chunk k, evenly spread
            let within = ((k + 1) as f64 * n as f64 / m as f64).round() as u32;
            alignment.push(done + within.min(n));
        }
        done += n;
        if i < pauses {
            alignment.extend(std::iter::repeat_n(done, pause_len[i]));
        }
    }
    alignment.extend(std::iter::repeat_n(done, TRAILING_CHUNKS));

    Utterance {
        id: id.to_string(),
        lang,
        voice: voice.to_string(),
        scene: scene.to_string(),
        transcript: sentences.concat(),
        chunk_ms: CHUNK_MS,
        alignment,
    }
}

/// A short utterance of `ms` whose transcript is spread over all but the
/// last chunk. Used for barge-ins, noises, and fillers.
pub fn short_utterance(id: &str, lang: Lang, voice: &str, transcript: &str, ms: u64) -> Utterance {
    let chunks = (ms / CHUNK_MS as u64).max(1) as usize;
    let n = transcript.chars().count() as u32;
    let speaking = chunks.saturating_sub(1).max(1) as u32;
    let alignment = (0..chunks as u32)
        .map(|k| (((k + 1) as f64 * n as f64 / speaking as f64).round() as u32).min(n))
        .collect();
    Utterance {
        id: id.to_string(),
        lang,
        voice: voice.to_string(),
        scene: "quiet_room".to_string(),
        transcript: transcript.to_string(),
        chunk_ms: CHUNK_MS,
        alignment,
    }
}

const CN_SENTENCES: &[&str] = &[
    "今天天气怎么样？",
    "我想听一首轻松的音乐。",
    "帮我查一下明天去上海的火车。",
    "最近工作压力有点大。",
    "周末我打算去公园散步。",
    "你能给我讲一个有趣的故事吗？",
    "我家的猫最近总是不吃饭。",
    "晚饭我想做一道简单的菜。",
    "这本书的结局让我很意外。",
    "下周我要参加一个重要的面试。",
    "我们小区附近新开了一家咖啡馆。",
    "孩子的数学作业越来越难了。",
];

const EN_SENTENCES: &[&str] = &[
    "What is the weather like today?",
    " I would like to listen to some relaxing music.",
    " Could you find a train to the city tomorrow morning?",
    " Work has been rather stressful these past few weeks.",
    " This weekend I plan to take a long walk in the park.",
    " Can you tell me a short story with a happy ending?",
    " My cat has not been eating well lately.",
    " I want to cook something simple for dinner tonight.",
    " The ending of that novel really surprised me.",
    " Next week I have an important job interview.",
    " A new coffee shop just opened near my apartment.",
    " The homework for my kid keeps getting harder.",
];

const SCENES: &[&str] = &["quiet_room", "cafe", "street", "office"];
const VOICES: &[&str] = &["voice_a", "voice_b", "voice_c"];

/// Utterance lengths in seconds, per language. Covers the bench grid
/// {5, 10, 30, 60} plus intermediate lengths.
pub const CORPUS_LENGTHS_S: [u64; 25] = [
    5, 5, 5, 5, 8, 10, 10, 10, 10, 15, 15, 20, 20, 25, 30, 30, 30, 30, 45, 45, 50, 60, 60, 60, 60,
];

fn pick_sentences(lang: Lang, seed: usize, target_s: u64) -> Vec<&'static str> {
    let bank = match lang {
        Lang::Cn => CN_SENTENCES,
        Lang::En => EN_SENTENCES,
    };
    let budget = (target_s * 10) as usize;
    let mut picked: Vec<&str> = Vec::new();
    let mut used = 1 + TRAILING_CHUNKS;
    let mut i = seed;
    loop {
        let s = bank[i % bank.len()];
        // the first sentence of an English utterance has no leading space
        let s = if picked.is_empty() { s.trim_start() } else { s };
        let cost = speech_chunks(lang, s) + if picked.is_empty() { 0 } else { MIN_PAUSE_CHUNKS };
        if used + cost > budget && !picked.is_empty() {
            break;
        }
        used += cost;
        picked.push(s);
        i += 1;
    }
    picked
}

/// The 50-utterance corpus (25 Chinese, 25 English, 5–60 s).
pub fn generate_corpus() -> Scenario {
    let mut utterances = Vec::new();
    for lang in [Lang::Cn, Lang::En] {
        for (k, &secs) in CORPUS_LENGTHS_S.iter().enumerate() {
            let sentences = pick_sentences(lang, k * 5, secs);
            let id = format!("{}_{:02}s_{:02}", lang.as_str(), secs, k);
            utterances.push(build_utterance(
                &id,
                lang,
                VOICES[k % VOICES.len()],
                SCENES[k % SCENES.len()],
                &sentences,
                secs * 1000,
            ));
        }
    }
    Scenario {
        utterances,
        llm: LlmScript {
            rules: vec![LlmRule {
                pattern: String::new(),
                script: Some(ScriptClass::Latin),
                items: vec![ScriptItem::Text("I am not sure. Could you tell me more?".into())],
            }],
            fallback: vec![ScriptItem::Text("我不确定。你能再说详细一点吗？".into())],
        },
        scenes: default_scenes(),
        voices: VoiceRegistry::default(),
        tools: ToolRegistry::default(),
        client: None,
    }
}

pub fn default_scenes() -> SceneTable {
    let pairs = [
        ("quiet_room", "a quiet indoor room with faint air conditioning hum"),
        ("cafe", "busy cafe with background chatter"),
        ("street", "rainy street ambience with passing cars"),
        ("office", "open office with keyboard typing and distant phone calls"),
    ];
    SceneTable {
        captions: pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        rewrites: [(
            "busy cafe with background chatter",
            "user is in a busy cafe",
        )]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect(),
    }
}

fn speak(id: &str) -> ClientStep {
    ClientStep::Speak {
        utterance: id.to_string(),
    }
}

fn wait_for(frame: &str) -> ClientStep {
    ClientStep::WaitFor {
        frame: frame.to_string(),
        timeout_ms: 30_000,
    }
}

/// Shared cast of utterances and LLM rules for the replay scenarios.
/// Utterances and LLM rules for the shipped dialogue scenarios.
pub fn dialogue_base() -> Scenario {
    let weather = build_utterance(
        "ask_weather",
        Lang::Cn,
        "voice_a",
        "cafe",
        &["今天天气怎么样？"],
        3000,
    );
    let story = build_utterance(
        "ask_story",
        Lang::Cn,
        "voice_a",
        "quiet_room",
        &["给我讲一个故事吧。"],
        3000,
    );
    let utterances = vec![
        weather,
        story,
        short_utterance("cmd_change_topic", Lang::Cn, "voice_a", "别说了换个话题", 1200),
        short_utterance("noise_short", Lang::Cn, "voice_a", "啊", 300),
        short_utterance("noise_empty", Lang::Cn, "voice_a", "", 800),
        short_utterance("noise_letter", Lang::En, "voice_a", "a", 800),
        short_utterance("filler_cn", Lang::Cn, "voice_a", "嗯", 800),
        build_utterance(
            "ask_search",
            Lang::Cn,
            "voice_b",
            "office",
            &["[SEARCH]帮我查一下明天的天气。"],
            3000,
        ),
        build_utterance(
            "ask_think",
            Lang::Cn,
            "voice_b",
            "office",
            &["[THINK]帮我规划一下周末。"],
            3000,
        ),
        build_utterance(
            "ask_voice",
            Lang::Cn,
            "voice_a",
            "quiet_room",
            &["换一个温柔的声音说话。"],
            3000,
        ),
    ];
    let text = |s: &str| ScriptItem::Text(s.to_string());
    let tool = |name: &str, k: &str, v: &str| ScriptItem::Tool {
        name: name.to_string(),
        args: [(k.to_string(), v.to_string())].into_iter().collect(),
    };
    let rule = |pattern: &str, items: Vec<ScriptItem>| LlmRule {
        pattern: pattern.to_string(),
        script: None,
        items,
    };
    let llm = LlmScript {
        rules: vec![
            rule("[tool web_search]", vec![text("明天多云转晴，气温十八到二十五度。记得带件外套。")]),
            rule("[tool timbre_switch]", vec![text("好的，现在换成了温柔的声音。希望你喜欢。")]),
            rule("[tool emotion_switch]", vec![text("我现在很开心！")]),
            rule("[SEARCH]", vec![text("稍等"), tool("web_search", "query", "明天的天气")]),
            rule("[THINK]", vec![ScriptItem::Think("周末规划".into()), text("我先想一想，马上告诉你。")]),
            rule("温柔的声音", vec![text("没问题。"), tool("timbre_switch", "voice", "warm_female")]),
            rule("天气", vec![text("今天多云，气温二十度。适合出门散步。")]),
            rule(
                "故事",
                vec![text(
                    "从前有一座山。山里有一座庙。庙里住着一个老和尚。老和尚每天都在讲故事。小和尚听得很认真。故事讲完了。",
                )],
            ),
            rule("换个话题", vec![text("好的，我们聊点别的吧。")]),
        ],
        fallback: vec![text("我不确定。")],
    };
    Scenario {
        utterances,
        llm,
        scenes: default_scenes(),
        voices: VoiceRegistry::default(),
        tools: ToolRegistry::default(),
        client: None,
    }
}

/// The dialogue utterances plus the corpus, with the dialogue rules
/// taking precedence. Used when no scenario directory is configured.
pub fn default_scenario() -> Scenario {
    let mut s = dialogue_base();
    let corpus = generate_corpus();
    s.utterances.extend(corpus.utterances);
    s.llm.rules.extend(corpus.llm.rules);
    s.llm.fallback = corpus.llm.fallback;
    s
}

/// Named replay scenarios shipped under `scenarios/`.
pub fn replay_scenarios() -> Vec<(&'static str, Scenario)> {
    let with = |steps: Vec<ClientStep>| {
        let mut s = dialogue_base();
        s.client = Some(ClientScript { steps });
        s
    };
    vec![
        (
            "basic_turn",
            with(vec![speak("ask_weather"), wait_for("tts_done"), ClientStep::Bye]),
        ),
        (
            "barge_in",
            with(vec![
                speak("ask_story"),
                wait_for("tts_chunk"),
                ClientStep::WaitMs { ms: 300 },
                speak("cmd_change_topic"),
                wait_for("tts_done"),
                ClientStep::Bye,
            ]),
        ),
        (
            "false_interrupt",
            with(vec![
                speak("ask_story"),
                wait_for("tts_chunk"),
                ClientStep::WaitMs { ms: 300 },
                speak("noise_short"),
                wait_for("tts_done"),
                ClientStep::Bye,
            ]),
        ),
        (
            "tool_call",
            with(vec![speak("ask_search"), wait_for("tts_done"), ClientStep::Bye]),
        ),
        (
            "thinking",
            with(vec![
                speak("ask_think"),
                wait_for("tts_done"),
                ClientStep::WaitMs { ms: 2500 },
                ClientStep::Bye,
            ]),
        ),
        (
            "timbre_switch",
            with(vec![speak("ask_voice"), wait_for("tts_done"), ClientStep::Bye]),
        ),
        ("empty", with(vec![])),
    ]
}
