use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, BoxStream, StreamExt};
use parking_lot::Mutex;

use super::{Jitter, LatencyProfile};
use crate::backend::{LlmBackend, LlmItem};
use crate::scenario::{tokenize, Scenario, ScriptItem};

/// Script interpreter standing in for a language model.
///
/// The last line of the prompt selects the script rule. The first item is
/// emitted after `fixed_ms + per_unit_ms`, every later one `per_unit_ms`
/// after its predecessor.
pub struct MockLlm {
    scenario: Arc<Scenario>,
    profile: LatencyProfile,
    jitter: Arc<Jitter>,
    prompts: Mutex<Vec<String>>,
}

impl MockLlm {
    pub fn new(scenario: Arc<Scenario>, profile: LatencyProfile, seed: u64) -> Self {
        Self {
            scenario,
            profile,
            jitter: Arc::new(Jitter::new(seed)),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn profile(&self) -> LatencyProfile {
        self.profile
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().clone()
    }

    /// The item sequence a prompt expands to, without timing.
    pub fn items_for(&self, prompt: &str) -> Vec<LlmItem> {
        let input = prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        let mut out = Vec::new();
        for item in self.scenario.llm.lookup(input) {
            match item {
                ScriptItem::Text(t) => out.extend(tokenize(t).into_iter().map(LlmItem::Token)),
                ScriptItem::Token(t) => out.push(LlmItem::Token(t.clone())),
                ScriptItem::Tool { name, args } => out.push(LlmItem::ToolCall {
                    name: name.clone(),
                    args: args.clone(),
                }),
                ScriptItem::Think(q) => out.push(LlmItem::Think(q.clone())),
            }
        }
        out
    }
}

impl LlmBackend for MockLlm {
    fn stream(&self, prompt: String) -> BoxStream<'static, LlmItem> {
        let items = self.items_for(&prompt);
        self.prompts.lock().push(prompt);
        let profile = self.profile;
        let jitter = self.jitter.clone();
        let first = Duration::from_secs_f64(profile.fixed_ms / 1000.0);
        stream::iter(items.into_iter().enumerate())
            .then(move |(i, item)| {
                let step = jitter.latency(
                    &LatencyProfile {
                        fixed_ms: 0.0,
                        ..profile
                    },
                    1.0,
                );
                let wait = if i == 0 { first + step } else { step };
                async move {
                    tokio::time::sleep(wait).await;
                    item
                }
            })
            .boxed()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{LlmRule, LlmScript};

    fn llm() -> MockLlm {
        let scenario = Scenario {
            llm: LlmScript {
                rules: vec![
                    LlmRule {
                        pattern: "天气".into(),
                        script: None,
                        items: vec![ScriptItem::Text("今天多云，气温二十度。".into())],
                    },
                    LlmRule {
                        pattern: "[SEARCH]".into(),
                        script: None,
                        items: vec![
                            ScriptItem::Token("稍等".into()),
                            ScriptItem::Tool {
                                name: "web_search".into(),
                                args: Default::default(),
                            },
                        ],
                    },
                ],
                ..Default::default()
            },
            ..Default::default()
        };
        MockLlm::new(Arc::new(scenario), LatencyProfile::new(100.0, 20.0), 0)
    }

    fn text_of(items: &[LlmItem]) -> String {
        items
            .iter()
            .filter_map(|i| match i {
                LlmItem::Token(t) => Some(t.as_str()),
                _ => None,
            })
            .collect()
    }

    #[tokio::test(start_paused = true)]
    async fn scripted_mapping_and_timing() {
        let llm = llm();
        let t0 = tokio::time::Instant::now();
        let mut s = llm.stream("[system]\n[user]\n今天天气如何".into());
        let mut items = Vec::new();
        let mut first_at = None;
        while let Some(i) = s.next().await {
            first_at.get_or_insert(t0.elapsed());
            items.push(i);
        }
        assert_eq!(text_of(&items), "今天多云，气温二十度。");
        assert_eq!(first_at, Some(Duration::from_millis(120)));
        assert_eq!(t0.elapsed(), Duration::from_millis(100 + 20 * items.len() as u64));
    }

    #[test]
    fn tool_flow_and_fallback() {
        let llm = llm();
        let items = llm.items_for("[SEARCH] 明天");
        assert_eq!(items[0], LlmItem::Token("稍等".into()));
        assert!(matches!(&items[1], LlmItem::ToolCall { name, .. } if name == "web_search"));
        assert_eq!(text_of(&llm.items_for("什么")), "我不确定。");
    }
}
