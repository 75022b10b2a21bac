//! Barge-in state machine and false-interruption rules.
//!
//! [`TurnState`] is pure: it consumes [`TurnInput`]s and returns the
//! [`TurnAction`]s the dialogue manager must carry out. All timing comes in
//! through the inputs, so transitions can be fuzzed without a runtime.

use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bus::{FalseReason, TurnId};
use crate::scenario::is_cjk;

pub const DEFAULT_MIN_AUDIO_MS: u64 = 500;
pub const VERIFY_DEADLINE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FalseInterruptRules {
    pub min_audio_ms: u64,
    pub filler_words: Vec<String>,
    pub single_char_reject: bool,
}

impl Default for FalseInterruptRules {
    fn default() -> Self {
        Self {
            min_audio_ms: DEFAULT_MIN_AUDIO_MS,
            filler_words: ["嗯", "啊", "呃", "uh", "um", "hmm", "呵呵"]
                .into_iter()
                .map(String::from)
                .collect(),
            single_char_reject: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterruptCandidate {
    pub started_at_ns: u64,
    pub audio_ms: u64,
    pub transcript: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Confirmed,
    False(FalseReason),
}

/// Strips whitespace and every non-alphanumeric character.
fn normalized(text: &str) -> String {
    text.chars().filter(|c| c.is_alphanumeric()).collect()
}

/// A lone letter or digit of any alphabetic script. CJK ideographs are
/// words rather than letters, so a lone "嗯" is left to the filler rule.
fn is_single_letter_or_digit(norm: &str) -> bool {
    let mut it = norm.chars();
    matches!((it.next(), it.next()), (Some(c), None) if !is_cjk(c))
}

/// Whether `token` is a concatenation of filler words.
fn covered_by_fillers(token: &str, fillers: &[String]) -> bool {
    let chars: Vec<char> = token.chars().collect();
    let words: Vec<Vec<char>> = fillers
        .iter()
        .map(|f| f.chars().collect::<Vec<_>>())
        .filter(|f| !f.is_empty())
        .collect();
    let mut reach = vec![false; chars.len() + 1];
    reach[0] = true;
    for i in 0..chars.len() {
        if !reach[i] {
            continue;
        }
        for w in &words {
            if chars[i..].starts_with(w) {
                reach[i + w.len()] = true;
            }
        }
    }
    reach[chars.len()]
}

/// True when every token of the transcript is a filler word. Latin tokens
/// are whitespace-delimited and compared case-insensitively; CJK runs are
/// split character by character, with multi-character fillers allowed.
pub fn is_filler_only(text: &str, fillers: &[String]) -> bool {
    let lowered: Vec<String> = fillers.iter().map(|f| f.to_lowercase()).collect();
    let spaced: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    let mut any = false;
    for token in spaced.split_whitespace() {
        any = true;
        let mut latin = String::new();
        let mut cjk = String::new();
        for c in token.chars() {
            if is_cjk(c) {
                if !latin.is_empty() {
                    if !lowered.contains(&latin) {
                        return false;
                    }
                    latin.clear();
                }
                cjk.push(c);
            } else {
                if !cjk.is_empty() {
                    if !covered_by_fillers(&cjk, &lowered) {
                        return false;
                    }
                    cjk.clear();
                }
                latin.push(c);
            }
        }
        if !latin.is_empty() && !lowered.contains(&latin) {
            return false;
        }
        if !cjk.is_empty() && !covered_by_fillers(&cjk, &lowered) {
            return false;
        }
    }
    any
}

/// Rule order: duration, empty, single character, filler only.
pub fn validate_interrupt(audio_ms: u64, transcript: &str, rules: &FalseInterruptRules) -> Verdict {
    if audio_ms < rules.min_audio_ms {
        return Verdict::False(FalseReason::TooShort);
    }
    let norm = normalized(transcript);
    if norm.is_empty() {
        return Verdict::False(FalseReason::EmptyAsr);
    }
    if rules.single_char_reject && is_single_letter_or_digit(&norm) {
        return Verdict::False(FalseReason::SingleChar);
    }
    if is_filler_only(transcript, &rules.filler_words) {
        return Verdict::False(FalseReason::FillerOnly);
    }
    Verdict::Confirmed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TurnPhase {
    Idle = 0,
    UserSpeaking = 1,
    Processing = 2,
    AgentSpeaking = 3,
    VerifyingInterrupt = 4,
}

impl TurnPhase {
    pub fn from_u8(v: u8) -> Self {
        match v {
            1 => TurnPhase::UserSpeaking,
            2 => TurnPhase::Processing,
            3 => TurnPhase::AgentSpeaking,
            4 => TurnPhase::VerifyingInterrupt,
            _ => TurnPhase::Idle,
        }
    }
}

/// Read-only view of the phase for the input gateway; written only by the
/// session's dialogue manager.
#[derive(Debug, Clone, Default)]
pub struct PhaseCell(Arc<AtomicU8>);

impl PhaseCell {
    pub fn get(&self) -> TurnPhase {
        TurnPhase::from_u8(self.0.load(Ordering::Acquire))
    }

    pub fn set(&self, phase: TurnPhase) {
        self.0.store(phase as u8, Ordering::Release);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnInput {
    VadStart,
    InterruptCandidate,
    /// A recognized utterance, or typed input when no speech is open.
    AsrFinal { text: String, audio_ms: u64 },
    /// The first audio chunk of a turn left the TTS stage.
    FirstAudio(TurnId),
    TtsDone(TurnId),
    /// Client playback of a finished turn has run out.
    PlaybackEnded(TurnId),
    /// The verification deadline of the open candidate passed.
    Deadline,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnAction {
    PausePlayback(TurnId),
    Resume(TurnId),
    FalseInterrupt(TurnId, FalseReason),
    /// Cancel `old` (Flush + Stop) and announce the switch to `new`.
    Confirm {
        old: TurnId,
        new: TurnId,
        transcript: String,
    },
    StartTurn { turn: TurnId, text: String },
    ArmDeadline { started_at_ns: u64 },
    DisarmDeadline,
}

/// Per-session turn-taking state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnState {
    pub phase: TurnPhase,
    pub current_turn_id: TurnId,
    pub interrupt_open: Option<InterruptCandidate>,
    /// The current turn's pipeline has not finished playing out.
    pub live: bool,
    pub audio_started: bool,
    pub tts_done: bool,
    /// A deadline confirmation already allocated the next turn id.
    pub reserved: bool,
}

impl Default for TurnState {
    fn default() -> Self {
        Self {
            phase: TurnPhase::Idle,
            current_turn_id: 0,
            interrupt_open: None,
            live: false,
            audio_started: false,
            tts_done: false,
            reserved: false,
        }
    }
}

/// Whether `from → to` is a declared transition.
pub fn is_legal_transition(from: TurnPhase, to: TurnPhase) -> bool {
    use TurnPhase::*;
    from == to
        || matches!(
            (from, to),
            (Idle, UserSpeaking)
                | (Idle, Processing)
                | (UserSpeaking, Idle)
                | (UserSpeaking, Processing)
                | (UserSpeaking, AgentSpeaking)
                | (Processing, UserSpeaking)
                | (Processing, AgentSpeaking)
                | (Processing, Idle)
                | (AgentSpeaking, VerifyingInterrupt)
                | (AgentSpeaking, Idle)
                | (AgentSpeaking, Processing)
                | (VerifyingInterrupt, AgentSpeaking)
                | (VerifyingInterrupt, Processing)
                | (VerifyingInterrupt, UserSpeaking)
        )
}

impl TurnState {
    fn begin_turn(&mut self, turn: TurnId, text: String, out: &mut Vec<TurnAction>) {
        self.current_turn_id = turn;
        self.live = true;
        self.audio_started = false;
        self.tts_done = false;
        self.reserved = false;
        self.phase = TurnPhase::Processing;
        out.push(TurnAction::StartTurn { turn, text });
    }

    fn supersede(&mut self, text: String, out: &mut Vec<TurnAction>) {
        let old = self.current_turn_id;
        let new = old + 1;
        out.push(TurnAction::Confirm {
            old,
            new,
            transcript: text.clone(),
        });
        self.begin_turn(new, text, out);
    }

    fn open_candidate(&mut self, now_ns: u64, out: &mut Vec<TurnAction>) {
        self.phase = TurnPhase::VerifyingInterrupt;
        self.interrupt_open = Some(InterruptCandidate {
            started_at_ns: now_ns,
            audio_ms: 0,
            transcript: None,
        });
        out.push(TurnAction::PausePlayback(self.current_turn_id));
        out.push(TurnAction::ArmDeadline { started_at_ns: now_ns });
    }

    /// Phase to fall back to when user speech over a live turn is dismissed.
    fn live_phase(&self) -> TurnPhase {
        if self.audio_started {
            TurnPhase::AgentSpeaking
        } else {
            TurnPhase::Processing
        }
    }

    pub fn on(&mut self, input: TurnInput, now_ns: u64, rules: &FalseInterruptRules) -> Vec<TurnAction> {
        use TurnPhase::*;
        let mut out = Vec::new();
        match input {
            TurnInput::VadStart => match self.phase {
                Idle | Processing => self.phase = UserSpeaking,
                AgentSpeaking => self.open_candidate(now_ns, &mut out),
                UserSpeaking | VerifyingInterrupt => {}
            },
            TurnInput::InterruptCandidate => match self.phase {
                AgentSpeaking => self.open_candidate(now_ns, &mut out),
                Idle => self.phase = UserSpeaking,
                _ => {}
            },
            TurnInput::AsrFinal { text, audio_ms } => match self.phase {
                VerifyingInterrupt => {
                    out.push(TurnAction::DisarmDeadline);
                    if let Some(c) = self.interrupt_open.as_mut() {
                        c.audio_ms = audio_ms;
                        c.transcript = Some(text.clone());
                    }
                    self.interrupt_open = None;
                    match validate_interrupt(audio_ms, &text, rules) {
                        Verdict::False(reason) => {
                            self.phase = AgentSpeaking;
                            out.push(TurnAction::FalseInterrupt(self.current_turn_id, reason));
                            out.push(TurnAction::Resume(self.current_turn_id));
                        }
                        Verdict::Confirmed => self.supersede(text, &mut out),
                    }
                }
                UserSpeaking if self.live => match validate_interrupt(audio_ms, &text, rules) {
                    Verdict::False(reason) => {
                        self.phase = self.live_phase();
                        out.push(TurnAction::FalseInterrupt(self.current_turn_id, reason));
                    }
                    Verdict::Confirmed => self.supersede(text, &mut out),
                },
                UserSpeaking => {
                    if text.trim().is_empty() {
                        self.phase = Idle;
                    } else {
                        let turn = if self.reserved {
                            self.current_turn_id
                        } else {
                            self.current_turn_id + 1
                        };
                        self.begin_turn(turn, text, &mut out);
                    }
                }
                Idle | Processing | AgentSpeaking => {
                    if !text.trim().is_empty() {
                        if self.live {
                            self.supersede(text, &mut out);
                        } else {
                            let turn = if self.reserved {
                                self.current_turn_id
                            } else {
                                self.current_turn_id + 1
                            };
                            self.begin_turn(turn, text, &mut out);
                        }
                    }
                }
            },
            TurnInput::FirstAudio(turn) => {
                if turn == self.current_turn_id && self.live {
                    self.audio_started = true;
                    if self.phase == Processing {
                        self.phase = AgentSpeaking;
                    }
                }
            }
            TurnInput::TtsDone(turn) => {
                if turn == self.current_turn_id && self.live {
                    self.tts_done = true;
                    if !self.audio_started {
                        self.live = false;
                        if self.phase == Processing {
                            self.phase = Idle;
                        }
                    }
                }
            }
            TurnInput::PlaybackEnded(turn) => {
                if turn == self.current_turn_id
                    && self.live
                    && self.tts_done
                    && self.phase != VerifyingInterrupt
                {
                    self.live = false;
                    if self.phase == AgentSpeaking {
                        self.phase = Idle;
                    }
                }
            }
            TurnInput::Deadline => {
                if self.phase == VerifyingInterrupt {
                    let old = self.current_turn_id;
                    self.interrupt_open = None;
                    self.current_turn_id = old + 1;
                    self.reserved = true;
                    self.live = false;
                    self.audio_started = false;
                    self.tts_done = false;
                    self.phase = UserSpeaking;
                    out.push(TurnAction::Confirm {
                        old,
                        new: old + 1,
                        transcript: String::new(),
                    });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rules() -> FalseInterruptRules {
        FalseInterruptRules::default()
    }

    #[test]
    fn rule_matrix() {
        let r = rules();
        let cases = [
            (300, "别说了换个话题", Verdict::False(FalseReason::TooShort)),
            (800, "", Verdict::False(FalseReason::EmptyAsr)),
            (800, "。", Verdict::False(FalseReason::EmptyAsr)),
            (800, "a", Verdict::False(FalseReason::SingleChar)),
            (800, " 7. ", Verdict::False(FalseReason::SingleChar)),
            (800, "嗯", Verdict::False(FalseReason::FillerOnly)),
            (800, "好", Verdict::Confirmed),
            (800, "я", Verdict::False(FalseReason::SingleChar)),
            (800, "嗯嗯", Verdict::False(FalseReason::FillerOnly)),
            (800, "呵呵", Verdict::False(FalseReason::FillerOnly)),
            (800, "Um, hmm.", Verdict::False(FalseReason::FillerOnly)),
            (800, "um what", Verdict::Confirmed),
            (1200, "别说了换个话题", Verdict::Confirmed),
        ];
        for (ms, t, want) in cases {
            assert_eq!(validate_interrupt(ms, t, &r), want, "{ms} {t:?}");
        }
    }

    #[test]
    fn filler_check_without_single_char_rule() {
        let r = FalseInterruptRules {
            single_char_reject: false,
            ..rules()
        };
        assert_eq!(validate_interrupt(800, "嗯", &r), Verdict::False(FalseReason::FillerOnly));
        assert_eq!(validate_interrupt(800, "a", &r), Verdict::Confirmed);
    }

    fn speaking(turn: TurnId) -> TurnState {
        TurnState {
            phase: TurnPhase::AgentSpeaking,
            current_turn_id: turn,
            live: true,
            audio_started: true,
            ..Default::default()
        }
    }

    #[test]
    fn candidate_pauses_only_while_speaking() {
        let mut s = speaking(2);
        let a = s.on(TurnInput::InterruptCandidate, 5, &rules());
        assert_eq!(a[0], TurnAction::PausePlayback(2));
        assert_eq!(s.phase, TurnPhase::VerifyingInterrupt);
        assert!(s.on(TurnInput::InterruptCandidate, 6, &rules()).is_empty());
        assert_eq!(s.interrupt_open.as_ref().unwrap().started_at_ns, 5);

        let mut idle = TurnState::default();
        assert!(idle.on(TurnInput::InterruptCandidate, 0, &rules()).is_empty());
        assert_eq!(idle.phase, TurnPhase::UserSpeaking);
    }

    #[test]
    fn false_interrupt_resumes_same_turn() {
        let mut s = speaking(2);
        s.on(TurnInput::VadStart, 0, &rules());
        let a = s.on(
            TurnInput::AsrFinal {
                text: "啊".into(),
                audio_ms: 300,
            },
            1,
            &rules(),
        );
        assert!(a.contains(&TurnAction::Resume(2)));
        assert!(a.contains(&TurnAction::FalseInterrupt(2, FalseReason::TooShort)));
        assert_eq!(s.phase, TurnPhase::AgentSpeaking);
        assert_eq!(s.current_turn_id, 2);
    }

    #[test]
    fn confirmed_interrupt_starts_next_turn() {
        let mut s = speaking(2);
        s.on(TurnInput::VadStart, 0, &rules());
        let a = s.on(
            TurnInput::AsrFinal {
                text: "别说了换个话题".into(),
                audio_ms: 1200,
            },
            1,
            &rules(),
        );
        assert!(a.contains(&TurnAction::Confirm {
            old: 2,
            new: 3,
            transcript: "别说了换个话题".into()
        }));
        assert_eq!(s.phase, TurnPhase::Processing);
        assert_eq!(s.current_turn_id, 3);
    }

    #[test]
    fn deadline_confirms_and_reserves_turn() {
        let mut s = speaking(1);
        s.on(TurnInput::VadStart, 0, &rules());
        let a = s.on(TurnInput::Deadline, 10, &rules());
        assert!(matches!(a[0], TurnAction::Confirm { old: 1, new: 2, .. }));
        assert_eq!(s.phase, TurnPhase::UserSpeaking);
        let a = s.on(
            TurnInput::AsrFinal {
                text: "long speech".into(),
                audio_ms: 12000,
            },
            11,
            &rules(),
        );
        assert_eq!(
            a,
            vec![TurnAction::StartTurn {
                turn: 2,
                text: "long speech".into()
            }]
        );
    }

    #[test]
    fn idle_turn_lifecycle() {
        let mut s = TurnState::default();
        s.on(TurnInput::VadStart, 0, &rules());
        s.on(
            TurnInput::AsrFinal {
                text: "你好".into(),
                audio_ms: 900,
            },
            0,
            &rules(),
        );
        assert_eq!((s.phase, s.current_turn_id), (TurnPhase::Processing, 1));
        s.on(TurnInput::FirstAudio(1), 0, &rules());
        assert_eq!(s.phase, TurnPhase::AgentSpeaking);
        s.on(TurnInput::TtsDone(1), 0, &rules());
        s.on(TurnInput::PlaybackEnded(1), 0, &rules());
        assert_eq!(s.phase, TurnPhase::Idle);
        assert!(!s.live);
    }

    fn input() -> impl Strategy<Value = TurnInput> {
        prop_oneof![
            Just(TurnInput::VadStart),
            Just(TurnInput::InterruptCandidate),
            (prop::sample::select(vec!["", "a", "嗯", "别说了换个话题", "hello there"]), 0u64..2000)
                .prop_map(|(t, ms)| TurnInput::AsrFinal {
                    text: t.into(),
                    audio_ms: ms
                }),
            (0u32..4).prop_map(TurnInput::FirstAudio),
            (0u32..4).prop_map(TurnInput::TtsDone),
            (0u32..4).prop_map(TurnInput::PlaybackEnded),
            Just(TurnInput::Deadline),
        ]
    }

    proptest! {
        #[test]
        fn fuzzed_transitions_stay_in_relation(inputs in prop::collection::vec(input(), 0..60)) {
            let mut s = TurnState::default();
            for (i, inp) in inputs.into_iter().enumerate() {
                let from = s.phase;
                let actions = s.on(inp, i as u64, &rules());
                prop_assert!(is_legal_transition(from, s.phase), "{from:?} -> {:?}", s.phase);
                if s.phase == TurnPhase::VerifyingInterrupt && from != s.phase {
                    prop_assert_eq!(from, TurnPhase::AgentSpeaking);
                }
                prop_assert_eq!(s.interrupt_open.is_some(), s.phase == TurnPhase::VerifyingInterrupt);
                for a in actions {
                    if let TurnAction::Confirm { old, new, .. } = a {
                        prop_assert_eq!(new, old + 1);
                    }
                }
            }
        }

        #[test]
        fn validation_is_pure(ms in 0u64..3000, t in "\\PC{0,6}") {
            prop_assert_eq!(validate_interrupt(ms, &t, &rules()), validate_interrupt(ms, &t, &rules()));
        }
    }
}
