//! Rule-based rewards for tool-call responses.
//!
//! Plain mode is the 0/1 reward: the response earns 1 only when its single
//! `<tool_call>` block is well formed and the calls exactly match the ground
//! truth. Self-exemplifying mode adds a small bonus on top of 1 when the
//! response also carries more than `min_examples_exclusive` distinct,
//! schema-valid examples, laid out as `<examples>`, `<think>`, `<tool_call>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, ToolCall};
use crate::parser::{extract_tags, parse_examples, parse_tool_calls, Segment, Tag, TaggedOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    Plain,
    SelfExemplifying,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardMode {
    pub variant: RewardVariant,
    pub bonus: f64,
    pub min_examples_exclusive: usize,
}

pub const DEFAULT_BONUS: f64 = 0.01;
pub const DEFAULT_MIN_EXAMPLES_EXCLUSIVE: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("reward bonus must be positive and finite, got {0}")]
pub struct InvalidBonus(pub f64);

impl RewardMode {
    pub fn plain() -> Self {
        Self {
            variant: RewardVariant::Plain,
            bonus: DEFAULT_BONUS,
            min_examples_exclusive: DEFAULT_MIN_EXAMPLES_EXCLUSIVE,
        }
    }

    pub fn self_exemplifying() -> Self {
        Self { variant: RewardVariant::SelfExemplifying, ..Self::plain() }
    }

    pub fn with_bonus(self, bonus: f64) -> Result<Self, InvalidBonus> {
        let mode = Self { bonus, ..self };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<(), InvalidBonus> {
        if self.bonus > 0.0 && self.bonus.is_finite() {
            Ok(())
        } else {
            Err(InvalidBonus(self.bonus))
        }
    }

    /// Highest value a response can earn in this mode.
    pub fn max_value(&self) -> f64 {
        match self.variant {
            RewardVariant::Plain => 1.0,
            RewardVariant::SelfExemplifying => 1.0 + self.bonus,
        }
    }
}

impl Default for RewardMode {
    fn default() -> Self {
        Self::plain()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub result_ok: bool,
    pub format_ok: bool,
    pub fewshot_ok: bool,
    pub value: f64,
}

impl RewardBreakdown {
    /// The response solved the task (value of at least 1).
    pub fn is_correct(&self) -> bool {
        self.result_ok && self.format_ok
    }
}

/// Multiset equality of call lists under [`ToolCall::matches`].
pub fn check_result(pred: &[ToolCall], truth: &[ToolCall]) -> bool {
    if pred.len() != truth.len() {
        return false;
    }
    let mut used = vec![false; pred.len()];
    truth.iter().all(|t| {
        match pred.iter().enumerate().position(|(i, p)| !used[i] && p.matches(t)) {
            Some(i) => {
                used[i] = true;
                true
            }
            None => false,
        }
    })
}

fn whitespace_only_stray(tagged: &TaggedOutput) -> bool {
    tagged.segments().iter().all(|s| match s {
        Segment::Stray(t) => t.chars().all(char::is_whitespace),
        Segment::Block { .. } => true,
    })
}

fn format_ok_tagged(tagged: &TaggedOutput, mode: &RewardMode) -> bool {
    if !whitespace_only_stray(tagged) {
        return false;
    }
    match mode.variant {
        RewardVariant::Plain => {
            let calls: Vec<_> = tagged.blocks(Tag::ToolCall).collect();
            calls.len() == 1 && parse_tool_calls(calls[0]).is_ok()
        }
        RewardVariant::SelfExemplifying => {
            if tagged.block_order() != [Tag::Examples, Tag::Think, Tag::ToolCall] {
                return false;
            }
            let examples = tagged.blocks(Tag::Examples).next().expect("order checked");
            let call = tagged.blocks(Tag::ToolCall).next().expect("order checked");
            parse_examples(examples).is_ok() && parse_tool_calls(call).is_ok()
        }
    }
}

fn fewshots_ok_tagged(tagged: &TaggedOutput, mode: &RewardMode) -> bool {
    if mode.variant != RewardVariant::SelfExemplifying {
        return false;
    }
    let mut blocks = tagged.blocks(Tag::Examples);
    match (blocks.next(), blocks.next()) {
        (Some(block), None) => parse_examples(block)
            .map(|p| p.distinct_count() > mode.min_examples_exclusive)
            .unwrap_or(false),
        _ => false,
    }
}

pub fn check_format(text: &str, mode: &RewardMode) -> bool {
    extract_tags(text).is_ok_and(|t| format_ok_tagged(&t, mode))
}

pub fn check_fewshots(text: &str, mode: &RewardMode) -> bool {
    extract_tags(text).is_ok_and(|t| fewshots_ok_tagged(&t, mode))
}

/// Scores `text` against `sample`'s ground truth.
pub fn reward(text: &str, sample: &Sample, mode: &RewardMode) -> RewardBreakdown {
    let zero = RewardBreakdown { result_ok: false, format_ok: false, fewshot_ok: false, value: 0.0 };
    let Ok(tagged) = extract_tags(text) else {
        return zero;
    };
    let fewshot_ok = fewshots_ok_tagged(&tagged, mode);
    if !format_ok_tagged(&tagged, mode) {
        return RewardBreakdown { fewshot_ok, ..zero };
    }
    let block = tagged.blocks(Tag::ToolCall).next().expect("format checked");
    let result_ok = parse_tool_calls(block).is_ok_and(|calls| check_result(&calls, &sample.ground_truth));
    let value = match (result_ok, fewshot_ok, mode.variant) {
        (false, _, _) => 0.0,
        (true, true, RewardVariant::SelfExemplifying) => 1.0 + mode.bonus,
        (true, _, _) => 1.0,
    };
    RewardBreakdown { result_ok, format_ok: true, fewshot_ok, value }
}
