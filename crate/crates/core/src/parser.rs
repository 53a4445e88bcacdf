//! Tagged model output: `<think>`, `<tool_call>` and `<examples>` blocks.
//!
//! Tags are literal, case-sensitive, attribute-free and never nested. A
//! block runs from its open tag to the first matching close tag; any other
//! tag literal in between is an error. Everything outside blocks is kept as
//! stray text so the input can be rebuilt byte for byte.

use std::fmt;

use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::data::{FewShotExample, GuidedSample, ToolCall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Think,
    ToolCall,
    Examples,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::Think, Tag::ToolCall, Tag::Examples];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::ToolCall => "tool_call",
            Tag::Examples => "examples",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            Tag::Think => "<think>",
            Tag::ToolCall => "<tool_call>",
            Tag::Examples => "<examples>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            Tag::Think => "</think>",
            Tag::ToolCall => "</tool_call>",
            Tag::Examples => "</examples>",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A piece of the input in source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Block { tag: Tag, inner: String },
    Stray(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaggedOutput {
    segments: Vec<Segment>,
}

impl TaggedOutput {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn blocks(&self, tag: Tag) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(move |s| match s {
            Segment::Block { tag: t, inner } if *t == tag => Some(inner.as_str()),
            _ => None,
        })
    }

    pub fn think_blocks(&self) -> Vec<&str> {
        self.blocks(Tag::Think).collect()
    }

    pub fn tool_call_blocks(&self) -> Vec<&str> {
        self.blocks(Tag::ToolCall).collect()
    }

    pub fn examples_blocks(&self) -> Vec<&str> {
        self.blocks(Tag::Examples).collect()
    }

    /// All text outside recognized blocks, concatenated.
    pub fn stray_text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Stray(t) => Some(t.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Tags of the blocks in order of appearance.
    pub fn block_order(&self) -> Vec<Tag> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Block { tag, .. } => Some(*tag),
                _ => None,
            })
            .collect()
    }

    /// Rebuilds the original text.
    pub fn reconstruct(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Block { tag, inner } => {
                    out.push_str(tag.open());
                    out.push_str(inner);
                    out.push_str(tag.close());
                }
                Segment::Stray(t) => out.push_str(t),
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("<{tag}> opened at byte {position} is never closed")]
    UnclosedTag { tag: Tag, position: usize },
    #[error("<{outer}> opened at byte {outer_position} overlaps tag `{found}` at byte {position}")]
    OverlappingTags { outer: Tag, outer_position: usize, found: &'static str, position: usize },
    #[error("closing tag </{tag}> at byte {position} has no matching open tag")]
    UnmatchedClose { tag: Tag, position: usize },
}

/// Finds the earliest tag literal (open or close) at or after `from`.
fn next_literal(text: &str, from: usize) -> Option<(usize, Tag, bool)> {
    let rest = &text[from..];
    let mut best: Option<(usize, Tag, bool)> = None;
    for tag in Tag::ALL {
        for (lit, is_open) in [(tag.open(), true), (tag.close(), false)] {
            if let Some(off) = rest.find(lit) {
                if best.is_none_or(|(b, _, _)| from + off < b) {
                    best = Some((from + off, tag, is_open));
                }
            }
        }
    }
    best
}

pub fn extract_tags(text: &str) -> Result<TaggedOutput, TagError> {
    let mut segments = Vec::new();
    let mut cursor = 0;
    while let Some((pos, tag, is_open)) = next_literal(text, cursor) {
        if !is_open {
            return Err(TagError::UnmatchedClose { tag, position: pos });
        }
        if pos > cursor {
            segments.push(Segment::Stray(text[cursor..pos].to_string()));
        }
        let body_start = pos + tag.open().len();
        match next_literal(text, body_start) {
            None => return Err(TagError::UnclosedTag { tag, position: pos }),
            Some((end, t, false)) if t == tag => {
                segments.push(Segment::Block { tag, inner: text[body_start..end].to_string() });
                cursor = end + tag.close().len();
            }
            Some((at, t, open)) => {
                return Err(TagError::OverlappingTags {
                    outer: tag,
                    outer_position: pos,
                    found: if open { t.open() } else { t.close() },
                    position: at,
                })
            }
        }
    }
    if cursor < text.len() {
        segments.push(Segment::Stray(text[cursor..].to_string()));
    }
    Ok(TaggedOutput { segments })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("invalid JSON: {0}")]
    JsonInvalid(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("`arguments` is not an object")]
    ArgumentsNotObject,
    #[error("`name` must be a non-empty string")]
    InvalidName,
    #[error("expected a JSON object")]
    NotAnObject,
}

fn call_from_value(value: Value) -> Result<ToolCall, PayloadError> {
    let Value::Object(mut obj) = value else {
        return Err(PayloadError::NotAnObject);
    };
    let name = obj.remove("name").ok_or(PayloadError::MissingField("name"))?;
    let arguments = obj.remove("arguments").ok_or(PayloadError::MissingField("arguments"))?;
    let name = match name {
        Value::String(s) if !s.is_empty() => s,
        _ => return Err(PayloadError::InvalidName),
    };
    let Value::Object(arguments) = arguments else {
        return Err(PayloadError::ArgumentsNotObject);
    };
    Ok(ToolCall::new(name, arguments.into_iter().collect()))
}

/// Parses the inner text of a `<tool_call>` block: one call object or an
/// array of them.
pub fn parse_tool_calls(block: &str) -> Result<Vec<ToolCall>, PayloadError> {
    let value: Value =
        serde_json::from_str(block).map_err(|e| PayloadError::JsonInvalid(e.to_string()))?;
    match value {
        Value::Array(items) => items.into_iter().map(call_from_value).collect(),
        other => Ok(vec![call_from_value(other)?]),
    }
}

/// Examples recovered from an `<examples>` block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedExamples {
    pub examples: Vec<FewShotExample>,
    /// Elements that were not schema-valid examples.
    pub dropped: usize,
}

impl ParsedExamples {
    /// Number of pairwise-distinct examples under canonical serialization.
    pub fn distinct_count(&self) -> usize {
        self.examples
            .iter()
            .map(FewShotExample::canonical)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }
}

fn example_from_value(value: Value) -> Option<FewShotExample> {
    #[derive(Deserialize)]
    struct Raw {
        tools: Vec<crate::data::ToolSpec>,
        question: String,
        answers: Vec<Value>,
    }
    let raw: Raw = serde_json::from_value(value).ok()?;
    let answers = raw.answers.into_iter().map(call_from_value).collect::<Result<Vec<_>, _>>().ok()?;
    let example = FewShotExample { tools: raw.tools, question: raw.question, answers };
    example.validate().ok()?;
    Some(example)
}

/// Parses the inner text of an `<examples>` block. Invalid elements are
/// counted and dropped; only an unparseable block is an error.
pub fn parse_examples(block: &str) -> Result<ParsedExamples, PayloadError> {
    let value: Value =
        serde_json::from_str(block).map_err(|e| PayloadError::JsonInvalid(e.to_string()))?;
    let Value::Array(items) = value else {
        return Err(PayloadError::JsonInvalid("examples block must be a JSON array".into()));
    };
    let mut parsed = ParsedExamples::default();
    for item in items {
        match example_from_value(item) {
            Some(ex) => parsed.examples.push(ex),
            None => parsed.dropped += 1,
        }
    }
    Ok(parsed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModeFlags {
    pub has_think: bool,
    pub has_examples: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedResponse {
    pub calls: Vec<ToolCall>,
    pub examples: Vec<FewShotExample>,
    pub mode_flags: ModeFlags,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error(transparent)]
    Tags(#[from] TagError),
    #[error("tool_call block: {0}")]
    ToolCall(PayloadError),
    #[error("examples block: {0}")]
    Examples(PayloadError),
}

/// Extracts tags and parses every tool-call and examples block.
pub fn parse_response(text: &str) -> Result<ParsedResponse, ResponseError> {
    let tagged = extract_tags(text)?;
    let mut calls = Vec::new();
    for block in tagged.blocks(Tag::ToolCall) {
        calls.extend(parse_tool_calls(block).map_err(ResponseError::ToolCall)?);
    }
    let mut examples = Vec::new();
    for block in tagged.blocks(Tag::Examples) {
        examples.extend(parse_examples(block).map_err(ResponseError::Examples)?.examples);
    }
    let mode_flags = ModeFlags {
        has_think: tagged.blocks(Tag::Think).next().is_some(),
        has_examples: tagged.blocks(Tag::Examples).next().is_some(),
    };
    Ok(ParsedResponse { calls, examples, mode_flags })
}

/// Serializes calls the way a `<tool_call>` block carries them: a bare
/// object for one call, an array otherwise. Keys are canonical.
pub fn render_tool_calls(calls: &[ToolCall]) -> String {
    match calls {
        [one] => one.canonical(),
        many => serde_json::to_string(many).expect("calls serialize"),
    }
}

/// Prompt text for a sample: exemplars first, then the user query.
pub fn render_guided_query(sample: &GuidedSample) -> String {
    let exemplars = sample.exemplars();
    if exemplars.is_empty() {
        return sample.base.query.clone();
    }
    let mut out = String::from("Examples:\n");
    for (i, ex) in exemplars.iter().enumerate() {
        let tools = serde_json::to_string(&ex.tools).expect("tools serialize");
        let answers = serde_json::to_string(&ex.answers).expect("answers serialize");
        out.push_str(&format!(
            "### Example {}\nTools: {tools}\nQuestion: {}\nAnswers: {answers}\n",
            i + 1,
            ex.question
        ));
    }
    out.push_str("### Query\n");
    out.push_str(&sample.base.query);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Sample, ToolSpec};
    use serde_json::json;

    #[test]
    fn empty_text() {
        let out = extract_tags("").unwrap();
        assert!(out.segments().is_empty());
        assert_eq!(out.stray_text(), "");
    }

    #[test]
    fn single_tool_call_block() {
        let text = r#"<tool_call>{"name":"f","arguments":{}}</tool_call>"#;
        let out = extract_tags(text).unwrap();
        assert_eq!(out.tool_call_blocks(), [r#"{"name":"f","arguments":{}}"#]);
        assert!(out.think_blocks().is_empty());
        assert_eq!(out.stray_text(), "");
    }

    #[test]
    fn unclosed_tag_reports_position() {
        assert_eq!(
            extract_tags("<tool_call>x"),
            Err(TagError::UnclosedTag { tag: Tag::ToolCall, position: 0 })
        );
        assert_eq!(
            extract_tags("ab<think>x"),
            Err(TagError::UnclosedTag { tag: Tag::Think, position: 2 })
        );
    }

    #[test]
    fn interleaved_and_nested_tags_fail() {
        assert!(matches!(
            extract_tags("<think>a<tool_call>b</think></tool_call>"),
            Err(TagError::OverlappingTags { outer: Tag::Think, position: 8, .. })
        ));
        assert!(matches!(
            extract_tags("<think><think>x</think></think>"),
            Err(TagError::OverlappingTags { .. })
        ));
        assert_eq!(
            extract_tags("x</think>"),
            Err(TagError::UnmatchedClose { tag: Tag::Think, position: 1 })
        );
    }

    #[test]
    fn whitespace_and_order_preserved() {
        let text = " <examples> [] </examples>\n<think>\n hm \n</think>tail";
        let out = extract_tags(text).unwrap();
        assert_eq!(out.block_order(), [Tag::Examples, Tag::Think]);
        assert_eq!(out.think_blocks(), ["\n hm \n"]);
        assert_eq!(out.stray_text(), " \ntail");
        assert_eq!(out.reconstruct(), text);
    }

    #[test]
    fn tool_call_payloads() {
        let calls = parse_tool_calls(r#"{"name":"get_weather","arguments":{"city":"Paris"}}"#).unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].tool_name, "get_weather");
        assert_eq!(calls[0].arguments["city"], json!("Paris"));
        assert_eq!(parse_tool_calls("[]").unwrap(), vec![]);
        assert_eq!(parse_tool_calls(r#"{"name":"f"}"#), Err(PayloadError::MissingField("arguments")));
        assert_eq!(parse_tool_calls(r#"{"arguments":{}}"#), Err(PayloadError::MissingField("name")));
        assert_eq!(
            parse_tool_calls(r#"{"name":"f","arguments":[1]}"#),
            Err(PayloadError::ArgumentsNotObject)
        );
        assert!(matches!(parse_tool_calls("{"), Err(PayloadError::JsonInvalid(_))));
        let two = parse_tool_calls(r#"[{"name":"a","arguments":{}},{"name":"b","arguments":{"x":1}}]"#).unwrap();
        assert_eq!(two.iter().map(|c| c.tool_name.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    fn example_json(q: &str) -> Value {
        json!({
            "tools": [{"name": "f", "description": "d", "params": [{"name": "x", "type": "int", "required": true}]}],
            "question": q,
            "answers": [{"name": "f", "arguments": {"x": 1}}]
        })
    }

    #[test]
    fn examples_block() {
        let four: Vec<_> = (0..4).map(|i| example_json(&format!("q{i}"))).collect();
        let parsed = parse_examples(&serde_json::to_string(&four).unwrap()).unwrap();
        assert_eq!(parsed.examples.len(), 4);
        assert_eq!(parsed.dropped, 0);

        let mut bad = example_json("q9");
        bad.as_object_mut().unwrap().remove("question");
        let mixed = json!([example_json("a"), bad, example_json("b")]);
        let parsed = parse_examples(&mixed.to_string()).unwrap();
        assert_eq!((parsed.examples.len(), parsed.dropped), (2, 1));

        assert!(matches!(parse_examples("not json"), Err(PayloadError::JsonInvalid(_))));
    }

    #[test]
    fn examples_must_be_internally_consistent() {
        let mut unknown_tool = example_json("q");
        unknown_tool["answers"][0]["name"] = json!("g");
        let mut missing_arg = example_json("q");
        missing_arg["answers"][0]["arguments"] = json!({});
        let parsed = parse_examples(&json!([unknown_tool, missing_arg, 5]).to_string()).unwrap();
        assert_eq!((parsed.examples.len(), parsed.dropped), (0, 3));
    }

    #[test]
    fn response_flags() {
        let text = format!(
            "<examples>{}</examples><think>x</think><tool_call>{{\"name\":\"f\",\"arguments\":{{\"x\":1}}}}</tool_call>",
            json!([example_json("a")])
        );
        let parsed = parse_response(&text).unwrap();
        assert_eq!(parsed.calls.len(), 1);
        assert_eq!(parsed.examples.len(), 1);
        assert_eq!(parsed.mode_flags, ModeFlags { has_think: true, has_examples: true });
    }

    fn sample() -> Sample {
        serde_json::from_value(json!({
            "id": "s", "query": "What is f of 2?",
            "tools": [{"name": "f", "description": "", "params": [{"name": "x", "type": "int", "required": true}]}],
            "ground_truth": [{"name": "f", "arguments": {"x": 2}}]
        }))
        .unwrap()
    }

    #[test]
    fn render_without_exemplars_is_the_query() {
        let s = GuidedSample::raw(sample());
        assert_eq!(render_guided_query(&s), "What is f of 2?");
    }

    #[test]
    fn render_with_exemplar_snapshot() {
        let ex: FewShotExample = serde_json::from_value(example_json("What is f of 1?")).unwrap();
        let s = GuidedSample::with_exemplars(sample(), vec![ex], Provenance::Random).unwrap();
        let expected = concat!(
            "Examples:\n",
            "### Example 1\n",
            r#"Tools: [{"name":"f","description":"d","params":[{"name":"x","type":"int","required":true}]}]"#,
            "\nQuestion: What is f of 1?\n",
            r#"Answers: [{"name":"f","arguments":{"x":1}}]"#,
            "\n### Query\nWhat is f of 2?"
        );
        assert_eq!(render_guided_query(&s), expected);
        assert_eq!(render_guided_query(&s), render_guided_query(&s.clone()));
    }

    #[test]
    fn render_is_order_sensitive() {
        let a: FewShotExample = serde_json::from_value(example_json("A")).unwrap();
        let b: FewShotExample = serde_json::from_value(example_json("B")).unwrap();
        let ab = GuidedSample::with_exemplars(sample(), vec![a.clone(), b.clone()], Provenance::Random).unwrap();
        let ba = GuidedSample::with_exemplars(sample(), vec![b, a], Provenance::Random).unwrap();
        assert_ne!(render_guided_query(&ab), render_guided_query(&ba));
    }

    #[test]
    fn tool_spec_defaults() {
        let spec: ToolSpec = serde_json::from_str(r#"{"name":"t"}"#).unwrap();
        assert!(spec.params.is_empty());
    }
}
