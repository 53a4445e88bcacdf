//! Tool-calling samples, few-shot exemplars and the guided dataset.

mod fewshot;
mod jsonl;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use fewshot::{
    build_random_fewshots, build_vetted_fewshots, guided_success, Vetting, VettingMode,
    DEFAULT_EXEMPLARS_PER_TOOL,
    VETTING_RETRY_BUDGET,
};
pub use jsonl::{load_dataset, parse_dataset, save_dataset, write_dataset};

/// Declared type of a tool parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeTag {
    String,
    Int,
    Float,
    Bool,
    List,
    Object,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
}

impl ToolSpec {
    pub fn required_params(&self) -> impl Iterator<Item = &str> {
        self.params.iter().filter(|p| p.required).map(|p| p.name.as_str())
    }
}

/// A single tool invocation: a name plus its arguments.
///
/// Arguments are held in a sorted map, so serializing a call always yields
/// its canonical form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(rename = "name")]
    pub tool_name: String,
    pub arguments: BTreeMap<String, Value>,
}

impl ToolCall {
    pub fn new(tool_name: impl Into<String>, arguments: BTreeMap<String, Value>) -> Self {
        Self { tool_name: tool_name.into(), arguments }
    }

    /// Canonical JSON: keys sorted lexicographically at every depth.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("tool call serializes")
    }

    /// Exact-match equality. Names must be equal and argument maps must
    /// agree key by key; numbers compare by exact value, so `3` and `3.0`
    /// match but `3` and `3.0000001` do not.
    pub fn matches(&self, other: &ToolCall) -> bool {
        self.tool_name == other.tool_name
            && self.arguments.len() == other.arguments.len()
            && self
                .arguments
                .iter()
                .all(|(k, v)| other.arguments.get(k).is_some_and(|w| value_eq(v, w)))
    }
}

/// Structural JSON equality with exact numeric comparison across the
/// integer/float representations.
pub fn value_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => number_eq(x, y),
        (Value::Array(xs), Value::Array(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| value_eq(x, y))
        }
        (Value::Object(xs), Value::Object(ys)) => {
            xs.len() == ys.len()
                && xs.iter().all(|(k, v)| ys.get(k).is_some_and(|w| value_eq(v, w)))
        }
        _ => a == b,
    }
}

fn number_eq(x: &serde_json::Number, y: &serde_json::Number) -> bool {
    fn as_int(n: &serde_json::Number) -> Option<i128> {
        n.as_i64().map(i128::from).or_else(|| n.as_u64().map(i128::from))
    }
    match (as_int(x), as_int(y)) {
        (Some(a), Some(b)) => a == b,
        (Some(i), None) => float_equals_int(y.as_f64(), i),
        (None, Some(i)) => float_equals_int(x.as_f64(), i),
        (None, None) => x.as_f64() == y.as_f64(),
    }
}

fn float_equals_int(f: Option<f64>, i: i128) -> bool {
    match f {
        // beyond 2^100 no i64/u64 can be equal anyway
        Some(f) if f.is_finite() && f.fract() == 0.0 && f.abs() < 1e30 => f as i128 == i,
        _ => false,
    }
}

/// One tool-calling task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub query: String,
    pub tools: Vec<ToolSpec>,
    pub ground_truth: Vec<ToolCall>,
}

/// A demonstration attached to a query: tools, a question, and its answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub tools: Vec<ToolSpec>,
    pub question: String,
    pub answers: Vec<ToolCall>,
}

impl FewShotExample {
    pub fn validate(&self) -> Result<(), ValidationError> {
        validate_task(&self.tools, &self.answers)
    }

    /// Canonical serialization of (tools, question, answers); the dedup key.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("example serializes")
    }

    /// Names of the tools this example's answers call.
    pub fn demonstrated_tools(&self) -> impl Iterator<Item = &str> {
        self.answers.iter().map(|a| a.tool_name.as_str())
    }
}

impl From<&Sample> for FewShotExample {
    fn from(sample: &Sample) -> Self {
        Self {
            tools: sample.tools.clone(),
            question: sample.query.clone(),
            answers: sample.ground_truth.clone(),
        }
    }
}

impl Sample {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::EmptyId);
        }
        validate_task(&self.tools, &self.ground_truth)
    }

    pub fn tool(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }

    /// Distinct tool names called by the ground truth, in first-use order.
    pub fn called_tools(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.ground_truth
            .iter()
            .map(|c| c.tool_name.as_str())
            .filter(|name| seen.insert(*name))
            .collect()
    }

    /// True when `example` is this sample's own (query, answer) pair.
    pub fn is_own_pair(&self, example: &FewShotExample) -> bool {
        example.question == self.query
            && example.answers.len() == self.ground_truth.len()
            && example.answers.iter().zip(&self.ground_truth).all(|(a, b)| a.matches(b))
    }
}

fn validate_task(tools: &[ToolSpec], calls: &[ToolCall]) -> Result<(), ValidationError> {
    let mut names = BTreeSet::new();
    for tool in tools {
        if tool.name.is_empty() {
            return Err(ValidationError::EmptyToolName);
        }
        if !names.insert(tool.name.as_str()) {
            return Err(ValidationError::DuplicateTool(tool.name.clone()));
        }
        let mut params = BTreeSet::new();
        for p in &tool.params {
            if !params.insert(p.name.as_str()) {
                return Err(ValidationError::DuplicateParam {
                    tool: tool.name.clone(),
                    param: p.name.clone(),
                });
            }
        }
    }
    if calls.is_empty() {
        return Err(ValidationError::EmptyAnswer);
    }
    for call in calls {
        if call.tool_name.is_empty() {
            return Err(ValidationError::EmptyToolName);
        }
        let tool = tools
            .iter()
            .find(|t| t.name == call.tool_name)
            .ok_or_else(|| ValidationError::UnknownTool(call.tool_name.clone()))?;
        if let Some(missing) = tool.required_params().find(|p| !call.arguments.contains_key(*p)) {
            return Err(ValidationError::MissingRequired {
                tool: tool.name.clone(),
                param: missing.to_string(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("empty sample id")]
    EmptyId,
    #[error("empty tool name")]
    EmptyToolName,
    #[error("tool `{0}` declared twice")]
    DuplicateTool(String),
    #[error("tool `{tool}` declares parameter `{param}` twice")]
    DuplicateParam { tool: String, param: String },
    #[error("answer list is empty")]
    EmptyAnswer,
    #[error("called tool `{0}` is not among the available tools")]
    UnknownTool(String),
    #[error("call to `{tool}` is missing required argument `{param}`")]
    MissingRequired { tool: String, param: String },
    #[error("provenance `{0}` is inconsistent with the attached exemplars")]
    Provenance(Provenance),
    #[error("an exemplar repeats the sample's own query and answer")]
    OwnAnswerLeak,
    #[error("sample is detached from few-shot guidance")]
    Detached,
}

/// Where a sample's exemplars came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    None,
    Random,
    Cautious,
    Bold,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::None => "none",
            Provenance::Random => "random",
            Provenance::Cautious => "cautious",
            Provenance::Bold => "bold",
        })
    }
}

/// A sample together with the few-shot exemplars that may be swapped in for it.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedSample {
    pub base: Sample,
    exemplars: Vec<FewShotExample>,
    provenance: Provenance,
    detached: bool,
}

impl GuidedSample {
    pub fn raw(base: Sample) -> Self {
        Self { base, exemplars: Vec::new(), provenance: Provenance::None, detached: false }
    }

    pub fn with_exemplars(
        base: Sample,
        exemplars: Vec<FewShotExample>,
        provenance: Provenance,
    ) -> Result<Self, ValidationError> {
        let mut sample = Self::raw(base);
        sample.attach(exemplars, provenance)?;
        Ok(sample)
    }

    pub fn id(&self) -> &str {
        &self.base.id
    }

    pub fn exemplars(&self) -> &[FewShotExample] {
        &self.exemplars
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    /// Has exemplars that may still be used.
    pub fn has_guidance(&self) -> bool {
        !self.detached && !self.exemplars.is_empty()
    }

    /// Replaces the exemplar set. Refused once the sample is detached.
    pub fn attach(
        &mut self,
        exemplars: Vec<FewShotExample>,
        provenance: Provenance,
    ) -> Result<(), ValidationError> {
        if self.detached {
            return Err(ValidationError::Detached);
        }
        if exemplars.is_empty() != (provenance == Provenance::None) {
            return Err(ValidationError::Provenance(provenance));
        }
        for ex in &exemplars {
            ex.validate()?;
            if self.base.is_own_pair(ex) {
                return Err(ValidationError::OwnAnswerLeak);
            }
        }
        self.exemplars = exemplars;
        self.provenance = provenance;
        Ok(())
    }

    /// Drops guidance for good. Idempotent.
    pub fn detach(&mut self) {
        self.exemplars.clear();
        self.provenance = Provenance::None;
        self.detached = true;
    }
}

/// Functional form of [`GuidedSample::detach`].
pub fn detach_fewshot(mut sample: GuidedSample) -> GuidedSample {
    sample.detach();
    sample
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub total: usize,
    pub with_fewshot: usize,
    pub without_fewshot: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    samples: Vec<GuidedSample>,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate ids.
    pub fn new(samples: Vec<GuidedSample>) -> Result<Self, DatasetError> {
        let mut ids = BTreeSet::new();
        for (i, s) in samples.iter().enumerate() {
            if !ids.insert(s.id().to_string()) {
                return Err(DatasetError::DuplicateId { line: i + 1, id: s.id().to_string() });
            }
        }
        Ok(Self { samples })
    }

    pub fn from_samples(samples: Vec<Sample>) -> Result<Self, DatasetError> {
        Self::new(samples.into_iter().map(GuidedSample::raw).collect())
    }

    pub fn samples(&self) -> &[GuidedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&GuidedSample> {
        self.samples.iter().find(|s| s.id() == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut GuidedSample> {
        self.samples.iter_mut().find(|s| s.id() == id)
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [GuidedSample] {
        &mut self.samples
    }

    pub fn counters(&self) -> Counters {
        let with_fewshot = self.samples.iter().filter(|s| !s.exemplars.is_empty()).count();
        Counters {
            total: self.samples.len(),
            with_fewshot,
            without_fewshot: self.samples.len() - with_fewshot,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("no candidate space for sample `{0}`")]
    MissingSpace(String),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
}
