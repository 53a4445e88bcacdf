//! A tabular softmax policy over small, enumerated response sets.
//!
//! Each sample owns a [`CandidateSpace`] of whole-response texts. The policy
//! scores candidate `k` with
//!
//! ```text
//! logit_k = theta[s][k] + g * u_k + e * v_k
//! ```
//!
//! where `u_k` is 1 for a correct-kind candidate whose tool is demonstrated by
//! an attached exemplar (guided prompts only) and `v_k` is 1 for the candidate
//! that carries valid self-generated examples. Probabilities are
//! `softmax(logit / temperature)`, so log-probabilities, gradients and KL
//! divergences all have closed forms.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{FewShotExample, GuidedSample, Sample, ToolCall};
use crate::parser::render_tool_calls;
use crate::reward::{reward, RewardBreakdown, RewardMode, RewardVariant};
use crate::rng;

/// Candidates per space.
pub const DEFAULT_SPACE_SIZE: usize = 6;
/// Initial guidance weight of a fresh policy.
pub const DEFAULT_GUIDANCE_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("no parameters or candidate space for sample `{0}`")]
    UnknownSample(String),
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("candidate index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("sample `{sample}`: expected {expected} values, got {got}")]
    ShapeMismatch { sample: String, expected: usize, got: usize },
    #[error("sample `{sample}`: {kind:?} candidate failed its reward contract ({detail})")]
    SelfCheck { sample: String, kind: CandidateKind, detail: String },
    #[error("at least one rollout is required")]
    EmptyGroup,
    #[error("checkpoint i/o: {0}")]
    Io(String),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateKind {
    Correct,
    WrongArg,
    WrongTool,
    Malformed,
    CorrectWithValidExamples,
    CorrectWithDegenerateExamples,
}

impl CandidateKind {
    pub fn is_correct(self) -> bool {
        matches!(
            self,
            CandidateKind::Correct
                | CandidateKind::CorrectWithValidExamples
                | CandidateKind::CorrectWithDegenerateExamples
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub index: usize,
    pub text: String,
    pub tool_of_call: Option<String>,
    pub kind: CandidateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpace {
    pub sample_id: String,
    pub candidates: Vec<CandidateResponse>,
}

impl CandidateSpace {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn index_of(&self, kind: CandidateKind) -> Option<usize> {
        self.candidates.iter().position(|c| c.kind == kind)
    }

    /// Scores candidate `k` through the reward engine.
    pub fn score(&self, k: usize, sample: &Sample, mode: &RewardMode) -> RewardBreakdown {
        reward(&self.candidates[k].text, sample, mode)
    }
}

/// What the prompt carries: nothing, or a set of exemplars.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Guidance {
    guided: bool,
    demonstrated: BTreeSet<String>,
}

impl Guidance {
    pub fn raw() -> Self {
        Self::default()
    }

    pub fn from_exemplars(exemplars: &[FewShotExample]) -> Self {
        Self {
            guided: true,
            demonstrated: exemplars
                .iter()
                .flat_map(|ex| ex.demonstrated_tools().map(str::to_string))
                .collect(),
        }
    }

    /// Guided when the sample still has usable exemplars, raw otherwise.
    pub fn for_sample(sample: &GuidedSample) -> Self {
        if sample.has_guidance() {
            Self::from_exemplars(sample.exemplars())
        } else {
            Self::raw()
        }
    }

    /// Marks `tools` as demonstrated without concrete exemplars.
    pub fn demonstrating<I, S>(tools: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { guided: true, demonstrated: tools.into_iter().map(Into::into).collect() }
    }

    pub fn is_guided(&self) -> bool {
        self.guided
    }

    fn indicator(&self, c: &CandidateResponse) -> f64 {
        let hit = self.guided
            && c.kind.is_correct()
            && c.tool_of_call.as_ref().is_some_and(|t| self.demonstrated.contains(t));
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

fn exemplify_indicator(c: &CandidateResponse) -> f64 {
    if c.kind == CandidateKind::CorrectWithValidExamples {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: BTreeMap<String, Vec<f64>>,
    pub guidance_weight: f64,
    pub exemplify_weight: f64,
}

impl PolicyParams {
    /// Zero logits for every space, default guidance weight, no exemplify bias.
    pub fn zeros<'a>(spaces: impl IntoIterator<Item = &'a CandidateSpace>) -> Self {
        Self {
            theta: spaces
                .into_iter()
                .map(|s| (s.sample_id.clone(), vec![0.0; s.len()]))
                .collect(),
            guidance_weight: DEFAULT_GUIDANCE_WEIGHT,
            exemplify_weight: 0.0,
        }
    }

    pub fn row(&self, sample_id: &str) -> Result<&[f64], PolicyError> {
        self.theta
            .get(sample_id)
            .map(Vec::as_slice)
            .ok_or_else(|| PolicyError::UnknownSample(sample_id.to_string()))
    }

    pub fn is_finite(&self) -> bool {
        self.guidance_weight.is_finite()
            && self.exemplify_weight.is_finite()
            && self.theta.values().flatten().all(|v| v.is_finite())
    }
}

/// Gradient with respect to [`PolicyParams`]; rows absent from `theta` are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyGrad {
    pub theta: BTreeMap<String, Vec<f64>>,
    pub guidance_weight: f64,
    pub exemplify_weight: f64,
}

impl PolicyGrad {
    pub fn zero() -> Self {
        Self::default()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyGrad, scale: f64) {
        for (id, row) in &other.theta {
            let dst = self.theta.entry(id.clone()).or_insert_with(|| vec![0.0; row.len()]);
            for (d, r) in dst.iter_mut().zip(row) {
                *d += scale * r;
            }
        }
        self.guidance_weight += scale * other.guidance_weight;
        self.exemplify_weight += scale * other.exemplify_weight;
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.theta.values_mut().flatten().for_each(|v| *v *= scale);
        self.guidance_weight *= scale;
        self.exemplify_weight *= scale;
        self
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self.theta.values().flatten().map(|v| v * v).sum::<f64>()
            + self.guidance_weight.powi(2)
            + self.exemplify_weight.powi(2);
        sq.sqrt()
    }

    pub fn row_norm(&self, sample_id: &str) -> f64 {
        self.theta
            .get(sample_id)
            .map_or(0.0, |r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn is_zero(&self) -> bool {
        self.guidance_weight == 0.0
            && self.exemplify_weight == 0.0
            && self.theta.values().flatten().all(|v| *v == 0.0)
    }
}

fn check_temperature(temperature: f64) -> Result<(), PolicyError> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(PolicyError::NonPositiveTemperature(temperature))
    }
}

pub fn logits(
    params: &PolicyParams,
    space: &CandidateSpace,
    guidance: &Guidance,
) -> Result<Vec<f64>, PolicyError> {
    let row = params.row(&space.sample_id)?;
    if row.len() != space.len() {
        return Err(PolicyError::ShapeMismatch {
            sample: space.sample_id.clone(),
            expected: space.len(),
            got: row.len(),
        });
    }
    Ok(space
        .candidates
        .iter()
        .zip(row)
        .map(|(c, t)| {
            t + params.guidance_weight * guidance.indicator(c)
                + params.exemplify_weight * exemplify_indicator(c)
        })
        .collect())
}

/// Log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|z| z - lse).collect()
}

pub fn log_probs(
    params: &PolicyParams,
    space: &CandidateSpace,
    guidance: &Guidance,
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    check_temperature(temperature)?;
    Ok(log_softmax(&logits(params, space, guidance)?, temperature))
}

pub fn probs(
    params: &PolicyParams,
    space: &CandidateSpace,
    guidance: &Guidance,
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    Ok(log_probs(params, space, guidance, temperature)?.into_iter().map(f64::exp).collect())
}

pub fn log_prob(
    params: &PolicyParams,
    space: &CandidateSpace,
    guidance: &Guidance,
    k: usize,
    temperature: f64,
) -> Result<f64, PolicyError> {
    let lp = log_probs(params, space, guidance, temperature)?;
    lp.get(k).copied().ok_or(PolicyError::IndexOutOfRange { index: k, len: lp.len() })
}

/// Maps per-logit partials `w_j` onto parameters: the theta row is `w`
/// itself, `g` and `e` get the indicator-weighted sums.
pub(crate) fn logit_weights_to_grad(space: &CandidateSpace, guidance: &Guidance, weights: Vec<f64>) -> PolicyGrad {
    let g = space.candidates.iter().zip(&weights).map(|(c, w)| w * guidance.indicator(c)).sum();
    let e = space.candidates.iter().zip(&weights).map(|(c, w)| w * exemplify_indicator(c)).sum();
    let mut theta = BTreeMap::new();
    theta.insert(space.sample_id.clone(), weights);
    PolicyGrad { theta, guidance_weight: g, exemplify_weight: e }
}

pub fn grad_log_prob(
    params: &PolicyParams,
    space: &CandidateSpace,
    guidance: &Guidance,
    k: usize,
    temperature: f64,
) -> Result<PolicyGrad, PolicyError> {
    let p = probs(params, space, guidance, temperature)?;
    if k >= p.len() {
        return Err(PolicyError::IndexOutOfRange { index: k, len: p.len() });
    }
    let weights = p
        .iter()
        .enumerate()
        .map(|(j, pj)| (if j == k { 1.0 } else { 0.0 } - pj) / temperature)
        .collect();
    Ok(logit_weights_to_grad(space, guidance, weights))
}

/// `sum_k p[k] * (log p[k] - log q[k])` from log-probability vectors.
pub fn kl_from_log_probs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

pub fn kl_exact(
    params_new: &PolicyParams,
    params_old: &PolicyParams,
    space: &CandidateSpace,
    guidance: &Guidance,
    temperature: f64,
) -> Result<f64, PolicyError> {
    let lp = log_probs(params_new, space, guidance, temperature)?;
    let lq = log_probs(params_old, space, guidance, temperature)?;
    Ok(kl_from_log_probs(&lp, &lq))
}

/// Gradient of `KL(pi_new || q)` with respect to the new parameters, with
/// `q` given by fixed log-probabilities.
pub fn grad_kl(
    params_new: &PolicyParams,
    log_q: &[f64],
    space: &CandidateSpace,
    guidance: &Guidance,
    temperature: f64,
) -> Result<PolicyGrad, PolicyError> {
    let lp = log_probs(params_new, space, guidance, temperature)?;
    if log_q.len() != lp.len() {
        return Err(PolicyError::ShapeMismatch {
            sample: space.sample_id.clone(),
            expected: lp.len(),
            got: log_q.len(),
        });
    }
    let kl = kl_from_log_probs(&lp, log_q);
    // dKL/dlogit_j = p_j * ((log p_j - log q_j) - KL) / T
    let weights = lp
        .iter()
        .zip(log_q)
        .map(|(a, b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * ((a - b) - kl) / temperature
            }
        })
        .collect();
    Ok(logit_weights_to_grad(space, guidance, weights))
}

/// N responses for one prompt, drawn from a snapshot of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub guidance: Guidance,
    pub chosen: Vec<usize>,
    /// Snapshot log-probabilities of the chosen candidates.
    pub old_logprobs: Vec<f64>,
    /// Snapshot log-probabilities of every candidate, for the KL term.
    pub old_distribution: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn guided(&self) -> bool {
        self.guidance.is_guided()
    }

    pub fn len(&self) -> usize {
        self.chosen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chosen.is_empty()
    }
}

pub fn sample_rollouts<R: Rng + ?Sized>(
    params: &PolicyParams,
    space: &CandidateSpace,
    guidance: &Guidance,
    n: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<RolloutGroup, PolicyError> {
    if n == 0 {
        return Err(PolicyError::EmptyGroup);
    }
    let lp = log_probs(params, space, guidance, temperature)?;
    let weights: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let dist = WeightedIndex::new(&weights).expect("softmax weights are positive");
    let chosen: Vec<usize> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(RolloutGroup {
        sample_id: space.sample_id.clone(),
        guidance: guidance.clone(),
        old_logprobs: chosen.iter().map(|&k| lp[k]).collect(),
        old_distribution: lp,
        chosen,
        rewards: Vec::new(),
        advantages: Vec::new(),
    })
}

/// Scores every rollout in `group` with the reward engine.
pub fn score_group(group: &mut RolloutGroup, space: &CandidateSpace, sample: &Sample, mode: &RewardMode) {
    group.rewards = group.chosen.iter().map(|&k| space.score(k, sample, mode).value).collect();
}

fn perturb_value(value: &Value, salt: u32) -> Value {
    match value {
        Value::String(s) => {
            let upper = s.to_uppercase();
            if salt == 0 && upper != *s {
                Value::String(upper)
            } else {
                Value::String(format!("{s} (alt {salt})"))
            }
        }
        Value::Number(n) => match n.as_i64() {
            Some(i) => Value::from(i + 1 + i64::from(salt)),
            None => Value::from(n.as_f64().unwrap_or(0.0) + 0.5 + f64::from(salt)),
        },
        Value::Bool(b) => Value::Bool(!b),
        Value::Null => Value::String(format!("none{salt}")),
        Value::Array(items) => {
            let mut items = items.clone();
            items.push(Value::from(salt));
            Value::Array(items)
        }
        Value::Object(map) => {
            let mut map = map.clone();
            map.insert(format!("extra{salt}"), Value::from(salt));
            Value::Object(map)
        }
    }
}

fn wrong_argument(truth: &[ToolCall], salt: u32, pick: usize) -> Vec<ToolCall> {
    let mut calls = truth.to_vec();
    let first = &mut calls[0];
    if first.arguments.is_empty() {
        first.arguments.insert(format!("unexpected{salt}"), Value::Bool(true));
    } else {
        let keys: Vec<String> = first.arguments.keys().cloned().collect();
        let key = &keys[pick % keys.len()];
        let v = perturb_value(&first.arguments[key], salt);
        first.arguments.insert(key.clone(), v);
    }
    calls
}

fn wrong_tool(sample: &Sample, pick: usize) -> Vec<ToolCall> {
    let mut calls = sample.ground_truth.clone();
    let current = calls[0].tool_name.clone();
    let others: Vec<&str> =
        sample.tools.iter().map(|t| t.name.as_str()).filter(|n| *n != current).collect();
    calls[0].tool_name = if others.is_empty() {
        format!("{current}_v2")
    } else {
        others[pick % others.len()].to_string()
    };
    calls
}

fn malformed(body: &str, variant: usize) -> String {
    match variant % 3 {
        0 => format!("Sure, here is the call: <tool_call>{body}</tool_call>"),
        1 => format!("<tool_call>{body}"),
        _ => format!("<tool_call>{}</tool_call>", &body[..body.len() - 1]),
    }
}

fn reiterate(sample: &Sample) -> FewShotExample {
    FewShotExample::from(sample)
}

fn example_variant(sample: &Sample, i: usize) -> FewShotExample {
    FewShotExample {
        tools: sample.tools.clone(),
        question: format!("Variant {}: {}", i + 1, sample.query),
        answers: sample.ground_truth.clone(),
    }
}

fn examples_json(examples: &[FewShotExample]) -> String {
    serde_json::to_string(examples).expect("examples serialize")
}

/// Builds a candidate space for `sample` whose texts hit each kind's reward
/// contract under `mode`. The contracts are re-verified through the reward
/// engine before returning.
pub fn make_toy_space(sample: &Sample, mode: &RewardMode, seed: u64) -> Result<CandidateSpace, PolicyError> {
    let mut rng = rng::stream(seed, &["toy-space", &sample.id]);
    let salt: u32 = rng.gen_range(0..4);
    let pick: usize = rng.gen_range(0..64);
    let malformed_variant: usize = rng.gen_range(0..3);
    let with_think: bool = rng.gen();

    let truth_tool = sample.ground_truth[0].tool_name.clone();
    let gt_body = render_tool_calls(&sample.ground_truth);
    let think = format!("<think>The request maps to {truth_tool}.</think>\n");
    let prefix = match mode.variant {
        RewardVariant::Plain if with_think => think.clone(),
        RewardVariant::Plain => String::new(),
        RewardVariant::SelfExemplifying => {
            format!("<examples>{}</examples>\n{think}", examples_json(&[reiterate(sample)]))
        }
    };
    let call_text = |calls: &[ToolCall]| format!("{prefix}<tool_call>{}</tool_call>", render_tool_calls(calls));

    let wrong_tool_calls = wrong_tool(sample, pick);
    let mut specs: Vec<(CandidateKind, String, Option<String>)> = vec![
        (CandidateKind::Correct, call_text(&sample.ground_truth), Some(truth_tool.clone())),
        (CandidateKind::WrongArg, call_text(&wrong_argument(&sample.ground_truth, salt, pick)), Some(truth_tool.clone())),
        (CandidateKind::WrongTool, call_text(&wrong_tool_calls), Some(wrong_tool_calls[0].tool_name.clone())),
        (CandidateKind::Malformed, format!("{prefix}{}", malformed(&gt_body, malformed_variant)), None),
    ];
    match mode.variant {
        RewardVariant::Plain => {
            specs.push((
                CandidateKind::WrongArg,
                call_text(&wrong_argument(&sample.ground_truth, salt + 1, pick + 1)),
                Some(truth_tool.clone()),
            ));
            specs.push((CandidateKind::Malformed, malformed(&gt_body, malformed_variant + 1), None));
        }
        RewardVariant::SelfExemplifying => {
            let valid: Vec<_> = (0..=mode.min_examples_exclusive).map(|i| example_variant(sample, i)).collect();
            // exactly `min_examples_exclusive` distinct entries padded with
            // copies of the first, so it never clears the threshold
            let m = mode.min_examples_exclusive;
            let mut degenerate: Vec<_> = std::iter::once(reiterate(sample))
                .chain((0..m.saturating_sub(1)).map(|i| example_variant(sample, i)))
                .take(m)
                .collect();
            if let Some(first) = degenerate.first().cloned() {
                degenerate.splice(0..0, [first.clone(), first]);
            }
            for (kind, examples) in [
                (CandidateKind::CorrectWithValidExamples, valid),
                (CandidateKind::CorrectWithDegenerateExamples, degenerate),
            ] {
                specs.push((
                    kind,
                    format!("<examples>{}</examples>\n{think}<tool_call>{gt_body}</tool_call>", examples_json(&examples)),
                    Some(truth_tool.clone()),
                ));
            }
        }
    }

    let space = CandidateSpace {
        sample_id: sample.id.clone(),
        candidates: specs
            .into_iter()
            .enumerate()
            .map(|(index, (kind, text, tool_of_call))| CandidateResponse { index, text, tool_of_call, kind })
            .collect(),
    };
    verify_space(&space, sample, mode)?;
    Ok(space)
}

/// Checks every candidate's reward against its kind.
pub fn verify_space(space: &CandidateSpace, sample: &Sample, mode: &RewardMode) -> Result<(), PolicyError> {
    for (k, c) in space.candidates.iter().enumerate() {
        let r = space.score(k, sample, mode);
        let self_ex = mode.variant == RewardVariant::SelfExemplifying;
        let ok = match c.kind {
            CandidateKind::Correct => r.is_correct() && r.value == 1.0,
            CandidateKind::CorrectWithValidExamples => {
                r.is_correct() && (!self_ex || r.value == 1.0 + mode.bonus)
            }
            CandidateKind::CorrectWithDegenerateExamples => r.is_correct() && r.value == 1.0 && !r.fewshot_ok,
            CandidateKind::WrongArg | CandidateKind::WrongTool => r.format_ok && !r.result_ok,
            CandidateKind::Malformed => !r.format_ok,
        };
        if !ok {
            return Err(PolicyError::SelfCheck {
                sample: space.sample_id.clone(),
                kind: c.kind,
                detail: format!("{r:?}"),
            });
        }
    }
    Ok(())
}

/// Persisted policy state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: usize,
    pub theta: BTreeMap<String, Vec<f64>>,
    pub g: f64,
    pub e: f64,
    pub rng: RngState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub global_seed: u64,
}

impl Checkpoint {
    pub fn new(round: usize, params: &PolicyParams, global_seed: u64) -> Self {
        Self {
            round,
            theta: params.theta.clone(),
            g: params.guidance_weight,
            e: params.exemplify_weight,
            rng: RngState { global_seed },
        }
    }

    pub fn params(&self) -> PolicyParams {
        PolicyParams { theta: self.theta.clone(), guidance_weight: self.g, exemplify_weight: self.e }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        fs::write(path, self.to_json() + "\n").map_err(|e| PolicyError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path).map_err(|e| PolicyError::Io(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| PolicyError::Format(e.to_string()))?;
        if !ckpt.params().is_finite() {
            return Err(PolicyError::Format("non-finite parameter".into()));
        }
        Ok(ckpt)
    }
}
