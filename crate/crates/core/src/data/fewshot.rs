//! Few-shot guided dataset construction: random donors per tool, optionally
//! vetted against the policy.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, FewShotExample, GuidedSample, Provenance};
use crate::policy::{sample_rollouts, CandidateSpace, Guidance, PolicyError, PolicyParams};
use crate::reward::RewardMode;
use crate::rng;

pub const DEFAULT_EXEMPLARS_PER_TOOL: usize = 1;
/// Alternative draws tried after the first one fails vetting.
pub const VETTING_RETRY_BUDGET: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VettingMode {
    /// Keep an exemplar set only if it gets the policy to a correct answer.
    Cautious,
    /// Keep the first draw as is.
    Bold,
}

/// Donor index: tool name to the samples whose ground truth calls it.
fn donor_index(dataset: &Dataset) -> BTreeMap<&str, Vec<usize>> {
    let mut index: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        for tool in s.base.called_tools() {
            index.entry(tool).or_default().push(i);
        }
    }
    index
}

fn draw<R: rand::Rng>(
    dataset: &Dataset,
    index: &BTreeMap<&str, Vec<usize>>,
    target: usize,
    k: usize,
    rng: &mut R,
) -> Vec<FewShotExample> {
    let samples = dataset.samples();
    let base = &samples[target].base;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for tool in base.called_tools() {
        let donors: Vec<FewShotExample> = index[tool]
            .iter()
            .filter(|&&j| j != target)
            .map(|&j| FewShotExample::from(&samples[j].base))
            .filter(|ex| !base.is_own_pair(ex))
            .collect();
        for ex in donors.choose_multiple(rng, k) {
            if seen.insert(ex.canonical()) {
                out.push(ex.clone());
            }
        }
    }
    out
}

fn rebuild(
    dataset: &Dataset,
    pick: impl Fn(usize) -> Result<(Vec<FewShotExample>, Provenance), DatasetError> + Sync,
) -> Result<Dataset, DatasetError> {
    let samples: Vec<GuidedSample> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let current = &dataset.samples()[i];
            if current.is_detached() {
                return Ok(current.clone());
            }
            let (exemplars, provenance) = pick(i)?;
            let mut next = current.clone();
            next.attach(exemplars, provenance)
                .map_err(|source| DatasetError::Invalid { line: i + 1, source })?;
            Ok(next)
        })
        .collect::<Result<_, DatasetError>>()?;
    Dataset::new(samples)
}

/// Attaches up to `k` exemplars per called tool, drawn uniformly from other
/// samples that call the same tool. Detached samples are left alone.
pub fn build_random_fewshots(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset, DatasetError> {
    let index = donor_index(dataset);
    rebuild(dataset, |i| {
        let mut rng = rng::stream(seed, &["random-fewshot", dataset.samples()[i].id()]);
        let exemplars = draw(dataset, &index, i, k.max(1), &mut rng);
        let provenance = if exemplars.is_empty() { Provenance::None } else { Provenance::Random };
        Ok((exemplars, provenance))
    })
}

/// Settings for [`build_vetted_fewshots`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vetting {
    pub mode: VettingMode,
    pub rollouts: usize,
    pub per_tool: usize,
    pub temperature: f64,
    pub reward_mode: RewardMode,
}

impl Vetting {
    pub fn new(mode: VettingMode, rollouts: usize) -> Self {
        Self {
            mode,
            rollouts,
            per_tool: DEFAULT_EXEMPLARS_PER_TOOL,
            temperature: 0.7,
            reward_mode: RewardMode::plain(),
        }
    }
}

/// True when at least one of `rollouts` guided draws scores as correct.
pub fn guided_success<R: rand::Rng>(
    policy: &PolicyParams,
    space: &CandidateSpace,
    sample: &GuidedSample,
    exemplars: &[FewShotExample],
    vetting: &Vetting,
    rng: &mut R,
) -> Result<bool, PolicyError> {
    let guidance = Guidance::from_exemplars(exemplars);
    let group = sample_rollouts(policy, space, &guidance, vetting.rollouts, vetting.temperature, rng)?;
    Ok(group.chosen.iter().any(|&k| space.score(k, &sample.base, &vetting.reward_mode).is_correct()))
}

/// Like [`build_random_fewshots`], but in cautious mode each draw must lead
/// the policy to a correct rollout. Failed draws are retried up to
/// [`VETTING_RETRY_BUDGET`] times before the sample is left without guidance.
pub fn build_vetted_fewshots(
    dataset: &Dataset,
    policy: &PolicyParams,
    spaces: &BTreeMap<String, CandidateSpace>,
    vetting: &Vetting,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if vetting.rollouts == 0 {
        return Err(PolicyError::EmptyGroup.into());
    }
    let index = donor_index(dataset);
    rebuild(dataset, |i| {
        let sample = &dataset.samples()[i];
        let id = sample.id();
        let space = spaces.get(id).ok_or_else(|| DatasetError::MissingSpace(id.to_string()))?;
        let mut draws = rng::stream(seed, &["vetted-fewshot", id, "draw"]);
        let mut verify = rng::stream(seed, &["vetted-fewshot", id, "verify"]);
        for _ in 0..=VETTING_RETRY_BUDGET {
            let exemplars = draw(dataset, &index, i, vetting.per_tool.max(1), &mut draws);
            if exemplars.is_empty() {
                break;
            }
            match vetting.mode {
                VettingMode::Bold => return Ok((exemplars, Provenance::Bold)),
                VettingMode::Cautious => {
                    if guided_success(policy, space, sample, &exemplars, vetting, &mut verify)? {
                        return Ok((exemplars, Provenance::Cautious));
                    }
                }
            }
        }
        Ok((Vec::new(), Provenance::None))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, ToolCall};
    use crate::policy::make_toy_space;
    use serde_json::json;

    fn sample(id: &str, tool: &str, q: &str) -> Sample {
        serde_json::from_value(json!({
            "id": id,
            "query": q,
            "tools": [{"name": tool, "params": [{"name": "x", "type": "int", "required": true}]}],
            "ground_truth": [{"name": tool, "arguments": {"x": 1}}]
        }))
        .unwrap()
    }

    fn three() -> Dataset {
        Dataset::from_samples(vec![sample("s1", "a", "q1"), sample("s2", "a", "q2"), sample("s3", "b", "q3")]).unwrap()
    }

    #[test]
    fn random_three_sample_fixture() {
        let ds = three();
        let out = build_random_fewshots(&ds, 1, 7).unwrap();
        let s = out.samples();
        assert_eq!(s[0].exemplars(), [FewShotExample::from(&ds.samples()[1].base)]);
        assert_eq!(s[1].exemplars(), [FewShotExample::from(&ds.samples()[0].base)]);
        assert!(s[2].exemplars().is_empty());
        assert_eq!(s[0].provenance(), Provenance::Random);
        assert_eq!(s[2].provenance(), Provenance::None);
        let c = out.counters();
        assert_eq!((c.total, c.with_fewshot, c.without_fewshot), (3, 2, 1));
    }

    #[test]
    fn single_sample_gets_nothing() {
        let ds = Dataset::from_samples(vec![sample("s1", "a", "q1")]).unwrap();
        let out = build_random_fewshots(&ds, 3, 1).unwrap();
        assert_eq!(out.samples()[0].provenance(), Provenance::None);
    }

    #[test]
    fn identical_pairs_are_never_donated() {
        // s2 duplicates s1's question and answer
        let ds = Dataset::from_samples(vec![sample("s1", "a", "q"), sample("s2", "a", "q")]).unwrap();
        let out = build_random_fewshots(&ds, 1, 3).unwrap();
        assert!(out.samples().iter().all(|s| s.exemplars().is_empty()));
    }

    #[test]
    fn random_is_deterministic_and_respects_k() {
        let ds = Dataset::from_samples((0..12).map(|i| sample(&format!("s{i}"), "a", &format!("q{i}"))).collect())
            .unwrap();
        let a = build_random_fewshots(&ds, 3, 11).unwrap();
        assert_eq!(a, build_random_fewshots(&ds, 3, 11).unwrap());
        assert_ne!(a, build_random_fewshots(&ds, 3, 12).unwrap());
        assert!(a.samples().iter().all(|s| s.exemplars().len() == 3));
    }

    #[test]
    fn detached_samples_are_skipped() {
        let mut ds = three();
        ds.get_mut("s1").unwrap().detach();
        let out = build_random_fewshots(&ds, 1, 7).unwrap();
        assert!(out.samples()[0].is_detached() && out.samples()[0].exemplars().is_empty());
        assert_eq!(out.samples()[1].provenance(), Provenance::Random);
    }

    fn spaces(ds: &Dataset) -> BTreeMap<String, CandidateSpace> {
        ds.samples()
            .iter()
            .map(|s| (s.id().to_string(), make_toy_space(&s.base, &RewardMode::plain(), 0).unwrap()))
            .collect()
    }

    /// Correct candidate at index 0; `p_guided` is its probability under guidance.
    fn policy(ds: &Dataset, p_guided: f64) -> PolicyParams {
        let mut p = PolicyParams::zeros(spaces(ds).values());
        for row in p.theta.values_mut() {
            row[0] = -60.0;
        }
        // with temperature 1 and 5 other candidates at 0
        p.guidance_weight = if p_guided == 0.0 { 0.0 } else { 60.0 + (5.0 * p_guided / (1.0 - p_guided)).ln() };
        p
    }

    fn vet(mode: VettingMode) -> Vetting {
        Vetting { temperature: 1.0, ..Vetting::new(mode, 10) }
    }

    #[test]
    fn cautious_keeps_likely_guides() {
        let ds = three();
        let out = build_vetted_fewshots(&ds, &policy(&ds, 0.9), &spaces(&ds), &vet(VettingMode::Cautious), 5).unwrap();
        assert_eq!(out.samples()[0].provenance(), Provenance::Cautious);
        assert_eq!(out.samples()[1].provenance(), Provenance::Cautious);
        assert_eq!(out.samples()[2].provenance(), Provenance::None);
    }

    #[test]
    fn cautious_drops_useless_guides_bold_keeps_them() {
        let ds = three();
        let p = policy(&ds, 0.0);
        let sp = spaces(&ds);
        let cautious = build_vetted_fewshots(&ds, &p, &sp, &vet(VettingMode::Cautious), 5).unwrap();
        assert!(cautious.samples().iter().all(|s| s.provenance() == Provenance::None));
        let bold = build_vetted_fewshots(&ds, &p, &sp, &vet(VettingMode::Bold), 5).unwrap();
        assert_eq!(bold.samples()[0].provenance(), Provenance::Bold);
        assert_eq!(bold.samples()[0].exemplars(), [FewShotExample::from(&ds.samples()[1].base)]);
    }

    #[test]
    fn missing_space_is_an_error() {
        let ds = three();
        let mut sp = spaces(&ds);
        sp.remove("s2");
        let err = build_vetted_fewshots(&ds, &policy(&ds, 0.9), &sp, &vet(VettingMode::Bold), 5).unwrap_err();
        assert!(matches!(err, DatasetError::MissingSpace(id) if id == "s2"));
    }

    #[test]
    fn multi_tool_draws_deduplicate() {
        let mut s1 = sample("s1", "a", "q1");
        s1.tools.push(serde_json::from_value(json!({"name": "b", "params": []})).unwrap());
        s1.ground_truth.push(ToolCall::new("b", BTreeMap::new()));
        let mut s2 = s1.clone();
        s2.id = "s2".into();
        s2.query = "q2".into();
        let ds = Dataset::from_samples(vec![s1, s2]).unwrap();
        let out = build_random_fewshots(&ds, 1, 0).unwrap();
        // s2 donates once for tool a and once for tool b; the copies collapse
        assert_eq!(out.samples()[0].exemplars().len(), 1);
    }
}
