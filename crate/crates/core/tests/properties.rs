use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use serde_json::{json, Value};

use guided_grpo::data::{build_random_fewshots, Dataset, FewShotExample, GuidedSample, Provenance, Sample, ToolCall};
use guided_grpo::grpo::{compute_advantages, lr_at_round, surrogate_objective, surrogate_term, GrpoConfig};
use guided_grpo::parser::{extract_tags, parse_tool_calls, render_tool_calls};
use guided_grpo::policy::{
    kl_exact, make_toy_space, probs, sample_rollouts, CandidateSpace, Guidance, PolicyParams,
};
use guided_grpo::reward::RewardMode;
use guided_grpo::rng;
use guided_grpo::train::{apply_strategy, FewshotMode, Strategy as Plan, TrainConfig, TrainState};

fn population_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn sample(id: &str, tool: &str, q: &str) -> Sample {
    serde_json::from_value(json!({
        "id": id,
        "query": q,
        "tools": [
            {"name": tool, "params": [{"name": "x", "type": "int", "required": true}]},
            {"name": "spare", "params": []}
        ],
        "ground_truth": [{"name": tool, "arguments": {"x": 1}}]
    }))
    .unwrap()
}

fn space() -> CandidateSpace {
    make_toy_space(&sample("s", "t", "q"), &RewardMode::self_exemplifying(), 0).unwrap()
}

fn params_from(row: Vec<f64>, g: f64, e: f64) -> PolicyParams {
    PolicyParams { theta: BTreeMap::from([("s".to_string(), row)]), guidance_weight: g, exemplify_weight: e }
}

fn row() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 6)
}

/// Text built from tag fragments and filler so that every tag path is hit.
fn taggy_text() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("<think>".to_string()),
        Just("</think>".to_string()),
        Just("<tool_call>".to_string()),
        Just("</tool_call>".to_string()),
        Just("<examples>".to_string()),
        Just("</examples>".to_string()),
        Just("<".to_string()),
        Just("</".to_string()),
        "[a-z {}\"\\n:é]{0,6}",
    ];
    prop::collection::vec(piece, 0..12).prop_map(|v| v.concat())
}

fn scalar() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i64>().prop_map(Value::from),
        (-1e6..1e6f64).prop_map(Value::from),
        any::<bool>().prop_map(Value::from),
        "[ -~]{0,8}".prop_map(Value::from),
        Just(Value::Null),
    ]
}

fn tool_call() -> impl Strategy<Value = ToolCall> {
    ("[a-z_][a-z0-9_]{0,10}", prop::collection::btree_map("[a-z]{1,6}", scalar(), 0..4))
        .prop_map(|(name, arguments)| ToolCall::new(name, arguments))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tag_extraction_is_total_and_lossless(text in taggy_text()) {
        if let Ok(tagged) = extract_tags(&text) {
            prop_assert_eq!(tagged.reconstruct(), text);
        }
    }

    #[test]
    fn well_formed_blocks_always_extract(inner in "[a-z {}\"\\n]{0,20}", stray in "[a-z \\n]{0,5}") {
        let text = format!("{stray}<think>{inner}</think>{stray}<tool_call>{inner}</tool_call>");
        let tagged = extract_tags(&text).unwrap();
        prop_assert_eq!(tagged.think_blocks(), vec![inner.as_str()]);
        prop_assert_eq!(tagged.tool_call_blocks(), vec![inner.as_str()]);
        prop_assert_eq!(tagged.stray_text(), format!("{stray}{stray}"));
    }

    #[test]
    fn tool_calls_round_trip(calls in prop::collection::vec(tool_call(), 1..4)) {
        let parsed = parse_tool_calls(&render_tool_calls(&calls)).unwrap();
        prop_assert_eq!(parsed.len(), calls.len());
        for (a, b) in parsed.iter().zip(&calls) {
            prop_assert!(a.matches(b));
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-10.0..10.0f64, 2..40)) {
        let (_, s) = population_stats(&rewards);
        prop_assume!(s > 1e-6);
        let (m, s) = population_stats(&compute_advantages(&rewards, 1e-8).unwrap());
        prop_assert!(m.abs() <= 1e-9);
        prop_assert!((s - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn advantages_ignore_shifts(rewards in prop::collection::vec(0.0..1.01f64, 2..12), c in -5.0..5.0f64) {
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let a = compute_advantages(&rewards, 1e-8).unwrap();
        let b = compute_advantages(&shifted, 1e-8).unwrap();
        let (_, s) = population_stats(&rewards);
        prop_assume!(s > 1e-6);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-7);
        }
    }

    #[test]
    fn probabilities_normalize(r in row(), g in -3.0..3.0f64, e in -3.0..3.0f64, t in 0.05..5.0f64, guided: bool) {
        let sp = space();
        let guidance = if guided { Guidance::demonstrating(["t"]) } else { Guidance::raw() };
        let p = probs(&params_from(r, g, e), &sp, &guidance, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(a in row(), b in row(), t in 0.1..3.0f64) {
        let sp = space();
        let (pa, pb) = (params_from(a, 1.0, 0.5), params_from(b, -1.0, 0.0));
        let g = Guidance::demonstrating(["t"]);
        prop_assert!(kl_exact(&pa, &pb, &sp, &g, t).unwrap() >= -1e-15);
        prop_assert_eq!(kl_exact(&pa, &pa, &sp, &g, t).unwrap(), 0.0);
    }

    #[test]
    fn guidance_never_lowers_success(r in row(), t in 0.2..2.0f64) {
        let sp = space();
        let mut last = 0.0;
        for g in [0.0, 1.0, 2.0, 4.0] {
            let p = probs(&params_from(r.clone(), g, 0.0), &sp, &Guidance::demonstrating(["t"]), t).unwrap()[0];
            let raw = probs(&params_from(r.clone(), g, 0.0), &sp, &Guidance::raw(), t).unwrap()[0];
            if g > 0.0 {
                prop_assert!(p > raw);
                prop_assert!(p > last);
            }
            last = p;
        }
    }

    #[test]
    fn clip_higher_raises_only_the_upper_bound(a in 0.01..5.0f64, lo in 0.05..0.5f64, extra in 0.01..0.4f64) {
        let hi = lo + extra;
        let best = |l: f64, h: f64| (0..=600).map(|i| surrogate_term(i as f64 * 0.005, a, l, h)).fold(f64::MIN, f64::max);
        prop_assert!((best(lo, hi) - (1.0 + hi) * a).abs() <= 1e-9);
        prop_assert!(best(lo, hi) > best(lo, lo));
    }

    #[test]
    fn decoupled_objective_specializes(seed in 0u64..10_000, eps in 0.05..0.5f64) {
        let sp = space();
        let mut r = rng::stream(seed, &["prop"]);
        use rand::Rng;
        let old = params_from((0..6).map(|_| r.gen_range(-1.0..1.0)).collect(), 1.0, 0.3);
        let new = params_from((0..6).map(|_| r.gen_range(-1.5..1.5)).collect(), 0.7, -0.2);
        let g = Guidance::demonstrating(["t"]);
        let mut group = sample_rollouts(&old, &sp, &g, 6, 0.7, &mut r).unwrap();
        group.rewards = (0..6).map(|i| (i % 2) as f64 * 1.01).collect();
        group.advantages = compute_advantages(&group.rewards, 1e-8).unwrap();
        let with_kl = GrpoConfig { beta: 0.0, use_kl: true, eps_low: eps, eps_high: eps, ..GrpoConfig::grpo() };
        let without = GrpoConfig { use_kl: false, eps_low: eps, eps_high: eps, ..GrpoConfig::self_exemplifying() };
        let a = surrogate_objective(&group, &new, &sp, &with_kl, 0.7).unwrap();
        let b = surrogate_objective(&group, &new, &sp, &without, 0.7).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-12);
        prop_assert!(a.kl_term >= 0.0);
        let beta = GrpoConfig { beta: 0.01, ..with_kl };
        let c = surrogate_objective(&group, &new, &sp, &beta, 0.7).unwrap();
        prop_assert!((c.total - (c.surrogate - 0.01 * c.kl_term)).abs() <= 1e-15);
    }

    #[test]
    fn decayed_rates_fall_by_gamma(lr0 in 1e-8..1e3f64, gamma in 0.05..0.999f64, round in 0i64..60) {
        let a = lr_at_round(lr0, gamma, round).unwrap();
        let b = lr_at_round(lr0, gamma, round + 1).unwrap();
        prop_assert!(b < a);
        prop_assert!((b / a - gamma).abs() <= 1e-12 * gamma);
    }

    #[test]
    fn strategies_conserve_counts(hard_mask in prop::collection::vec(any::<bool>(), 12), guide_mask in prop::collection::vec(any::<bool>(), 12)) {
        let donor = FewShotExample::from(&sample("d", "t", "donor question"));
        let samples: Vec<GuidedSample> = (0..12)
            .map(|i| {
                let base = sample(&format!("s{i}"), "t", &format!("q{i}"));
                if guide_mask[i] {
                    GuidedSample::with_exemplars(base, vec![donor.clone()], Provenance::Random).unwrap()
                } else {
                    GuidedSample::raw(base)
                }
            })
            .collect();
        let ds = Dataset::new(samples).unwrap();
        let hard: BTreeSet<String> = (0..12).filter(|i| hard_mask[*i]).map(|i| format!("s{i}")).collect();
        let guided_hard = (0..12).filter(|i| hard_mask[*i] && guide_mask[*i]).count();
        prop_assert_eq!(apply_strategy(&ds, &hard, Plan::GrpoBaseline).len(), 12);
        prop_assert_eq!(apply_strategy(&ds, &hard, Plan::Replace).len(), 12);
        prop_assert_eq!(apply_strategy(&ds, &hard, Plan::Add).len(), 12 + guided_hard);
        prop_assert_eq!(apply_strategy(&ds, &hard, Plan::DropHard).len(), 12 - hard.len());
        let c = ds.counters();
        prop_assert_eq!(c.with_fewshot + c.without_fewshot, c.total);
    }

    #[test]
    fn random_fewshots_never_leak_own_pair(tools in prop::collection::vec(0usize..4, 1..15), dup in prop::collection::vec(any::<bool>(), 15), seed: u64) {
        // some samples repeat the previous sample's query and answer verbatim
        let mut samples = Vec::new();
        for (i, t) in tools.iter().enumerate() {
            let q = if i > 0 && dup[i] { format!("q{}", i - 1) } else { format!("q{i}") };
            samples.push(sample(&format!("s{i}"), &format!("tool{t}"), &q));
        }
        let ds = Dataset::from_samples(samples).unwrap();
        let out = build_random_fewshots(&ds, 2, seed).unwrap();
        for s in out.samples() {
            prop_assert!(s.exemplars().iter().all(|ex| !s.base.is_own_pair(ex)));
            prop_assert_eq!(s.exemplars().is_empty(), s.provenance() == Provenance::None);
        }
        prop_assert_eq!(out, build_random_fewshots(&ds, 2, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn detachment_only_grows(seed in 0u64..1000) {
        let samples: Vec<Sample> = (0..8).map(|i| sample(&format!("s{i}"), &format!("t{}", i % 3), &format!("q{i}"))).collect();
        let ds = Dataset::from_samples(samples).unwrap();
        let mode = RewardMode::plain();
        let spaces: Vec<_> = ds.samples().iter().map(|s| make_toy_space(&s.base, &mode, seed).unwrap()).collect();
        let mut params = PolicyParams::zeros(&spaces);
        for (i, row) in params.theta.values_mut().enumerate() {
            row[0] = -2.0 - i as f64 * 0.3;
        }
        let cfg = TrainConfig { fewshot_mode: FewshotMode::Random, lr0: 2.0, rounds: 5, seed, ..TrainConfig::default() };
        let mut state = TrainState::new(cfg, ds, Some(params)).unwrap();
        let mut detached: BTreeSet<String> = BTreeSet::new();
        for _ in 0..5 {
            let report = state.run_round().unwrap();
            let now: BTreeSet<String> =
                state.dataset().samples().iter().filter(|s| s.is_detached()).map(|s| s.id().to_string()).collect();
            prop_assert!(detached.is_subset(&now));
            prop_assert_eq!(report.detached_total, now.len());
            prop_assert!(report.hard_count <= 8);
            for s in state.dataset().samples() {
                prop_assert!(!s.is_detached() || s.exemplars().is_empty());
            }
            detached = now;
        }
    }
}
