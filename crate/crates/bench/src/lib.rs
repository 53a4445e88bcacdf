//! Fixtures shared by the benchmarks.

use guided_grpo::parser::render_tool_calls;
use guided_grpo::toy::{toy_bundle, TOY_SEED};
use guided_grpo::train::{apply_strategy, Entry, FewshotMode, TrainConfig, TrainState};
use guided_grpo::{RolloutGroup, Sample};

/// Training state over the bundled toy, with few-shots already attached.
pub fn toy_state(workers: usize) -> TrainState {
    let bundle = toy_bundle(TOY_SEED);
    let params = bundle.params();
    let config = TrainConfig { workers, dataset_path: None, init_checkpoint: None, ..bundle.config };
    TrainState::new(config, bundle.dataset, Some(params)).expect("toy bundle is valid")
}

/// Entries and rollout groups for one round of `state` as configured.
pub fn round_inputs(state: &TrainState) -> (Vec<Entry>, Vec<RolloutGroup>) {
    let hard = state.classify().expect("classification");
    let entries = apply_strategy(state.dataset(), &hard, state.config().strategy);
    let groups = state.rollouts(&entries).expect("rollouts");
    (entries, groups)
}

/// A mix of correct, wrong and malformed responses for every toy sample.
pub fn scoring_corpus() -> Vec<(Sample, String)> {
    let bundle = toy_bundle(TOY_SEED);
    let mut out = Vec::new();
    for s in bundle.dataset.samples() {
        let calls = render_tool_calls(&s.base.ground_truth);
        out.push((s.base.clone(), format!("<think>look it up</think>\n<tool_call>{calls}</tool_call>")));
        out.push((s.base.clone(), format!("<tool_call>{calls}</tool_call><think>late</think>")));
        out.push((s.base.clone(), "<think>unsure".to_string()));
    }
    out
}

/// Same config with the few-shot source switched to what is stored in the dataset.
pub fn stored_fewshots(config: &TrainConfig) -> TrainConfig {
    TrainConfig { fewshot_mode: FewshotMode::Dataset, ..config.clone() }
}
