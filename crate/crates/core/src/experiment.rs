//! Does raising the rollout budget or attaching vetted few-shots recover
//! more hard samples?

use serde::Serialize;

use crate::data::Dataset;
use crate::policy::PolicyParams;
use crate::train::{FewshotMode, Strategy, TrainConfig, TrainError, TrainState, TrainSummary};

pub const SCALED_ROLLOUTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RolloutsVsFewshots {
    pub base_rollouts: usize,
    pub scaled_rollouts: usize,
    /// Hard count with `base_rollouts` raw draws.
    pub raw_base: usize,
    /// Hard count with `scaled_rollouts` raw draws.
    pub raw_scaled: usize,
    /// Hard count with `base_rollouts` draws, vetted exemplars attached.
    pub fewshot_base: usize,
    /// Repeat of the `raw_base` classification.
    pub control_base: usize,
    /// Samples that received vetted exemplars.
    pub guided_samples: usize,
}

impl RolloutsVsFewshots {
    pub fn reduction_rollouts(&self) -> usize {
        self.raw_base.saturating_sub(self.raw_scaled)
    }

    pub fn reduction_fewshots(&self) -> usize {
        self.raw_base.saturating_sub(self.fewshot_base)
    }

    pub fn fewshots_win(&self) -> bool {
        self.reduction_fewshots() > self.reduction_rollouts()
    }
}

/// Classifies `dataset` under `params` three ways: `config.hard_rollouts`
/// raw draws, `scaled_rollouts` raw draws, and `config.hard_rollouts` draws
/// with cautiously vetted exemplars attached.
pub fn rollouts_vs_fewshots(
    config: &TrainConfig,
    dataset: Dataset,
    params: PolicyParams,
    scaled_rollouts: usize,
) -> Result<RolloutsVsFewshots, TrainError> {
    let config = TrainConfig { fewshot_mode: FewshotMode::Cautious, ..config.clone() };
    let m = config.hard_rollouts;
    let state = TrainState::new(config, dataset, Some(params))?;
    Ok(RolloutsVsFewshots {
        base_rollouts: m,
        scaled_rollouts,
        raw_base: state.classify_with(m, false)?.len(),
        raw_scaled: state.classify_with(scaled_rollouts, false)?.len(),
        fewshot_base: state.classify_with(m, true)?.len(),
        control_base: state.classify_with(m, false)?.len(),
        guided_samples: state.dataset().counters().with_fewshot,
    })
}

/// [`rollouts_vs_fewshots`] on the files named by `config`.
pub fn run_rollouts_vs_fewshots(config: &TrainConfig) -> Result<RolloutsVsFewshots, TrainError> {
    let probe = TrainState::from_config(TrainConfig { fewshot_mode: FewshotMode::Dataset, ..config.clone() })?;
    rollouts_vs_fewshots(config, probe.dataset().clone(), probe.params().clone(), SCALED_ROLLOUTS)
}

/// Trains once per strategy from the same starting point.
pub fn compare_strategies(
    config: &TrainConfig,
    dataset: &Dataset,
    params: &PolicyParams,
) -> Result<Vec<TrainSummary>, TrainError> {
    Strategy::ALL
        .iter()
        .map(|&strategy| {
            let cfg = TrainConfig { strategy, ..config.clone() };
            TrainState::new(cfg, dataset.clone(), Some(params.clone()))?.run()
        })
        .collect()
}
