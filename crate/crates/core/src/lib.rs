//! Group-relative policy optimization with few-shot guidance and a dynamic
//! hard-sample curriculum, run over an exactly computable tool-calling policy.

pub mod data;
pub mod experiment;
pub mod grpo;
pub mod parser;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod toy;
pub mod train;

pub use data::{
    Dataset, DatasetError, FewShotExample, GuidedSample, ParamSpec, Provenance, Sample, ToolCall, ToolSpec,
    TypeTag,
};
pub use grpo::{GrpoConfig, GrpoError, ObjectiveReport};
pub use parser::{ParsedResponse, Tag, TaggedOutput};
pub use policy::{
    CandidateKind, CandidateResponse, CandidateSpace, Checkpoint, Guidance, PolicyError, PolicyGrad, PolicyParams,
    RolloutGroup,
};
pub use reward::{RewardBreakdown, RewardMode, RewardVariant};
pub use train::{RoundReport, Strategy, TrainConfig, TrainError, TrainState, TrainSummary};
