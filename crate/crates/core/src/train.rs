//! Multi-round training: raw hard-sample classification, replace/add/drop
//! strategies, guided rollouts, chunked gradient ascent, detachment of
//! guidance, and the on-disk artifacts of a run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    build_random_fewshots, build_vetted_fewshots, load_dataset, Dataset, DatasetError, Vetting, VettingMode,
};
use crate::grpo::{compute_advantages, lr_at_round, objective_and_gradient, update_step, GrpoConfig, GrpoError};
use crate::policy::{
    make_toy_space, sample_rollouts, score_group, CandidateSpace, Checkpoint, Guidance, PolicyError, PolicyGrad,
    PolicyParams, RolloutGroup,
};
use crate::reward::{RewardMode, RewardVariant};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DatasetError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<TrainError>,
    },
}

impl TrainError {
    /// The error with any round wrapper removed.
    pub fn root(&self) -> &TrainError {
        match self {
            TrainError::Round { source, .. } => source.root(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Raw samples only.
    GrpoBaseline,
    /// Hard samples with guidance train in guided form only.
    Replace,
    /// Hard samples with guidance train in both forms.
    Add,
    /// Hard samples are left out of the round.
    DropHard,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::GrpoBaseline, Strategy::Replace, Strategy::Add, Strategy::DropHard];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::GrpoBaseline => "grpo_baseline",
            Strategy::Replace => "replace",
            Strategy::Add => "add",
            Strategy::DropHard => "drop_hard",
        }
    }
}

/// Where exemplars come from at the start of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FewshotMode {
    Random,
    Cautious,
    Bold,
    /// Use the exemplars stored in the dataset file.
    Dataset,
}

/// Every knob of a run. Serialized flat; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub use_kl: bool,
    pub lr0: f64,
    pub decay_gamma: f64,
    pub inner_epochs: usize,
    pub std_floor: f64,
    pub rounds: usize,
    pub batch_size: usize,
    pub hard_rollouts: usize,
    pub hard_temperature: f64,
    pub temperature: f64,
    pub strategy: Strategy,
    pub reward_mode: RewardVariant,
    pub bonus: f64,
    pub min_examples_exclusive: usize,
    pub fewshot_mode: FewshotMode,
    pub fewshots_per_tool: usize,
    pub vetting_rollouts: usize,
    pub seed: u64,
    pub dataset_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    /// Rollout worker threads; 0 picks the machine's core count.
    pub workers: usize,
    /// Write measured wall time; otherwise `wall_ms` is 0 and the metrics
    /// file is reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let g = GrpoConfig::dynamic_sampling();
        Self {
            group_size: g.group_size,
            eps_low: g.eps_low,
            eps_high: g.eps_high,
            beta: g.beta,
            use_kl: g.use_kl,
            lr0: g.lr0,
            decay_gamma: g.decay_gamma,
            inner_epochs: g.inner_epochs,
            std_floor: g.std_floor,
            rounds: 10,
            batch_size: 1024,
            hard_rollouts: 10,
            hard_temperature: 0.7,
            temperature: 0.7,
            strategy: Strategy::Replace,
            reward_mode: RewardVariant::Plain,
            bonus: crate::reward::DEFAULT_BONUS,
            min_examples_exclusive: crate::reward::DEFAULT_MIN_EXAMPLES_EXCLUSIVE,
            fewshot_mode: FewshotMode::Random,
            fewshots_per_tool: crate::data::DEFAULT_EXEMPLARS_PER_TOOL,
            vetting_rollouts: 10,
            seed: 0,
            dataset_path: None,
            output_dir: None,
            init_checkpoint: None,
            workers: 1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn grpo(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            eps_low: self.eps_low,
            eps_high: self.eps_high,
            beta: self.beta,
            use_kl: self.use_kl,
            lr0: self.lr0,
            decay_gamma: self.decay_gamma,
            inner_epochs: self.inner_epochs,
            std_floor: self.std_floor,
        }
    }

    pub fn set_grpo(&mut self, g: GrpoConfig) {
        self.group_size = g.group_size;
        self.eps_low = g.eps_low;
        self.eps_high = g.eps_high;
        self.beta = g.beta;
        self.use_kl = g.use_kl;
        self.lr0 = g.lr0;
        self.decay_gamma = g.decay_gamma;
        self.inner_epochs = g.inner_epochs;
        self.std_floor = g.std_floor;
    }

    pub fn reward(&self) -> Result<RewardMode, TrainError> {
        let mode = RewardMode {
            variant: self.reward_mode,
            bonus: self.bonus,
            min_examples_exclusive: self.min_examples_exclusive,
        };
        mode.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.grpo().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.reward()?;
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.rounds == 0 {
            return fail("rounds must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.hard_rollouts == 0 {
            return fail("hard_rollouts must be at least 1");
        }
        if self.vetting_rollouts == 0 || self.fewshots_per_tool == 0 {
            return fail("vetting_rollouts and fewshots_per_tool must be at least 1");
        }
        for (name, t) in [("temperature", self.temperature), ("hard_temperature", self.hard_temperature)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for p in [&mut cfg.dataset_path, &mut cfg.output_dir, &mut cfg.init_checkpoint].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn thread_pool(&self) -> Result<rayon::ThreadPool, TrainError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// One training-set entry: a dataset index, in raw or guided form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub index: usize,
    pub guided: bool,
}

/// Samples with no correct rollout among `m` draws. With `use_guidance`
/// samples that still carry exemplars are drawn guided; training always
/// classifies raw. The stream of a sample depends on `(seed, round, id)`
/// only, so a larger `m` extends the same draws.
#[allow(clippy::too_many_arguments)]
pub fn classify_hard(
    dataset: &Dataset,
    spaces: &BTreeMap<String, CandidateSpace>,
    params: &PolicyParams,
    mode: &RewardMode,
    m: usize,
    temperature: f64,
    seed: u64,
    round: usize,
    use_guidance: bool,
) -> Result<BTreeSet<String>, TrainError> {
    let round_label = round.to_string();
    let flags: Vec<bool> = dataset
        .samples()
        .par_iter()
        .map(|s| {
            let space = space_of(spaces, s.id())?;
            let guidance = if use_guidance { Guidance::for_sample(s) } else { Guidance::raw() };
            let mut rng = rng::stream(seed, &["classify", &round_label, s.id()]);
            let group = sample_rollouts(params, space, &guidance, m, temperature, &mut rng)?;
            Ok(!group.chosen.iter().any(|&k| space.score(k, &s.base, mode).is_correct()))
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(dataset
        .samples()
        .iter()
        .zip(flags)
        .filter(|(_, hard)| *hard)
        .map(|(s, _)| s.id().to_string())
        .collect())
}

fn space_of<'a>(spaces: &'a BTreeMap<String, CandidateSpace>, id: &str) -> Result<&'a CandidateSpace, TrainError> {
    spaces.get(id).ok_or_else(|| DatasetError::MissingSpace(id.to_string()).into())
}

/// The round's training set, in dataset order. A hard sample counts as
/// guidable only while it has exemplars and has not been detached.
pub fn apply_strategy(dataset: &Dataset, hard: &BTreeSet<String>, strategy: Strategy) -> Vec<Entry> {
    let mut out = Vec::with_capacity(dataset.len());
    for (index, s) in dataset.samples().iter().enumerate() {
        let is_hard = hard.contains(s.id());
        let raw = Entry { index, guided: false };
        let guided = Entry { index, guided: true };
        match strategy {
            _ if !is_hard => out.push(raw),
            Strategy::GrpoBaseline => out.push(raw),
            Strategy::DropHard => {}
            Strategy::Replace => out.push(if s.has_guidance() { guided } else { raw }),
            Strategy::Add => {
                out.push(raw);
                if s.has_guidance() {
                    out.push(guided);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub lr: f64,
    pub hard_count: usize,
    pub guided_active: usize,
    pub detached_total: usize,
    pub mean_reward: f64,
    pub mean_reward_guided: f64,
    pub clipped_fraction: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str =
    "round,lr,hard_count,guided_active,detached_total,mean_reward,mean_reward_guided,clipped_fraction,wall_ms";

impl RoundReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{},{},{}",
            self.round,
            self.lr,
            self.hard_count,
            self.guided_active,
            self.detached_total,
            self.mean_reward,
            self.mean_reward_guided,
            self.clipped_fraction,
            self.wall_ms
        )
    }
}

pub fn metrics_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardRecord {
    pub round: usize,
    pub hard_count: usize,
    pub hard_ids: Vec<String>,
}

/// What a finished run returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub strategy: Strategy,
    pub rounds: usize,
    /// Raw classification after the last update.
    pub final_hard_count: usize,
    pub hard_counts: Vec<usize>,
    pub mean_reward: Vec<f64>,
    pub detached_total: usize,
}

/// Mutable state of a run.
pub struct TrainState {
    config: TrainConfig,
    grpo: GrpoConfig,
    mode: RewardMode,
    dataset: Dataset,
    spaces: BTreeMap<String, CandidateSpace>,
    params: PolicyParams,
    round: usize,
    reports: Vec<RoundReport>,
    trajectory: Vec<HardRecord>,
    pool: rayon::ThreadPool,
}

impl TrainState {
    /// Builds candidate spaces for `dataset`, checks `params` against them and
    /// attaches exemplars according to `config.fewshot_mode`.
    pub fn new(config: TrainConfig, dataset: Dataset, params: Option<PolicyParams>) -> Result<Self, TrainError> {
        config.validate()?;
        let mode = config.reward()?;
        let pool = config.thread_pool()?;
        let spaces: BTreeMap<String, CandidateSpace> = pool.install(|| {
            dataset
                .samples()
                .par_iter()
                .map(|s| Ok((s.id().to_string(), make_toy_space(&s.base, &mode, config.seed)?)))
                .collect::<Result<_, PolicyError>>()
        })?;
        let params = params.unwrap_or_else(|| PolicyParams::zeros(spaces.values()));
        for space in spaces.values() {
            let row = params.row(&space.sample_id).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            if row.len() != space.len() {
                return Err(TrainError::Checkpoint(format!(
                    "sample `{}` has {} logits, expected {}",
                    space.sample_id,
                    row.len(),
                    space.len()
                )));
            }
        }
        if !params.is_finite() {
            return Err(TrainError::Checkpoint("non-finite parameter".into()));
        }
        let dataset = pool.install(|| attach_fewshots(&config, &mode, dataset, &params, &spaces))?;
        Ok(Self {
            grpo: config.grpo(),
            config,
            mode,
            dataset,
            spaces,
            params,
            round: 0,
            reports: Vec::new(),
            trajectory: Vec::new(),
            pool,
        })
    }

    /// Loads the dataset and optional checkpoint named by the config.
    pub fn from_config(config: TrainConfig) -> Result<Self, TrainError> {
        let path = config
            .dataset_path
            .clone()
            .ok_or_else(|| TrainError::Config("dataset_path is required".into()))?;
        let dataset = load_dataset(&path)?;
        let params = match &config.init_checkpoint {
            Some(p) => Some(Checkpoint::load(p).map_err(|e| TrainError::Checkpoint(e.to_string()))?.params()),
            None => None,
        };
        Self::new(config, dataset, params)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn spaces(&self) -> &BTreeMap<String, CandidateSpace> {
        &self.spaces
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn trajectory(&self) -> &[HardRecord] {
        &self.trajectory
    }

    /// Raw hard set under the current parameters, keyed to the current round.
    pub fn classify(&self) -> Result<BTreeSet<String>, TrainError> {
        self.classify_with(self.config.hard_rollouts, false)
    }

    pub fn classify_with(&self, m: usize, use_guidance: bool) -> Result<BTreeSet<String>, TrainError> {
        self.pool.install(|| {
            classify_hard(
                &self.dataset,
                &self.spaces,
                &self.params,
                &self.mode,
                m,
                self.config.hard_temperature,
                self.config.seed,
                self.round,
                use_guidance,
            )
        })
    }

    /// Rollout groups for this round's training set, sampled from the
    /// current parameters.
    pub fn rollouts(&self, entries: &[Entry]) -> Result<Vec<RolloutGroup>, TrainError> {
        let round_label = self.round.to_string();
        self.pool.install(|| {
            entries
                .par_iter()
                .map(|e| {
                    let s = &self.dataset.samples()[e.index];
                    let space = space_of(&self.spaces, s.id())?;
                    let (guidance, form) =
                        if e.guided { (Guidance::for_sample(s), "guided") } else { (Guidance::raw(), "raw") };
                    let mut rng = rng::stream(self.config.seed, &["rollout", &round_label, s.id(), form]);
                    let mut g = sample_rollouts(
                        &self.params,
                        space,
                        &guidance,
                        self.grpo.group_size,
                        self.config.temperature,
                        &mut rng,
                    )?;
                    score_group(&mut g, space, &s.base, &self.mode);
                    g.advantages = compute_advantages(&g.rewards, self.grpo.std_floor)?;
                    Ok(g)
                })
                .collect()
        })
    }

    /// Mean objective gradient over `groups` at the current parameters, summed
    /// in slice order. Also returns the mean clipped fraction.
    pub fn batch_gradient(&self, groups: &[RolloutGroup]) -> Result<(PolicyGrad, f64), TrainError> {
        let parts: Vec<_> = self.pool.install(|| {
            groups
                .par_iter()
                .map(|g| {
                    let space = space_of(&self.spaces, &g.sample_id)?;
                    Ok(objective_and_gradient(g, &self.params, space, &self.grpo, self.config.temperature)?)
                })
                .collect::<Result<Vec<_>, TrainError>>()
        })?;
        let mut total = PolicyGrad::zero();
        let mut clipped = 0.0;
        let scale = 1.0 / groups.len().max(1) as f64;
        for (report, grad) in &parts {
            total.add_scaled(grad, scale);
            clipped += report.clipped_fraction * scale;
        }
        Ok((total, clipped))
    }

    /// Classify, pick the training set, roll out, update, detach, report.
    pub fn run_round(&mut self) -> Result<RoundReport, TrainError> {
        let round = self.round;
        self.run_round_inner().map_err(|e| TrainError::Round { round, source: Box::new(e) })
    }

    fn run_round_inner(&mut self) -> Result<RoundReport, TrainError> {
        let start = Instant::now();
        let lr = lr_at_round(self.grpo.lr0, self.grpo.decay_gamma, self.round as i64)?;
        let hard = self.classify()?;
        let entries = apply_strategy(&self.dataset, &hard, self.config.strategy);
        let groups = self.rollouts(&entries)?;

        let mut clipped = 0.0;
        let mut evaluations = 0usize;
        for chunk in groups.chunks(self.config.batch_size) {
            for _ in 0..self.grpo.inner_epochs {
                let (grad, c) = self.batch_gradient(chunk)?;
                self.params = update_step(&self.params, &grad, lr)?;
                clipped += c;
                evaluations += 1;
            }
        }
        if !self.params.is_finite() {
            return Err(TrainError::Config(format!("parameters diverged at lr {lr}")));
        }

        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        let mut guided_sum = 0.0;
        let mut guided_n = 0usize;
        let mut to_detach = Vec::new();
        for (e, g) in entries.iter().zip(&groups) {
            reward_sum += g.rewards.iter().sum::<f64>();
            reward_n += g.rewards.len();
            if e.guided {
                guided_sum += g.rewards.iter().sum::<f64>();
                guided_n += g.rewards.len();
                if g.rewards.iter().any(|r| *r >= 1.0) {
                    to_detach.push(e.index);
                }
            }
        }
        let samples = self.dataset.samples_mut();
        for i in to_detach {
            samples[i].detach();
        }

        let mean = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
        let report = RoundReport {
            round: self.round,
            lr,
            hard_count: hard.len(),
            guided_active: entries.iter().filter(|e| e.guided).count(),
            detached_total: self.dataset.samples().iter().filter(|s| s.is_detached()).count(),
            mean_reward: mean(reward_sum, reward_n),
            mean_reward_guided: mean(guided_sum, guided_n),
            clipped_fraction: mean(clipped, evaluations),
            wall_ms: if self.config.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
        };
        self.trajectory.push(HardRecord { round: self.round, hard_count: hard.len(), hard_ids: hard.into_iter().collect() });
        self.reports.push(report.clone());
        self.round += 1;
        Ok(report)
    }

    /// Runs the configured number of rounds and a closing classification.
    pub fn run(&mut self) -> Result<TrainSummary, TrainError> {
        for _ in 0..self.config.rounds {
            self.run_round()?;
        }
        self.summary()
    }

    fn summary(&self) -> Result<TrainSummary, TrainError> {
        let final_hard = self.classify()?;
        Ok(TrainSummary {
            strategy: self.config.strategy,
            rounds: self.round,
            final_hard_count: final_hard.len(),
            hard_counts: self.reports.iter().map(|r| r.hard_count).collect(),
            mean_reward: self.reports.iter().map(|r| r.mean_reward).collect(),
            detached_total: self.dataset.samples().iter().filter(|s| s.is_detached()).count(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.round, &self.params, self.config.seed)
    }

    /// Writes `metrics.csv`, `checkpoint.json`, `hard_samples.json` and
    /// `summary.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path, summary: &TrainSummary) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&self.reports))?;
        fs::write(dir.join("checkpoint.json"), self.checkpoint().to_json() + "\n")?;
        fs::write(dir.join("hard_samples.json"), pretty_json(&self.trajectory))?;
        fs::write(dir.join("summary.json"), pretty_json(summary))?;
        Ok(())
    }
}

fn pretty_json<T: Serialize + ?Sized>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn attach_fewshots(
    config: &TrainConfig,
    mode: &RewardMode,
    dataset: Dataset,
    params: &PolicyParams,
    spaces: &BTreeMap<String, CandidateSpace>,
) -> Result<Dataset, TrainError> {
    let vetting = |m: VettingMode| Vetting {
        mode: m,
        rollouts: config.vetting_rollouts,
        per_tool: config.fewshots_per_tool,
        temperature: config.temperature,
        reward_mode: *mode,
    };
    Ok(match config.fewshot_mode {
        FewshotMode::Dataset => dataset,
        FewshotMode::Random => build_random_fewshots(&dataset, config.fewshots_per_tool, config.seed)?,
        FewshotMode::Cautious => build_vetted_fewshots(&dataset, params, spaces, &vetting(VettingMode::Cautious), config.seed)?,
        FewshotMode::Bold => build_vetted_fewshots(&dataset, params, spaces, &vetting(VettingMode::Bold), config.seed)?,
    })
}

/// Loads everything named by `config`, trains, and writes artifacts to
/// `config.output_dir` when set.
pub fn run_training(config: TrainConfig) -> Result<TrainSummary, TrainError> {
    let mut state = TrainState::from_config(config)?;
    let summary = state.run()?;
    if let Some(dir) = &state.config.output_dir {
        state.write_artifacts(dir, &summary)?;
    }
    Ok(summary)
}
