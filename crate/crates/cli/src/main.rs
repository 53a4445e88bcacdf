use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use guided_grpo::data::{
    build_random_fewshots, build_vetted_fewshots, load_dataset, save_dataset, Vetting, VettingMode,
    DEFAULT_EXEMPLARS_PER_TOOL,
};
use guided_grpo::experiment::{compare_strategies, run_rollouts_vs_fewshots, SCALED_ROLLOUTS};
use guided_grpo::policy::{make_toy_space, PolicyParams};
use guided_grpo::reward::{reward, RewardMode};
use guided_grpo::toy::{toy_bundle, TOY_SEED};
use guided_grpo::train::{run_training, FewshotMode, Strategy, TrainConfig, TrainError, TrainState};
use guided_grpo::{Checkpoint, DatasetError, PolicyError, RewardVariant};

#[derive(Parser)]
#[command(name = "guided-grpo", version, about = "GRPO training with few-shot guidance over a toy tool-calling policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run multi-round training from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Print the samples with no correct answer among M raw rollouts.
    ClassifyHard {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rollouts: usize,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = RewardArg::Plain)]
        reward_mode: RewardArg,
    },
    /// Attach few-shot exemplars to a dataset and write it out.
    BuildFewshots {
        #[arg(long, value_enum)]
        mode: FewshotArg,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Policy used for vetting; required for cautious and bold.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        rollouts: usize,
        #[arg(long, default_value_t = DEFAULT_EXEMPLARS_PER_TOOL)]
        per_tool: usize,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score responses: reads JSON lines `{"sample_id", "text"}`, writes one
    /// reward record per line.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = RewardArg::Plain)]
        reward_mode: RewardArg,
        #[arg(long, default_value_t = guided_grpo::reward::DEFAULT_BONUS)]
        bonus: f64,
    },
    /// Bundled experiments.
    Experiment {
        #[command(subcommand)]
        which: ExperimentCmd,
    },
    /// Write the toy dataset, checkpoint and config into a directory.
    GenerateToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TOY_SEED)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Hard counts at M rollouts, at 32 rollouts, and at M with vetted few-shots.
    RolloutsVsFewshots {
        #[arg(long)]
        config: PathBuf,
    },
    /// Final hard counts for every strategy from the same start.
    Strategies {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    GrpoBaseline,
    Replace,
    Add,
    DropHard,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::GrpoBaseline => Strategy::GrpoBaseline,
            StrategyArg::Replace => Strategy::Replace,
            StrategyArg::Add => Strategy::Add,
            StrategyArg::DropHard => Strategy::DropHard,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardArg {
    Plain,
    SelfExemplifying,
}

impl From<RewardArg> for RewardVariant {
    fn from(r: RewardArg) -> Self {
        match r {
            RewardArg::Plain => RewardVariant::Plain,
            RewardArg::SelfExemplifying => RewardVariant::SelfExemplifying,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FewshotArg {
    Random,
    Cautious,
    Bold,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

const CONFIG: u8 = 1;
const DATA: u8 = 2;
const RUNTIME: u8 = 3;

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure { code, message: message.to_string() }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = match e.root() {
            TrainError::Config(_) => CONFIG,
            TrainError::Data(_) | TrainError::Checkpoint(_) => DATA,
            _ => RUNTIME,
        };
        fail(code, e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        fail(DATA, e)
    }
}

impl From<PolicyError> for Failure {
    fn from(e: PolicyError) -> Self {
        let code = match e {
            PolicyError::Io(_) | PolicyError::Format(_) | PolicyError::UnknownSample(_) | PolicyError::ShapeMismatch { .. } => DATA,
            _ => RUNTIME,
        };
        fail(code, e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        fail(RUNTIME, e)
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(RUNTIME, e))?;
    writeln!(io::stdout(), "{text}")?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<PolicyParams, Failure> {
    Ok(Checkpoint::load(path)?.params())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, output_dir, workers, strategy } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = Some(dir);
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(s) = strategy {
                cfg.strategy = s.into();
            }
            let summary = run_training(cfg)?;
            print_json(&summary)
        }
        Command::ClassifyHard { checkpoint, rollouts, dataset, temperature, seed, reward_mode } => {
            let cfg = TrainConfig {
                hard_rollouts: rollouts,
                hard_temperature: temperature,
                seed,
                reward_mode: reward_mode.into(),
                fewshot_mode: FewshotMode::Dataset,
                ..TrainConfig::default()
            };
            cfg.validate()?;
            let state = TrainState::new(cfg, load_dataset(&dataset)?, Some(load_checkpoint(&checkpoint)?))?;
            let hard = state.classify()?;
            print_json(&json!({ "rollouts": rollouts, "hard_count": hard.len(), "hard_ids": hard }))
        }
        Command::BuildFewshots { mode, dataset, out, checkpoint, rollouts, per_tool, temperature, seed } => {
            if per_tool == 0 || rollouts == 0 {
                return Err(fail(CONFIG, "--per-tool and --rollouts must be at least 1"));
            }
            let ds = load_dataset(&dataset)?;
            let built = match mode {
                FewshotArg::Random => build_random_fewshots(&ds, per_tool, seed)?,
                FewshotArg::Cautious | FewshotArg::Bold => {
                    let path = checkpoint.ok_or_else(|| fail(CONFIG, "--checkpoint is required for vetting"))?;
                    let params = load_checkpoint(&path)?;
                    let reward_mode = RewardMode::plain();
                    let spaces = ds
                        .samples()
                        .iter()
                        .map(|s| Ok((s.id().to_string(), make_toy_space(&s.base, &reward_mode, seed)?)))
                        .collect::<Result<BTreeMap<_, _>, PolicyError>>()?;
                    let vmode = if matches!(mode, FewshotArg::Cautious) { VettingMode::Cautious } else { VettingMode::Bold };
                    let vetting = Vetting { mode: vmode, rollouts, per_tool, temperature, reward_mode };
                    build_vetted_fewshots(&ds, &params, &spaces, &vetting, seed)?
                }
            };
            save_dataset(&built, &out)?;
            print_json(&built.counters())
        }
        Command::Score { input, dataset, reward_mode, bonus } => {
            let mode = RewardMode { variant: reward_mode.into(), ..RewardMode::plain() }
                .with_bonus(bonus)
                .map_err(|e| fail(CONFIG, e))?;
            let ds = load_dataset(&dataset)?;
            let file = fs::File::open(&input).map_err(|e| fail(DATA, format!("{}: {e}", input.display())))?;
            let mut out = io::stdout().lock();
            for (i, line) in io::BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| fail(DATA, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |m: String| fail(DATA, format!("line {}: {m}", i + 1));
                let record: serde_json::Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
                let id = record["sample_id"].as_str().ok_or_else(|| bad("missing string `sample_id`".into()))?;
                let text = record["text"].as_str().ok_or_else(|| bad("missing string `text`".into()))?;
                let sample = ds.get(id).ok_or_else(|| bad(format!("unknown sample `{id}`")))?;
                let r = reward(text, &sample.base, &mode);
                let row = json!({
                    "sample_id": id,
                    "value": r.value,
                    "result_ok": r.result_ok,
                    "format_ok": r.format_ok,
                    "fewshot_ok": r.fewshot_ok,
                });
                writeln!(out, "{row}")?;
            }
            Ok(())
        }
        Command::Experiment { which: ExperimentCmd::RolloutsVsFewshots { config } } => {
            let cfg = TrainConfig::load(&config)?;
            let r = run_rollouts_vs_fewshots(&cfg)?;
            print_json(&json!({
                "report": r,
                "scaled_rollouts": SCALED_ROLLOUTS,
                "reduction_rollouts": r.reduction_rollouts(),
                "reduction_fewshots": r.reduction_fewshots(),
                "fewshots_win": r.fewshots_win(),
            }))
        }
        Command::Experiment { which: ExperimentCmd::Strategies { config } } => {
            let cfg = TrainConfig::load(&config)?;
            let probe = TrainState::from_config(TrainConfig { fewshot_mode: FewshotMode::Dataset, ..cfg.clone() })?;
            let summaries = compare_strategies(&cfg, probe.dataset(), probe.params())?;
            print_json(&summaries)
        }
        Command::GenerateToy { out, seed } => {
            toy_bundle(seed).write(&out)?;
            writeln!(io::stdout(), "wrote toy bundle to {}", out.display())?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
