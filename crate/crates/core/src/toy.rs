//! The bundled 200-sample toy environment: dataset, initial checkpoint and
//! training config, generated deterministically from a seed.
//!
//! Samples fall into four strata by their unguided success probability at
//! the sampling temperature:
//!
//! | stratum | count | p(correct) | tools |
//! |---|---|---|---|
//! | recoverable | 60 | 1e-5 | shared in groups of 3, so donors exist |
//! | unrecoverable | 40 | 1e-5 | one tool per sample, no donors |
//! | low | 50 | 0.02 to 0.10 | shared in groups of 5 |
//! | high | 50 | 0.5 to 0.9 | shared in groups of 5 |
//!
//! Guidance lifts a recoverable sample to roughly 0.7.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{write_dataset, Dataset, ParamSpec, Sample, ToolCall, ToolSpec, TypeTag};
use crate::policy::{Checkpoint, PolicyParams, DEFAULT_SPACE_SIZE};
use crate::rng;
use crate::train::{FewshotMode, Strategy, TrainConfig};

pub const TOY_SEED: u64 = 7;
pub const TOY_TEMPERATURE: f64 = 0.7;
pub const TOY_GUIDED_SUCCESS: f64 = 0.7;
pub const TOY_HOPELESS_SUCCESS: f64 = 1e-5;
pub const TOY_ROUNDS: usize = 6;
pub const TOY_LR0: f64 = 1600.0;

const VERBS: [&str; 8] = ["get", "search", "create", "update", "cancel", "list", "convert", "book"];
const NOUNS: [&str; 10] =
    ["weather", "flight", "invoice", "contact", "stock", "recipe", "movie", "hotel", "route", "ticket"];
const PLACES: [&str; 12] = [
    "Lisbon", "Osaka", "Nairobi", "Lima", "Oslo", "Hanoi", "Quito", "Tunis", "Perth", "Riga", "Dakar", "Cusco",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Recoverable,
    Unrecoverable,
    Low,
    High,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::Recoverable => "recoverable",
            Stratum::Unrecoverable => "unrecoverable",
            Stratum::Low => "low",
            Stratum::High => "high",
        }
    }
}

/// Everything the bundled toy consists of.
#[derive(Debug, Clone)]
pub struct ToyBundle {
    pub dataset: Dataset,
    pub checkpoint: Checkpoint,
    pub config: TrainConfig,
    pub strata: BTreeMap<String, Stratum>,
    /// Unguided success probability of each sample at the toy temperature.
    pub success: BTreeMap<String, f64>,
}

/// Logit of the correct candidate that gives it probability `p` against
/// `K - 1` zero logits at temperature `t`.
pub fn logit_for_success(p: f64, t: f64) -> f64 {
    t * ((DEFAULT_SPACE_SIZE as f64 - 1.0) * p / (1.0 - p)).ln()
}

/// Guidance weight that moves success probability from `from` to `to`.
pub fn guidance_for(from: f64, to: f64, t: f64) -> f64 {
    let odds = |p: f64| p / (1.0 - p);
    t * (odds(to) / odds(from)).ln()
}

fn tool_name(i: usize) -> String {
    format!("{}_{}", VERBS[i / NOUNS.len()], NOUNS[i % NOUNS.len()])
}

fn tool_spec(i: usize) -> ToolSpec {
    let noun = NOUNS[i % NOUNS.len()];
    ToolSpec {
        name: tool_name(i),
        description: format!("{} a {noun} record", VERBS[i / NOUNS.len()]),
        params: vec![
            ParamSpec { name: "location".into(), type_tag: TypeTag::String, required: true },
            ParamSpec { name: "count".into(), type_tag: TypeTag::Int, required: false },
        ],
    }
}

fn make_sample<R: Rng>(tool: usize, serial: usize, rng: &mut R) -> Sample {
    let distractor = (tool + 1 + rng.gen_range(0..79)) % 80;
    let mut tools = vec![tool_spec(tool), tool_spec(distractor)];
    if rng.gen() {
        tools.swap(0, 1);
    }
    let place = PLACES[rng.gen_range(0..PLACES.len())];
    let count: i64 = rng.gen_range(1..10);
    let mut arguments = BTreeMap::from([("location".to_string(), json!(place))]);
    let with_count = rng.gen_bool(0.5);
    if with_count {
        arguments.insert("count".into(), Value::from(count));
    }
    let name = tool_name(tool);
    let (verb, noun) = name.split_once('_').expect("tool names have one underscore");
    let query = if with_count {
        format!("Request {serial}: please {verb} {count} {noun} entries for {place}.")
    } else {
        format!("Request {serial}: please {verb} the {noun} for {place}.")
    };
    Sample { id: String::new(), query, tools, ground_truth: vec![ToolCall::new(name, arguments)] }
}

/// Generates the toy bundle for `seed`.
pub fn toy_bundle(seed: u64) -> ToyBundle {
    let mut rng = rng::stream(seed, &["toy-dataset"]);
    // (stratum, tool index, success probability)
    let mut plan: Vec<(Stratum, usize, f64)> = Vec::new();
    for i in 0..60 {
        plan.push((Stratum::Recoverable, i / 3, TOY_HOPELESS_SUCCESS));
    }
    for i in 0..40 {
        plan.push((Stratum::Unrecoverable, 20 + i, TOY_HOPELESS_SUCCESS));
    }
    for i in 0..50 {
        plan.push((Stratum::Low, 60 + i / 5, 0.02 * (1 + i % 5) as f64));
    }
    for i in 0..50 {
        plan.push((Stratum::High, 70 + i / 5, rng.gen_range(0.5..0.9)));
    }
    plan.shuffle(&mut rng);

    let mut samples = Vec::new();
    let mut strata = BTreeMap::new();
    let mut success = BTreeMap::new();
    let mut theta = BTreeMap::new();
    for (serial, (stratum, tool, p)) in plan.into_iter().enumerate() {
        let mut s = make_sample(tool, serial, &mut rng);
        s.id = format!("toy-{serial:03}");
        let mut row = vec![0.0; DEFAULT_SPACE_SIZE];
        row[0] = logit_for_success(p, TOY_TEMPERATURE);
        theta.insert(s.id.clone(), row);
        strata.insert(s.id.clone(), stratum);
        success.insert(s.id.clone(), p);
        samples.push(s);
    }
    let dataset = Dataset::from_samples(samples).expect("toy ids are unique");
    let params = PolicyParams {
        theta,
        guidance_weight: guidance_for(TOY_HOPELESS_SUCCESS, TOY_GUIDED_SUCCESS, TOY_TEMPERATURE),
        exemplify_weight: 0.0,
    };
    let config = TrainConfig {
        rounds: TOY_ROUNDS,
        lr0: TOY_LR0,
        temperature: TOY_TEMPERATURE,
        hard_temperature: TOY_TEMPERATURE,
        strategy: Strategy::Replace,
        fewshot_mode: FewshotMode::Random,
        seed,
        dataset_path: Some("dataset.jsonl".into()),
        init_checkpoint: Some("checkpoint.json".into()),
        ..TrainConfig::default()
    };
    ToyBundle { dataset, checkpoint: Checkpoint::new(0, &params, seed), config, strata, success }
}

impl ToyBundle {
    pub fn params(&self) -> PolicyParams {
        self.checkpoint.params()
    }

    pub fn count(&self, stratum: Stratum) -> usize {
        self.strata.values().filter(|s| **s == stratum).count()
    }

    /// Dataset file contents, with a comment header describing the strata.
    pub fn dataset_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str("# Bundled toy tool-calling dataset, 200 samples.\n");
        out.push_str("# Unguided success probability at temperature 0.7 (set by checkpoint.json):\n");
        for (stratum, text) in [
            (Stratum::Recoverable, "1e-5, tools shared by 3 samples, guidance lifts it to about 0.7"),
            (Stratum::Unrecoverable, "1e-5, tool used by no other sample, so no exemplars exist"),
            (Stratum::Low, "0.02 to 0.10, tools shared by 5 samples"),
            (Stratum::High, "0.5 to 0.9, tools shared by 5 samples"),
        ] {
            let ids: Vec<&str> =
                self.strata.iter().filter(|(_, s)| **s == stratum).map(|(id, _)| id.as_str()).collect();
            out.push_str(&format!("#   {} ({}): {text}\n", stratum.name(), ids.len()));
            for chunk in ids.chunks(10) {
                out.push_str(&format!("#     {}\n", chunk.join(" ")));
            }
        }
        let mut body = Vec::new();
        write_dataset(&self.dataset, &mut body).expect("writing to memory");
        out.push_str(&String::from_utf8(body).expect("utf-8 json"));
        out
    }

    /// The three bundle files, by file name.
    pub fn files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dataset.jsonl", self.dataset_jsonl()),
            ("checkpoint.json", self.checkpoint.to_json() + "\n"),
            ("config.json", self.config.to_json() + "\n"),
        ]
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, text) in self.files() {
            fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}
