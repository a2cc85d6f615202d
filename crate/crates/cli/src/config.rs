//! Experiment configuration: one JSON document with strict keys, plus
//! `key.path=value` overrides applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tcsis_core::energy::IsingModel;
use tcsis_core::kernel::NoiseSchedule;
use tcsis_core::mcmc::ChainSampler;
use tcsis_core::rng::derive_seed;
use tcsis_core::training::TrainConfig;

use crate::error::{user, CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Ising,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub model: ModelKind,
    #[serde(rename = "L", default = "default_side")]
    pub side: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "yes")]
    pub periodic: bool,
}

fn default_side() -> usize {
    4
}
fn default_beta() -> f64 {
    0.4407
}
fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { model: ModelKind::Ising, side: default_side(), beta: default_beta(), periodic: true }
    }
}

impl ModelConfig {
    pub fn ising(side: usize, beta: f64) -> Self {
        Self { side, beta, ..Self::default() }
    }

    pub fn build(&self) -> CliResult<IsingModel> {
        match self.model {
            ModelKind::Ising => Ok(IsingModel::new(self.side, self.beta, self.periodic)?),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Geometric {
        #[serde(default = "default_eps")]
        eps_uniform: f64,
        #[serde(default = "default_a_min")]
        a_min: f64,
        #[serde(rename = "T", default = "one")]
        horizon: f64,
    },
    Constant {
        sigma: f64,
        #[serde(rename = "T", default = "one")]
        horizon: f64,
    },
}

fn default_eps() -> f64 {
    1e-3
}
fn default_a_min() -> f64 {
    1e-3
}
fn one() -> f64 {
    1.0
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Geometric { eps_uniform: default_eps(), a_min: default_a_min(), horizon: one() }
    }
}

impl ScheduleConfig {
    pub fn build(&self, vocab: usize) -> CliResult<NoiseSchedule> {
        Ok(match *self {
            ScheduleConfig::Geometric { eps_uniform, a_min, horizon } => {
                NoiseSchedule::geometric(vocab, eps_uniform, a_min, horizon)?
            }
            ScheduleConfig::Constant { sigma, horizon } => NoiseSchedule::constant(sigma, horizon)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    /// Defaults to 24 steps up to L = 4 and 64 beyond.
    #[serde(default)]
    pub n_steps: Option<usize>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    /// `oracle`, `mc:N`, or a checkpoint path.
    #[serde(default = "default_source")]
    pub source: String,
    /// Sample with the moving-average weights of a checkpoint.
    #[serde(default = "yes")]
    pub use_ema: bool,
    /// Share forward draws across the marginals of one Monte-Carlo score.
    #[serde(default)]
    pub common_random_numbers: bool,
}

fn default_samples() -> usize {
    10_000
}
fn default_source() -> String {
    "oracle".into()
}

impl Default for SamplerBlock {
    fn default() -> Self {
        Self {
            n_steps: None,
            n_samples: default_samples(),
            source: default_source(),
            use_ema: true,
            common_random_numbers: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcBlock {
    #[serde(default = "default_chain_steps")]
    pub n_steps: usize,
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default = "default_chain_sampler")]
    pub sampler: ChainSampler,
}

fn default_chain_steps() -> usize {
    10_000
}
fn default_chains() -> usize {
    10_000
}
fn default_chain_sampler() -> ChainSampler {
    ChainSampler::Glauber
}

impl Default for McmcBlock {
    fn default() -> Self {
        Self { n_steps: default_chain_steps(), n_chains: default_chains(), burn_in: 0, sampler: default_chain_sampler() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "TrainConfig::self_normalized_l4")]
    pub train: TrainConfig,
    /// Density-head training used by `reproduce` alongside `train`.
    #[serde(default = "TrainConfig::unbiased_l4")]
    pub train_unbiased: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub mcmc: McmcBlock,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output() -> PathBuf {
    PathBuf::from("tcsis-out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("defaults deserialize")
    }
}

/// Component seeds derived from the master seed.
pub enum SeedRole {
    Train = 1,
    Sampler = 2,
    Mcmc = 3,
    Estimator = 4,
    TrainUnbiased = 5,
    Baseline = 6,
}

impl ExperimentConfig {
    pub fn seed_for(&self, role: SeedRole) -> u64 {
        derive_seed(self.seed, &[role as u64])
    }

    pub fn sampler_steps(&self) -> usize {
        self.sampler
            .n_steps
            .unwrap_or_else(|| tcsis_core::sampler::SamplerConfig::default_steps(self.model.side()))
    }

    /// Training block with its seed taken from the master seed.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed_for(SeedRole::Train);
        t
    }
}

/// Sets `a.b.c = value` inside a JSON object, creating intermediate objects.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        return user(format!("override `{assignment}` is not of the form key.path=value"));
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return user(format!("override key `{path}` has an empty segment"));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let Value::Object(map) = node else {
            return user(format!("override key `{path}` descends into a non-object"));
        };
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let Value::Object(map) = node else {
        return user(format!("override key `{path}` descends into a non-object"));
    };
    let last = keys[keys.len() - 1];
    if last == "kind" && map.get("kind").is_some_and(|k| *k != value) {
        map.clear();
    }
    map.insert(last.to_string(), value);
    Ok(())
}

/// Recursively lays `top` over `base`. Objects tagged with a different `kind`
/// replace the base object instead of merging into it.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            if t.get("kind").is_some_and(|k| b.get("kind").is_some_and(|bk| bk != k)) {
                *b = t;
                return;
            }
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, top) => *slot = top,
    }
}

/// Reads `path` (or starts from an empty document), lays it over the defaults,
/// applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String], base: Option<Value>) -> CliResult<ExperimentConfig> {
    let root = match (path, base) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::User(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::User(format!("malformed config {}: {e}", p.display())))?
        }
        (None, Some(b)) => b,
        (None, None) => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return user("config must be a JSON object");
    }
    let mut full = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    merge(&mut full, root);
    for o in overrides {
        apply_override(&mut full, o)?;
    }
    let root = full;
    let cfg: ExperimentConfig =
        serde_json::from_value(root).map_err(|e| CliError::User(format!("invalid config: {e}")))?;
    cfg.train.validate()?;
    cfg.train_unbiased.validate()?;
    cfg.model.build()?;
    Ok(cfg)
}
