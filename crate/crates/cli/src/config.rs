//! Experiment configuration: JSON documents, flag overrides, and the fully
//! resolved settings echoed back into every summary.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use smoothout::data::{load_mnist_dir, synth_blobs, synth_patterns, Dataset, Normalization, Split};
use smoothout::optim::{BaseOptimizer, LrScaling, TrainConfig};
use smoothout::perturb::NoiseSpec;
use smoothout::rng::derive_seed;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX files (optionally gzipped) in `dir`.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
    },
    /// Synthetic data is drawn from its own `seed`, so runs that differ only
    /// in the experiment seed see the same samples.
    Blobs {
        n: usize,
        test_n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Patterns {
        n: usize,
        test_n: usize,
        classes: usize,
        side: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DataConfig {
    fn blobs_default() -> Self {
        DataConfig::Blobs { n: 1024, test_n: 512, classes: 4, dim: 8, separation: 3.0, seed: 0 }
    }

    /// Loads (train, test).
    pub fn load(&self) -> Result<(Dataset, Dataset), CliError> {
        match self {
            DataConfig::Mnist { dir, train_limit } => {
                let (train, test) = load_mnist_dir(dir)?;
                Ok((train_limit.map_or(train.clone(), |n| train.head(n)), test))
            }
            DataConfig::Blobs { n, test_n, classes, dim, separation, seed } => {
                let train = synth_blobs(*n, *classes, *dim, *separation, derive_seed(*seed, "data-train"))?;
                let mut test = synth_blobs(*test_n, *classes, *dim, *separation, derive_seed(*seed, "data-test"))?;
                test.split = Split::Test;
                let norm = Normalization::fit(&train);
                Ok((train.normalized(&norm)?, test.normalized(&norm)?))
            }
            DataConfig::Patterns { n, test_n, classes, side, noise, seed } => {
                // one template set; train and test differ only in the pixel noise
                let all = synth_patterns(n + test_n, *classes, *side, *noise, derive_seed(*seed, "data"))?;
                let (train, mut test) = all.split_at(*n);
                test.split = Split::Test;
                Ok((train, test))
            }
        }
    }
}

/// Flat, flag-friendly training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_optimizer")]
    pub optimizer: String,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_batch")]
    pub base_batch: usize,
    #[serde(default = "d_lrs")]
    pub lrs_rule: LrScaling,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub ablation_no_denoise: bool,
}

fn d_batch() -> usize {
    64
}
fn d_epochs() -> usize {
    10
}
fn d_optimizer() -> String {
    "sgd".into()
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_lrs() -> LrScaling {
    LrScaling::None
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => BaseOptimizer::SgdMomentum { lr: self.lr, momentum: self.momentum },
            "adam" => BaseOptimizer::adam(self.lr),
            other => return Err(CliError::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        };
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer,
            lrs_rule: self.lrs_rule,
            base_batch: self.base_batch,
            noise: self.noise,
            seed,
            ablation_no_denoise: self.ablation_no_denoise,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainExperiment {
    pub command: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_preset")]
    pub preset: String,
    #[serde(default = "d_data")]
    pub data: DataConfig,
    #[serde(default = "d_train")]
    pub train: TrainSettings,
}

fn d_preset() -> String {
    "mnist-mlp".into()
}
fn d_data() -> DataConfig {
    DataConfig::Mnist { dir: PathBuf::from("data/mnist"), train_limit: None }
}
fn d_train() -> TrainSettings {
    serde_json::from_value(json!({})).expect("all fields default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeCase {
    pub dim: usize,
    #[serde(default = "d_sharp_width")]
    pub sharp_width: f64,
    pub a: f64,
    /// Defaults to 0.9·a.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "d_tau")]
    pub tau: f64,
    /// Defaults to a/2.
    #[serde(default)]
    pub eps_prime: Option<f64>,
    #[serde(default = "d_grid")]
    pub grid: usize,
    /// Quadrature nodes per axis (m ≤ 3); defaults to 400, 100, 50 for m = 1, 2, 3.
    #[serde(default)]
    pub nodes: Option<usize>,
    /// Quadrature nodes per axis for each point of the flat-constraint grid,
    /// where the wide well needs far fewer.
    #[serde(default = "d_flat_nodes")]
    pub flat_nodes: usize,
    /// Monte Carlo samples.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default = "d_sweep")]
    pub sweep: Vec<f64>,
}

fn d_sharp_width() -> f64 {
    0.05
}
fn d_tau() -> f64 {
    0.5
}
fn d_grid() -> usize {
    11
}
fn d_flat_nodes() -> usize {
    16
}
fn d_samples() -> usize {
    20_000
}
fn d_sweep() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeExperiment {
    pub command: String,
    #[serde(default)]
    pub seed: u64,
    pub cases: Vec<LandscapeCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSettings {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessExperiment {
    pub command: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_preset")]
    pub preset: String,
    #[serde(default = "d_data")]
    pub data: DataConfig,
    /// Model under test (the sharp end of any interpolation).
    pub checkpoint: PathBuf,
    /// Optional second model; the interpolation runs from it to `checkpoint`.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_runs")]
    pub runs: usize,
    /// Training samples used by every instrument.
    #[serde(default = "d_probe")]
    pub probe_samples: usize,
    #[serde(default = "d_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "d_slice")]
    pub slice: SliceSettings,
    #[serde(default = "d_a_grid")]
    pub a_grid: Vec<f64>,
    #[serde(default = "d_copies")]
    pub copies: usize,
}

fn d_eps() -> f64 {
    5e-4
}
fn d_runs() -> usize {
    5
}
fn d_probe() -> usize {
    1024
}
fn d_alphas() -> Vec<f64> {
    (0..=20).map(|k| -0.5 + 0.1 * k as f64).collect()
}
fn d_slice() -> SliceSettings {
    SliceSettings { lo: -1.0, hi: 1.0, points: 21 }
}
fn d_a_grid() -> Vec<f64> {
    vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05]
}
fn d_copies() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareExperiment {
    pub command: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_seeds")]
    pub seeds: usize,
    #[serde(default = "d_preset")]
    pub preset: String,
    #[serde(default = "d_data")]
    pub data: DataConfig,
    #[serde(default = "d_train")]
    pub train: TrainSettings,
    /// Defaults to the seven reference arms at `train.batch_size`.
    #[serde(default)]
    pub arms: Option<Vec<smoothout::experiment::Arm>>,
}

fn d_seeds() -> usize {
    1
}

pub fn read_config(path: Option<&Path>, command: &str) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(json!({ "command": command }));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match v.get("command").and_then(Value::as_str) {
        Some(c) if c == command => Ok(v),
        Some(c) => Err(CliError::Config(format!("config is for `{c}`, not `{command}`"))),
        None => Err(CliError::Config("config must be an object with a `command` field".into())),
    }
}

/// Sets `value` at `path`, creating intermediate objects.
pub fn set(root: &mut Value, path: &[&str], value: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        if !cur.get(*key).is_some_and(Value::is_object) {
            cur[*key] = Value::Object(Map::new());
        }
        cur = &mut cur[*key];
    }
    cur[path[path.len() - 1]] = value;
}

pub fn resolve<T: DeserializeOwned>(v: Value) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

/// Interprets `--data`: `blobs`, `patterns`, or an MNIST directory.
pub fn data_from_flag(flag: &str) -> DataConfig {
    match flag {
        "blobs" => DataConfig::blobs_default(),
        "patterns" => DataConfig::Patterns { n: 512, test_n: 256, classes: 4, side: 8, noise: 0.5, seed: 0 },
        dir => DataConfig::Mnist { dir: PathBuf::from(dir), train_limit: None },
    }
}
