//! Named training arms and the desk-scale MNIST protocol, shared by the CLI
//! and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::nn::{Architecture, Model};
use crate::optim::{train, BaseOptimizer, LrScaling, TrainConfig, TrainOutcome};
use crate::perturb::{NoiseFamily, NoiseSpec};
use crate::rng::{derive_seed, Rng};

/// Uniform noise strength used for every plain SmoothOut arm.
pub const DEFAULT_A: f64 = 0.0375;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub batch_size: usize,
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub no_denoise: bool,
}

impl Arm {
    pub fn baseline(name: &str, batch_size: usize) -> Self {
        Arm { name: name.into(), batch_size, noise: None, no_denoise: false }
    }

    pub fn with_noise(name: &str, batch_size: usize, noise: NoiseSpec) -> Self {
        Arm { name: name.into(), batch_size, noise: Some(noise), no_denoise: false }
    }

    pub fn without_denoise(mut self) -> Self {
        self.no_denoise = true;
        self
    }
}

/// The seven arms of the uniform-vs-Gaussian comparison with their reference strengths.
pub fn noise_comparison_arms(batch_size: usize) -> Vec<Arm> {
    vec![
        Arm::baseline("baseline", batch_size),
        Arm::with_noise("uniform", batch_size, NoiseSpec::uniform(DEFAULT_A)),
        Arm::with_noise("gaussian", batch_size, NoiseSpec::gaussian(0.025)),
        Arm::with_noise("ada-uniform", batch_size, NoiseSpec::adaptive(NoiseFamily::Uniform, 0.15)),
        Arm::with_noise("ada-gaussian", batch_size, NoiseSpec::adaptive(NoiseFamily::Gaussian, 0.20)),
        Arm::with_noise("noise-only-uniform", batch_size, NoiseSpec::uniform(0.0001)).without_denoise(),
        Arm::with_noise("noise-only-gaussian", batch_size, NoiseSpec::gaussian(0.00015)).without_denoise(),
    ]
}

/// Fixed desk-scale protocol for the small-batch / large-batch comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub preset: String,
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub base_batch: usize,
    pub lrs_rule: LrScaling,
    pub sb_batch: usize,
    pub lb_batch: usize,
    /// Training samples used by the sharpness and sensitivity instruments.
    pub probe_samples: usize,
    pub sharpness_eps: f64,
    pub sharpness_runs: usize,
    pub sensitivity_grid: Vec<f64>,
    pub sensitivity_copies: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            preset: "mnist-mlp-desk".into(),
            epochs: 40,
            base_lr: 0.01,
            momentum: 0.9,
            base_batch: 64,
            lrs_rule: LrScaling::Sqrt,
            sb_batch: 64,
            lb_batch: 2048,
            probe_samples: 1024,
            sharpness_eps: 5e-4,
            sharpness_runs: 5,
            sensitivity_grid: vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05],
            sensitivity_copies: 16,
        }
    }
}

impl Protocol {
    pub fn architecture(&self, input_dim: usize, classes: usize) -> Result<Architecture> {
        Architecture::preset(&self.preset, input_dim, classes)
    }

    pub fn train_config(&self, arm: &Arm, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: arm.batch_size,
            epochs: self.epochs,
            optimizer: BaseOptimizer::SgdMomentum { lr: self.base_lr, momentum: self.momentum },
            lrs_rule: self.lrs_rule,
            base_batch: self.base_batch,
            noise: arm.noise,
            seed,
            ablation_no_denoise: arm.no_denoise,
        }
    }
}

/// Initial weights for `seed`; every arm run with the same seed starts here.
pub fn init_model(arch: Architecture, seed: u64) -> Result<Model> {
    Model::new(arch, &mut Rng::new(derive_seed(seed, "init")))
}

pub fn run_arm(arch: &Architecture, cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    let model = init_model(arch.clone(), cfg.seed)?;
    train(model, train_set, test_set, cfg)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
