//! Base optimizers, the perturb → backprop → denoise → update step, the
//! training loop, and stochastic estimators of the smoothed loss.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{Model, ParamVector};
use crate::par;
use crate::perturb::{denoise, draw_noise, perturb, NoiseSpec};
use crate::rng::{derive_seed, mix64, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseOptimizer {
    /// `v ← μv + g; w ← w − ηv`. With μ = 0 this is plain SGD.
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl BaseOptimizer {
    pub fn sgd(lr: f64) -> Self {
        BaseOptimizer::SgdMomentum { lr, momentum: 0.0 }
    }

    pub fn adam(lr: f64) -> Self {
        BaseOptimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            BaseOptimizer::SgdMomentum { lr, .. } | BaseOptimizer::Adam { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        match *self {
            BaseOptimizer::SgdMomentum { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {momentum}")))
            }
            BaseOptimizer::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) =>
            {
                Err(Error::InvalidConfig("adam needs beta1, beta2 in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrScaling {
    None,
    Linear,
    Sqrt,
}

/// Learning rate for `batch` given a reference `(base_lr, base_batch)`.
pub fn scale_lr(base_lr: f64, base_batch: usize, batch: usize, rule: LrScaling) -> f64 {
    let ratio = batch as f64 / base_batch as f64;
    match rule {
        LrScaling::None => base_lr,
        LrScaling::Linear => base_lr * ratio,
        LrScaling::Sqrt => base_lr * ratio.sqrt(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: BaseOptimizer,
    #[serde(default = "default_lrs")]
    pub lrs_rule: LrScaling,
    /// Batch size at which `optimizer.lr` is the learning rate.
    pub base_batch: usize,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
    #[serde(default)]
    pub ablation_no_denoise: bool,
}

fn default_lrs() -> LrScaling {
    LrScaling::None
}

impl TrainConfig {
    pub fn sgd(batch_size: usize, epochs: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            batch_size,
            epochs,
            optimizer: BaseOptimizer::sgd(lr),
            lrs_rule: LrScaling::None,
            base_batch: batch_size,
            noise: None,
            seed,
            ablation_no_denoise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.base_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        self.optimizer.validate()?;
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        Ok(())
    }

    /// Learning rate after batch-size scaling, before any decay.
    pub fn scaled_lr(&self) -> f64 {
        scale_lr(self.optimizer.lr(), self.base_batch, self.batch_size, self.lrs_rule)
    }

    /// Scaled rate with the single ×0.1 decay from epoch ⌈0.8·epochs⌉ onward.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let lr = self.scaled_lr();
        if epoch >= decay_epoch(self.epochs) {
            lr * 0.1
        } else {
            lr
        }
    }

    pub fn noise_strength(&self) -> f64 {
        self.noise.map_or(0.0, |n| n.strength)
    }
}

fn decay_epoch(epochs: usize) -> usize {
    (epochs * 4).div_ceil(5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    /// Learning rate used by the next update.
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(params: usize, cfg: &TrainConfig) -> Self {
        let adam = matches!(cfg.optimizer, BaseOptimizer::Adam { .. });
        OptimizerState {
            velocity: if adam { Vec::new() } else { vec![0.0; params] },
            m: if adam { vec![0.0; params] } else { Vec::new() },
            v: if adam { vec![0.0; params] } else { Vec::new() },
            step: 0,
            lr: cfg.scaled_lr(),
        }
    }
}

/// Base-optimizer update of `w` with gradient `g`. Shared by every step, noisy or not.
pub fn apply_update(w: &mut [f64], g: &[f64], opt: &BaseOptimizer, state: &mut OptimizerState) {
    let lr = state.lr;
    state.step += 1;
    match *opt {
        BaseOptimizer::SgdMomentum { momentum, .. } => {
            if momentum == 0.0 {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= lr * gi;
                }
            } else {
                for ((wi, gi), vi) in w.iter_mut().zip(g).zip(state.velocity.iter_mut()) {
                    *vi = momentum * *vi + gi;
                    *wi -= lr * *vi;
                }
            }
        }
        BaseOptimizer::Adam { beta1, beta2, eps, .. } => {
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((wi, gi), mi), vi) in w.iter_mut().zip(g).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Loss at the perturbed point `w + θ`.
    pub loss: f64,
    /// Gradient at the perturbed point, as used by the update.
    pub grad: Vec<f64>,
    pub theta: Option<Tensor>,
}

/// Perturb, backprop, denoise and update with an explicit noise vector (`None` means no noise).
///
/// `loss_grad(w, grad)` must write ∇C(w) into `grad` and return C(w).
pub fn step_with_theta<F>(
    params: &mut ParamVector,
    theta: Option<Tensor>,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    mut loss_grad: F,
) -> Result<StepOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; params.len()];
    let mut record = match &theta {
        Some(t) => Some(perturb(params, t)?),
        None => None,
    };
    let loss = loss_grad(params.values(), &mut grad);
    if let Some(rec) = record.as_mut() {
        if !cfg.ablation_no_denoise {
            denoise(params, rec)?;
        }
    }
    let loss = loss?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: state.step as usize });
    }
    apply_update(params.values_mut(), &grad, &cfg.optimizer, state);
    Ok(StepOutcome { loss, grad, theta })
}

/// Draws θ per `cfg.noise` (if any) and runs [`step_with_theta`] on an arbitrary
/// differentiable objective.
pub fn smoothout_step_fn<F>(
    params: &mut ParamVector,
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    rng: &mut Rng,
    loss_grad: F,
) -> Result<StepOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let theta = match &cfg.noise {
        Some(spec) => Some(draw_noise(spec, params, rng)?),
        None => None,
    };
    step_with_theta(params, theta, cfg, state, loss_grad)
}

/// One perturb-backprop-denoise-update step on a network and one mini-batch.
pub fn smoothout_step(
    model: &mut Model,
    inputs: &[f64],
    labels: &[usize],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
    rng: &mut Rng,
) -> Result<StepOutcome> {
    let net = &model.net;
    smoothout_step_fn(&mut model.params, cfg, state, rng, |w, g| net.loss_grad_at(w, inputs, labels, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: u64,
    /// Mean perturbed-point loss over the epoch's batches.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub a: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
}

/// Seed of the shuffle for `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix64(derive_seed(seed, "shuffle") ^ epoch as u64)
}

/// Noise stream for the whole run; step `t` uses `noise_rng(seed).substream(t)`.
pub fn noise_rng(seed: u64) -> Rng {
    Rng::new(derive_seed(seed, "noise"))
}

/// Mini-batch training. Evaluation metrics are always taken at the clean
/// parameters on the full `test` set.
pub fn train(mut model: Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.feature_len() != model.input_len() {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} inputs, dataset has {}",
            model.input_len(),
            train.feature_len()
        )));
    }
    let mut state = OptimizerState::new(model.params.len(), cfg);
    let noise = noise_rng(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at_epoch(epoch);
        let lr = state.lr;
        let mut loss_sum = 0.0;
        for idx in batches(train.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch)) {
            let batch = train.gather(&idx)?;
            let mut rng = noise.substream(state.step);
            let out = smoothout_step(&mut model, batch.inputs.data(), &batch.labels, cfg, &mut state, &mut rng)?;
            loss_sum += out.loss * idx.len() as f64;
        }
        let eval = model.evaluate(test.inputs.data(), &test.labels)?;
        log.push(EpochMetrics {
            epoch,
            step: state.step,
            train_loss: loss_sum / train.len() as f64,
            test_loss: eval.mean_loss(),
            test_acc: eval.accuracy(),
            lr,
            a: cfg.noise_strength(),
        });
    }
    Ok(TrainOutcome { model, log })
}

pub const METRICS_HEADER: &str = "epoch,step,train_loss,test_loss,test_acc,lr,a";

pub fn write_metrics_csv<W: Write>(mut out: W, log: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in log {
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.epoch, r.step, r.train_loss, r.test_loss, r.test_acc, r.lr, r.a
        )?;
    }
    Ok(())
}

/// Mean and standard error of a sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    // shifted by the first sample, so a constant sample returns itself exactly
    let x0 = xs[0];
    let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `C̄(w) = E C(w + Θ)` by one fresh perturbation per evaluation of `f`.
/// Sample `i` uses `rng.substream(i)`.
pub fn estimate_smoothed_fn<F>(f: F, w: &[f64], noise: &NoiseSpec, samples: usize, rng: &Rng) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let params = ParamVector::flat(w.to_vec());
    estimate_on_params(&params, noise, samples, rng, |_, wp| Ok(f(wp)))
}

fn estimate_on_params<F>(params: &ParamVector, noise: &NoiseSpec, samples: usize, rng: &Rng, f: F) -> Result<(f64, f64)>
where
    F: Fn(usize, &[f64]) -> Result<f64> + Sync,
{
    noise.validate()?;
    if samples == 0 {
        return Err(Error::InvalidConfig("need at least one perturbation".into()));
    }
    let values = par::map_indexed(samples, |i| -> Result<f64> {
        let theta = draw_noise(noise, params, &mut rng.substream(i as u64))?;
        let wp: Vec<f64> = params.values().iter().zip(theta.data()).map(|(w, t)| w + t).collect();
        f(i, &wp)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(mean_stderr(&values))
}

/// Stochastic estimator: perturbation `i` is paired with data batch `i` of a
/// seeded cyclic pass over `dataset`, and the loss on that batch alone is
/// recorded. The parameters of `model` are never written.
pub fn estimate_smoothed_loss_stochastic(
    model: &Model,
    dataset: &Dataset,
    noise: &NoiseSpec,
    batches: usize,
    batch_size: usize,
    rng: &Rng,
) -> Result<(f64, f64)> {
    let n = dataset.len();
    if batch_size == 0 || n == 0 {
        return Err(Error::InvalidConfig("empty dataset or zero batch size".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(rng.seed() ^ rng.stream(), "batch-order")).shuffle(&mut order);
    let per_pass = n.div_ceil(batch_size);
    let noise_rng = rng.substream(u64::MAX);
    estimate_on_params(&model.params, noise, batches, &noise_rng, |i, wp| {
        let k = i % per_pass;
        let idx = &order[k * batch_size..((k + 1) * batch_size).min(n)];
        let b = dataset.gather(idx)?;
        model.loss_at(wp, b.inputs.data(), &b.labels)
    })
}

/// The N-copy average `(1/N) Σⱼ C(w + θⱼ)` with `C` the full-dataset loss.
pub fn smoothed_loss_n_copies(model: &Model, dataset: &Dataset, noise: &NoiseSpec, copies: usize, rng: &Rng) -> Result<(f64, f64)> {
    let x = dataset.inputs.data();
    estimate_on_params(&model.params, noise, copies, rng, |_, wp| model.loss_at(wp, x, &dataset.labels))
}
