//! Parameter noise: sampling, filter-norm adaptation, and the
//! perturb/denoise pair wrapped around every gradient evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::rng::Rng;
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// U(-a, a) per coordinate.
    Uniform,
    /// N(0, a²) per coordinate.
    Gaussian,
    /// θᵢ = -wᵢ with probability a, else 0.
    DropoutBernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    Global,
    PerFilterNeuron,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub strength: f64,
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "default_grouping")]
    pub grouping: Grouping,
}

fn default_grouping() -> Grouping {
    Grouping::Global
}

impl NoiseSpec {
    pub fn uniform(a: f64) -> Self {
        NoiseSpec { family: NoiseFamily::Uniform, strength: a, adaptive: false, grouping: Grouping::Global }
    }

    pub fn gaussian(stddev: f64) -> Self {
        NoiseSpec { family: NoiseFamily::Gaussian, strength: stddev, adaptive: false, grouping: Grouping::Global }
    }

    pub fn dropout(p: f64) -> Self {
        NoiseSpec { family: NoiseFamily::DropoutBernoulli, strength: p, adaptive: false, grouping: Grouping::Global }
    }

    /// Filter/neuron-adaptive noise: each weight group is rescaled to norm `a·‖w‖`.
    pub fn adaptive(family: NoiseFamily, a: f64) -> Self {
        NoiseSpec { family, strength: a, adaptive: true, grouping: Grouping::PerFilterNeuron }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0) || !self.strength.is_finite() {
            return Err(Error::InvalidNoise(format!("strength must be finite and >= 0, got {}", self.strength)));
        }
        if self.family == NoiseFamily::DropoutBernoulli {
            if self.strength > 1.0 {
                return Err(Error::InvalidNoise(format!("drop probability {} > 1", self.strength)));
            }
            if self.adaptive {
                return Err(Error::InvalidNoise("dropout noise cannot be adaptive".into()));
            }
        }
        if self.adaptive && self.grouping != Grouping::PerFilterNeuron {
            return Err(Error::InvalidNoise("adaptive noise requires per-filter-neuron grouping".into()));
        }
        Ok(())
    }
}

/// Raw (unadapted) noise for the current parameters.
pub fn sample_noise(spec: &NoiseSpec, params: &ParamVector, rng: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let a = spec.strength;
    let w = params.values();
    let theta: Vec<f64> = match spec.family {
        NoiseFamily::Uniform if a == 0.0 => vec![0.0; w.len()],
        NoiseFamily::Uniform => (0..w.len()).map(|_| rng.uniform(-a, a)).collect(),
        NoiseFamily::Gaussian => (0..w.len()).map(|_| a * rng.standard_normal()).collect(),
        NoiseFamily::DropoutBernoulli => w.iter().map(|&wi| if rng.bernoulli(a) { -wi } else { 0.0 }).collect(),
    };
    Ok(Tensor::from_vec(theta))
}

/// Rescales each filter/neuron group of `theta` to norm `a·‖w⁽ⁱ⁾‖₂`.
///
/// Coordinates outside every group (biases) keep their raw noise. A group whose
/// raw noise or weights are all zero gets zero noise.
pub fn adapt_noise(theta: &Tensor, params: &ParamVector, a: f64) -> Result<Tensor> {
    if theta.len() != params.len() {
        return Err(Error::LengthMismatch { expected: params.len(), got: theta.len() });
    }
    let w = params.values();
    let mut out = theta.data().to_vec();
    for g in params.filter_groups() {
        let wn = l2_norm(&w[g.clone()]);
        let tn = l2_norm(&theta.data()[g.clone()]);
        let dst = &mut out[g.clone()];
        if tn == 0.0 || wn == 0.0 {
            dst.fill(0.0);
            continue;
        }
        let scale = a * wn / tn;
        for v in dst.iter_mut() {
            *v *= scale;
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Sample, then adapt when `spec.adaptive` is set.
pub fn draw_noise(spec: &NoiseSpec, params: &ParamVector, rng: &mut Rng) -> Result<Tensor> {
    let theta = sample_noise(spec, params, rng)?;
    if spec.adaptive {
        adapt_noise(&theta, params, spec.strength)
    } else {
        Ok(theta)
    }
}

/// Applied noise plus the exact pre-perturbation parameters.
#[derive(Clone, Debug)]
pub struct PerturbationRecord {
    pub theta: Tensor,
    pub snapshot: Tensor,
    version: u64,
    restored: bool,
}

impl PerturbationRecord {
    pub fn is_restored(&self) -> bool {
        self.restored
    }
}

/// `w ← w + θ`, remembering the old `w`.
pub fn perturb(params: &mut ParamVector, theta: &Tensor) -> Result<PerturbationRecord> {
    if theta.len() != params.len() {
        return Err(Error::LengthMismatch { expected: params.len(), got: theta.len() });
    }
    let snapshot = Tensor::from_vec(params.values().to_vec());
    for (w, t) in params.values_mut().iter_mut().zip(theta.data()) {
        *w += t;
    }
    Ok(PerturbationRecord { theta: theta.clone(), snapshot, version: params.version(), restored: false })
}

/// Restores the snapshot bit-for-bit. Fails if the parameters were written
/// after [`perturb`] or if the record was already used.
pub fn denoise(params: &mut ParamVector, record: &mut PerturbationRecord) -> Result<()> {
    if record.restored {
        return Err(Error::StaleRecord("record already used to denoise"));
    }
    if params.version() != record.version || params.len() != record.snapshot.len() {
        return Err(Error::StaleRecord("parameters changed since perturb"));
    }
    params.values_mut().copy_from_slice(record.snapshot.data());
    record.restored = true;
    Ok(())
}
