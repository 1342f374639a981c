//! Row-major f64 arrays and the samplers that fill them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch { expected, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    /// Rank-1 tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Euclidean norm with compensated accumulation: each square is split into its
/// rounded value and exact error term (via FMA) and the running sum is kept in
/// Neumaier form, so the result is within about one ulp of `sqrt(sum x^2)`.
pub fn l2_norm(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in xs {
        let p = x * x;
        let perr = x.mul_add(x, -p);
        let t = sum + p;
        if sum.abs() >= p.abs() {
            comp += (sum - t) + p;
        } else {
            comp += (p - t) + sum;
        }
        sum = t;
        comp += perr;
    }
    (sum + comp).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `n` i.i.d. draws from U(lo, hi).
pub fn uniform_sample(rng: &mut Rng, lo: f64, hi: f64, n: usize) -> Result<Tensor> {
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo, hi });
    }
    Ok(Tensor::from_vec((0..n).map(|_| rng.uniform(lo, hi)).collect()))
}

/// `n` i.i.d. draws from N(mean, stddev²).
pub fn gaussian_sample(rng: &mut Rng, mean: f64, stddev: f64, n: usize) -> Result<Tensor> {
    if !(stddev >= 0.0) {
        return Err(Error::InvalidStddev(stddev));
    }
    Ok(Tensor::from_vec(
        (0..n).map(|_| mean + stddev * rng.standard_normal()).collect(),
    ))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}
