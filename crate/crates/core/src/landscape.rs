//! Analytic loss surfaces with known flat and sharp minima, box-smoothing
//! estimators of `C̄(w; a)`, and numerical checks of the flat/sharp
//! constraints and the high-dimension lower bound.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::CHUNK;
use crate::par;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub center: Vec<f64>,
    pub depth: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Surface {
    /// `1 − A_f·exp(−‖w−c_f‖²/2σ_f²) − A_s·exp(−‖w−c_s‖²/2σ_s²)`
    TwoWell { flat: Well, sharp: Well },
    /// `scale·‖w − center‖²`
    Quadratic { center: Vec<f64>, scale: f64 },
    Constant { value: f64 },
    /// `1 − exp(−Σ q(wᵢ − cᵢ))` with width `left` below the center and `right` above.
    Skewed { center: Vec<f64>, left: f64, right: f64 },
    /// `Σ αₖ fₖ`
    Combination { terms: Vec<(f64, LandscapeFn)> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MinimumKind {
    Flat,
    Sharp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Minimum {
    pub location: Vec<f64>,
    pub kind: MinimumKind,
    /// Width scale of the basin.
    pub half_width: f64,
    /// Half-width of the box in which the surface is symmetric about `location`.
    pub symmetry_half_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeFn {
    pub dim: usize,
    pub surface: Surface,
    pub minima: Vec<Minimum>,
}

fn dist2(w: &[f64], c: &[f64]) -> f64 {
    w.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl LandscapeFn {
    pub fn quadratic(dim: usize, scale: f64) -> Self {
        let center = vec![0.0; dim];
        LandscapeFn {
            dim,
            surface: Surface::Quadratic { center: center.clone(), scale },
            minima: vec![Minimum { location: center, kind: MinimumKind::Flat, half_width: f64::INFINITY, symmetry_half_width: f64::INFINITY }],
        }
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        LandscapeFn { dim, surface: Surface::Constant { value }, minima: Vec::new() }
    }

    /// Asymmetric single well centred at the origin.
    pub fn skewed(dim: usize, left: f64, right: f64) -> Self {
        let center = vec![0.0; dim];
        LandscapeFn {
            dim,
            surface: Surface::Skewed { center: center.clone(), left, right },
            minima: vec![Minimum { location: center, kind: MinimumKind::Flat, half_width: left.min(right), symmetry_half_width: 0.0 }],
        }
    }

    pub fn combination(terms: Vec<(f64, LandscapeFn)>) -> Result<Self> {
        let dim = terms.first().map_or(0, |t| t.1.dim);
        if terms.iter().any(|t| t.1.dim != dim) {
            return Err(Error::InvalidGeometry("combined surfaces must share a dimension".into()));
        }
        Ok(LandscapeFn { dim, surface: Surface::Combination { terms }, minima: Vec::new() })
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        match &self.surface {
            Surface::TwoWell { flat, sharp } => {
                1.0 - flat.depth * (-dist2(w, &flat.center) / (2.0 * flat.width * flat.width)).exp()
                    - sharp.depth * (-dist2(w, &sharp.center) / (2.0 * sharp.width * sharp.width)).exp()
            }
            Surface::Quadratic { center, scale } => scale * dist2(w, center),
            Surface::Constant { value } => *value,
            Surface::Skewed { center, left, right } => {
                let q: f64 = w
                    .iter()
                    .zip(center)
                    .map(|(x, c)| {
                        let d = x - c;
                        let s = if d < 0.0 { *left } else { *right };
                        d * d / (2.0 * s * s)
                    })
                    .sum();
                1.0 - (-q).exp()
            }
            Surface::Combination { terms } => terms.iter().map(|(c, f)| c * f.value(w)).sum(),
        }
    }

    /// Writes ∇C(w) into `grad` and returns C(w).
    pub fn value_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        match &self.surface {
            Surface::TwoWell { flat, sharp } => {
                grad.fill(0.0);
                let mut v = 1.0;
                for well in [flat, sharp] {
                    let s2 = well.width * well.width;
                    let e = well.depth * (-dist2(w, &well.center) / (2.0 * s2)).exp();
                    v -= e;
                    for ((g, x), c) in grad.iter_mut().zip(w).zip(&well.center) {
                        *g += e * (x - c) / s2;
                    }
                }
                v
            }
            Surface::Quadratic { center, scale } => {
                for ((g, x), c) in grad.iter_mut().zip(w).zip(center) {
                    *g = 2.0 * scale * (x - c);
                }
                self.value(w)
            }
            Surface::Constant { value } => {
                grad.fill(0.0);
                *value
            }
            Surface::Skewed { center, left, right } => {
                let v = self.value(w);
                let e = 1.0 - v;
                for ((g, x), c) in grad.iter_mut().zip(w).zip(center) {
                    let d = x - c;
                    let s = if d < 0.0 { *left } else { *right };
                    *g = e * d / (s * s);
                }
                v
            }
            Surface::Combination { terms } => {
                grad.fill(0.0);
                let mut tmp = vec![0.0; grad.len()];
                let mut v = 0.0;
                for (c, f) in terms {
                    v += c * f.value_grad(w, &mut tmp);
                    for (g, t) in grad.iter_mut().zip(&tmp) {
                        *g += c * t;
                    }
                }
                v
            }
        }
    }

    /// Checks by sampling that every declared minimum is a local minimum.
    pub fn verify_minima(&self, rng: &mut Rng, samples: usize) -> bool {
        self.minima.iter().all(|m| {
            let c = self.value(&m.location);
            let r = 0.1 * m.half_width.min(1.0);
            (0..samples).all(|_| {
                let p: Vec<f64> = m.location.iter().map(|x| x + rng.uniform(-r, r)).collect();
                self.value(&p) >= c
            })
        })
    }
}

/// Two Gaussian wells; fails unless the sharp well is narrower and the wells are well separated.
pub fn make_two_well(dim: usize, flat: Well, sharp: Well) -> Result<LandscapeFn> {
    if dim == 0 || flat.center.len() != dim || sharp.center.len() != dim {
        return Err(Error::InvalidGeometry(format!("centers must have dimension {dim}")));
    }
    if !(flat.width > 0.0 && sharp.width > 0.0 && flat.depth > 0.0 && sharp.depth > 0.0) {
        return Err(Error::InvalidGeometry("widths and depths must be positive".into()));
    }
    if !(sharp.width < flat.width) {
        return Err(Error::InvalidGeometry("the sharp well must be narrower than the flat one".into()));
    }
    let min_sep = 3.0 * (flat.width + sharp.width);
    let sep = flat
        .center
        .iter()
        .zip(&sharp.center)
        .map(|(a, b)| (a - b).abs())
        .fold(f64::INFINITY, f64::min);
    if !(sep > min_sep) {
        return Err(Error::InvalidGeometry(format!("per-coordinate separation {sep} must exceed {min_sep}")));
    }
    let minima = vec![
        Minimum { location: flat.center.clone(), kind: MinimumKind::Flat, half_width: flat.width, symmetry_half_width: sep / 2.0 },
        Minimum { location: sharp.center.clone(), kind: MinimumKind::Sharp, half_width: sharp.width, symmetry_half_width: sep / 2.0 },
    ];
    Ok(LandscapeFn { dim, surface: Surface::TwoWell { flat, sharp }, minima })
}

/// Unit-depth wells with σ_f = 1 and σ_s = `sharp_width`, centred at −3·1 and +3·1.
pub fn two_well_preset(dim: usize, sharp_width: f64) -> Result<LandscapeFn> {
    make_two_well(
        dim,
        Well { center: vec![-3.0; dim], depth: 1.0, width: 1.0 },
        Well { center: vec![3.0; dim], depth: 1.0, width: sharp_width },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Quadrature,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedEstimate {
    pub value: f64,
    /// Sample standard error (Monte Carlo) or discretization estimate (quadrature).
    pub stderr: f64,
    pub method: Method,
    /// Samples, or nodes per axis.
    pub budget: usize,
}

pub const MAX_QUADRATURE_DIM: usize = 3;

fn midpoint_mean<F>(f: &F, w: &[f64], a: f64, n: usize) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let m = w.len();
    let node = |axis: usize, j: usize| w[axis] - a + a * (2 * j + 1) as f64 / n as f64;
    let inner = n.pow(m as u32 - 1);
    let rows = par::map_indexed(n, |i| {
        let mut p = w.to_vec();
        p[0] = node(0, i);
        let mut sum = 0.0;
        for k in 0..inner {
            let mut rest = k;
            for axis in 1..m {
                p[axis] = node(axis, rest % n);
                rest /= n;
            }
            sum += f(&p);
        }
        sum
    });
    rows.iter().sum::<f64>() / n.pow(m as u32) as f64
}

/// Smoothed value of an arbitrary function over the box `D(w, a)`.
///
/// Quadrature uses `budget` midpoint nodes per axis and reports
/// `|Q_n − Q_{n/2}|/3` as its error. Monte Carlo draws sample `i` from chunk
/// substream `i / CHUNK`, so two calls with the same `rng` at different `w` use
/// the same offsets.
pub fn smooth<F>(f: F, w: &[f64], a: f64, method: Method, budget: usize, rng: &Rng) -> Result<SmoothedEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !(a >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise strength must be >= 0, got {a}")));
    }
    if method == Method::Quadrature && w.len() > MAX_QUADRATURE_DIM {
        return Err(Error::DimensionTooHigh(w.len()));
    }
    if a == 0.0 {
        return Ok(SmoothedEstimate { value: f(w), stderr: 0.0, method, budget });
    }
    match method {
        Method::Quadrature => {
            if budget < 2 {
                return Err(Error::InvalidConfig("quadrature needs at least 2 nodes per axis".into()));
            }
            let fine = midpoint_mean(&f, w, a, budget);
            let coarse = midpoint_mean(&f, w, a, budget / 2);
            Ok(SmoothedEstimate { value: fine, stderr: (fine - coarse).abs() / 3.0, method, budget })
        }
        Method::MonteCarlo => {
            if budget < 2 {
                return Err(Error::InvalidConfig("monte carlo needs at least 2 samples".into()));
            }
            let chunks = budget.div_ceil(CHUNK);
            let values: Vec<f64> = par::map_indexed(chunks, |c| {
                let mut r = rng.substream(c as u64);
                let mut p = vec![0.0; w.len()];
                let len = CHUNK.min(budget - c * CHUNK);
                (0..len)
                    .map(|_| {
                        for (pi, wi) in p.iter_mut().zip(w) {
                            *pi = wi + r.uniform(-a, a);
                        }
                        f(&p)
                    })
                    .collect::<Vec<f64>>()
            })
            .concat();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            Ok(SmoothedEstimate { value: mean, stderr: (var / n).sqrt(), method, budget })
        }
    }
}

/// `C̄(w; a) = E C(w + Θ)`, Θ ~ U(−a, a)^m.
pub fn eval_smoothed(f: &LandscapeFn, w: &[f64], a: f64, method: Method, budget: usize, rng: &Rng) -> Result<SmoothedEstimate> {
    if w.len() != f.dim {
        return Err(Error::LengthMismatch { expected: f.dim, got: w.len() });
    }
    smooth(|p| f.value(p), w, a, method, budget, rng)
}

fn auto_method(dim: usize) -> Method {
    if dim <= MAX_QUADRATURE_DIM {
        Method::Quadrature
    } else {
        Method::MonteCarlo
    }
}

/// Relative rounding allowance when comparing quantities of magnitude `scale`.
fn fp_slack(scale: f64) -> f64 {
    8.0 * f64::EPSILON * scale.abs().max(1.0)
}

fn grid_points(center: &[f64], half: f64, per_axis: usize) -> Vec<Vec<f64>> {
    let m = center.len();
    let coord = |j: usize| {
        if per_axis == 1 {
            0.0
        } else {
            -half + 2.0 * half * j as f64 / (per_axis - 1) as f64
        }
    };
    (0..per_axis.pow(m as u32))
        .map(|mut k| {
            center
                .iter()
                .map(|c| {
                    let j = k % per_axis;
                    k /= per_axis;
                    c + coord(j)
                })
                .collect()
        })
        .collect()
}

/// max of C over `D(center, half)`: corners (m ≤ 16), a grid for m ≤ 3, and random points.
pub fn box_max(f: &LandscapeFn, center: &[f64], half: f64, rng: &Rng) -> f64 {
    let m = center.len();
    let mut best = f.value(center);
    if m <= 16 {
        for mask in 0u32..(1 << m) {
            let p: Vec<f64> = center.iter().enumerate().map(|(i, c)| if mask >> i & 1 == 1 { c + half } else { c - half }).collect();
            best = best.max(f.value(&p));
        }
    }
    if m <= MAX_QUADRATURE_DIM {
        for p in grid_points(center, half, 41) {
            best = best.max(f.value(&p));
        }
    }
    let mut r = rng.substream(u64::MAX - 1);
    for _ in 0..256 {
        let p: Vec<f64> = center.iter().map(|c| c + r.uniform(-half, half)).collect();
        best = best.max(f.value(&p));
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxMin {
    pub value: f64,
    pub stderr: f64,
    pub at: Vec<f64>,
}

/// min of C̄ over `D(center, half)` among the center, the 2m face centers and
/// eight random points, all estimated with common random numbers.
pub fn smoothed_box_min(f: &LandscapeFn, center: &[f64], half: f64, a: f64, budget: usize, rng: &Rng) -> Result<BoxMin> {
    let m = center.len();
    let mut candidates = vec![center.to_vec()];
    for i in 0..m {
        for s in [-1.0, 1.0] {
            let mut p = center.to_vec();
            p[i] += s * half;
            candidates.push(p);
        }
    }
    let mut r = rng.substream(u64::MAX - 2);
    for _ in 0..8 {
        candidates.push(center.iter().map(|c| c + r.uniform(-half, half)).collect());
    }
    let mut best: Option<BoxMin> = None;
    for p in candidates {
        let e = eval_smoothed(f, &p, a, Method::MonteCarlo, budget, rng)?;
        if best.as_ref().map_or(true, |b| e.value < b.value) {
            best = Some(BoxMin { value: e.value, stderr: e.stderr, at: p });
        }
    }
    Ok(best.expect("center is always a candidate"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatCheck {
    pub a: f64,
    pub tau: f64,
    pub argmin: Vec<f64>,
    /// ‖argmin − w_f‖∞
    pub deviation: f64,
    pub spacing: f64,
    pub min_value: f64,
    pub method: Method,
    pub pass: bool,
}

/// Grid-minimizes C̄ over `D(w_f, τ)` with `grid` points per axis.
pub fn check_flat_constraint(
    f: &LandscapeFn,
    w_f: &[f64],
    a: f64,
    tau: f64,
    grid: usize,
    budget: usize,
    rng: &Rng,
) -> Result<FlatCheck> {
    if !(tau > a) || grid < 2 {
        return Err(Error::InvalidConfig(format!("need tau > a and grid >= 2, got tau={tau}, a={a}, grid={grid}")));
    }
    let method = auto_method(f.dim);
    let spacing = 2.0 * tau / (grid - 1) as f64;
    let mut best = (f64::INFINITY, w_f.to_vec());
    for p in grid_points(w_f, tau, grid) {
        let v = eval_smoothed(f, &p, a, method, budget, rng)?.value;
        if v < best.0 {
            best = (v, p);
        }
    }
    let deviation = best.1.iter().zip(w_f).map(|(x, c)| (x - c).abs()).fold(0.0, f64::max);
    Ok(FlatCheck {
        a,
        tau,
        deviation,
        spacing,
        min_value: best.0,
        argmin: best.1,
        method,
        pass: deviation <= spacing * (1.0 + 1e-9),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpCheck {
    pub a: f64,
    pub eps: f64,
    pub tau: f64,
    /// min over D(w_s, ε) of C̄
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// max over D(w_s, ε) of C
    pub mid: f64,
    /// min over D(w_f, τ) of C̄
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub margin: f64,
    pub pass: bool,
}

/// `min_{D(w_s,ε)} C̄ ≥ max_{D(w_s,ε)} C > min_{D(w_f,τ)} C̄`, judged with 3σ
/// error bars: the first inequality may hold within error, the second must hold
/// beyond it.
#[allow(clippy::too_many_arguments)]
pub fn check_sharp_constraint(
    f: &LandscapeFn,
    w_s: &[f64],
    w_f: &[f64],
    a: f64,
    eps: f64,
    tau: f64,
    budget: usize,
    rng: &Rng,
) -> Result<SharpCheck> {
    let lhs = smoothed_box_min(f, w_s, eps, a, budget, rng)?;
    let mid = box_max(f, w_s, eps, rng);
    let rhs = smoothed_box_min(f, w_f, tau, a, budget, rng)?;
    let first = lhs.value + 3.0 * lhs.stderr + fp_slack(mid) >= mid;
    let second = mid - rhs.value > 3.0 * rhs.stderr;
    Ok(SharpCheck {
        a,
        eps,
        tau,
        lhs: lhs.value,
        lhs_stderr: lhs.stderr,
        mid,
        rhs: rhs.value,
        rhs_stderr: rhs.stderr,
        margin: lhs.value - mid,
        pass: first && second,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCheck {
    pub m: usize,
    pub a: f64,
    pub eps_prime: f64,
    /// C̄(w_s), the minimum of C̄ near w_s
    pub lhs: f64,
    pub lhs_error: f64,
    /// max of C over D(w_s, ε′)
    pub c_eps: f64,
    pub c_ws: f64,
    /// (ε′/a)^m
    pub ratio_pow: f64,
    pub bound: f64,
    pub method: Method,
    pub pass: bool,
}

/// `C̄(w_s) ≥ (1 − (ε′/a)^m)·C_{ε′} + (ε′/a)^m·C(w_s)`; quadrature for m ≤ 3
/// (tolerance = its error estimate), Monte Carlo above (3σ).
pub fn check_lower_bound(f: &LandscapeFn, w_s: &[f64], a: f64, eps_prime: f64, budget: usize, rng: &Rng) -> Result<LowerBoundCheck> {
    if !(0.0 <= eps_prime && eps_prime < a) {
        return Err(Error::InvalidConfig(format!("need 0 <= eps' < a, got eps'={eps_prime}, a={a}")));
    }
    let m = f.dim;
    let method = auto_method(m);
    let est = eval_smoothed(f, w_s, a, method, budget, rng)?;
    let c_eps = box_max(f, w_s, eps_prime, rng);
    let c_ws = f.value(w_s);
    let ratio_pow = (eps_prime / a).powi(m as i32);
    let bound = (1.0 - ratio_pow) * c_eps + ratio_pow * c_ws;
    let tol = match method {
        Method::Quadrature => est.stderr,
        Method::MonteCarlo => 3.0 * est.stderr,
    };
    Ok(LowerBoundCheck {
        m,
        a,
        eps_prime,
        lhs: est.value,
        lhs_error: est.stderr,
        c_eps,
        c_ws,
        ratio_pow,
        bound,
        method,
        pass: est.value >= bound - tol - fp_slack(bound),
    })
}

/// Least-squares slope of `values` against `xs`.
pub fn ls_slope(xs: &[f64], values: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = values.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(values).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn validate_a_grid(a_grid: &[f64]) -> Result<()> {
    if a_grid.len() < 2 || a_grid[0] != 0.0 || a_grid.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::InvalidConfig("a-grid must start at 0 and increase strictly".into()));
    }
    Ok(())
}

/// Sensitivity `s`: fitted slope of C̄(w*; a) over `a_grid`, plus the per-a estimates.
pub fn sensitivity_metric(
    f: &LandscapeFn,
    w_star: &[f64],
    a_grid: &[f64],
    budget: usize,
    rng: &Rng,
) -> Result<(f64, Vec<SmoothedEstimate>)> {
    validate_a_grid(a_grid)?;
    let method = auto_method(f.dim);
    let ests = a_grid
        .iter()
        .map(|&a| eval_smoothed(f, w_star, a, method, budget, rng))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = ests.iter().map(|e| e.value).collect();
    Ok((ls_slope(a_grid, &values), ests))
}

pub const SWEEP_HEADER: &str = "a,value,stderr,method";

pub fn write_sweep_csv<W: Write>(mut out: W, a_grid: &[f64], ests: &[SmoothedEstimate]) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for (a, e) in a_grid.iter().zip(ests) {
        let m = match e.method {
            Method::Quadrature => "quadrature",
            Method::MonteCarlo => "monte-carlo",
        };
        writeln!(out, "{:.16e},{:.16e},{:.16e},{m}", a, e.value, e.stderr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn square() -> LandscapeFn {
        LandscapeFn::quadratic(1, 1.0)
    }

    #[test]
    fn two_well_values() {
        let f = two_well_preset(1, 0.05).unwrap();
        assert!(f.value(&[-3.0]).abs() < 0.005);
        assert!(f.value(&[3.0]).abs() < 0.005);
        // the flat well still contributes exp(-4.5) at the midpoint
        assert!((f.value(&[0.0]) - (1.0 - (-4.5f64).exp())).abs() < 1e-12);
        assert_eq!((f.value(&[0.0]) * 100.0).round() / 100.0, 0.99);
        assert!(f.verify_minima(&mut Rng::new(1), 200));
    }

    #[test]
    fn two_well_gradient_vanishes_at_centers_and_matches_differences() {
        let f = two_well_preset(2, 0.05).unwrap();
        let h = 1e-6;
        for c in [[-3.0, -3.0], [3.0, 3.0]] {
            for i in 0..2 {
                let (mut p, mut q) = (c, c);
                p[i] += h;
                q[i] -= h;
                assert!(((f.value(&p) - f.value(&q)) / (2.0 * h)).abs() < 1e-10);
            }
        }
        let w = [2.97, 3.02];
        let mut g = [0.0; 2];
        f.value_grad(&w, &mut g);
        for i in 0..2 {
            let (mut p, mut q) = (w, w);
            p[i] += h;
            q[i] -= h;
            let fd = (f.value(&p) - f.value(&q)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn two_well_is_symmetric_about_its_centers() {
        let f = two_well_preset(1, 0.05).unwrap();
        for d in [0.01, 0.04, 0.2, 0.9] {
            // only the flat well's far tail breaks the reflection
            let tail = (-(6.0 - d) * (6.0 - d) / 2.0f64).exp();
            assert!((f.value(&[3.0 + d]) - f.value(&[3.0 - d])).abs() <= tail, "sharp, d={d}");
            assert!((f.value(&[-3.0 + d]) - f.value(&[-3.0 - d])).abs() < 1e-12, "flat, d={d}");
        }
    }

    #[test]
    fn geometry_is_validated() {
        let w = |c: f64, s: f64| Well { center: vec![c], depth: 1.0, width: s };
        assert!(matches!(make_two_well(1, w(0.0, 1.0), w(1.0, 0.05)), Err(Error::InvalidGeometry(_))));
        assert!(matches!(make_two_well(1, w(-3.0, 0.05), w(3.0, 1.0)), Err(Error::InvalidGeometry(_))));
        assert!(make_two_well(1, w(-3.0, 1.0), w(3.0, 0.05)).is_ok());
    }

    #[test]
    fn smoothed_square_is_the_second_moment() {
        let q = eval_smoothed(&square(), &[0.0], 0.3, Method::Quadrature, 10_000, &Rng::new(0)).unwrap();
        assert!((q.value - 0.03).abs() < 1e-6);
        assert!(q.stderr < 1e-8);
        let mc = eval_smoothed(&square(), &[0.0], 0.3, Method::MonteCarlo, 10_000, &Rng::new(3)).unwrap();
        assert!((mc.value - 0.03).abs() < 3.0 * mc.stderr);
    }

    #[test]
    fn zero_width_returns_the_point_value() {
        let f = two_well_preset(2, 0.05).unwrap();
        let w = [2.9, 3.1];
        for m in [Method::Quadrature, Method::MonteCarlo] {
            let e = eval_smoothed(&f, &w, 0.0, m, 100, &Rng::new(0)).unwrap();
            assert_eq!(e.value, f.value(&w));
        }
    }

    #[test]
    fn quadrature_rejects_high_dimension() {
        let f = LandscapeFn::quadratic(4, 1.0);
        assert!(matches!(
            eval_smoothed(&f, &[0.0; 4], 0.1, Method::Quadrature, 10, &Rng::new(0)),
            Err(Error::DimensionTooHigh(4))
        ));
    }

    #[test]
    fn needle_is_washed_out() {
        let f = two_well_preset(1, 0.05).unwrap();
        let e = eval_smoothed(&f, &[3.0], 0.2, Method::Quadrature, 4000, &Rng::new(0)).unwrap();
        assert!(e.value - f.value(&[3.0]) >= 0.5);
    }

    #[test]
    fn smoothing_grows_with_a_at_minima() {
        for dim in [1, 2] {
            let f = two_well_preset(dim, 0.05).unwrap();
            for m in &f.minima {
                let mut prev = f64::NEG_INFINITY;
                for a in [0.0, 0.05, 0.1, 0.2, 0.3, 0.5] {
                    let e = eval_smoothed(&f, &m.location, a, Method::Quadrature, 200, &Rng::new(0)).unwrap();
                    assert!(e.value + e.stderr >= prev, "{dim} {a}");
                    prev = e.value;
                }
            }
        }
    }

    #[test]
    fn quadrature_and_monte_carlo_agree() {
        let f = two_well_preset(2, 0.05).unwrap();
        for w in [[3.0, 3.0], [-3.0, -2.5], [2.9, 3.05]] {
            let q = eval_smoothed(&f, &w, 0.2, Method::Quadrature, 400, &Rng::new(0)).unwrap();
            let mc = eval_smoothed(&f, &w, 0.2, Method::MonteCarlo, 40_000, &Rng::new(7)).unwrap();
            let sigma = (q.stderr.powi(2) + mc.stderr.powi(2)).sqrt();
            assert!((q.value - mc.value).abs() <= 3.0 * sigma, "{w:?}: {} vs {} ± {sigma}", q.value, mc.value);
        }
    }

    #[test]
    fn monte_carlo_is_linear_with_common_numbers() {
        let f = two_well_preset(3, 0.05).unwrap();
        let g = LandscapeFn::quadratic(3, 0.5);
        let h = LandscapeFn::combination(vec![(2.0, f.clone()), (-0.5, g.clone())]).unwrap();
        let w = [2.8, 3.0, 3.1];
        let rng = Rng::new(4);
        let e = |l: &LandscapeFn| eval_smoothed(l, &w, 0.3, Method::MonteCarlo, 5000, &rng).unwrap().value;
        assert!((e(&h) - (2.0 * e(&f) - 0.5 * e(&g))).abs() < 1e-12);
    }

    #[test]
    fn flat_check_on_symmetric_and_skewed_wells() {
        let f = two_well_preset(1, 0.05).unwrap();
        let c = check_flat_constraint(&f, &[-3.0], 0.5, 1.0, 41, 2000, &Rng::new(0)).unwrap();
        assert!(c.pass, "{c:?}");
        let sk = LandscapeFn::skewed(1, 0.3, 1.5);
        let r = check_flat_constraint(&sk, &[0.0], 0.5, 1.0, 41, 2000, &Rng::new(0)).unwrap();
        // the smoothed minimum drifts toward the wide side
        assert!(r.argmin[0] > 0.0);
    }

    #[test]
    fn sharp_check_needs_smoothing() {
        let f = two_well_preset(1, 0.05).unwrap();
        let c = check_sharp_constraint(&f, &[3.0], &[-3.0], 0.0, 0.04, 0.5, 1000, &Rng::new(0)).unwrap();
        assert!(!c.pass);
    }

    #[test]
    fn lower_bound_small_dimension() {
        let f = two_well_preset(1, 0.05).unwrap();
        let c = check_lower_bound(&f, &[3.0], 0.3, 0.15, 4000, &Rng::new(0)).unwrap();
        assert!(c.pass, "{c:?}");
        assert!((c.ratio_pow - 0.5).abs() < 1e-15);
        let z = check_lower_bound(&f, &[3.0], 0.3, 0.0, 4000, &Rng::new(0)).unwrap();
        assert_eq!(z.bound, z.c_eps);
        assert!(z.pass);
    }

    #[test]
    fn bound_arithmetic_in_ten_dimensions() {
        assert!((0.9f64.powi(10) - 0.348_678_440_1).abs() < 1e-10);
    }

    #[test]
    fn sensitivity_examples() {
        let (s, _) = sensitivity_metric(&square(), &[0.0], &[0.0, 0.1, 0.2, 0.3], 2000, &Rng::new(0)).unwrap();
        assert!((s - 0.1).abs() < 1e-6, "{s}");
        let (s0, _) = sensitivity_metric(&LandscapeFn::constant(2, 0.7), &[0.0, 0.0], &[0.0, 0.1, 0.2], 50, &Rng::new(0)).unwrap();
        assert!(s0.abs() < 1e-14);
        let f = two_well_preset(1, 0.05).unwrap();
        let grid = [0.0, 0.05, 0.1, 0.15, 0.2];
        let (ss, _) = sensitivity_metric(&f, &[3.0], &grid, 2000, &Rng::new(0)).unwrap();
        let (sf, _) = sensitivity_metric(&f, &[-3.0], &grid, 2000, &Rng::new(0)).unwrap();
        assert!(ss > sf);
        assert!(validate_a_grid(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let e = SmoothedEstimate { value: 0.5, stderr: 0.0, method: Method::MonteCarlo, budget: 2 };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[0.25], &[e]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a,value,stderr,method\n2.5000000000000000e-1,5.0000000000000000e-1,0.0000000000000000e0,monte-carlo\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flat_check_passes_below_flat_width(a in 0.05f64..0.95, dim in 1usize..=2) {
            let f = two_well_preset(dim, 0.05).unwrap();
            let c = check_flat_constraint(&f, &vec![-3.0; dim], a, 1.0, 11, 24, &Rng::new(0)).unwrap();
            prop_assert!(c.pass, "{:?}", c);
        }
    }
}
