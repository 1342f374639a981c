//! Sharpness instruments for trained networks: box-constrained maximal loss
//! increase, interpolation curves between two minima, filter-normalized
//! slices, and the noise-sensitivity slope. None of them write to the model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::landscape::{ls_slope, validate_a_grid};
use crate::nn::{Model, Network, ParamVector};
use crate::optim::smoothed_loss_n_copies;
use crate::par;
use crate::perturb::NoiseSpec;
use crate::rng::Rng;
use crate::tensor::l2_norm;

pub const ASCENT_ITERATIONS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub abscissa: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessMeta {
    pub eps: f64,
    pub runs: usize,
    pub iterations: usize,
    pub seed: u64,
    pub split: Split,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub keskar_sharpness: f64,
    pub per_run: Vec<f64>,
    pub sensitivity_slope: Option<f64>,
    pub curves: Vec<Curve>,
    pub metadata: SharpnessMeta,
}

impl SharpnessReport {
    /// Rejects a report whose aggregate or curves break the stated invariants.
    pub fn check(&self) -> Result<()> {
        let max = self.per_run.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if self.per_run.is_empty() || max != self.keskar_sharpness {
            return Err(Error::InvalidConfig("sharpness is not the max of its runs".into()));
        }
        for c in &self.curves {
            if c.points.windows(2).any(|p| !(p[1].abscissa > p[0].abscissa)) {
                return Err(Error::InvalidConfig(format!("curve `{}` abscissas not increasing", c.name)));
            }
        }
        Ok(())
    }
}

/// Per-restart maxima of `C(w + w′)` over the box `|w′ᵢ| ≤ ε(|wᵢ|+1)`.
///
/// Each restart starts uniformly in the box and takes `iterations` sign-gradient
/// steps of `ε(|wᵢ|+1)/10`, clipped to the box; the best value seen, including
/// `C(w)` itself, is kept. Restart `r` uses `rng.substream(r)`.
pub fn box_ascent<F>(loss_grad: F, w: &[f64], eps: f64, runs: usize, iterations: usize, rng: &Rng) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) -> Result<f64> + Sync,
{
    if !(eps >= 0.0) || runs == 0 {
        return Err(Error::InvalidConfig(format!("need eps >= 0 and runs >= 1, got eps={eps}, runs={runs}")));
    }
    let mut scratch = vec![0.0; w.len()];
    let base = loss_grad(w, &mut scratch)?;
    let bound: Vec<f64> = w.iter().map(|x| eps * (x.abs() + 1.0)).collect();
    par::map_indexed(runs, |r| -> Result<f64> {
        if eps == 0.0 {
            return Ok(base);
        }
        let mut rr = rng.substream(r as u64);
        let mut off: Vec<f64> = bound.iter().map(|&b| rr.uniform(-b, b)).collect();
        let mut p = vec![0.0; w.len()];
        let mut g = vec![0.0; w.len()];
        let mut best = base;
        for it in 0..=iterations {
            for ((pi, wi), oi) in p.iter_mut().zip(w).zip(&off) {
                *pi = wi + oi;
            }
            let v = loss_grad(&p, &mut g)?;
            if v.is_finite() {
                best = best.max(v);
            }
            if it == iterations {
                break;
            }
            for ((oi, gi), &b) in off.iter_mut().zip(&g).zip(&bound) {
                let step = if *gi > 0.0 {
                    b / 10.0
                } else if *gi < 0.0 {
                    -b / 10.0
                } else {
                    0.0
                };
                *oi = (*oi + step).clamp(-b, b);
            }
        }
        Ok(best)
    })
    .into_iter()
    .collect()
}

/// `100·(max − C(w))/(1 + C(w))`
pub fn relative_increase(max: f64, base: f64) -> f64 {
    100.0 * (max - base) / (1.0 + base)
}

/// Box sharpness of `model` on `dataset` (full-batch loss), max over `runs` restarts.
pub fn keskar_sharpness(model: &Model, dataset: &Dataset, eps: f64, runs: usize, rng: &Rng) -> Result<SharpnessReport> {
    let x = dataset.inputs.data();
    let w = model.params.values();
    let base = model.loss_at(w, x, &dataset.labels)?;
    let maxima = box_ascent(
        |p, g| model.loss_grad_at(p, x, &dataset.labels, g),
        w,
        eps,
        runs,
        ASCENT_ITERATIONS,
        rng,
    )?;
    let per_run: Vec<f64> = maxima.iter().map(|&m| relative_increase(m, base)).collect();
    Ok(SharpnessReport {
        keskar_sharpness: per_run.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        per_run,
        sensitivity_slope: None,
        curves: Vec::new(),
        metadata: SharpnessMeta {
            eps,
            runs,
            iterations: ASCENT_ITERATIONS,
            seed: rng.seed(),
            split: dataset.split,
            samples: dataset.len(),
        },
    })
}

fn eval_point(net: &Network, w: &[f64], dataset: &Dataset, abscissa: f64) -> Result<CurvePoint> {
    let e = net.eval_at(w, dataset.inputs.data(), &dataset.labels)?;
    Ok(CurvePoint { abscissa, loss: e.mean_loss(), accuracy: e.accuracy() })
}

fn check_increasing(xs: &[f64]) -> Result<()> {
    if xs.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::InvalidConfig("abscissas must increase strictly".into()));
    }
    Ok(())
}

/// Loss and accuracy along `α·w_s + (1−α)·w_f`.
pub fn interpolate_losses(
    w_f: &ParamVector,
    w_s: &ParamVector,
    alphas: &[f64],
    net: &Network,
    dataset: &Dataset,
) -> Result<Vec<CurvePoint>> {
    if !w_f.same_layout(w_s) || w_f.len() != net.param_count() {
        return Err(Error::ShapeMismatch("interpolation endpoints do not share the model layout".into()));
    }
    check_increasing(alphas)?;
    par::map_indexed(alphas.len(), |k| {
        let a = alphas[k];
        let w: Vec<f64> = w_s.values().iter().zip(w_f.values()).map(|(s, f)| a * s + (1.0 - a) * f).collect();
        eval_point(net, &w, dataset, a)
    })
    .into_iter()
    .collect()
}

/// `(loss[i−1] − 2·loss[i] + loss[i+1]) / h²` at an interior point of a uniform curve.
pub fn second_difference(curve: &[CurvePoint], i: usize) -> Option<f64> {
    if i == 0 || i + 1 >= curve.len() {
        return None;
    }
    let h = curve[i + 1].abscissa - curve[i].abscissa;
    Some((curve[i - 1].loss - 2.0 * curve[i].loss + curve[i + 1].loss) / (h * h))
}

/// Gaussian direction rescaled so each filter/neuron group, and each bias
/// vector, has the norm of the matching weights.
pub fn filter_normalized_direction(params: &ParamVector, rng: &mut Rng) -> Vec<f64> {
    let w = params.values();
    let mut d: Vec<f64> = (0..w.len()).map(|_| rng.standard_normal()).collect();
    let bias_ranges: Vec<_> = params.bias_segments().map(|s| s.range()).collect();
    for g in params.filter_groups().iter().cloned().chain(bias_ranges) {
        let wn = l2_norm(&w[g.clone()]);
        let dn = l2_norm(&d[g.clone()]);
        let dst = &mut d[g];
        if wn == 0.0 || dn == 0.0 {
            dst.fill(0.0);
        } else {
            let s = wn / dn;
            dst.iter_mut().for_each(|x| *x *= s);
        }
    }
    d
}

/// Loss and accuracy at `w + t·d` for `points` evenly spaced `t` in `[lo, hi]`.
pub fn loss_slice(model: &Model, d: &[f64], lo: f64, hi: f64, points: usize, dataset: &Dataset) -> Result<Vec<CurvePoint>> {
    if d.len() != model.params.len() {
        return Err(Error::LengthMismatch { expected: model.params.len(), got: d.len() });
    }
    if points < 2 || !(hi > lo) {
        return Err(Error::InvalidConfig("slice needs points >= 2 and hi > lo".into()));
    }
    par::map_indexed(points, |k| {
        let t = lo + (hi - lo) * k as f64 / (points - 1) as f64;
        let w: Vec<f64> = model.params.values().iter().zip(d).map(|(wi, di)| wi + t * di).collect();
        eval_point(&model.net, &w, dataset, t)
    })
    .into_iter()
    .collect()
}

/// Slope of the N-copy smoothed loss against uniform noise strength `a`.
/// All strengths share `rng`, so the draws are scaled copies of each other.
pub fn sensitivity_metric_model(
    model: &Model,
    dataset: &Dataset,
    a_grid: &[f64],
    copies: usize,
    rng: &Rng,
) -> Result<(f64, Vec<(f64, f64)>)> {
    validate_a_grid(a_grid)?;
    let ests = a_grid
        .iter()
        .map(|&a| smoothed_loss_n_copies(model, dataset, &NoiseSpec::uniform(a), copies, rng))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = ests.iter().map(|e| e.0).collect();
    Ok((ls_slope(a_grid, &values), ests))
}

pub const CURVE_HEADER: &str = "abscissa,loss,accuracy";

pub fn write_curve_csv<W: Write>(mut out: W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "{CURVE_HEADER}")?;
    for p in curve {
        writeln!(out, "{:.16e},{:.16e},{:.16e}", p.abscissa, p.loss, p.accuracy)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::Architecture;
    use crate::rng::Rng;

    fn half_square(w: &[f64], g: &mut [f64]) -> Result<f64> {
        g.copy_from_slice(w);
        Ok(0.5 * w.iter().map(|x| x * x).sum::<f64>())
    }

    fn toy() -> (Model, Dataset) {
        let ds = synth_blobs(96, 3, 4, 3.0, 2).unwrap();
        let model = Model::new(Architecture::mlp(&[4, 6, 3]), &mut Rng::new(5)).unwrap();
        (model, ds)
    }

    #[test]
    fn quadratic_box_maximum_is_found() {
        let m = 20;
        let eps = 1e-2;
        let maxima = box_ascent(half_square, &vec![0.0; m], eps, 5, ASCENT_ITERATIONS, &Rng::new(1)).unwrap();
        let truth = m as f64 * eps * eps / 2.0;
        let best = maxima.iter().copied().fold(0.0, f64::max);
        assert!(best >= 0.99 * truth && best <= truth * (1.0 + 1e-12), "{best} vs {truth}");
    }

    #[test]
    fn zero_box_gives_zero() {
        let (model, ds) = toy();
        let r = keskar_sharpness(&model, &ds, 0.0, 3, &Rng::new(0)).unwrap();
        assert_eq!(r.keskar_sharpness, 0.0);
        r.check().unwrap();
    }

    #[test]
    fn sharpness_is_nonnegative_and_leaves_model_alone() {
        let (model, ds) = toy();
        let before = model.params.clone();
        let r = keskar_sharpness(&model, &ds, 5e-4, 5, &Rng::new(0)).unwrap();
        assert!(r.per_run.iter().all(|&s| s >= 0.0));
        assert_eq!(r.per_run.len(), 5);
        r.check().unwrap();
        assert_eq!(model.params, before);
        let wider = keskar_sharpness(&model, &ds, 1e-3, 5, &Rng::new(0)).unwrap();
        assert!(wider.keskar_sharpness >= r.keskar_sharpness);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let (model, ds) = toy();
        let other = Model::new(model.architecture().clone(), &mut Rng::new(9)).unwrap();
        let curve = interpolate_losses(&model.params, &other.params, &[-0.5, 0.0, 0.5, 1.0, 1.5], &model.net, &ds).unwrap();
        let e0 = model.evaluate(ds.inputs.data(), &ds.labels).unwrap();
        let e1 = other.evaluate(ds.inputs.data(), &ds.labels).unwrap();
        assert_eq!(curve[1].loss, e0.mean_loss());
        assert_eq!(curve[1].accuracy, e0.accuracy());
        assert_eq!(curve[3].loss, e1.mean_loss());
        let flat = interpolate_losses(&model.params, &model.params, &[0.0, 0.3, 2.0], &model.net, &ds).unwrap();
        assert!(flat.iter().all(|p| p.loss == flat[0].loss));
        assert!(second_difference(&curve, 1).is_some());
        assert!(interpolate_losses(&model.params, &model.params, &[0.5, 0.5], &model.net, &ds).is_err());
    }

    #[test]
    fn mismatched_endpoints_are_rejected() {
        let (model, ds) = toy();
        let small = Model::zeros(Architecture::mlp(&[4, 3])).unwrap();
        assert!(matches!(
            interpolate_losses(&model.params, &small.params, &[0.0], &model.net, &ds),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn direction_matches_group_norms() {
        let model = Model::new(Architecture::conv_small(1, 5, 3), &mut Rng::new(2)).unwrap();
        let d = filter_normalized_direction(&model.params, &mut Rng::new(3));
        let w = model.params.values();
        for g in model.params.filter_groups() {
            let (a, b) = (l2_norm(&d[g.clone()]), l2_norm(&w[g.clone()]));
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b);
        }
        // zero biases give zero bias directions
        for s in model.params.bias_segments() {
            assert!(d[s.range()].iter().all(|&x| x == 0.0));
        }
        let z = Model::zeros(Architecture::mlp(&[3, 2])).unwrap();
        assert!(filter_normalized_direction(&z.params, &mut Rng::new(1)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn independent_directions_are_nearly_orthogonal() {
        let model = Model::new(Architecture::mlp(&[200, 8, 2]), &mut Rng::new(2)).unwrap();
        let a = filter_normalized_direction(&model.params, &mut Rng::new(10));
        let b = filter_normalized_direction(&model.params, &mut Rng::new(11));
        for g in model.params.filter_groups().iter().filter(|g| g.len() >= 100) {
            let (x, y) = (&a[g.clone()], &b[g.clone()]);
            let cos = crate::tensor::dot(x, y) / (l2_norm(x) * l2_norm(y));
            assert!(cos.abs() < 0.2, "{cos}");
        }
    }

    #[test]
    fn slice_passes_through_the_model() {
        let (model, ds) = toy();
        let before = model.params.clone();
        let d = filter_normalized_direction(&model.params, &mut Rng::new(4));
        let curve = loss_slice(&model, &d, -1.0, 1.0, 21, &ds).unwrap();
        assert_eq!(curve[10].abscissa, 0.0);
        assert_eq!(curve[10].loss, model.evaluate(ds.inputs.data(), &ds.labels).unwrap().mean_loss());
        assert_eq!(model.params, before);
    }

    #[test]
    fn sensitivity_zero_strength_is_the_clean_loss() {
        let (model, ds) = toy();
        let (s, ests) = sensitivity_metric_model(&model, &ds, &[0.0, 0.05, 0.1], 20, &Rng::new(3)).unwrap();
        assert_eq!(ests[0].0, model.evaluate(ds.inputs.data(), &ds.labels).unwrap().mean_loss());
        assert!(s.is_finite());
    }

    #[test]
    fn curve_csv_layout() {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[CurvePoint { abscissa: 0.0, loss: 1.0, accuracy: 0.5 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "abscissa,loss,accuracy\n0.0000000000000000e0,1.0000000000000000e0,5.0000000000000000e-1\n");
    }
}
