#![allow(dead_code)]

use smoothout::nn::{Architecture, Model, Segment};
use smoothout::rng::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// Worst finite-difference mismatch found in one parameter segment.
#[derive(Debug)]
pub struct SegmentCheck {
    pub segment: Segment,
    pub worst_abs: f64,
    pub failures: usize,
}

/// Central differences against the analytic gradient at one random point:
/// fan-in weights, biases in U(-0.1, 0.1), Gaussian inputs, random labels.
pub fn gradient_check(arch: &Architecture, batch: usize, seed: u64) -> Vec<SegmentCheck> {
    let mut rng = Rng::new(seed);
    let mut model = Model::new(arch.clone(), &mut rng).unwrap();
    let biases: Vec<_> = model.params.bias_segments().map(|s| s.range()).collect();
    {
        let w = model.params.values_mut();
        for r in biases {
            for v in &mut w[r] {
                *v = rng.uniform(-0.1, 0.1);
            }
        }
    }
    let x: Vec<f64> = (0..batch * arch.input_len()).map(|_| rng.standard_normal()).collect();
    let y: Vec<usize> = (0..batch).map(|_| rng.below(arch.classes())).collect();
    let w = model.params.values().to_vec();
    let mut g = vec![0.0; w.len()];
    model.loss_grad_at(&w, &x, &y, &mut g).unwrap();
    let mut probe = w.clone();
    model
        .params
        .segments()
        .iter()
        .map(|s| {
            let mut worst_abs = 0.0f64;
            let mut failures = 0;
            for i in s.range() {
                probe[i] = w[i] + FD_STEP;
                let up = model.loss_at(&probe, &x, &y).unwrap();
                probe[i] = w[i] - FD_STEP;
                let down = model.loss_at(&probe, &x, &y).unwrap();
                probe[i] = w[i];
                let fd = (up - down) / (2.0 * FD_STEP);
                let err = (fd - g[i]).abs();
                worst_abs = worst_abs.max(err);
                if err > ABS_TOL && err > REL_TOL * fd.abs().max(g[i].abs()) {
                    failures += 1;
                }
            }
            SegmentCheck { segment: s.clone(), worst_abs, failures }
        })
        .collect()
}

/// Architectures covering every layer kind: dense, 3×3 convolution, ReLU and the softmax head.
pub fn gradient_architectures() -> Vec<Architecture> {
    vec![Architecture::mlp(&[6, 5, 4, 3]), Architecture::conv_small(2, 5, 3)]
}
