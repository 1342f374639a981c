//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`); the MNIST criteria share one
//! set of trained models, so they are evaluated together.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use smoothout::checkpoint;
use smoothout::data::{load_mnist_dir, synth_blobs, Dataset};
use smoothout::experiment::{median, run_arm, Arm, Protocol, DEFAULT_A};
use smoothout::landscape::{
    check_flat_constraint, check_lower_bound, check_sharp_constraint, eval_smoothed, two_well_preset, LandscapeFn, Method,
};
use smoothout::nn::{Architecture, Model};
use smoothout::optim::{
    estimate_smoothed_loss_stochastic, smoothed_loss_n_copies, smoothout_step, step_with_theta, OptimizerState,
    TrainConfig,
};
use smoothout::perturb::{NoiseFamily, NoiseSpec};
use smoothout::rng::Rng;
use smoothout::sharpness::{
    box_ascent, filter_normalized_direction, interpolate_losses, keskar_sharpness, loss_slice, sensitivity_metric_model,
    ASCENT_ITERATIONS,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: &str, name: &str, start: Instant, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id:>3} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), o.detail);
}

fn c1_analytic_oracle() -> Outcome {
    let t = Instant::now();
    let f = LandscapeFn::quadratic(1, 1.0);
    let exact = 0.3f64 * 0.3 / 3.0;
    let mc = eval_smoothed(&f, &[0.0], 0.3, Method::MonteCarlo, 10_000, &Rng::new(1)).unwrap();
    let q = eval_smoothed(&f, &[0.0], 0.3, Method::Quadrature, 10_000, &Rng::new(1)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = (mc.value - exact).abs() <= 3.0 * mc.stderr && (q.value - exact).abs() <= 1e-6 && secs < 1.0;
    outcome(
        pass,
        format!(
            "mc={:.6}±{:.6}, quad={:.12} (|err|={:.1e}), exact={exact}, {secs:.3}s",
            mc.value,
            mc.stderr,
            q.value,
            (q.value - exact).abs()
        ),
    )
}

fn c2_flat_constraint() -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut notes = Vec::new();
    for (m, grid, nodes) in [(1usize, 41usize, 2000usize), (2, 21, 200)] {
        let f = two_well_preset(m, 0.05).unwrap();
        let w_f = vec![-3.0; m];
        for a in [0.25, 0.5] {
            let c = check_flat_constraint(&f, &w_f, a, 1.0, grid, nodes, &Rng::new(2)).unwrap();
            pass &= c.pass;
            notes.push(format!("m={m} a={a}: phi={:.3} cell={:.3}", c.deviation, c.spacing));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(pass && secs < 10.0, notes.join("; "))
}

fn c3_sharp_constraint() -> Outcome {
    let t = Instant::now();
    let (a, eps, tau, budget) = (0.3, 0.27, 0.5, 20_000);
    let run = |m: usize| {
        let f = two_well_preset(m, 0.05).unwrap();
        check_sharp_constraint(&f, &vec![3.0; m], &vec![-3.0; m], a, eps, tau, budget, &Rng::new(3)).unwrap()
    };
    let hi = run(10);
    let lo = run(1);
    let secs = t.elapsed().as_secs_f64();
    let pass = hi.pass && hi.margin > lo.margin && secs < 60.0;
    outcome(
        pass,
        format!(
            "m=10: lhs={:.9}±{:.1e} mid={:.9} rhs={:.4}±{:.1e} margin={:.2e}; m=1: margin={:.4} (pass={})",
            hi.lhs, hi.lhs_stderr, hi.mid, hi.rhs, hi.rhs_stderr, hi.margin, lo.margin, lo.pass
        ),
    )
}

fn c4_lower_bound() -> Outcome {
    let (a, eps_prime) = (0.3, 0.15);
    let mut pass = true;
    let mut notes = Vec::new();
    for (m, budget) in [(1usize, 4000usize), (2, 400), (3, 100), (10, 100_000)] {
        let f = two_well_preset(m, 0.05).unwrap();
        let c = check_lower_bound(&f, &vec![3.0; m], a, eps_prime, budget, &Rng::new(4)).unwrap();
        pass &= c.pass;
        notes.push(format!("m={m}: {:.6} >= {:.6} (err {:.1e})", c.lhs, c.bound, c.lhs_error));
    }
    outcome(pass, notes.join("; "))
}

fn c5_denoise_exactness() -> Outcome {
    let ds = synth_blobs(256, 3, 6, 3.0, 5).unwrap();
    let arch = Architecture::mlp(&[6, 16, 3]);
    let cfg = TrainConfig { noise: Some(NoiseSpec::uniform(DEFAULT_A)), ..TrainConfig::sgd(32, 1, 0.05, 5) };
    let replay_cfg = TrainConfig { noise: None, ..cfg.clone() };
    let mut model = Model::new(arch.clone(), &mut Rng::new(5)).unwrap();
    let mut replay = model.params.clone();
    let mut state = OptimizerState::new(model.params.len(), &cfg);
    let mut replay_state = OptimizerState::new(replay.len(), &replay_cfg);
    let mut noise = Rng::new(55);
    let mut batch_rng = Rng::new(56);
    let mut identical = true;
    let mut exact_delta = true;
    for _ in 0..1000 {
        let idx: Vec<usize> = (0..32).map(|_| batch_rng.below(ds.len())).collect();
        let b = ds.gather(&idx).unwrap();
        let before = model.params.values().to_vec();
        let out = smoothout_step(&mut model, b.inputs.data(), &b.labels, &cfg, &mut state, &mut noise).unwrap();
        exact_delta &= model.params.values().iter().zip(&before).zip(&out.grad).all(|((w, w0), g)| *w == w0 - 0.05 * g);
        let g = out.grad.clone();
        step_with_theta(&mut replay, None, &replay_cfg, &mut replay_state, |_, dst| {
            dst.copy_from_slice(&g);
            Ok(out.loss)
        })
        .unwrap();
        identical &= replay.values().iter().zip(model.params.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    outcome(identical && exact_delta, format!("bit-identical replay={identical}, delta == -lr*g every step={exact_delta}"))
}

fn c6_unbiasedness() -> Outcome {
    let t = Instant::now();
    let ds = synth_blobs(512, 4, 8, 3.0, 6).unwrap();
    let model = Model::new(Architecture::preset("blobs-mlp", 8, 4).unwrap(), &mut Rng::new(6)).unwrap();
    let noise = NoiseSpec::uniform(0.1);
    let (ms, ss) = estimate_smoothed_loss_stochastic(&model, &ds, &noise, 4000, 64, &Rng::new(61)).unwrap();
    let (mc, sc) = smoothed_loss_n_copies(&model, &ds, &noise, 2000, &Rng::new(62)).unwrap();
    let sigma = (ss * ss + sc * sc).sqrt();
    let secs = t.elapsed().as_secs_f64();
    let pass = (ms - mc).abs() <= 3.0 * sigma && secs < 30.0;
    outcome(pass, format!("per-batch {ms:.6}±{ss:.1e} vs 2000-copy {mc:.6}±{sc:.1e}, |diff|/sigma={:.2}", (ms - mc).abs() / sigma))
}

fn c7_gradients() -> Outcome {
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut segments = 0;
    for arch in common::gradient_architectures() {
        for seed in 0..10 {
            for c in common::gradient_check(&arch, 4, 700 + seed) {
                failures += c.failures;
                worst = worst.max(c.worst_abs);
                segments += 1;
            }
        }
    }
    outcome(failures == 0, format!("{segments} segment checks, {failures} coordinate failures, worst |fd-g|={worst:.1e}"))
}

fn c11_instrument_hygiene() -> Outcome {
    let m = 200;
    let eps = 5e-4;
    let maxima = box_ascent(
        |w, g| {
            g.copy_from_slice(w);
            Ok(0.5 * w.iter().map(|x| x * x).sum::<f64>())
        },
        &vec![0.0; m],
        eps,
        5,
        ASCENT_ITERATIONS,
        &Rng::new(11),
    )
    .unwrap();
    let truth = m as f64 * eps * eps / 2.0;
    let best = maxima.iter().copied().fold(0.0, f64::max);

    let ds = synth_blobs(128, 3, 5, 3.0, 11).unwrap();
    let model = Model::new(Architecture::mlp(&[5, 8, 3]), &mut Rng::new(11)).unwrap();
    let other = Model::new(Architecture::mlp(&[5, 8, 3]), &mut Rng::new(12)).unwrap();
    let bits = |m: &Model| m.params.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let before = bits(&model);
    keskar_sharpness(&model, &ds, eps, 5, &Rng::new(1)).unwrap();
    interpolate_losses(&model.params, &other.params, &[0.0, 0.5, 1.0], &model.net, &ds).unwrap();
    let d = filter_normalized_direction(&model.params, &mut Rng::new(2));
    loss_slice(&model, &d, -1.0, 1.0, 5, &ds).unwrap();
    sensitivity_metric_model(&model, &ds, &[0.0, 0.01, 0.02], 4, &Rng::new(3)).unwrap();
    let restored = bits(&model) == before;
    outcome(
        restored && best >= 0.99 * truth,
        format!("params restored={restored}; ascent {:.4}% of m*eps^2/2", 100.0 * best / truth),
    )
}

fn c12_determinism() -> Outcome {
    let ds = synth_blobs(200, 3, 6, 3.0, 12).unwrap();
    let arch = Architecture::mlp(&[6, 12, 3]);
    let cfg = TrainConfig { noise: Some(NoiseSpec::adaptive(NoiseFamily::Uniform, 0.15)), ..TrainConfig::sgd(16, 5, 0.05, 12) };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let out = run_arm(&arch, &cfg, &ds, &ds).unwrap();
        let p = dir.path().join(format!("run{run}.smo"));
        checkpoint::save(&p, &out.model.params).unwrap();
        files.push(std::fs::read(&p).unwrap());
    }
    let p = dir.path().join("run0.smo");
    let loaded = checkpoint::load(&p, &arch).unwrap();
    let resaved = checkpoint::encode(&loaded.params);
    let same_runs = files[0] == files[1];
    let round_trip = resaved == files[0];
    outcome(same_runs && round_trip, format!("two runs identical={same_runs}, save-load-save identical={round_trip}"))
}

struct SeedResult {
    sb_acc: f64,
    lb_acc: f64,
    so_acc: f64,
    no_denoise_acc: f64,
    ada_acc: f64,
    lb_sharp: f64,
    so_sharp: f64,
    sb_s: f64,
    lb_s: f64,
}

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("testdata/mnist-10k")
}

fn run_seed(p: &Protocol, arch: &Architecture, train_set: &Dataset, test_set: &Dataset, probe: &Dataset, seed: u64) -> SeedResult {
    let so_noise = NoiseSpec::uniform(DEFAULT_A);
    let arms = [
        Arm::baseline("sb", p.sb_batch),
        Arm::baseline("lb", p.lb_batch),
        Arm::with_noise("lb-smoothout", p.lb_batch, so_noise),
        Arm::with_noise("lb-smoothout-no-denoise", p.lb_batch, so_noise).without_denoise(),
        Arm::with_noise("lb-ada", p.lb_batch, NoiseSpec::adaptive(NoiseFamily::Uniform, 0.15)),
    ];
    let models: Vec<(Model, f64)> = arms
        .iter()
        .map(|arm| {
            let out = run_arm(arch, &p.train_config(arm, seed), train_set, test_set).unwrap();
            let acc = out.log.last().map_or(0.0, |l| l.test_acc);
            (out.model, acc)
        })
        .collect();
    let sharp_rng = Rng::new(seed ^ 0x5ba2);
    let sharp = |m: &Model| keskar_sharpness(m, probe, p.sharpness_eps, p.sharpness_runs, &sharp_rng).unwrap().keskar_sharpness;
    let sens_rng = Rng::new(seed ^ 0x5e45);
    let sens = |m: &Model| sensitivity_metric_model(m, probe, &p.sensitivity_grid, p.sensitivity_copies, &sens_rng).unwrap().0;
    let r = SeedResult {
        sb_acc: models[0].1,
        lb_acc: models[1].1,
        so_acc: models[2].1,
        no_denoise_acc: models[3].1,
        ada_acc: models[4].1,
        lb_sharp: sharp(&models[1].0),
        so_sharp: sharp(&models[2].0),
        sb_s: sens(&models[0].0),
        lb_s: sens(&models[1].0),
    };
    println!(
        "      seed {seed}: acc sb={:.4} lb={:.4} lb+so={:.4} no-denoise={:.4} ada={:.4}; sharpness lb={:.3} lb+so={:.3}; s sb={:.4} lb={:.4}",
        r.sb_acc, r.lb_acc, r.so_acc, r.no_denoise_acc, r.ada_acc, r.lb_sharp, r.so_sharp, r.sb_s, r.lb_s
    );
    r
}

fn mnist_criteria() -> Vec<(&'static str, &'static str, Outcome)> {
    let p = Protocol::default();
    let (train_set, test_set) = match load_mnist_dir(mnist_dir()) {
        Ok(d) => d,
        Err(e) => {
            let o = || outcome(false, format!("MNIST data unavailable: {e}"));
            return vec![("8", "generalization gap", o()), ("9", "ablation directions", o()), ("10", "sensitivity ordering", o())];
        }
    };
    let arch = p.architecture(train_set.feature_len(), train_set.classes).unwrap();
    let probe = train_set.head(p.probe_samples);
    println!(
        "      protocol: {} on {} train / {} test, {} epochs, lr {} @ batch {} ({:?} scaling), momentum {}, SB {} vs LB {}",
        p.preset, train_set.len(), test_set.len(), p.epochs, p.base_lr, p.base_batch, p.lrs_rule, p.momentum, p.sb_batch, p.lb_batch
    );
    let results: Vec<SeedResult> = (1..=5).map(|s| run_seed(&p, &arch, &train_set, &test_set, &probe, s)).collect();
    let med = |f: fn(&SeedResult) -> f64| median(&results.iter().map(f).collect::<Vec<_>>());
    let (sb, lb, so, nd, ada) = (med(|r| r.sb_acc), med(|r| r.lb_acc), med(|r| r.so_acc), med(|r| r.no_denoise_acc), med(|r| r.ada_acc));
    let (lb_sh, so_sh) = (med(|r| r.lb_sharp), med(|r| r.so_sharp));
    let (sb_s, lb_s) = (med(|r| r.sb_s), med(|r| r.lb_s));
    let c8 = outcome(
        lb < sb && so > lb && so_sh < lb_sh,
        format!(
            "median acc SB={:.2}% LB={:.2}% LB+SO={:.2}%; median sharpness LB={lb_sh:.3} LB+SO={so_sh:.3} (reference 98.01->98.42%, 57.82->5.41)",
            100.0 * sb,
            100.0 * lb,
            100.0 * so
        ),
    );
    let c9 = outcome(
        nd < so && ada >= so - 0.002,
        format!("median acc no-denoise={:.2}% < SO={:.2}%; Ada(0.15)={:.2}% >= SO-0.2%", 100.0 * nd, 100.0 * so, 100.0 * ada),
    );
    let c10 = outcome(lb_s > sb_s, format!("median s LB={lb_s:.4} vs SB={sb_s:.4}"));
    vec![("8", "generalization gap", c8), ("9", "ablation directions", c9), ("10", "sensitivity ordering", c10)]
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    println!("acceptance: {} worker thread(s)", rayon_threads());
    let mut all = true;
    let quick: [(&str, &str, fn() -> Outcome); 9] = [
        ("1", "analytic smoothing oracle", c1_analytic_oracle),
        ("2", "flat constraint", c2_flat_constraint),
        ("3", "sharp constraint", c3_sharp_constraint),
        ("4", "lower bound", c4_lower_bound),
        ("5", "de-noising exactness", c5_denoise_exactness),
        ("6", "unbiasedness", c6_unbiasedness),
        ("7", "gradient correctness", c7_gradients),
        ("11", "instrument hygiene", c11_instrument_hygiene),
        ("12", "determinism and persistence", c12_determinism),
    ];
    for (id, name, f) in quick {
        let t = Instant::now();
        let o = f();
        report(id, name, t, &o);
        all &= o.pass;
    }
    let t = Instant::now();
    for (id, name, o) in mnist_criteria() {
        report(id, name, t, &o);
        all &= o.pass;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
