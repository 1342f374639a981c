use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use smoothout::checkpoint;
use smoothout::data::Dataset;
use smoothout::experiment::{init_model, median, noise_comparison_arms, DEFAULT_A};
use smoothout::landscape::{
    check_flat_constraint, check_lower_bound, check_sharp_constraint, sensitivity_metric, two_well_preset, write_sweep_csv,
};
use smoothout::nn::Architecture;
use smoothout::optim::{train as train_model, write_metrics_csv, TrainOutcome};
use smoothout::rng::{derive_seed, Rng};
use smoothout::sharpness::{
    filter_normalized_direction, interpolate_losses, keskar_sharpness, loss_slice, sensitivity_metric_model, write_curve_csv,
    Curve,
};

use crate::config::{
    data_from_flag, read_config, resolve, set, CompareExperiment, LandscapeExperiment, SharpnessExperiment, TrainExperiment,
};
use crate::{CliError, Common, TrainFlags};

/// Largest flat-constraint grid (points per axis to the power m) that is searched.
const MAX_FLAT_GRID: usize = 4096;

fn base_config(common: &Common, command: &str) -> Result<Value, CliError> {
    let mut v = read_config(common.config.as_deref(), command)?;
    if let Some(seed) = common.seed {
        set(&mut v, &["seed"], json!(seed));
    }
    Ok(v)
}

fn apply_model_flags(v: &mut Value, preset: &Option<String>, data: &Option<String>) -> Result<(), CliError> {
    if let Some(p) = preset {
        set(v, &["preset"], json!(p));
    }
    if let Some(d) = data {
        set(v, &["data"], to_value(&data_from_flag(d))?);
    }
    Ok(())
}

fn apply_optimizer_flags(v: &mut Value, f: &TrainFlags) {
    if let Some(b) = f.batch {
        set(v, &["train", "batch_size"], json!(b));
    }
    if let Some(e) = f.epochs {
        set(v, &["train", "epochs"], json!(e));
    }
    if let Some(lr) = f.lr {
        set(v, &["train", "lr"], json!(lr));
    }
    if let Some(o) = &f.optimizer {
        set(v, &["train", "optimizer"], json!(o));
    }
    if let Some(r) = &f.lrs {
        set(v, &["train", "lrs_rule"], json!(r));
    }
}

fn apply_noise_flags(v: &mut Value, f: &TrainFlags) -> Result<(), CliError> {
    if f.ablation_no_denoise {
        set(v, &["train", "ablation_no_denoise"], json!(true));
    }
    if f.noise.is_none() && f.a.is_none() && !f.adaptive {
        return Ok(());
    }
    if f.noise.as_deref() == Some("none") {
        if f.a.is_some() || f.adaptive {
            return Err(CliError::Config("--noise none conflicts with --a/--adaptive".into()));
        }
        set(v, &["train", "noise"], Value::Null);
        return Ok(());
    }
    let current = v.get("train").and_then(|t| t.get("noise")).cloned().unwrap_or(Value::Null);
    let family = f.noise.clone().map(Value::String).or_else(|| current.get("family").cloned()).unwrap_or(json!("uniform"));
    let strength = f.a.map(|a| json!(a)).or_else(|| current.get("strength").cloned()).unwrap_or(json!(DEFAULT_A));
    let adaptive = f.adaptive || current.get("adaptive").and_then(Value::as_bool).unwrap_or(false);
    let grouping = if adaptive { "per-filter-neuron" } else { "global" };
    set(
        v,
        &["train", "noise"],
        json!({ "family": family, "strength": strength, "adaptive": adaptive, "grouping": grouping }),
    );
    Ok(())
}

fn family_name(n: &smoothout::perturb::NoiseSpec) -> String {
    serde_json::to_value(n.family).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn to_value<T: Serialize>(x: &T) -> Result<Value, CliError> {
    serde_json::to_value(x).map_err(|e| CliError::Other(e.to_string()))
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, x: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(x).map_err(|e| CliError::Other(e.to_string()))?;
    s.push('\n');
    write_out(dir, name, s.as_bytes())
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

fn architecture(preset: &str, train: &Dataset) -> Result<Architecture, CliError> {
    Ok(Architecture::preset(preset, train.feature_len(), train.classes)?)
}

fn metrics_csv(outcome: &TrainOutcome) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &outcome.log).expect("writing to memory");
    buf
}

pub fn train(common: &Common, flags: &TrainFlags) -> Result<(), CliError> {
    let start = Instant::now();
    let mut v = base_config(common, "train")?;
    apply_model_flags(&mut v, &flags.preset, &flags.data)?;
    apply_optimizer_flags(&mut v, flags);
    apply_noise_flags(&mut v, flags)?;
    let exp: TrainExperiment = resolve(v)?;
    let cfg = exp.train.to_config(exp.seed)?;

    let (train_set, test_set) = exp.data.load()?;
    let arch = architecture(&exp.preset, &train_set)?;
    let outcome = train_model(init_model(arch, exp.seed)?, &train_set, &test_set, &cfg)?;
    let last = outcome.log.last().cloned();

    let out = &common.out;
    prepare_out(out)?;
    write_out(out, "metrics.csv", &metrics_csv(&outcome))?;
    checkpoint::save(out.join("model.smo"), &outcome.model.params)?;
    write_json(out, "config.json", &exp)?;
    write_json(
        out,
        "summary.json",
        &json!({
            "command": "train",
            "final_test_acc": last.as_ref().map(|m| m.test_acc),
            "final_test_loss": last.as_ref().map(|m| m.test_loss),
            "final_train_loss": last.as_ref().map(|m| m.train_loss),
            "seed": exp.seed,
            "a": cfg.noise_strength(),
            "noise": cfg.noise,
            "ablation_no_denoise": cfg.ablation_no_denoise,
            "scaled_lr": cfg.scaled_lr(),
            "steps": last.as_ref().map_or(0, |m| m.step),
            "train_samples": train_set.len(),
            "test_samples": test_set.len(),
            "config": exp,
            "wall_time": start.elapsed().as_secs_f64(),
        }),
    )?;
    if let Some(m) = last {
        println!("test_acc={:.4} train_loss={:.6} -> {}", m.test_acc, m.train_loss, out.display());
    }
    Ok(())
}

fn default_landscape_cases() -> Value {
    json!([{ "dim": 1, "a": 0.3 }, { "dim": 2, "a": 0.3 }, { "dim": 10, "a": 0.3 }])
}

pub fn landscape(common: &Common, dim: Option<usize>, a: Option<f64>) -> Result<(), CliError> {
    let start = Instant::now();
    let mut v = base_config(common, "landscape")?;
    if let Some(d) = dim {
        set(&mut v, &["cases"], json!([{ "dim": d, "a": a.unwrap_or(0.3) }]));
    } else if v.get("cases").is_none() {
        set(&mut v, &["cases"], default_landscape_cases());
    }
    if let (Some(a), Some(cases)) = (a, v.get_mut("cases").and_then(Value::as_array_mut)) {
        for c in cases {
            set(c, &["a"], json!(a));
        }
    }
    let mut exp: LandscapeExperiment = resolve(v)?;
    for c in &mut exp.cases {
        c.eps.get_or_insert(0.9 * c.a);
        c.eps_prime.get_or_insert(0.5 * c.a);
        c.nodes.get_or_insert(match c.dim {
            1 => 400,
            2 => 100,
            _ => 50,
        });
        smoothout::landscape::validate_a_grid(&c.sweep)?;
    }

    let out = &common.out;
    prepare_out(out)?;
    let root = Rng::new(derive_seed(exp.seed, "landscape"));
    let mut results = Vec::new();
    for (i, c) in exp.cases.iter().enumerate() {
        let rng = root.substream(i as u64);
        let f = two_well_preset(c.dim, c.sharp_width)?;
        let w_f = &f.minima[0].location;
        let w_s = &f.minima[1].location;
        let quadrature = c.dim <= smoothout::landscape::MAX_QUADRATURE_DIM;
        let budget = if quadrature { c.nodes.unwrap_or_default() } else { c.samples };
        let flat_budget = if quadrature { c.flat_nodes } else { c.samples };
        let (eps, eps_prime) = (c.eps.unwrap_or_default(), c.eps_prime.unwrap_or_default());

        let flat = match c.grid.checked_pow(c.dim as u32) {
            Some(n) if n <= MAX_FLAT_GRID => Some(check_flat_constraint(&f, w_f, c.a, c.tau, c.grid, flat_budget, &rng)?),
            _ => None,
        };
        let sharp = check_sharp_constraint(&f, w_s, w_f, c.a, eps, c.tau, c.samples, &rng)?;
        let lower = check_lower_bound(&f, w_s, c.a, eps_prime, budget, &rng)?;
        let (slope_f, sweep_f) = sensitivity_metric(&f, w_f, &c.sweep, budget, &rng)?;
        let (slope_s, sweep_s) = sensitivity_metric(&f, w_s, &c.sweep, budget, &rng)?;
        for (kind, ests) in [("flat", &sweep_f), ("sharp", &sweep_s)] {
            let mut buf = Vec::new();
            write_sweep_csv(&mut buf, &c.sweep, ests).expect("writing to memory");
            write_out(out, &format!("sweep_case{i}_m{}_{kind}.csv", c.dim), &buf)?;
        }
        let pass = flat.as_ref().map_or(true, |x| x.pass) && sharp.pass && lower.pass;
        println!(
            "case {i} m={} a={}: flat={} sharp={} lower_bound={}",
            c.dim,
            c.a,
            flat.as_ref().map_or("skipped".to_string(), |x| x.pass.to_string()),
            sharp.pass,
            lower.pass
        );
        results.push(json!({
            "case": c,
            "flat": flat,
            "flat_skipped": flat.is_none().then(|| format!("{}^{} grid points exceed {MAX_FLAT_GRID}", c.grid, c.dim)),
            "sharp": sharp,
            "lower_bound": lower,
            "sensitivity": { "flat": slope_f, "sharp": slope_s },
            "pass": pass,
        }));
    }
    let all_pass = results.iter().all(|r| r["pass"] == json!(true));
    write_json(out, "config.json", &exp)?;
    write_json(
        out,
        "summary.json",
        &json!({
            "command": "landscape",
            "seed": exp.seed,
            "all_pass": all_pass,
            "cases": results,
            "config": exp,
            "wall_time": start.elapsed().as_secs_f64(),
        }),
    )
}

pub fn sharpness(
    common: &Common,
    preset: Option<String>,
    data: Option<String>,
    checkpoint_path: Option<PathBuf>,
    reference: Option<PathBuf>,
) -> Result<(), CliError> {
    let start = Instant::now();
    let mut v = base_config(common, "sharpness")?;
    apply_model_flags(&mut v, &preset, &data)?;
    if let Some(p) = checkpoint_path {
        set(&mut v, &["checkpoint"], to_value(&p)?);
    }
    if let Some(p) = reference {
        set(&mut v, &["reference"], to_value(&p)?);
    }
    let exp: SharpnessExperiment = resolve(v)?;
    if !(exp.eps > 0.0) || exp.runs == 0 || exp.probe_samples == 0 || exp.copies == 0 {
        return Err(CliError::Config("need eps > 0 and runs, probe_samples, copies >= 1".into()));
    }
    smoothout::landscape::validate_a_grid(&exp.a_grid)?;

    let (train_set, _) = exp.data.load()?;
    let arch = architecture(&exp.preset, &train_set)?;
    let model = checkpoint::load(&exp.checkpoint, &arch)?;
    let probe = train_set.head(exp.probe_samples.min(train_set.len()));

    let mut report = keskar_sharpness(&model, &probe, exp.eps, exp.runs, &Rng::new(derive_seed(exp.seed, "sharpness")))?;
    let (slope, sens) =
        sensitivity_metric_model(&model, &probe, &exp.a_grid, exp.copies, &Rng::new(derive_seed(exp.seed, "sensitivity")))?;
    report.sensitivity_slope = Some(slope);

    let d = filter_normalized_direction(&model.params, &mut Rng::new(derive_seed(exp.seed, "direction")));
    let slice = loss_slice(&model, &d, exp.slice.lo, exp.slice.hi, exp.slice.points, &probe)?;
    report.curves.push(Curve { name: "slice".into(), points: slice });
    if let Some(r) = &exp.reference {
        let other = checkpoint::load(r, &arch)?;
        let curve = interpolate_losses(&other.params, &model.params, &exp.alphas, &model.net, &probe)?;
        report.curves.push(Curve { name: "interpolation".into(), points: curve });
    }
    report.check()?;

    let out = &common.out;
    prepare_out(out)?;
    for c in &report.curves {
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &c.points).expect("writing to memory");
        write_out(out, &format!("{}.csv", c.name), &buf)?;
    }
    let mut csv = String::from("a,mean,stderr\n");
    for (a, (m, se)) in exp.a_grid.iter().zip(&sens) {
        writeln!(csv, "{a},{m:.16e},{se:.16e}").expect("writing to a string");
    }
    write_out(out, "sensitivity.csv", csv.as_bytes())?;
    write_json(out, "sharpness_report.json", &report)?;
    write_json(out, "config.json", &exp)?;
    write_json(
        out,
        "summary.json",
        &json!({
            "command": "sharpness",
            "seed": exp.seed,
            "keskar_sharpness": report.keskar_sharpness,
            "per_run": report.per_run,
            "sensitivity_slope": slope,
            "config": exp,
            "wall_time": start.elapsed().as_secs_f64(),
        }),
    )?;
    println!("sharpness={:.4} sensitivity={:.4} -> {}", report.keskar_sharpness, slope, out.display());
    Ok(())
}

pub fn compare_noise(common: &Common, flags: &TrainFlags, seeds: Option<usize>) -> Result<(), CliError> {
    let start = Instant::now();
    if flags.noise.is_some() || flags.a.is_some() || flags.adaptive || flags.ablation_no_denoise {
        return Err(CliError::Config("compare-noise takes its noise settings from `arms`".into()));
    }
    let mut v = base_config(common, "compare-noise")?;
    apply_model_flags(&mut v, &flags.preset, &flags.data)?;
    apply_optimizer_flags(&mut v, flags);
    if let Some(n) = seeds {
        set(&mut v, &["seeds"], json!(n));
    }
    let mut exp: CompareExperiment = resolve(v)?;
    if exp.seeds == 0 {
        return Err(CliError::Config("seeds must be at least 1".into()));
    }
    let arms = exp.arms.get_or_insert_with(|| noise_comparison_arms(exp.train.batch_size)).clone();
    let mut configs = Vec::new();
    for k in 0..exp.seeds as u64 {
        for arm in &arms {
            let mut s = exp.train.clone();
            s.batch_size = arm.batch_size;
            s.noise = arm.noise;
            s.ablation_no_denoise = arm.no_denoise;
            configs.push((arm, s.to_config(exp.seed + k)?));
        }
    }

    let (train_set, test_set) = exp.data.load()?;
    let arch = architecture(&exp.preset, &train_set)?;
    let mut csv = String::from("arm,family,adaptive,a,denoise,seed,final_test_acc,final_test_loss,final_train_loss\n");
    let mut rows = Vec::new();
    for (arm, cfg) in &configs {
        let outcome = train_model(init_model(arch.clone(), cfg.seed)?, &train_set, &test_set, cfg)?;
        let last = outcome.log.last().expect("at least one epoch");
        let family = arm.noise.map_or_else(|| "none".to_string(), |n| family_name(&n));
        writeln!(
            csv,
            "{},{family},{},{},{},{},{:.16e},{:.16e},{:.16e}",
            arm.name,
            arm.noise.is_some_and(|n| n.adaptive),
            cfg.noise_strength(),
            !arm.no_denoise,
            cfg.seed,
            last.test_acc,
            last.test_loss,
            last.train_loss
        )
        .expect("writing to a string");
        println!("{} seed {}: test_acc={:.4}", arm.name, cfg.seed, last.test_acc);
        rows.push((arm.name.clone(), cfg.noise_strength(), last.test_acc));
    }
    let per_arm: Vec<Value> = arms
        .iter()
        .map(|arm| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.0 == arm.name).map(|r| r.2).collect();
            json!({
                "arm": arm.name,
                "a": arm.noise.map_or(0.0, |n| n.strength),
                "denoise": !arm.no_denoise,
                "median_test_acc": median(&accs),
            })
        })
        .collect();

    let out = &common.out;
    prepare_out(out)?;
    write_out(out, "comparison.csv", csv.as_bytes())?;
    write_json(out, "config.json", &exp)?;
    write_json(
        out,
        "summary.json",
        &json!({
            "command": "compare-noise",
            "seed": exp.seed,
            "arms": per_arm,
            "config": exp,
            "wall_time": start.elapsed().as_secs_f64(),
        }),
    )
}
