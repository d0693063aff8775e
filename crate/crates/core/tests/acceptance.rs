//! Acceptance criteria. Runs as a plain binary (`harness = false`) so the
//! criteria execute one at a time and timings are not skewed by each other.
//! Each criterion prints exactly one PASS/FAIL line; the process fails if
//! any criterion fails.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use revlearn::autodiff::hvp_ww;
use revlearn::data::{synthetic_classification, BatchSchedule};
use revlearn::experiment::artifacts::without_timestamp;
use revlearn::experiment::{self, bench_memory, Analysis, DataSource, ExperimentConfig, ExperimentId};
use revlearn::models::{init_weights, Batched, Classifier, InputSource, Model, Objective};
use revlearn::revbuf::Ratio;
use revlearn::train::{float_reverse_unbuffered, naive_forward, naive_reverse, sgd_forward, sgd_reverse};
use revlearn::train::{FloatReversal, HypergradResult, RealSchedules, Schedules, TrainState};

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 bit-exact reversibility", reversibility),
        ("2 buffer entropy per step", entropy),
        ("3 memory factor at gamma 9/10", memory_factor),
        ("4 hypergradient correctness", hypergradient_correctness),
        ("5 HVP exactness", hvp_exactness),
        ("6 float-only reversal diverges", float_reversal),
        ("7 learning-rate schedule meta-descent", meta_descent),
        ("8 chaos sweep correlations", chaos),
        ("9 reverse/forward time ratio", time_ratio),
        ("10 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!passed);
        let tag = if passed { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout().lock();
        writeln!(out, "[{tag}] criterion {name}: {detail} ({secs:.1} s)").unwrap();
        out.flush().unwrap();
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

/// Logistic regression on 49 features and 10 classes: 490 weights plus 10
/// biases.
fn reversibility() -> Outcome {
    const T: usize = 1000;
    let start = Instant::now();
    let gamma = Ratio::new(9, 10).map_err(err)?;
    let results: Vec<Result<(bool, usize), String>> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let data = synthetic_classification(seed, 200, 49, 10, 3.0).map_err(err)?;
            let model = Classifier::new(vec![49, 10], InputSource::Fixed(data), Objective::Training).map_err(err)?;
            let batches = BatchSchedule::new(seed, 200, 20, T).map_err(err)?;
            let f = Batched { model: &model, batches: &batches };
            let layout = model.param_layout();
            let alpha = rng.random_range(0.05..0.5);
            let sched = Schedules::constant(T, layout.num_groups(), alpha, gamma, model.default_theta());
            let w1: Vec<f64> = (0..model.dim_w()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v1: Vec<f64> = (0..model.dim_w()).map(|_| rng.random_range(-0.1..0.1)).collect();
            let mut state = TrainState::with_velocity(&w1, &v1, 32).map_err(err)?;
            let initial = state.clone();
            sgd_forward(&mut state, &sched, &f, layout).map_err(err)?;
            let zeros = vec![0.0; w1.len()];
            sgd_reverse(&mut state, &sched, &f, layout, &zeros, &zeros).map_err(err)?;
            let exact = state.w.as_raw() == initial.w.as_raw() && state.v.as_raw() == initial.v.as_raw();
            Ok((exact && state.buffers_empty(), w1.len()))
        })
        .collect();
    let elapsed = start.elapsed();
    let mut exact = 0;
    let mut dim = 0;
    for r in results {
        let (ok, d) = r?;
        exact += usize::from(ok);
        dim = d;
    }
    let passed = exact == 20 && dim == 500 && within(elapsed, 60.0);
    Ok((passed, format!("{exact}/20 seeds restored bit-for-bit with empty buffers, dim {dim}, T {T}, limit 60 s")))
}

fn entropy() -> Outcome {
    const STEPS: usize = 10_000;
    let rate = |n, d| -> Result<f64, String> {
        let row = bench_memory(Ratio::new(n, d).map_err(err)?, STEPS, 100, 0, 32).map_err(err)?;
        if !row.reversed_exactly {
            return Err(format!("gamma {n}/{d} did not reverse exactly"));
        }
        Ok(row.measured_bits)
    };
    let r49 = rate(49, 50)?;
    let r78 = rate(7, 8)?;
    let r12 = rate(1, 2)?;
    let r11 = rate(1, 1)?;
    let passed = (r49 - 0.029).abs() <= 0.1 * 0.029
        && (r78 - 0.19).abs() <= 0.1 * 0.19
        && (r12 - 1.0).abs() <= 1e-3
        && r11 == 0.0;
    Ok((
        passed,
        format!(
            "bits/element/step: 49/50 {r49:.5} (0.029 +-10%), 7/8 {r78:.5} (0.19 +-10%), 1/2 {r12:.5} (1 +-1e-3), 1/1 {r11}"
        ),
    ))
}

fn memory_factor() -> Outcome {
    const STEPS: usize = 10_000;
    const ELEMENTS: usize = 100;
    let start = Instant::now();
    let row = bench_memory(Ratio::new(9, 10).map_err(err)?, STEPS, ELEMENTS, 0, 32).map_err(err)?;
    let elapsed = start.elapsed();
    let stored = row.measured_bits * (STEPS * ELEMENTS) as f64;
    let factor = (32 * STEPS * ELEMENTS) as f64 / stored;
    let reported_agrees = row.ratio_vs_32bit.is_some_and(|r| (r - factor).abs() <= 1e-9 * factor);
    let passed = (180.0..=230.0).contains(&factor) && reported_agrees && row.reversed_exactly && within(elapsed, 30.0);
    Ok((passed, format!("32-bit cache / buffer = {factor:.1} (want 180..230), limit 30 s")))
}

fn flat(r: &HypergradResult) -> Vec<f64> {
    r.d_alpha.iter().chain(&r.d_gamma).flatten().chain(&r.d_theta).copied().collect()
}

fn hypergradient_correctness() -> Outcome {
    const T: usize = 50;
    const FB: u32 = 48;
    let start = Instant::now();
    let train = synthetic_classification(21, 200, 10, 3, 2.0).map_err(err)?;
    let valid = synthetic_classification(22, 100, 10, 3, 2.0).map_err(err)?;
    let model = Classifier::new(vec![10, 3], InputSource::Fixed(train), Objective::Validation(valid))
        .and_then(|m| m.with_weight_bands(7))
        .map_err(err)?;
    let layout = model.param_layout();
    let groups = layout.num_groups();
    let batches = BatchSchedule::new(21, 200, 50, T).map_err(err)?;
    let f = Batched { model: &model, batches: &batches };

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let decays = ["1/2", "2/3", "3/4", "4/5"];
    let mut sched = Schedules::constant(T, groups, 0.3, Ratio::new(1, 2).map_err(err)?, model.default_theta());
    for t in 0..T {
        for g in 0..groups {
            sched.alphas[t][g] = rng.random_range(0.1..0.5);
            sched.gammas[t][g] = decays[rng.random_range(0..decays.len())].parse().map_err(err)?;
        }
    }
    let w1 = init_weights(model.init_scales(&sched.theta), layout, 24).map_err(err)?;
    let zeros = vec![0.0; w1.len()];

    let mut state = TrainState::new(&w1, FB).map_err(err)?;
    sgd_forward(&mut state, &sched, &f, layout).map_err(err)?;
    let meta = model.meta_objective(&state.w.dequantize(), &sched.theta).map_err(err)?;
    let exact = sgd_reverse(&mut state, &sched, &f, layout, &meta.w, &zeros).map_err(err)?;

    let real = sched.to_real();
    let w1q = TrainState::new(&w1, FB).map_err(err)?.w.dequantize();
    let naive_loss = |s: &RealSchedules| -> Result<f64, String> {
        let traj = naive_forward(&w1q, &zeros, s, &f, layout).map_err(err)?;
        Ok(model.meta_objective(traj.final_w(), &s.theta).map_err(err)?.value)
    };
    let traj = naive_forward(&w1q, &zeros, &real, &f, layout).map_err(err)?;
    let meta_n = model.meta_objective(traj.final_w(), &real.theta).map_err(err)?;
    let naive = naive_reverse(&traj, &real, &f, layout, &meta_n.w, &zeros).map_err(err)?;

    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    let worst_exact = flat(&exact).iter().zip(flat(&naive)).map(|(a, b)| rel(*a, b)).fold(0.0, f64::max);

    let h = 1e-4;
    let mut worst_fd = 0.0f64;
    for _ in 0..20 {
        let (t, g) = (rng.random_range(0..T), rng.random_range(0..groups));
        let is_alpha = rng.random_bool(0.5);
        let bump = |delta: f64| {
            let mut s = real.clone();
            if is_alpha {
                s.alphas[t][g] += delta;
            } else {
                s.gammas[t][g] += delta;
            }
            s
        };
        let fd = (naive_loss(&bump(h))? - naive_loss(&bump(-h))?) / (2.0 * h);
        let reported = if is_alpha { naive.d_alpha[t][g] } else { naive.d_gamma[t][g] };
        worst_fd = worst_fd.max(rel(reported, fd));
    }
    let elapsed = start.elapsed();
    let passed = groups == 8 && worst_exact <= 1e-6 && worst_fd <= 1e-5 && within(elapsed, 120.0);
    Ok((
        passed,
        format!(
            "{groups} groups, T {T}: exact vs cached worst rel err {worst_exact:.2e} (<= 1e-6), cached vs central FD worst rel err {worst_fd:.2e} (<= 1e-5), limit 120 s"
        ),
    ))
}

/// Closed-form Hessian-vector product of mean softmax cross-entropy, with
/// `w` laid out as a `features x classes` matrix followed by the biases.
fn closed_form_hvp(w: &[f64], u: &[f64], x: &[f64], n: usize, features: usize, classes: usize) -> Vec<f64> {
    let bias = features * classes;
    let logits = |m: &[f64], xi: &[f64]| -> Vec<f64> {
        (0..classes).map(|c| m[bias + c] + (0..features).map(|j| xi[j] * m[j * classes + c]).sum::<f64>()).collect()
    };
    let mut out = vec![0.0; w.len()];
    for xi in x.chunks(features).take(n) {
        let z = logits(w, xi);
        let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / total).collect();
        // (diag(p) - p p^T) applied to the logit perturbation
        let dz = logits(u, xi);
        let mean: f64 = p.iter().zip(&dz).map(|(a, b)| a * b).sum();
        for c in 0..classes {
            let r = p[c] * (dz[c] - mean) / n as f64;
            for j in 0..features {
                out[j * classes + c] += xi[j] * r;
            }
            out[bias + c] += r;
        }
    }
    out
}

fn hvp_exactness() -> Outcome {
    let (features, classes, n) = (6, 4, 30);
    let data = synthetic_classification(31, n, features, classes, 2.0).map_err(err)?;
    let model =
        Classifier::new(vec![features, classes], InputSource::Fixed(data.clone()), Objective::Training).map_err(err)?;
    let batches = BatchSchedule::full(n, 1);
    let f = Batched { model: &model, batches: &batches };
    let theta = model.default_theta();
    let dim = model.dim_w();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut sample = |scale: f64| -> Vec<f64> { (0..dim).map(|_| rng.random_range(-scale..scale)).collect() };
    let (mut worst_closed, mut worst_sym) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (w, u, v) = (sample(2.0), sample(1.0), sample(1.0));
        let hu = hvp_ww(&f, &w, &theta, 0, &u).map_err(err)?;
        let hv = hvp_ww(&f, &w, &theta, 0, &v).map_err(err)?;
        let want = closed_form_hvp(&w, &u, data.inputs(), n, features, classes);
        for (g, e) in hu.iter().zip(&want) {
            worst_closed = worst_closed.max((g - e).abs() / e.abs().max(1.0));
        }
        let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
        let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
        worst_sym = worst_sym.max((vhu - uhv).abs() / vhu.abs().max(1.0));
    }
    let passed = worst_closed <= 1e-10 && worst_sym <= 1e-10;
    Ok((
        passed,
        format!("100 probes: closed-form worst err {worst_closed:.2e}, symmetry worst err {worst_sym:.2e} (both <= 1e-10)"),
    ))
}

fn toy_mlp(iterations: usize) -> Result<(Classifier, BatchSchedule), String> {
    let data = synthetic_classification(41, 100, 8, 3, 3.0).map_err(err)?;
    let model = Classifier::new(vec![8, 10, 3], InputSource::Fixed(data), Objective::Training).map_err(err)?;
    let batches = BatchSchedule::new(41, 100, 25, iterations).map_err(err)?;
    Ok((model, batches))
}

fn float_reversal() -> Outcome {
    const T: usize = 500;
    let (model, batches) = toy_mlp(T)?;
    let f = Batched { model: &model, batches: &batches };
    let layout = model.param_layout();
    let sched = Schedules::constant(T, layout.num_groups(), 0.3, Ratio::new(9, 10).map_err(err)?, model.default_theta())
        .to_real();
    let w1 = init_weights(model.init_scales(&sched.theta), layout, 42).map_err(err)?;
    Ok(match float_reverse_unbuffered(&w1, &sched, &f, layout).map_err(err)? {
        FloatReversal::Overflowed { iteration } => (true, format!("overflowed while undoing iteration {iteration}")),
        FloatReversal::Recovered { w1: got, .. } => {
            let diff: f64 = got.iter().zip(&w1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = w1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = diff / norm;
            (rel > 1e-2, format!("recovered w1 relative error {rel:.3e} (want > 1e-2)"))
        }
    })
}

fn meta_descent() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = ExperimentConfig::preset(ExperimentId::LrSchedule);
    let report = experiment::run_in(&config, dir.path()).map_err(err)?;
    let r = &report.results;
    let meta = r.meta.as_ref().ok_or("no meta summary")?;
    let Analysis::LrSchedule { mean_alpha_last_10pct: last, mean_alpha_middle_50pct: middle } = r.analysis else {
        return Err("wrong analysis kind".into());
    };
    let fallback = r.dataset.as_ref().is_some_and(|d| d.fallback);
    let passed = meta.final_meta_loss < meta.initial_meta_loss
        && last < middle
        && config.meta.iterations == 20
        && config.meta.adam.step == 0.04;
    Ok((
        passed,
        format!(
            "meta-loss {:.5} -> {:.5} over {} meta-iterations, mean alpha last 10% {last:.4} < middle 50% {middle:.4}{}",
            meta.initial_meta_loss,
            meta.final_meta_loss,
            config.meta.iterations,
            if fallback { ", synthetic data" } else { "" }
        ),
    ))
}

fn chaos() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let start = Instant::now();
    let report = experiment::run_in(&ExperimentConfig::preset(ExperimentId::ChaosSweep), dir.path()).map_err(err)?;
    let elapsed = start.elapsed();
    let Analysis::ChaosSweep { points, sentinel_rows, correlation_bottom_decade, correlation_top_decade, .. } =
        report.results.analysis
    else {
        return Err("wrong analysis kind".into());
    };
    let passed = match (correlation_bottom_decade, correlation_top_decade) {
        (Some(bottom), Some(top)) => top < bottom,
        _ => false,
    };
    Ok((
        passed && within(elapsed, 120.0),
        format!(
            "{points} points, {sentinel_rows} sentinel: correlation top decade {correlation_top_decade:?} < bottom decade {correlation_bottom_decade:?}, limit 120 s"
        ),
    ))
}

fn time_ratio() -> Outcome {
    let mut details = Vec::new();
    let mut passed = true;
    for t in [100, 1000] {
        let (model, batches) = toy_mlp(t)?;
        let f = Batched { model: &model, batches: &batches };
        let layout = model.param_layout();
        let sched =
            Schedules::constant(t, layout.num_groups(), 0.3, Ratio::new(9, 10).map_err(err)?, model.default_theta());
        let w1 = init_weights(model.init_scales(&sched.theta), layout, 43).map_err(err)?;
        let zeros = vec![0.0; w1.len()];
        // best of three to damp scheduler noise
        let (mut fwd, mut rev) = (f64::INFINITY, f64::INFINITY);
        for _ in 0..3 {
            let mut state = TrainState::new(&w1, 32).map_err(err)?;
            let s = Instant::now();
            sgd_forward(&mut state, &sched, &f, layout).map_err(err)?;
            fwd = fwd.min(s.elapsed().as_secs_f64());
            let s = Instant::now();
            sgd_reverse(&mut state, &sched, &f, layout, &zeros, &zeros).map_err(err)?;
            rev = rev.min(s.elapsed().as_secs_f64());
        }
        let ratio = rev / fwd;
        passed &= ratio <= 3.0;
        details.push(format!("T {t}: {ratio:.2}"));
    }
    Ok((passed, format!("reverse/forward wall clock {} (<= 3.0)", details.join(", "))))
}

/// Desk-scale configs shrunk further so that every experiment runs twice in
/// reasonable time.
fn reduced(id: ExperimentId) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(id);
    c.dataset.source = DataSource::Synthetic;
    c.dataset.train = c.dataset.train.min(200);
    c.dataset.valid = 100;
    c.dataset.side = 4;
    c.dataset.classes = 4;
    c.training.iterations = 20;
    if c.training.batch_size != 0 {
        c.training.batch_size = 50;
    }
    c.model.hidden.truncate(1);
    c.meta.iterations = 4;
    c.meta.seeds = 2;
    c.meta.eval_seeds = 2;
    c.chaos.points = 16;
    c.memory.steps = 500;
    c.memory.elements = 10;
    c
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<(String, String)>, String> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let mut text = std::fs::read_to_string(&path).map_err(err)?;
        if name == experiment::RESULTS_FILE {
            text = without_timestamp(&text);
        }
        files.push((name, text));
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for id in ExperimentId::ALL {
        let config = reduced(id);
        let a = tempfile::tempdir().map_err(err)?;
        let b = tempfile::tempdir().map_err(err)?;
        experiment::run_in(&config, a.path()).map_err(err)?;
        experiment::run_in(&config, b.path()).map_err(err)?;
        let (fa, fb) = (read_dir_sorted(a.path())?, read_dir_sorted(b.path())?);
        compared += fa.len();
        if fa.is_empty() || fa != fb {
            mismatched.push(id.to_string());
        }
    }
    let passed = mismatched.is_empty();
    Ok((
        passed,
        format!(
            "{} experiments rerun, {compared} artifacts compared byte-for-byte (timestamp excluded), mismatches: {mismatched:?}",
            ExperimentId::ALL.len()
        ),
    ))
}
