//! Oracle-agreement checks run by `revlearn verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::memory::bench_memory;
use crate::autodiff::{hvp_ww, value_and_grad};
use crate::data::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, synthetic_classification, BatchSchedule};
use crate::error::Result;
use crate::fixed::{dequantize, quantize};
use crate::models::{init_weights, Batched, Classifier, InputSource, Model, Objective, Regularizer};
use crate::revbuf::{rat_mul, rat_mul_inverse, InfoBuffer, Ratio};
use crate::train::{float_reverse_unbuffered, naive_forward, naive_reverse, FloatReversal};
use crate::train::{sgd_forward, sgd_reverse, HypergradResult, Schedules, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 9] = [
    ("ratio multiply round-trips", ratio_round_trip),
    ("fixed-point quantization error <= half ulp", quantization),
    ("logistic HVP matches closed form", logistic_hvp),
    ("MLP gradient matches finite differences", mlp_gradient),
    ("reverse pass restores the initial state bit-for-bit", exact_reversal),
    ("exact hypergradient matches cached-trajectory oracle", reverse_vs_naive),
    ("buffer stores one bit per step at gamma 1/2", entropy_half),
    ("float-only reversal fails", float_reversal),
    ("IDX encode/parse round-trips", idx_round_trip),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| match check() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn ratio_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ratios = ["1/2", "2/3", "7/8", "9/10", "49/50", "65535/65536"];
    for r in ratios {
        let r: Ratio = r.parse()?;
        let mut buf = InfoBuffer::new();
        let start: Vec<i64> = (0..200).map(|_| rng.random_range(-(1i64 << 40)..(1i64 << 40))).collect();
        let mut cs = start.clone();
        for c in &mut cs {
            rat_mul(&mut buf, c, r);
        }
        for c in cs.iter_mut().rev() {
            rat_mul_inverse(&mut buf, c, r)?;
        }
        if cs != start || !buf.is_empty() {
            return Ok((false, format!("round trip failed at {r}")));
        }
    }
    Ok((true, format!("{} ratios x 200 values", ratios.len())))
}

fn quantization() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let half_ulp = 2f64.powi(-33);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x = rng.random_range(-1e6..1e6);
        worst = worst.max((dequantize(quantize(x, 32)?) - x).abs());
    }
    Ok((worst <= half_ulp, format!("worst error {worst:.3e}, bound {half_ulp:.3e}")))
}

fn logistic_hvp() -> Result<(bool, String)> {
    let (features, classes, n) = (5, 3, 12);
    let data = synthetic_classification(3, n, features, classes, 2.0)?;
    let model = Classifier::new(vec![features, classes], InputSource::Fixed(data.clone()), Objective::Training)?;
    let batches = BatchSchedule::full(n, 1);
    let f = Batched { model: &model, batches: &batches };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dim = model.dim_w();
    let theta = model.default_theta();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = hvp_ww(&f, &w, &theta, 0, &u)?;
        let want = softmax_hvp(&w, &u, data.inputs(), data.labels().len(), features, classes);
        for (g, e) in got.iter().zip(&want) {
            worst = worst.max((g - e).abs() / e.abs().max(1.0));
        }
    }
    Ok((worst <= 1e-10, format!("worst error {worst:.3e}")))
}

/// `H u` for mean softmax cross-entropy with `w = [W (features x classes), b]`.
fn softmax_hvp(w: &[f64], u: &[f64], x: &[f64], n: usize, features: usize, classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    let bias = features * classes;
    for i in 0..n {
        let xi = &x[i * features..(i + 1) * features];
        let logit = |m: &[f64], c: usize| m[bias + c] + (0..features).map(|j| xi[j] * m[j * classes + c]).sum::<f64>();
        let z: Vec<f64> = (0..classes).map(|c| logit(w, c)).collect();
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        let dz: Vec<f64> = (0..classes).map(|c| logit(u, c)).collect();
        let pd: f64 = p.iter().zip(&dz).map(|(a, b)| a * b).sum();
        for c in 0..classes {
            let r = p[c] * (dz[c] - pd) / n as f64;
            for j in 0..features {
                out[j * classes + c] += xi[j] * r;
            }
            out[bias + c] += r;
        }
    }
    out
}

fn mlp_gradient() -> Result<(bool, String)> {
    let data = synthetic_classification(5, 20, 4, 3, 2.0)?;
    let model = Classifier::new(vec![4, 5, 3], InputSource::Fixed(data), Objective::Training)?
        .with_regularizer(Regularizer::PerParamL2);
    let batches = BatchSchedule::full(20, 1);
    let f = Batched { model: &model, batches: &batches };
    let theta = model.default_theta();
    let w = init_weights(model.init_scales(&theta), model.param_layout(), 9)?;
    let (_, g) = value_and_grad(&f, &w, &theta, 0)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let (mut p, mut m) = (w.clone(), w.clone());
        p[i] += h;
        m[i] -= h;
        let fd = (value_and_grad(&f, &p, &theta, 0)?.0 - value_and_grad(&f, &m, &theta, 0)?.0) / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / fd.abs().max(1e-3));
    }
    Ok((worst <= 1e-6, format!("worst relative error {worst:.3e} over {} weights", w.len())))
}

fn toy_mlp() -> Result<(Classifier, BatchSchedule)> {
    let data = synthetic_classification(6, 100, 8, 3, 3.0)?;
    let model = Classifier::new(vec![8, 10, 3], InputSource::Fixed(data), Objective::Training)?;
    let batches = BatchSchedule::new(6, 100, 25, 100)?;
    Ok((model, batches))
}

fn exact_reversal() -> Result<(bool, String)> {
    let (model, batches) = toy_mlp()?;
    let f = Batched { model: &model, batches: &batches };
    let layout = model.param_layout();
    let sched = Schedules::constant(100, layout.num_groups(), 0.3, Ratio::new(9, 10)?, model.default_theta());
    let w1 = init_weights(model.init_scales(&sched.theta), layout, 6)?;
    let mut state = TrainState::new(&w1, 32)?;
    let start = state.clone();
    sgd_forward(&mut state, &sched, &f, layout)?;
    let bits = state.buffer_bits();
    let zeros = vec![0.0; w1.len()];
    sgd_reverse(&mut state, &sched, &f, layout, &zeros, &zeros)?;
    Ok((state == start, format!("T = 100, {} weights, {bits:.0} buffer bits", w1.len())))
}

fn reverse_vs_naive() -> Result<(bool, String)> {
    let train = synthetic_classification(7, 60, 6, 3, 3.0)?;
    let valid = synthetic_classification(8, 30, 6, 3, 3.0)?;
    let model = Classifier::new(vec![6, 3], InputSource::Fixed(train), Objective::Validation(valid))?;
    let batches = BatchSchedule::new(7, 60, 20, 20)?;
    let f = Batched { model: &model, batches: &batches };
    let layout = model.param_layout();
    let mut sched = Schedules::constant(20, layout.num_groups(), 0.2, Ratio::new(9, 10)?, model.default_theta());
    let gammas = ["1/2", "3/4", "7/8", "9/10"];
    for (t, row) in sched.gammas.iter_mut().enumerate() {
        for g in row.iter_mut() {
            *g = gammas[t % gammas.len()].parse()?;
        }
    }
    const FB: u32 = 48;
    let w1 = init_weights(model.init_scales(&sched.theta), layout, 7)?;
    let mut state = TrainState::new(&w1, FB)?;
    sgd_forward(&mut state, &sched, &f, layout)?;
    let meta = model.meta_objective(&state.w.dequantize(), &sched.theta)?;
    let zeros = vec![0.0; w1.len()];
    let exact = sgd_reverse(&mut state, &sched, &f, layout, &meta.w, &zeros)?;
    let real = sched.to_real();
    let w1q = TrainState::new(&w1, FB)?.w.dequantize();
    let traj = naive_forward(&w1q, &zeros, &real, &f, layout)?;
    let meta_n = model.meta_objective(traj.final_w(), &real.theta)?;
    let naive = naive_reverse(&traj, &real, &f, layout, &meta_n.w, &zeros)?;
    let flat = |r: &HypergradResult| -> Vec<f64> {
        r.d_alpha.iter().chain(&r.d_gamma).flatten().chain(&r.d_theta).copied().collect()
    };
    let worst = flat(&exact).iter().zip(flat(&naive)).map(|(a, b)| rel_err(*a, b)).fold(0.0, f64::max);
    Ok((worst <= 1e-6, format!("worst per-component relative error {worst:.3e}")))
}

fn entropy_half() -> Result<(bool, String)> {
    let row = bench_memory(Ratio::new(1, 2)?, 2000, 20, 0, 32)?;
    let ok = (row.measured_bits - 1.0).abs() <= 1e-2 && row.reversed_exactly;
    Ok((ok, format!("{:.4} bits per step per element", row.measured_bits)))
}

fn float_reversal() -> Result<(bool, String)> {
    let (model, _) = toy_mlp()?;
    let batches = BatchSchedule::new(6, 100, 25, 500)?;
    let f = Batched { model: &model, batches: &batches };
    let layout = model.param_layout();
    let sched = Schedules::constant(500, layout.num_groups(), 0.3, Ratio::new(9, 10)?, model.default_theta()).to_real();
    let w1 = init_weights(model.init_scales(&sched.theta), layout, 6)?;
    Ok(match float_reverse_unbuffered(&w1, &sched, &f, layout)? {
        FloatReversal::Overflowed { iteration } => (true, format!("overflowed undoing iteration {iteration}")),
        FloatReversal::Recovered { w1: got, .. } => {
            let num: f64 = got.iter().zip(&w1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = w1.iter().map(|x| x * x).sum::<f64>().sqrt();
            (num / den > 1e-2, format!("recovered w1 with relative error {:.3e}", num / den))
        }
    })
}

fn idx_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (count, rows, cols) = (7, 3, 4);
    let pixels: Vec<f64> = (0..count * rows * cols).map(|_| rng.random_range(0u8..=255) as f64 / 255.0).collect();
    let labels: Vec<usize> = (0..count).map(|_| rng.random_range(0..10)).collect();
    let images = parse_idx_images(&encode_idx_images(count, rows, cols, &pixels)?)?;
    let parsed_labels = parse_idx_labels(&encode_idx_labels(&labels)?)?;
    let ok = images.pixels == pixels
        && (images.count, images.rows, images.cols) == (count, rows, cols)
        && parsed_labels.iter().map(|&l| l as usize).eq(labels.iter().copied());
    Ok((ok, format!("{count} images of {rows}x{cols}")))
}
