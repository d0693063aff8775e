//! Outer loop: hyperparameter transforms, seed-averaged hypergradients and
//! Adam meta-updates.
//!
//! The meta-vector is `phi = [log alpha (T x G), logit gamma (T x G), theta]`,
//! row-major in `(t, group)`. `theta` is stored as the model consumes it
//! (its blocks already carry their own log or identity parameterization).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BatchSchedule;
use crate::error::{Error, Result};
use crate::fixed::DEFAULT_FRAC_BITS;
use crate::models::{init_weights, Batched, Model};
use crate::revbuf::{Ratio, MAX_DENOMINATOR};
use crate::train::{hypergradient, sgd_forward, HypergradResult, Schedules, TrainState};

/// Sizes of the three parts of `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhiLayout {
    pub iterations: usize,
    pub groups: usize,
    pub dim_theta: usize,
}

impl PhiLayout {
    pub fn for_model<M: Model + ?Sized>(model: &M, iterations: usize) -> Self {
        Self { iterations, groups: model.param_layout().num_groups(), dim_theta: model.dim_theta() }
    }

    pub fn schedule_len(&self) -> usize {
        self.iterations * self.groups
    }

    pub fn len(&self) -> usize {
        2 * self.schedule_len() + self.dim_theta
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn alpha_range(&self) -> std::ops::Range<usize> {
        0..self.schedule_len()
    }

    pub fn gamma_range(&self) -> std::ops::Range<usize> {
        self.schedule_len()..2 * self.schedule_len()
    }

    pub fn theta_range(&self) -> std::ops::Range<usize> {
        2 * self.schedule_len()..self.len()
    }

    /// `phi` for constant schedules and the given `theta`.
    pub fn initial(&self, alpha: f64, gamma: f64, theta: &[f64]) -> Result<Vec<f64>> {
        if !(alpha > 0.0 && gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Shape(format!("initial alpha {alpha} must be > 0 and gamma {gamma} in (0, 1)")));
        }
        if theta.len() != self.dim_theta {
            return Err(Error::Shape(format!("theta has {} entries, expected {}", theta.len(), self.dim_theta)));
        }
        let mut phi = vec![alpha.ln(); self.schedule_len()];
        phi.extend(std::iter::repeat_n(logit(gamma), self.schedule_len()));
        phi.extend_from_slice(theta);
        Ok(phi)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `alpha = exp(phi_alpha)`, `gamma = logistic(phi_gamma)` rounded to the
/// nearest ratio with denominator at most `2^16`, `theta` unchanged.
pub fn transform(phi: &[f64], layout: &PhiLayout) -> Result<Schedules> {
    if phi.len() != layout.len() {
        return Err(Error::Shape(format!("phi has {} entries, expected {}", phi.len(), layout.len())));
    }
    if let Some(i) = phi.iter().position(|x| !x.is_finite()) {
        return Err(Error::Shape(format!("phi[{i}] is not finite")));
    }
    let (s, g) = (layout.schedule_len(), layout.groups);
    let rows = |range: std::ops::Range<usize>| -> Vec<Vec<f64>> {
        if g == 0 {
            return vec![Vec::new(); layout.iterations];
        }
        phi[range].chunks(g).map(<[f64]>::to_vec).collect()
    };
    let alphas = rows(0..s).into_iter().map(|r| r.into_iter().map(f64::exp).collect()).collect();
    let gammas = rows(s..2 * s)
        .into_iter()
        .map(|r| r.into_iter().map(|x| Ratio::approximate(logistic(x), MAX_DENOMINATOR)).collect())
        .collect();
    Ok(Schedules { alphas, gammas, theta: phi[layout.theta_range()].to_vec() })
}

/// Pulls schedule adjoints back through [`transform`]. The gamma factor is
/// the continuous logistic derivative (straight-through rounding).
pub fn chain(phi: &[f64], layout: &PhiLayout, r: &HypergradResult) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.len());
    let s = layout.schedule_len();
    out.extend(r.d_alpha.iter().flatten().zip(&phi[..s]).map(|(d, p)| d * p.exp()));
    out.extend(r.d_gamma.iter().flatten().zip(&phi[s..2 * s]).map(|(d, p)| {
        let y = logistic(*p);
        d * y * (1.0 - y)
    }));
    out.extend_from_slice(&r.d_theta);
    out
}

/// Which parts of `phi` the meta-optimizer may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhiMask(Vec<bool>);

impl PhiMask {
    pub fn all(layout: &PhiLayout) -> Self {
        Self(vec![true; layout.len()])
    }

    pub fn none(layout: &PhiLayout) -> Self {
        Self(vec![false; layout.len()])
    }

    pub fn enable(mut self, range: std::ops::Range<usize>) -> Self {
        self.0[range].iter_mut().for_each(|m| *m = true);
        self
    }

    pub fn is_enabled(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn apply(&self, g: &mut [f64]) {
        for (x, &on) in g.iter_mut().zip(&self.0) {
            if !on {
                *x = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { step: 0.04, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments over `phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub phi: Vec<f64>,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub iteration: usize,
    pub adam: AdamConfig,
}

impl MetaState {
    pub fn new(phi: Vec<f64>, adam: AdamConfig) -> Self {
        let n = phi.len();
        Self { phi, m: vec![0.0; n], u: vec![0.0; n], iteration: 0, adam }
    }
}

/// One Adam descent step with bias correction.
pub fn adam_step(state: &mut MetaState, g: &[f64]) -> Result<()> {
    if g.len() != state.phi.len() {
        return Err(Error::Shape(format!("gradient has {} entries, phi has {}", g.len(), state.phi.len())));
    }
    let AdamConfig { step, beta1, beta2, eps } = state.adam;
    state.iteration += 1;
    let k = state.iteration as i32;
    let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
    for i in 0..g.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
        state.u[i] = beta2 * state.u[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let u_hat = state.u[i] / c2;
        state.phi[i] -= step * m_hat / (u_hat.sqrt() + eps);
    }
    Ok(())
}

/// How each elementary run is batched and represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub batch_size: usize,
    pub frac_bits: u32,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self { batch_size: usize::MAX, frac_bits: DEFAULT_FRAC_BITS }
    }
}

impl RunSpec {
    pub fn batches(&self, seed: u64, n: usize, iterations: usize) -> Result<BatchSchedule> {
        if self.batch_size >= n {
            Ok(BatchSchedule::full(n, iterations))
        } else {
            BatchSchedule::new(seed, n, self.batch_size, iterations)
        }
    }
}

/// Seed-averaged hypergradient in `phi` space.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedHypergrad {
    pub grad: Vec<f64>,
    pub meta_loss: f64,
    /// Mean training loss at each elementary iteration.
    pub loss_trace: Vec<f64>,
    /// Mean buffer bits per element per step.
    pub buffer_bits_per_step: f64,
}

/// Mean over `seeds` of the chained hypergradient. Seeds run in parallel;
/// the reduction is in seed order, so the result does not depend on
/// scheduling.
pub fn hypergrad_avg<M: Model + ?Sized>(
    phi: &[f64],
    layout: &PhiLayout,
    model: &M,
    seeds: &[u64],
    spec: RunSpec,
) -> Result<AveragedHypergrad> {
    if seeds.is_empty() {
        return Err(Error::Shape("hypergradient averaging needs at least one seed".into()));
    }
    let sched = transform(phi, layout)?;
    let runs: Vec<Result<_>> = seeds
        .par_iter()
        .map(|&seed| {
            let batches = spec.batches(seed, model.train_len(), layout.iterations)?;
            let out = hypergradient(model, &sched, &batches, seed, spec.frac_bits).map_err(|e| e.at_seed(seed))?;
            Ok((chain(phi, layout, &out.grads), out))
        })
        .collect();
    let k = seeds.len() as f64;
    let mut avg = AveragedHypergrad {
        grad: vec![0.0; layout.len()],
        meta_loss: 0.0,
        loss_trace: vec![0.0; layout.iterations],
        buffer_bits_per_step: 0.0,
    };
    for run in runs {
        let (g, out) = run?;
        for (a, x) in avg.grad.iter_mut().zip(g) {
            *a += x / k;
        }
        for (a, x) in avg.loss_trace.iter_mut().zip(&out.grads.loss_trace) {
            *a += x / k;
        }
        avg.meta_loss += out.meta_loss / k;
        avg.buffer_bits_per_step += out.memory.buffer_bits_per_step_per_element / k;
    }
    Ok(avg)
}

/// Mean meta-objective after forward training only.
pub fn evaluate<M: Model + ?Sized>(phi: &[f64], layout: &PhiLayout, model: &M, seeds: &[u64], spec: RunSpec) -> Result<f64> {
    let sched = transform(phi, layout)?;
    let losses: Vec<Result<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let run = || -> Result<f64> {
                let batches = spec.batches(seed, model.train_len(), layout.iterations)?;
                let w1 = init_weights(model.init_scales(&sched.theta), model.param_layout(), seed)?;
                let mut state = TrainState::new(&w1, spec.frac_bits)?;
                sgd_forward(&mut state, &sched, &Batched { model, batches: &batches }, model.param_layout())?;
                Ok(model.meta_objective(&state.w.dequantize(), &sched.theta)?.value)
            };
            run().map_err(|e| e.at_seed(seed))
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / seeds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub iterations: usize,
    pub seeds_per_iteration: usize,
    /// Seeds for meta-iteration `k` are `base_seed + k * seeds_per_iteration + j`.
    pub base_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub spec: RunSpec,
    pub adam: AdamConfig,
    /// Stop once the hypergradient norm exceeds this multiple of its first value.
    pub early_stop_factor: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            seeds_per_iteration: 3,
            base_seed: 0,
            eval_seeds: (1_000_000..1_000_005).collect(),
            spec: RunSpec::default(),
            adam: AdamConfig::default(),
            early_stop_factor: 10.0,
        }
    }
}

/// One meta-iteration's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub meta_iter: usize,
    /// Seed-mean meta-objective at the end of elementary training.
    pub elementary_final_loss: f64,
    pub hypergrad_norm: f64,
    /// Seed-mean training loss at each elementary iteration.
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    /// Hypergradient norm grew past the threshold; `phi` is from before
    /// that meta-iteration's update.
    NormGrowth { meta_iter: usize, norm: f64, initial: f64 },
    /// A training run failed; `phi` is the last state that trained cleanly.
    Diverged { meta_iter: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaOutcome {
    pub curve: Vec<MetaRecord>,
    pub phi: Vec<f64>,
    pub schedules: Schedules,
    pub initial_meta_loss: f64,
    pub final_meta_loss: f64,
    pub stop: StopReason,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn meta_optimize<M: Model + ?Sized>(
    model: &M,
    layout: &PhiLayout,
    phi0: Vec<f64>,
    mask: &PhiMask,
    config: &MetaConfig,
) -> Result<MetaOutcome> {
    if config.seeds_per_iteration == 0 || config.eval_seeds.is_empty() {
        return Err(Error::Shape("meta-optimization needs training and evaluation seeds".into()));
    }
    let initial_meta_loss = evaluate(&phi0, layout, model, &config.eval_seeds, config.spec)?;
    let mut state = MetaState::new(phi0, config.adam);
    let mut curve = Vec::with_capacity(config.iterations);
    let mut initial_norm = None;
    let mut stop = StopReason::Completed;
    let mut last_good = state.phi.clone();
    for k in 0..config.iterations {
        let start = config.base_seed + (k * config.seeds_per_iteration) as u64;
        let seeds: Vec<u64> = (start..start + config.seeds_per_iteration as u64).collect();
        let avg = match hypergrad_avg(&state.phi, layout, model, &seeds, config.spec) {
            Ok(avg) => avg,
            Err(e) if k == 0 => return Err(e),
            Err(e) => {
                stop = StopReason::Diverged { meta_iter: k, message: e.to_string() };
                state.phi = last_good;
                break;
            }
        };
        last_good.clone_from(&state.phi);
        let mut g = avg.grad;
        mask.apply(&mut g);
        let n = norm(&g);
        curve.push(MetaRecord {
            meta_iter: k,
            elementary_final_loss: avg.meta_loss,
            hypergrad_norm: n,
            loss_trace: avg.loss_trace,
        });
        let first = *initial_norm.get_or_insert(n);
        if n > config.early_stop_factor * first {
            stop = StopReason::NormGrowth { meta_iter: k, norm: n, initial: first };
            break;
        }
        adam_step(&mut state, &g)?;
    }
    let final_meta_loss = evaluate(&state.phi, layout, model, &config.eval_seeds, config.spec)?;
    Ok(MetaOutcome {
        curve,
        schedules: transform(&state.phi, layout)?,
        phi: state.phi,
        initial_meta_loss,
        final_meta_loss,
        stop,
    })
}
