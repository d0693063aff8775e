//! SGD with momentum over fixed-point state, its exact reversal with adjoint
//! accumulation, and a trajectory-caching float oracle.
//!
//! One forward iteration `t` (zero-based) for each element in group `k`:
//!
//! ```text
//! g      = grad_w L(dequantize(w_t), theta, t)
//! v_t+1  = rat_mul(v_t, gamma_tk) - quantize((1 - gamma_tk) g)
//! w_t+1  = w_t + quantize(alpha_tk dequantize(v_t+1))
//! ```
//!
//! The position step uses the new velocity. Reversal undoes the three lines
//! bottom-up, recomputing `g` at the recovered `w_t`.

mod checkpoint;
mod naive;

pub use checkpoint::{config_hash, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use naive::{float_reverse_unbuffered, naive_forward, naive_reverse, FloatReversal, RealSchedules, Trajectory};

use crate::autodiff::{self, DiffFn};
use crate::error::{Error, Result};
use crate::fixed::{dequantize_raw, quantize_raw, FixedVec};
use crate::data::BatchSchedule;
use crate::models::{init_scale_grad, init_weights, Batched, Model, ParamLayout};
use crate::revbuf::{rat_mul, rat_mul_inverse, InfoBuffer, Ratio};

/// Fixed-point training state after `t` iterations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainState {
    pub w: FixedVec,
    pub v: FixedVec,
    /// One information buffer per element of `v`.
    pub buffers: Vec<InfoBuffer>,
    pub t: usize,
}

impl TrainState {
    /// `w_1` quantized, `v_1 = 0`, empty buffers.
    pub fn new(w1: &[f64], frac_bits: u32) -> Result<Self> {
        let w = FixedVec::quantize(w1, frac_bits)?;
        Ok(Self { v: FixedVec::zeros(w.len(), frac_bits), buffers: vec![InfoBuffer::new(); w.len()], w, t: 0 })
    }

    pub fn with_velocity(w1: &[f64], v1: &[f64], frac_bits: u32) -> Result<Self> {
        if w1.len() != v1.len() {
            return Err(Error::Shape(format!("w has {} elements but v has {}", w1.len(), v1.len())));
        }
        let w = FixedVec::quantize(w1, frac_bits)?;
        let v = FixedVec::quantize(v1, frac_bits)?;
        Ok(Self { buffers: vec![InfoBuffer::new(); w.len()], w, v, t: 0 })
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn frac_bits(&self) -> u32 {
        self.w.frac_bits()
    }

    pub fn buffers_empty(&self) -> bool {
        self.buffers.iter().all(InfoBuffer::is_empty)
    }

    /// Information currently held, `sum log2(B_i + 1)`.
    pub fn buffer_bits(&self) -> f64 {
        self.buffers.iter().map(InfoBuffer::bits_stored).sum()
    }
}

/// Per-iteration, per-group learning rates and decays plus `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    /// `alphas[t][group]`
    pub alphas: Vec<Vec<f64>>,
    /// `gammas[t][group]`
    pub gammas: Vec<Vec<Ratio>>,
    pub theta: Vec<f64>,
}

impl Schedules {
    pub fn constant(iterations: usize, groups: usize, alpha: f64, gamma: Ratio, theta: Vec<f64>) -> Self {
        Self {
            alphas: vec![vec![alpha; groups]; iterations],
            gammas: vec![vec![gamma; groups]; iterations],
            theta,
        }
    }

    pub fn iterations(&self) -> usize {
        self.alphas.len()
    }

    pub fn groups(&self) -> usize {
        self.alphas.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, groups: usize, dim_theta: usize) -> Result<()> {
        if self.gammas.len() != self.alphas.len() {
            return Err(Error::Shape(format!(
                "{} learning-rate rows but {} decay rows",
                self.alphas.len(),
                self.gammas.len()
            )));
        }
        for (t, (a, g)) in self.alphas.iter().zip(&self.gammas).enumerate() {
            if a.len() != groups || g.len() != groups {
                return Err(Error::Shape(format!("iteration {t}: schedule rows must have {groups} groups")));
            }
            if let Some(x) = a.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(Error::Shape(format!("iteration {t}: learning rate {x} must be positive and finite")));
            }
        }
        if self.theta.len() != dim_theta {
            return Err(Error::Shape(format!("theta has {} entries, expected {dim_theta}", self.theta.len())));
        }
        Ok(())
    }

    pub fn to_real(&self) -> RealSchedules {
        RealSchedules {
            alphas: self.alphas.clone(),
            gammas: self.gammas.iter().map(|row| row.iter().map(|r| r.to_f64()).collect()).collect(),
            theta: self.theta.clone(),
        }
    }
}

/// Adjoints of the meta-objective with respect to everything training consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct HypergradResult {
    pub d_w1: Vec<f64>,
    pub d_v1: Vec<f64>,
    /// `d_alpha[t][group]`
    pub d_alpha: Vec<Vec<f64>>,
    /// `d_gamma[t][group]`
    pub d_gamma: Vec<Vec<f64>>,
    pub d_theta: Vec<f64>,
    /// Training loss at each iteration, in forward order.
    pub loss_trace: Vec<f64>,
}

impl HypergradResult {
    fn zeros(iterations: usize, groups: usize, dim_theta: usize, d_w: &[f64], d_v: &[f64]) -> Self {
        Self {
            d_w1: d_w.to_vec(),
            d_v1: d_v.to_vec(),
            d_alpha: vec![vec![0.0; groups]; iterations],
            d_gamma: vec![vec![0.0; groups]; iterations],
            d_theta: vec![0.0; dim_theta],
            loss_trace: vec![0.0; iterations],
        }
    }
}

fn check_run<F: DiffFn + ?Sized>(len: usize, sched: &Schedules, f: &F, layout: &ParamLayout) -> Result<()> {
    if layout.len() != len || f.dim_w() != len {
        return Err(Error::Shape(format!(
            "state has {len} elements, layout {} and loss {}",
            layout.len(),
            f.dim_w()
        )));
    }
    sched.validate(layout.num_groups(), f.dim_theta())
}

fn check_real_run<F: DiffFn + ?Sized>(
    len: usize,
    v_len: usize,
    sched: &RealSchedules,
    f: &F,
    layout: &ParamLayout,
) -> Result<()> {
    if layout.len() != len || f.dim_w() != len || v_len != len {
        return Err(Error::Shape(format!(
            "state has {len} elements, velocity {v_len}, layout {} and loss {}",
            layout.len(),
            f.dim_w()
        )));
    }
    let groups = layout.num_groups();
    if sched.gammas.len() != sched.alphas.len()
        || sched.alphas.iter().chain(&sched.gammas).any(|row| row.len() != groups)
    {
        return Err(Error::Shape(format!("schedule rows must have {groups} groups")));
    }
    if sched.theta.len() != f.dim_theta() {
        return Err(Error::Shape(format!("theta has {} entries, expected {}", sched.theta.len(), f.dim_theta())));
    }
    Ok(())
}

/// Runs iterations `state.t .. T`. Returns the per-iteration training loss.
pub fn sgd_forward<F: DiffFn + ?Sized>(
    state: &mut TrainState,
    sched: &Schedules,
    f: &F,
    layout: &ParamLayout,
) -> Result<Vec<f64>> {
    check_run(state.len(), sched, f, layout)?;
    if state.t == 0 && !state.buffers_empty() {
        return Err(Error::Integrity("forward pass from t = 0 needs empty buffers".into()));
    }
    let fb = state.frac_bits();
    let group = layout.group_of_each();
    let mut losses = Vec::with_capacity(sched.iterations().saturating_sub(state.t));
    let mut q = vec![0i64; state.len()];
    while state.t < sched.iterations() {
        let t = state.t;
        let mut step = || -> Result<f64> {
            let w = state.w.dequantize();
            let (loss, g) = autodiff::value_and_grad(f, &w, &sched.theta, t)?;
            for (i, (qi, gi)) in q.iter_mut().zip(&g).enumerate() {
                *qi = quantize_raw((1.0 - sched.gammas[t][group[i]].to_f64()) * gi, fb)?;
            }
            Ok(loss)
        };
        let loss = step().map_err(|e| e.at_iteration(t))?;
        let v = state.v.raw_mut();
        for i in 0..v.len() {
            rat_mul(&mut state.buffers[i], &mut v[i], sched.gammas[t][group[i]]);
            v[i] = v[i].wrapping_sub(q[i]);
        }
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = quantize_raw(sched.alphas[t][group[i]] * dequantize_raw(state.v.as_raw()[i], fb), fb)
                .map_err(|e| e.at_iteration(t))?;
        }
        let w = state.w.raw_mut();
        for (wi, qi) in w.iter_mut().zip(&q) {
            *wi = wi.wrapping_add(*qi);
        }
        state.t += 1;
        losses.push(loss);
    }
    Ok(losses)
}

/// Unwinds `state` to `t = 0` while accumulating adjoints, starting from
/// `d_w = df/dw_T` and `d_v = df/dv_T`.
///
/// On success the state holds `(w_1, v_1)` bit-for-bit and every buffer is
/// empty; leftover buffer content is an integrity error.
pub fn sgd_reverse<F: DiffFn + ?Sized>(
    state: &mut TrainState,
    sched: &Schedules,
    f: &F,
    layout: &ParamLayout,
    d_w: &[f64],
    d_v: &[f64],
) -> Result<HypergradResult> {
    check_run(state.len(), sched, f, layout)?;
    if d_w.len() != state.len() || d_v.len() != state.len() {
        return Err(Error::Shape("terminal adjoints must match the state length".into()));
    }
    if state.t > sched.iterations() {
        return Err(Error::Integrity(format!(
            "state is at iteration {} but the schedule has {}",
            state.t,
            sched.iterations()
        )));
    }
    let fb = state.frac_bits();
    let n = state.len();
    let group = layout.group_of_each();
    let mut out = HypergradResult::zeros(sched.iterations(), layout.num_groups(), f.dim_theta(), d_w, d_v);
    let mut dw = d_w.to_vec();
    let mut dv = d_v.to_vec();
    let mut u = vec![0.0; n];
    while state.t > 0 {
        let t = state.t - 1;
        let alphas = &sched.alphas[t];
        let gammas = &sched.gammas[t];
        let v_next = state.v.dequantize();
        let w = state.w.raw_mut();
        for i in 0..n {
            let step = quantize_raw(alphas[group[i]] * v_next[i], fb).map_err(|e| e.at_iteration(t))?;
            w[i] = w[i].wrapping_sub(step);
            out.d_alpha[t][group[i]] += dw[i] * v_next[i];
            dv[i] += alphas[group[i]] * dw[i];
            u[i] = (1.0 - gammas[group[i]].to_f64()) * dv[i];
        }
        let w_t = state.w.dequantize();
        let so = autodiff::grad_and_hvps(f, &w_t, &sched.theta, t, &u).map_err(|e| e.at_iteration(t))?;
        out.loss_trace[t] = so.value;
        let v = state.v.raw_mut();
        for i in 0..n {
            let gamma = gammas[group[i]];
            let q = quantize_raw((1.0 - gamma.to_f64()) * so.grad_w[i], fb).map_err(|e| e.at_iteration(t))?;
            v[i] = v[i].wrapping_add(q);
            rat_mul_inverse(&mut state.buffers[i], &mut v[i], gamma).map_err(|e| e.at_iteration(t))?;
            let v_t = dequantize_raw(v[i], fb);
            out.d_gamma[t][group[i]] += dv[i] * (v_t + so.grad_w[i]);
            dw[i] -= so.hvp_w[i];
            dv[i] *= gamma.to_f64();
        }
        for (d, h) in out.d_theta.iter_mut().zip(&so.hvp_theta) {
            *d -= h;
        }
        state.t = t;
    }
    if !state.buffers_empty() {
        let left = state.buffers.iter().filter(|b| !b.is_empty()).count();
        return Err(Error::Integrity(format!(
            "{left} information buffers still hold data after reversal; forward and reverse configurations differ"
        )));
    }
    out.d_w1 = dw;
    out.d_v1 = dv;
    Ok(out)
}

/// Buffer usage relative to storing one 32-bit word per element per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryReport {
    pub iterations: usize,
    pub elements: usize,
    pub buffer_bits_total: f64,
    pub buffer_bits_per_step_per_element: f64,
    pub naive_bits_equivalent: f64,
    /// `32 T / (bits per element)`; `None` when nothing was stored.
    pub ratio: Option<f64>,
}

pub fn memory_report(state: &TrainState) -> MemoryReport {
    let total = state.buffer_bits();
    let elements = state.len();
    let steps = state.t;
    let per_element = if elements == 0 { 0.0 } else { total / elements as f64 };
    MemoryReport {
        iterations: steps,
        elements,
        buffer_bits_total: total,
        buffer_bits_per_step_per_element: if steps == 0 { 0.0 } else { per_element / steps as f64 },
        naive_bits_equivalent: 32.0 * steps as f64 * elements as f64,
        ratio: (per_element > 0.0).then(|| 32.0 * steps as f64 / per_element),
    }
}

/// Everything one seeded training run contributes to a hypergradient.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Adjoints with `d_theta` complete: the reverse-pass term, the
    /// meta-objective's direct term and the init-scale chain.
    pub grads: HypergradResult,
    pub meta_loss: f64,
    pub memory: MemoryReport,
}

/// Initializes from `theta`'s init scales under `seed`, trains forward,
/// evaluates the meta-objective and reverses back to `w_1`.
pub fn hypergradient<M: Model + ?Sized>(
    model: &M,
    sched: &Schedules,
    batches: &BatchSchedule,
    seed: u64,
    frac_bits: u32,
) -> Result<RunOutcome> {
    let layout = model.param_layout();
    if batches.iterations() < sched.iterations() {
        return Err(Error::Shape(format!(
            "{} batches for {} iterations",
            batches.iterations(),
            sched.iterations()
        )));
    }
    sched.validate(layout.num_groups(), model.dim_theta())?;
    let w1 = init_weights(model.init_scales(&sched.theta), layout, seed)?;
    let f = Batched { model, batches };
    let mut state = TrainState::new(&w1, frac_bits)?;
    let start = state.clone();
    sgd_forward(&mut state, sched, &f, layout)?;
    let memory = memory_report(&state);
    let meta = model.meta_objective(&state.w.dequantize(), &sched.theta)?;
    let zeros = vec![0.0; state.len()];
    let mut grads = sgd_reverse(&mut state, sched, &f, layout, &meta.w, &zeros)?;
    if state != start {
        return Err(Error::Integrity("reversal did not reproduce the initial state".into()));
    }
    for (d, m) in grads.d_theta.iter_mut().zip(&meta.theta) {
        *d += m;
    }
    for (d, s) in grads.d_theta.iter_mut().zip(init_scale_grad(&grads.d_w1, &w1, layout)) {
        *d += s;
    }
    Ok(RunOutcome { grads, meta_loss: meta.value, memory })
}
