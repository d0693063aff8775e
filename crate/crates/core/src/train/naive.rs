//! Float64 training that caches the whole trajectory, used as the oracle for
//! the reversible pass, and the unbuffered float reversal that shows why
//! the buffers are needed.

use super::{check_real_run, HypergradResult};
use crate::autodiff::{self, DiffFn};
use crate::error::{Error, Result};
use crate::models::ParamLayout;

/// Schedules with real-valued decays, so `gamma` can be perturbed freely.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSchedules {
    pub alphas: Vec<Vec<f64>>,
    pub gammas: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

impl RealSchedules {
    pub fn iterations(&self) -> usize {
        self.alphas.len()
    }
}

/// `ws[t]`, `vs[t]` for `t = 0..=T` and the loss at each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub ws: Vec<Vec<f64>>,
    pub vs: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn final_w(&self) -> &[f64] {
        self.ws.last().unwrap()
    }

    pub fn final_v(&self) -> &[f64] {
        self.vs.last().unwrap()
    }
}

pub fn naive_forward<F: DiffFn + ?Sized>(
    w1: &[f64],
    v1: &[f64],
    sched: &RealSchedules,
    f: &F,
    layout: &ParamLayout,
) -> Result<Trajectory> {
    check_real_run(w1.len(), v1.len(), sched, f, layout)?;
    let group = layout.group_of_each();
    let mut traj = Trajectory { ws: vec![w1.to_vec()], vs: vec![v1.to_vec()], losses: Vec::new() };
    for t in 0..sched.iterations() {
        let (w, v) = (traj.ws.last().unwrap(), traj.vs.last().unwrap());
        let (loss, g) = autodiff::value_and_grad(f, w, &sched.theta, t).map_err(|e| e.at_iteration(t))?;
        let mut w_next = w.clone();
        let mut v_next = v.clone();
        for i in 0..w.len() {
            let (a, gm) = (sched.alphas[t][group[i]], sched.gammas[t][group[i]]);
            v_next[i] = gm * v[i] - (1.0 - gm) * g[i];
            w_next[i] = w[i] + a * v_next[i];
        }
        traj.ws.push(w_next);
        traj.vs.push(v_next);
        traj.losses.push(loss);
    }
    Ok(traj)
}

/// Reverse pass over a cached trajectory, same adjoint recurrences as
/// [`super::sgd_reverse`].
pub fn naive_reverse<F: DiffFn + ?Sized>(
    traj: &Trajectory,
    sched: &RealSchedules,
    f: &F,
    layout: &ParamLayout,
    d_w: &[f64],
    d_v: &[f64],
) -> Result<HypergradResult> {
    let n = traj.ws[0].len();
    check_real_run(n, d_v.len(), sched, f, layout)?;
    if traj.ws.len() != sched.iterations() + 1 || d_w.len() != n {
        return Err(Error::Shape("trajectory and adjoints must match the schedule".into()));
    }
    let group = layout.group_of_each();
    let mut out = HypergradResult::zeros(sched.iterations(), layout.num_groups(), f.dim_theta(), d_w, d_v);
    let mut dw = d_w.to_vec();
    let mut dv = d_v.to_vec();
    let mut u = vec![0.0; n];
    for t in (0..sched.iterations()).rev() {
        let (v_next, v_t, w_t) = (&traj.vs[t + 1], &traj.vs[t], &traj.ws[t]);
        for i in 0..n {
            let (a, gm) = (sched.alphas[t][group[i]], sched.gammas[t][group[i]]);
            out.d_alpha[t][group[i]] += dw[i] * v_next[i];
            dv[i] += a * dw[i];
            u[i] = (1.0 - gm) * dv[i];
        }
        let so = autodiff::grad_and_hvps(f, w_t, &sched.theta, t, &u).map_err(|e| e.at_iteration(t))?;
        out.loss_trace[t] = so.value;
        for i in 0..n {
            let gm = sched.gammas[t][group[i]];
            out.d_gamma[t][group[i]] += dv[i] * (v_t[i] + so.grad_w[i]);
            dw[i] -= so.hvp_w[i];
            dv[i] *= gm;
        }
        for (d, h) in out.d_theta.iter_mut().zip(&so.hvp_theta) {
            *d -= h;
        }
    }
    out.d_w1 = dw;
    out.d_v1 = dv;
    Ok(out)
}

/// Outcome of reversing float training by dividing by `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub enum FloatReversal {
    Recovered { w1: Vec<f64>, v1: Vec<f64> },
    /// A non-finite value appeared while undoing iteration `iteration`.
    Overflowed { iteration: usize },
}

/// Runs float training forward, then reverses it from `(w_T, v_T)` alone via
/// `v_t = (v_t+1 + (1 - gamma) g_t) / gamma` without any buffer.
pub fn float_reverse_unbuffered<F: DiffFn + ?Sized>(
    w1: &[f64],
    sched: &RealSchedules,
    f: &F,
    layout: &ParamLayout,
) -> Result<FloatReversal> {
    let v1 = vec![0.0; w1.len()];
    let traj = naive_forward(w1, &v1, sched, f, layout)?;
    let group = layout.group_of_each();
    let mut w = traj.final_w().to_vec();
    let mut v = traj.final_v().to_vec();
    for t in (0..sched.iterations()).rev() {
        for i in 0..w.len() {
            w[i] -= sched.alphas[t][group[i]] * v[i];
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Ok(FloatReversal::Overflowed { iteration: t });
        }
        let g = match autodiff::value_and_grad(f, &w, &sched.theta, t) {
            Ok((_, g)) => g,
            Err(e) if matches!(e.root(), Error::NonFinite { .. }) => {
                return Ok(FloatReversal::Overflowed { iteration: t });
            }
            Err(e) => return Err(e),
        };
        for i in 0..v.len() {
            let gm = sched.gammas[t][group[i]];
            v[i] = (v[i] + (1.0 - gm) * g[i]) / gm;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Ok(FloatReversal::Overflowed { iteration: t });
        }
    }
    Ok(FloatReversal::Recovered { w1: w, v1: v })
}
