//! Fixed learning-rate sweep with the exact hypergradient at each point.

use std::f64::consts::LN_10;

use rayon::prelude::*;

use super::artifacts::ChaosRow;
use crate::error::{Error, Result};
use crate::meta::RunSpec;
use crate::models::Model;
use crate::revbuf::{Ratio, MAX_DENOMINATOR};
use crate::train::{hypergradient, Schedules};

pub const STATUS_OK: &str = "ok";
pub const STATUS_OVERFLOW: &str = "overflow";
pub const STATUS_NON_FINITE: &str = "non_finite";

/// `points` log-spaced learning rates in `[exp(lo), exp(hi)]`, each trained
/// for `iterations` steps from the same seed. Runs that leave the
/// fixed-point range or produce non-finite values become sentinel rows.
#[allow(clippy::too_many_arguments)]
pub fn chaos_sweep<M: Model + ?Sized>(
    model: &M,
    iterations: usize,
    gamma: f64,
    log_alpha_range: (f64, f64),
    points: usize,
    seed: u64,
    spec: RunSpec,
) -> Result<Vec<ChaosRow>> {
    let (lo, hi) = log_alpha_range;
    if points < 2 || !(lo < hi) {
        return Err(Error::Shape(format!("bad sweep: {points} points over [{lo}, {hi}]")));
    }
    let gamma = Ratio::approximate(gamma, MAX_DENOMINATOR);
    let theta = model.default_theta();
    let groups = model.param_layout().num_groups();
    let batches = spec.batches(seed, model.train_len(), iterations)?;
    (0..points)
        .into_par_iter()
        .map(|i| {
            let log_alpha = lo + (hi - lo) * i as f64 / (points - 1) as f64;
            let alpha = log_alpha.exp();
            let sched = Schedules::constant(iterations, groups, alpha, gamma, theta.clone());
            let sentinel = |status: &str| ChaosRow {
                log_alpha,
                alpha,
                final_loss: None,
                dloss_dalpha: None,
                status: status.to_string(),
            };
            match hypergradient(model, &sched, &batches, seed, spec.frac_bits) {
                Ok(run) => {
                    let d: f64 = run.grads.d_alpha.iter().flatten().sum();
                    if run.meta_loss.is_finite() && d.is_finite() {
                        Ok(ChaosRow {
                            log_alpha,
                            alpha,
                            final_loss: Some(run.meta_loss),
                            dloss_dalpha: Some(d),
                            status: STATUS_OK.to_string(),
                        })
                    } else {
                        Ok(sentinel(STATUS_NON_FINITE))
                    }
                }
                Err(e) => match e.root() {
                    Error::Range { .. } => Ok(sentinel(STATUS_OVERFLOW)),
                    Error::NonFinite { .. } => Ok(sentinel(STATUS_NON_FINITE)),
                    _ => Err(e),
                },
            }
        })
        .collect()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 3 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Correlation between `alpha * dL/dalpha` and the central-difference slope
/// of the loss in `log alpha`, over interior points with both neighbours
/// valid and `log alpha` in `[from, to]`.
pub fn slope_correlation(rows: &[ChaosRow], from: f64, to: f64) -> Option<f64> {
    let (mut reported, mut fd) = (Vec::new(), Vec::new());
    for w in rows.windows(3) {
        let (a, b, c) = (&w[0], &w[1], &w[2]);
        if !(from..=to).contains(&b.log_alpha) {
            continue;
        }
        if let (Some(la), Some(lc), Some(g)) = (a.final_loss, c.final_loss, b.dloss_dalpha) {
            if b.final_loss.is_some() {
                fd.push((lc - la) / (c.log_alpha - a.log_alpha));
                reported.push(b.alpha * g);
            }
        }
    }
    pearson(&reported, &fd)
}

/// `(bottom decade, top decade)` correlations of a sweep.
pub fn decade_correlations(rows: &[ChaosRow]) -> (Option<f64>, Option<f64>) {
    let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
        return (None, None);
    };
    let (lo, hi) = (first.log_alpha, last.log_alpha);
    (slope_correlation(rows, lo, lo + LN_10), slope_correlation(rows, hi - LN_10, hi))
}
