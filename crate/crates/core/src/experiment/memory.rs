//! Buffer growth under a persistent stochastic gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::artifacts::MemoryRow;
use crate::autodiff::{FnLoss, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::ParamLayout;
use crate::revbuf::Ratio;
use crate::train::{memory_report, sgd_forward, sgd_reverse, Schedules, TrainState};

const ALPHA: f64 = 0.01;

fn normals(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Trains `L_t(w) = 0.5 |w - c_t|^2` with fresh normal targets `c_t` for
/// `steps` iterations at decay `gamma`, then reverses to check exactness.
/// The moving target keeps the velocity's low digits busy, so the buffers
/// grow at their long-run rate.
pub fn bench_memory(gamma: Ratio, steps: usize, elements: usize, seed: u64, frac_bits: u32) -> Result<MemoryRow> {
    if steps == 0 || elements == 0 {
        return Err(Error::Shape("memory bench needs at least one step and one element".into()));
    }
    let f = FnLoss {
        dim_w: elements,
        dim_theta: 1,
        body: |tape: &mut Tape, w: Var, _theta: Var, t: usize| {
            let c = tape.constant(Tensor::row(normals(seed, t as u64 + 1, elements)));
            let d = tape.sub(w, c);
            let sq = tape.dot(d, d);
            tape.scale(sq, 0.5)
        },
    };
    let layout = ParamLayout::sequential([("w".to_string(), elements)]);
    let w1 = normals(seed, 0, elements);
    let sched = Schedules::constant(steps, 1, ALPHA, gamma, vec![0.0]);
    let mut state = TrainState::new(&w1, frac_bits)?;
    let start = state.clone();
    sgd_forward(&mut state, &sched, &f, &layout)?;
    let report = memory_report(&state);
    let zeros = vec![0.0; elements];
    sgd_reverse(&mut state, &sched, &f, &layout, &zeros, &zeros)?;
    Ok(MemoryRow {
        gamma,
        steps,
        elements,
        theoretical_bits: gamma.bits_per_step(),
        measured_bits: report.buffer_bits_per_step_per_element,
        ratio_vs_32bit: report.ratio,
        reversed_exactly: state == start,
    })
}
