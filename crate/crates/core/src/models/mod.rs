//! Training losses `L(w, theta, t)` and meta-objectives `f(w)`.
//!
//! Every model lays out `theta` as `[init log-scales (one per group), ...]`
//! followed by its own blocks, so training code can chain `dw_1` into the
//! init scales without knowing the model.

mod classifier;
mod multitask;

pub use classifier::{Classifier, InputSource, Objective, Regularizer, PENALTIES, PIXELS};
pub use multitask::{MultiTask, TYING};

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{DiffFn, Gradients, Tape, Var};
use crate::data::BatchSchedule;
use crate::error::{Error, Result};

/// A contiguous run of `w` that shares one learning-rate/momentum schedule
/// and one init scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl ParamGroup {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    groups: Vec<ParamGroup>,
    len: usize,
}

impl ParamLayout {
    /// Groups laid end to end in the given order.
    pub fn sequential(groups: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut offset = 0;
        let groups = groups
            .into_iter()
            .map(|(name, len)| {
                let g = ParamGroup { name, offset, len };
                offset += len;
                g
            })
            .collect();
        Self { groups, len: offset }
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Group index of every element of `w`.
    pub fn group_of_each(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len);
        for (g, group) in self.groups.iter().enumerate() {
            out.extend(std::iter::repeat_n(g, group.len));
        }
        out
    }

    pub fn is_partition(&self) -> bool {
        let mut next = 0;
        for g in &self.groups {
            if g.offset != next {
                return false;
            }
            next += g.len;
        }
        next == self.len
    }
}

/// How a stored hyperparameter maps to the quantity the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Log,
    Logit,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
}

impl HyperBlock {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperLayout {
    blocks: Vec<HyperBlock>,
    len: usize,
}

impl HyperLayout {
    pub fn sequential(blocks: impl IntoIterator<Item = (String, usize, Transform)>) -> Self {
        let mut offset = 0;
        let blocks = blocks
            .into_iter()
            .map(|(name, len, transform)| {
                let b = HyperBlock { name, offset, len, transform };
                offset += len;
                b
            })
            .collect();
        Self { blocks, len: offset }
    }

    pub fn blocks(&self) -> &[HyperBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&HyperBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub const INIT_SCALES: &str = "init_log_scales";

/// A trainable model with a differentiable training loss and meta-objective.
pub trait Model: Sync {
    fn param_layout(&self) -> &ParamLayout;
    fn hyper_layout(&self) -> &HyperLayout;
    /// Number of training examples that batch indices refer to.
    fn train_len(&self) -> usize;
    /// Training loss on the examples `batch`, including any regularizer.
    fn record_loss(&self, tape: &mut Tape, w: Var, theta: Var, batch: &[usize]) -> Result<Var>;
    /// Meta-objective and its gradients. No regularizer.
    fn meta_objective(&self, w: &[f64], theta: &[f64]) -> Result<Gradients>;
    /// Default `theta`: init log-scales first, then model blocks.
    fn default_theta(&self) -> Vec<f64>;

    fn dim_w(&self) -> usize {
        self.param_layout().len()
    }

    fn dim_theta(&self) -> usize {
        self.hyper_layout().len()
    }

    /// Init log-scales, one per parameter group.
    fn init_scales<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[..self.param_layout().num_groups()]
    }
}

/// `w_1[group] = exp(scale[group]) * z`, with `z` standard normal from a
/// ChaCha8 stream keyed by `(seed, group)`.
pub fn init_weights(scales: &[f64], layout: &ParamLayout, seed: u64) -> Result<Vec<f64>> {
    if scales.len() != layout.num_groups() {
        return Err(Error::Shape(format!(
            "{} init scales for {} parameter groups",
            scales.len(),
            layout.num_groups()
        )));
    }
    let mut w = vec![0.0; layout.len()];
    for (g, (group, &s)) in layout.groups().iter().zip(scales).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(g as u64);
        let k = s.exp();
        for x in &mut w[group.range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = k * z;
        }
    }
    Ok(w)
}

/// Chains `dL/dw_1` into init log-scales: `d scale[g] = sum(dw_1[g] * w_1[g])`.
pub fn init_scale_grad(d_w1: &[f64], w1: &[f64], layout: &ParamLayout) -> Vec<f64> {
    layout
        .groups()
        .iter()
        .map(|g| g.range().map(|i| d_w1[i] * w1[i]).sum())
        .collect()
}

/// `0.5 * sum(exp(theta_i) * w_i^2)`.
pub fn per_param_l2(w: &[f64], theta: &[f64]) -> Result<f64> {
    if w.len() != theta.len() {
        return Err(Error::Shape(format!("{} penalties for {} weights", theta.len(), w.len())));
    }
    Ok(0.5 * w.iter().zip(theta).map(|(&x, &t)| t.exp() * x * x).sum::<f64>())
}

pub(crate) fn record_per_param_l2(tape: &mut Tape, w: Var, log_penalty: Var) -> Var {
    let lam = tape.exp(log_penalty);
    let sq = tape.mul(w, w);
    let s = tape.dot(lam, sq);
    tape.scale(s, 0.5)
}

/// Difference-form tying penalty.
///
/// `weights[layer][task]` is that task's weight block for the layer and
/// `a[layer]` a symmetric nonnegative `tasks x tasks` matrix. The result is
/// `sum_layers (sum_a A_aa |w_a|^2 + sum_{a<b} A_ab |w_a - w_b|^2)`.
pub fn tied_penalty(weights: &[Vec<Vec<f64>>], a: &[Vec<Vec<f64>>]) -> Result<f64> {
    if weights.len() != a.len() {
        return Err(Error::Shape(format!("{} layers but {} tying matrices", weights.len(), a.len())));
    }
    let mut total = 0.0;
    for (layer, (ws, m)) in weights.iter().zip(a).enumerate() {
        let k = ws.len();
        if m.len() != k || m.iter().any(|row| row.len() != k) {
            return Err(Error::Shape(format!("layer {layer}: tying matrix is not {k}x{k}")));
        }
        for i in 0..k {
            for j in 0..k {
                if m[i][j] != m[j][i] {
                    return Err(Error::Shape(format!("layer {layer}: tying matrix is not symmetric at ({i}, {j})")));
                }
                if m[i][j] < 0.0 {
                    return Err(Error::Shape(format!("layer {layer}: negative tying entry at ({i}, {j})")));
                }
            }
        }
        for i in 0..k {
            total += m[i][i] * ws[i].iter().map(|x| x * x).sum::<f64>();
            for j in i + 1..k {
                if ws[i].len() != ws[j].len() {
                    return Err(Error::Shape(format!("layer {layer}: task blocks differ in length")));
                }
                let d2: f64 = ws[i].iter().zip(&ws[j]).map(|(x, y)| (x - y) * (x - y)).sum();
                total += m[i][j] * d2;
            }
        }
    }
    Ok(total)
}

/// A model's training loss with iteration `t` reading batch `t` of a
/// schedule.
pub struct Batched<'a, M: ?Sized> {
    pub model: &'a M,
    pub batches: &'a BatchSchedule,
}

impl<M: Model + ?Sized> DiffFn for Batched<'_, M> {
    fn dim_w(&self) -> usize {
        self.model.dim_w()
    }
    fn dim_theta(&self) -> usize {
        self.model.dim_theta()
    }
    fn record(&self, tape: &mut Tape, w: Var, theta: Var, t: usize) -> Result<Var> {
        self.model.record_loss(tape, w, theta, self.batches.batch(t))
    }
}

/// Indices `0..n`, used when an objective sweeps the whole set.
pub(crate) fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}
