use std::rc::Rc;

use super::{HyperLayout, Model, ParamLayout, Transform, INIT_SCALES};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const TYING: &str = "log_tying";

/// One softmax network per task, coupled by a per-layer tying penalty on
/// the weight matrices.
///
/// `w` is laid out layer-major: all tasks' weights for layer 0, all tasks'
/// biases for layer 0, then layer 1, so each layer's weights form one
/// parameter group. `theta` holds, per layer, the upper triangle (diagonal
/// included) of the log tying matrix in row-major order.
#[derive(Debug, Clone)]
pub struct MultiTask {
    sizes: Vec<usize>,
    train: Vec<Dataset>,
    valid: Vec<Dataset>,
    default_log_tying: f64,
    layers: Vec<(usize, usize)>,
    params: ParamLayout,
    hypers: HyperLayout,
}

impl MultiTask {
    pub fn new(sizes: Vec<usize>, train: Vec<Dataset>, valid: Vec<Dataset>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("layer sizes {sizes:?} need at least two nonzero entries")));
        }
        let tasks = train.len();
        if tasks < 2 || valid.len() != tasks {
            return Err(Error::Data(format!(
                "need at least two tasks with one validation set each (got {tasks} training, {} validation)",
                valid.len()
            )));
        }
        let n = train[0].len();
        let (features, classes) = (sizes[0], *sizes.last().unwrap());
        for ds in train.iter().chain(&valid) {
            if ds.features() != features || ds.is_empty() {
                return Err(Error::Shape(format!("task data has {} features, model expects {features}", ds.features())));
            }
            if let Some(&label) = ds.labels().iter().find(|&&l| l >= classes) {
                return Err(Error::Label { label, classes });
            }
        }
        if train.iter().any(|ds| ds.len() != n) {
            return Err(Error::Data("all tasks need the same number of training examples".into()));
        }
        let mut groups = Vec::new();
        let mut layers = Vec::new();
        let mut offset = 0;
        for (l, pair) in sizes.windows(2).enumerate() {
            let block = pair[0] * pair[1];
            groups.push((format!("layer{l}.weights"), tasks * block));
            groups.push((format!("layer{l}.biases"), tasks * pair[1]));
            layers.push((offset, offset + tasks * block));
            offset += tasks * (block + pair[1]);
        }
        let params = ParamLayout::sequential(groups);
        let tri = tasks * (tasks + 1) / 2;
        let hypers = HyperLayout::sequential([
            (INIT_SCALES.to_string(), params.num_groups(), Transform::Log),
            (TYING.to_string(), layers.len() * tri, Transform::Log),
        ]);
        Ok(Self { sizes, train, valid, default_log_tying: (1e-2f64).ln(), layers, params, hypers })
    }

    pub fn with_default_log_tying(mut self, log_tying: f64) -> Self {
        self.default_log_tying = log_tying;
        self
    }

    pub fn tasks(&self) -> usize {
        self.train.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Tying matrices `A[layer]` (symmetric, nonnegative) encoded in `theta`.
    pub fn tying_matrices(&self, theta: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let k = self.tasks();
        let base = self.hypers.block(TYING).unwrap().offset;
        let tri = k * (k + 1) / 2;
        (0..self.layers.len())
            .map(|l| {
                let mut m = vec![vec![0.0; k]; k];
                let mut idx = base + l * tri;
                for a in 0..k {
                    for b in a..k {
                        m[a][b] = theta[idx].exp();
                        m[b][a] = m[a][b];
                        idx += 1;
                    }
                }
                m
            })
            .collect()
    }

    /// Per-layer, per-task weight blocks of `w`.
    pub fn task_weights(&self, w: &[f64]) -> Vec<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .zip(self.sizes.windows(2))
            .map(|(&(w_off, _), pair)| {
                let block = pair[0] * pair[1];
                (0..self.tasks()).map(|a| w[w_off + a * block..w_off + (a + 1) * block].to_vec()).collect()
            })
            .collect()
    }

    fn record_logits(&self, tape: &mut Tape, w: Var, task: usize, x: Var) -> Var {
        let rows = tape.shape(x).0;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, (&(w_off, b_off), pair)) in self.layers.iter().zip(self.sizes.windows(2)).enumerate() {
            let wm = tape.slice(w, w_off + task * pair[0] * pair[1], pair[0], pair[1]);
            let b = tape.slice(w, b_off + task * pair[1], 1, pair[1]);
            let hw = tape.matmul(h, wm);
            let bb = tape.broadcast_rows(b, rows);
            let z = tape.add(hw, bb);
            h = if l == last { z } else { tape.tanh(z) };
        }
        h
    }

    fn record_penalty(&self, tape: &mut Tape, w: Var, theta: Var) -> Option<Var> {
        let k = self.tasks();
        let tri = k * (k + 1) / 2;
        let base = self.hypers.block(TYING).unwrap().offset;
        let mut total: Option<Var> = None;
        for (l, (&(w_off, _), pair)) in self.layers.iter().zip(self.sizes.windows(2)).enumerate() {
            let block = pair[0] * pair[1];
            let ws: Vec<Var> = (0..k).map(|a| tape.slice(w, w_off + a * block, 1, block)).collect();
            let mut idx = base + l * tri;
            for a in 0..k {
                for b in a..k {
                    let log_a = tape.slice(theta, idx, 1, 1);
                    let coef = tape.exp(log_a);
                    idx += 1;
                    let sq = if a == b {
                        tape.dot(ws[a], ws[a])
                    } else {
                        let d = tape.sub(ws[a], ws[b]);
                        tape.dot(d, d)
                    };
                    let term = tape.mul(coef, sq);
                    total = Some(match total {
                        None => term,
                        Some(t) => tape.add(t, term),
                    });
                }
            }
        }
        total
    }

    fn record_data_loss(&self, tape: &mut Tape, w: Var, data: &[Dataset], batch: Option<&[usize]>) -> Var {
        let mut total: Option<Var> = None;
        for (task, ds) in data.iter().enumerate() {
            let (x, y) = match batch {
                Some(idx) => ds.gather(idx),
                None => (ds.inputs().to_vec(), ds.labels().to_vec()),
            };
            let xv = tape.constant(Tensor::new(y.len(), ds.features(), x));
            let logits = self.record_logits(tape, w, task, xv);
            let loss = tape.softmax_cross_entropy(logits, Rc::from(y));
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss),
            });
        }
        total.unwrap()
    }
}

impl Model for MultiTask {
    fn param_layout(&self) -> &ParamLayout {
        &self.params
    }

    fn hyper_layout(&self) -> &HyperLayout {
        &self.hypers
    }

    fn train_len(&self) -> usize {
        self.train[0].len()
    }

    fn record_loss(&self, tape: &mut Tape, w: Var, theta: Var, batch: &[usize]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= self.train_len()) {
            return Err(Error::Data(format!("batch index {i} out of range for {} examples", self.train_len())));
        }
        let loss = self.record_data_loss(tape, w, &self.train, Some(batch));
        Ok(match self.record_penalty(tape, w, theta) {
            Some(p) => tape.add(loss, p),
            None => loss,
        })
    }

    fn meta_objective(&self, w: &[f64], theta: &[f64]) -> Result<Gradients> {
        let mut tape = Tape::new();
        let wv = tape.var(Tensor::row(w.to_vec()));
        let th = tape.var(Tensor::row(theta.to_vec()));
        let loss = self.record_data_loss(&mut tape, wv, &self.valid, None);
        let [gw, gt] = tape.backward(loss, &[wv, th])[..] else { unreachable!() };
        tape.check_finite(&[loss, gw, gt])?;
        Ok(Gradients {
            value: tape.value(loss).item(),
            w: tape.value(gw).data().to_vec(),
            theta: tape.value(gt).data().to_vec(),
        })
    }

    fn default_theta(&self) -> Vec<f64> {
        let mut theta: Vec<f64> = self
            .sizes
            .windows(2)
            .flat_map(|pair| [-0.5 * (pair[0] as f64).ln(), (0.01f64).ln()])
            .collect();
        let tying = self.hypers.block(TYING).unwrap().len;
        theta.extend(std::iter::repeat_n(self.default_log_tying, tying));
        theta
    }
}
