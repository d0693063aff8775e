use std::rc::Rc;

use super::{all_rows, record_per_param_l2, HyperLayout, Model, ParamLayout, Transform, INIT_SCALES};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Where training inputs come from.
#[derive(Debug, Clone)]
pub enum InputSource {
    Fixed(Dataset),
    /// The inputs are hyperparameters: an `examples x features` pixel block
    /// in `theta`, one fixed label per example.
    Learned { labels: Vec<usize>, features: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    None,
    /// `0.5 * sum(exp(theta_i) w_i^2)`, one log-penalty per weight.
    PerParamL2,
}

/// Data the meta-objective is evaluated on.
#[derive(Debug, Clone)]
pub enum Objective {
    Validation(Dataset),
    Training,
}

pub const PENALTIES: &str = "log_l2_penalties";
pub const PIXELS: &str = "pixels";

/// Fully connected softmax classifier. `sizes = [inputs, hidden.., classes]`;
/// two entries give logistic regression, hidden layers use tanh.
#[derive(Debug, Clone)]
pub struct Classifier {
    sizes: Vec<usize>,
    input: InputSource,
    objective: Objective,
    regularizer: Regularizer,
    weight_bands: usize,
    default_log_l2: f64,
    /// `(weight offset, bias offset)` per layer.
    layers: Vec<(usize, usize)>,
    params: ParamLayout,
    hypers: HyperLayout,
    default_scales: Vec<f64>,
}

impl Classifier {
    pub fn new(sizes: Vec<usize>, input: InputSource, objective: Objective) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("layer sizes {sizes:?} need at least two nonzero entries")));
        }
        let (features, classes) = (sizes[0], *sizes.last().unwrap());
        match &input {
            InputSource::Fixed(ds) => check_dataset("training", ds, features, classes)?,
            InputSource::Learned { labels, features: f } => {
                if *f != features {
                    return Err(Error::Shape(format!("learned inputs have {f} features, model expects {features}")));
                }
                if labels.is_empty() {
                    return Err(Error::Data("learned inputs need at least one example".into()));
                }
                if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                    return Err(Error::Label { label, classes });
                }
            }
        }
        if let Objective::Validation(ds) = &objective {
            check_dataset("validation", ds, features, classes)?;
        }
        let mut model = Self {
            sizes,
            input,
            objective,
            regularizer: Regularizer::None,
            weight_bands: 1,
            default_log_l2: (1e-3f64).ln(),
            layers: Vec::new(),
            params: ParamLayout::sequential([]),
            hypers: HyperLayout::sequential([]),
            default_scales: Vec::new(),
        };
        model.rebuild();
        Ok(model)
    }

    pub fn with_regularizer(mut self, regularizer: Regularizer) -> Self {
        self.regularizer = regularizer;
        self.rebuild();
        self
    }

    /// Splits the first weight matrix into `bands` row bands, each its own
    /// parameter group.
    pub fn with_weight_bands(mut self, bands: usize) -> Result<Self> {
        if bands == 0 || bands > self.sizes[0] {
            return Err(Error::Shape(format!("cannot cut {} input rows into {bands} bands", self.sizes[0])));
        }
        self.weight_bands = bands;
        self.rebuild();
        Ok(self)
    }

    pub fn with_default_log_l2(mut self, log_l2: f64) -> Self {
        self.default_log_l2 = log_l2;
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Offset of the first layer's weight matrix (`inputs x classes` for
    /// logistic regression) in `w`.
    pub fn first_weight_offset(&self) -> usize {
        self.layers[0].0
    }

    fn rebuild(&mut self) {
        let mut groups = Vec::new();
        let mut scales = Vec::new();
        let mut layers = Vec::new();
        let mut offset = 0;
        for (l, pair) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bands = if l == 0 { self.weight_bands } else { 1 };
            let w_off = offset;
            for (b, rows) in band_sizes(fan_in, bands).into_iter().enumerate() {
                let name = if bands == 1 { format!("layer{l}.weights") } else { format!("layer{l}.weights.band{b}") };
                groups.push((name, rows * fan_out));
                scales.push(-0.5 * (fan_in as f64).ln());
            }
            offset += fan_in * fan_out;
            groups.push((format!("layer{l}.biases"), fan_out));
            scales.push((0.01f64).ln());
            layers.push((w_off, offset));
            offset += fan_out;
        }
        self.params = ParamLayout::sequential(groups);
        self.layers = layers;
        let mut blocks = vec![(INIT_SCALES.to_string(), self.params.num_groups(), Transform::Log)];
        if self.regularizer == Regularizer::PerParamL2 {
            blocks.push((PENALTIES.to_string(), self.params.len(), Transform::Log));
        }
        if let InputSource::Learned { labels, features } = &self.input {
            blocks.push((PIXELS.to_string(), labels.len() * features, Transform::Identity));
        }
        self.hypers = HyperLayout::sequential(blocks);
        self.default_scales = scales;
    }

    fn record_logits(&self, tape: &mut Tape, w: Var, x: Var) -> Var {
        let rows = tape.shape(x).0;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, (&(w_off, b_off), pair)) in self.layers.iter().zip(self.sizes.windows(2)).enumerate() {
            let wm = tape.slice(w, w_off, pair[0], pair[1]);
            let b = tape.slice(w, b_off, 1, pair[1]);
            let hw = tape.matmul(h, wm);
            let bb = tape.broadcast_rows(b, rows);
            let z = tape.add(hw, bb);
            h = if l == last { z } else { tape.tanh(z) };
        }
        h
    }

    fn record_train_inputs(&self, tape: &mut Tape, theta: Var, batch: &[usize]) -> (Var, Rc<[usize]>) {
        match &self.input {
            InputSource::Fixed(ds) => {
                let (x, y) = ds.gather(batch);
                (tape.constant(Tensor::new(batch.len(), ds.features(), x)), y.into())
            }
            InputSource::Learned { labels, features } => {
                let block = self.hypers.block(PIXELS).unwrap();
                let pixels = tape.slice(theta, block.offset, labels.len(), *features);
                let idx: Rc<[usize]> = batch.into();
                let y: Rc<[usize]> = batch.iter().map(|&i| labels[i]).collect();
                (tape.gather_rows(pixels, idx), y)
            }
        }
    }

    /// Mean cross-entropy of `w` on a fixed dataset.
    pub fn dataset_loss(&self, w: &[f64], ds: &Dataset) -> Result<f64> {
        let mut tape = Tape::new();
        let wv = tape.constant(Tensor::row(w.to_vec()));
        let x = tape.constant(Tensor::new(ds.len(), ds.features(), ds.inputs().to_vec()));
        let logits = self.record_logits(&mut tape, wv, x);
        let loss = tape.softmax_cross_entropy(logits, ds.labels().into());
        tape.check_finite(&[loss])?;
        Ok(tape.value(loss).item())
    }

    /// Fraction of `ds` misclassified by `w`.
    pub fn error_rate(&self, w: &[f64], ds: &Dataset) -> f64 {
        let mut tape = Tape::new();
        let wv = tape.constant(Tensor::row(w.to_vec()));
        let x = tape.constant(Tensor::new(ds.len(), ds.features(), ds.inputs().to_vec()));
        let logits = self.record_logits(&mut tape, wv, x);
        let z = tape.value(logits);
        let k = self.classes();
        let wrong = (0..ds.len())
            .filter(|&i| {
                let row = &z.data()[i * k..(i + 1) * k];
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best != ds.labels()[i]
            })
            .count();
        wrong as f64 / ds.len() as f64
    }
}

fn check_dataset(which: &str, ds: &Dataset, features: usize, classes: usize) -> Result<()> {
    if ds.features() != features {
        return Err(Error::Shape(format!("{which} data has {} features, model expects {features}", ds.features())));
    }
    if ds.is_empty() {
        return Err(Error::Data(format!("{which} data is empty")));
    }
    if let Some(&label) = ds.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

/// Row counts for `bands` near-equal contiguous bands of `rows` rows.
fn band_sizes(rows: usize, bands: usize) -> Vec<usize> {
    (0..bands).map(|b| rows / bands + usize::from(b < rows % bands)).collect()
}

impl Model for Classifier {
    fn param_layout(&self) -> &ParamLayout {
        &self.params
    }

    fn hyper_layout(&self) -> &HyperLayout {
        &self.hypers
    }

    fn train_len(&self) -> usize {
        match &self.input {
            InputSource::Fixed(ds) => ds.len(),
            InputSource::Learned { labels, .. } => labels.len(),
        }
    }

    fn record_loss(&self, tape: &mut Tape, w: Var, theta: Var, batch: &[usize]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= self.train_len()) {
            return Err(Error::Data(format!("batch index {i} out of range for {} examples", self.train_len())));
        }
        let (x, y) = self.record_train_inputs(tape, theta, batch);
        let logits = self.record_logits(tape, w, x);
        let loss = tape.softmax_cross_entropy(logits, y);
        Ok(match self.regularizer {
            Regularizer::None => loss,
            Regularizer::PerParamL2 => {
                let block = self.hypers.block(PENALTIES).unwrap();
                let log_pen = tape.slice(theta, block.offset, 1, block.len);
                let pen = record_per_param_l2(tape, w, log_pen);
                tape.add(loss, pen)
            }
        })
    }

    fn meta_objective(&self, w: &[f64], theta: &[f64]) -> Result<Gradients> {
        let mut tape = Tape::new();
        let wv = tape.var(Tensor::row(w.to_vec()));
        let th = tape.var(Tensor::row(theta.to_vec()));
        let (x, y) = match &self.objective {
            Objective::Validation(ds) => (
                tape.constant(Tensor::new(ds.len(), ds.features(), ds.inputs().to_vec())),
                Rc::from(ds.labels()),
            ),
            Objective::Training => self.record_train_inputs(&mut tape, th, &all_rows(self.train_len())),
        };
        let logits = self.record_logits(&mut tape, wv, x);
        let loss = tape.softmax_cross_entropy(logits, y);
        let [gw, gt] = tape.backward(loss, &[wv, th])[..] else { unreachable!() };
        tape.check_finite(&[loss, gw, gt])?;
        Ok(Gradients {
            value: tape.value(loss).item(),
            w: tape.value(gw).data().to_vec(),
            theta: tape.value(gt).data().to_vec(),
        })
    }

    fn default_theta(&self) -> Vec<f64> {
        let mut theta = self.default_scales.clone();
        for block in &self.hypers.blocks()[1..] {
            let fill = if block.name == PENALTIES { self.default_log_l2 } else { 0.0 };
            theta.extend(std::iter::repeat_n(fill, block.len));
        }
        theta
    }
}
