//! Measurement-domain classifier.
//!
//! A two-layer perceptron reads a measurement vector and predicts a class:
//!
//! ```text
//! y      = x                      (fixed patterns)
//!        = P x / n_active         (end to end; P is the pattern bank)
//! t      = (avg(y), y_1 - avg(y), ..., y_{m-1} - avg(y))
//! z      = (t - mean) / std       (feature standardization, fixed at training start)
//! a      = relu(W1 z + b1)
//! logits = W2 a + b2
//! ```
//!
//! Nonnegative patterns give every measurement a large shared term (about
//! half the total intensity), which leaves the raw features almost collinear.
//! `t` splits that common mode into its own feature; the map is invertible,
//! so nothing is lost.
//!
//! In end-to-end mode the pattern bank is trained jointly with the layers
//! and is only clipped to `[0, 1]` when exported as a [`PatternSet`].

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patterns::{FovMask, PatternError, PatternSet};
use crate::rng::{tags, Rng};

const MODEL_MAGIC: &[u8; 5] = b"SPSD1";

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    FixedPatterns,
    /// Learn `patterns` modulation patterns over the raw active pixels.
    EndToEnd { patterns: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub mode: TrainMode,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: Optimizer::adam(),
            mode: TrainMode::FixedPatterns,
            hidden: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let bad = |m: &str| Err(DecoderError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if self.mode == (TrainMode::EndToEnd { patterns: 0 }) {
            return bad("end-to-end mode needs at least one pattern");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pattern_bank: Option<Array2<f64>>,
    input_mean: Array1<f64>,
    input_std: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

/// Gradients, laid out like the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub pattern_bank: Option<Array2<f64>>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

struct Activations {
    x: Array2<f64>,
    z: Array2<f64>,
    pre: Array2<f64>,
    a: Array2<f64>,
    logits: Array2<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gaussian() * scale)
}

impl DecoderModel {
    /// He-initialized model with identity standardization. `patterns` adds a
    /// trainable bank of that many patterns over `input_dim` pixels,
    /// initialized uniform in `[0, 1)`.
    pub fn new(
        input_dim: usize,
        hidden: usize,
        classes: usize,
        patterns: Option<usize>,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::stream(seed, tags::INIT);
        let pattern_bank = patterns
            .map(|m| Array2::from_shape_fn((m, input_dim), |_| rng.next_f64()));
        let features = patterns.unwrap_or(input_dim);
        let w1 = gaussian_matrix(hidden, features, (2.0 / features as f64).sqrt(), &mut rng);
        let w2 = gaussian_matrix(classes, hidden, (2.0 / hidden as f64).sqrt(), &mut rng);
        Self {
            pattern_bank,
            input_mean: Array1::zeros(features),
            input_std: Array1::ones(features),
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(classes),
        }
    }

    /// Model whose weights and biases are all zero.
    pub fn zeros(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self {
            pattern_bank: None,
            input_mean: Array1::zeros(input_dim),
            input_std: Array1::ones(input_dim),
            w1: Array2::zeros((hidden, input_dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((classes, hidden)),
            b2: Array1::zeros(classes),
        }
    }

    /// Length of the vectors `forward` accepts.
    pub fn input_dim(&self) -> usize {
        match &self.pattern_bank {
            Some(p) => p.ncols(),
            None => self.w1.ncols(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn is_end_to_end(&self) -> bool {
        self.pattern_bank.is_some()
    }

    pub fn pattern_bank(&self) -> Option<&Array2<f64>> {
        self.pattern_bank.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.pattern_bank.as_ref().map_or(0, |p| p.len())
            + self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
    }

    /// Overwrite the output bias; used to build saturated test models.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<(), DecoderError> {
        if bias.len() != self.classes() {
            return Err(DecoderError::ShapeMismatch(format!(
                "{} biases for {} classes",
                bias.len(),
                self.classes()
            )));
        }
        self.b2 = Array1::from(bias.to_vec());
        Ok(())
    }

    /// Fix the standardization from the features of `inputs`.
    pub fn fit_standardization(&mut self, inputs: ArrayView2<f64>) {
        let y = self.features(inputs);
        let mean = y.mean_axis(Axis(0)).expect("nonempty inputs");
        let std = y.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
        self.input_mean = mean;
        self.input_std = std;
    }

    fn features(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = match &self.pattern_bank {
            Some(p) => x.dot(&p.t()) / p.ncols() as f64,
            None => x.to_owned(),
        };
        for mut row in y.outer_iter_mut() {
            let avg = row.mean().unwrap_or(0.0);
            row -= avg;
            row[0] = avg;
        }
        y
    }

    fn check_input(&self, cols: usize) -> Result<(), DecoderError> {
        if cols != self.input_dim() {
            return Err(DecoderError::ShapeMismatch(format!(
                "input length {cols}, model expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn activations(&self, x: ArrayView2<f64>) -> Activations {
        let z = (self.features(x) - &self.input_mean) / &self.input_std;
        let pre = z.dot(&self.w1.t()) + &self.b1;
        let a = pre.mapv(|v| v.max(0.0));
        let logits = a.dot(&self.w2.t()) + &self.b2;
        Activations {
            x: x.to_owned(),
            z,
            pre,
            a,
            logits,
        }
    }

    /// Logits for a batch (one sample per row).
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, DecoderError> {
        self.check_input(x.ncols())?;
        Ok(self.activations(x).logits)
    }

    /// Class probabilities for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DecoderError> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let logits = self.logits(batch)?;
        Ok(softmax(logits.row(0)).to_vec())
    }

    /// Mean cross-entropy and its gradients over a batch.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Gradients), DecoderError> {
        self.check_input(x.ncols())?;
        check_labels(labels, x.nrows(), self.classes())?;
        let act = self.activations(x);
        Ok(self.backward(&act, labels))
    }

    pub fn loss(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, DecoderError> {
        self.check_input(x.ncols())?;
        check_labels(labels, x.nrows(), self.classes())?;
        let logits = self.activations(x).logits;
        Ok(labels
            .iter()
            .enumerate()
            .map(|(i, &l)| cross_entropy(logits.row(i), l))
            .sum::<f64>()
            / labels.len() as f64)
    }

    fn backward(&self, act: &Activations, labels: &[usize]) -> (f64, Gradients) {
        let b = labels.len() as f64;
        let mut dlogits = Array2::zeros(act.logits.raw_dim());
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = act.logits.row(i);
            loss += cross_entropy(row, l);
            let mut p = softmax(row);
            p[l] -= 1.0;
            dlogits.row_mut(i).assign(&(p / b));
        }
        let w2 = dlogits.t().dot(&act.a);
        let b2 = dlogits.sum_axis(Axis(0));
        let mut dpre = dlogits.dot(&self.w2);
        dpre.zip_mut_with(&act.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let w1 = dpre.t().dot(&act.z);
        let b1 = dpre.sum_axis(Axis(0));
        let pattern_bank = self.pattern_bank.as_ref().map(|p| {
            let dt = dpre.dot(&self.w1) / &self.input_std;
            let dy = common_mode_backward(dt);
            dy.t().dot(&act.x) / p.ncols() as f64
        });
        (
            loss / b,
            Gradients {
                pattern_bank,
                w1,
                b1,
                w2,
                b2,
            },
        )
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(5);
        if let Some(p) = self.pattern_bank.as_mut() {
            out.push(p.as_slice_mut().expect("standard layout"));
        }
        out.push(self.w1.as_slice_mut().expect("standard layout"));
        out.push(self.b1.as_slice_mut().expect("standard layout"));
        out.push(self.w2.as_slice_mut().expect("standard layout"));
        out.push(self.b2.as_slice_mut().expect("standard layout"));
        out
    }

    fn all_finite(&self) -> bool {
        self.pattern_bank.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && [&self.w1, &self.w2].iter().all(|w| w.iter().all(|v| v.is_finite()))
            && [&self.b1, &self.b2].iter().all(|w| w.iter().all(|v| v.is_finite()))
    }

    /// Learned patterns as a pattern set over `mask` (end-to-end models only).
    pub fn learned_patterns(&self, mask: FovMask, seed: u64) -> Option<Result<PatternSet, DecoderError>> {
        let p = self.pattern_bank.as_ref()?;
        Some(
            PatternSet::learned(mask, p.iter().copied().collect(), p.nrows(), seed)
                .map_err(DecoderError::from),
        )
    }

    /// Serialized model: `SPSD1`, a pattern-bank flag byte, four little-endian
    /// u32 dims (input, features, hidden, classes), then little-endian f64
    /// parameters in the order pattern bank, mean, std, W1, b1, W2, b2.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MODEL_MAGIC.to_vec();
        out.push(u8::from(self.pattern_bank.is_some()));
        for d in [self.input_dim(), self.feature_dim(), self.hidden(), self.classes()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut put = |vals: &mut dyn Iterator<Item = &f64>| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        if let Some(p) = &self.pattern_bank {
            put(&mut p.iter());
        }
        put(&mut self.input_mean.iter());
        put(&mut self.input_std.iter());
        put(&mut self.w1.iter());
        put(&mut self.b1.iter());
        put(&mut self.w2.iter());
        put(&mut self.b2.iter());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecoderError> {
        let fmt = |m: &str| DecoderError::Format(m.into());
        if bytes.len() < 22 || &bytes[..5] != MODEL_MAGIC {
            return Err(fmt("missing SPSD1 header"));
        }
        let has_bank = match bytes[5] {
            0 => false,
            1 => true,
            _ => return Err(fmt("bad pattern-bank flag")),
        };
        let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap()) as usize;
        let (input, features, hidden, classes) = (dim(0), dim(1), dim(2), dim(3));
        let mut floats = bytes[22..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let expected = usize::from(has_bank) * features * input
            + 2 * features
            + hidden * features
            + hidden
            + classes * hidden
            + classes;
        if bytes.len() - 22 != expected * 8 {
            return Err(fmt("parameter payload has the wrong length"));
        }
        let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
        let pattern_bank = has_bank.then(|| {
            Array2::from_shape_vec((features, input), take(features * input)).unwrap()
        });
        Ok(Self {
            pattern_bank,
            input_mean: Array1::from(take(features)),
            input_std: Array1::from(take(features)),
            w1: Array2::from_shape_vec((hidden, features), take(hidden * features)).unwrap(),
            b1: Array1::from(take(hidden)),
            w2: Array2::from_shape_vec((classes, hidden), take(classes * hidden)).unwrap(),
            b2: Array1::from(take(classes)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DecoderError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl Gradients {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(5);
        if let Some(p) = &self.pattern_bank {
            out.push(p.as_slice().expect("standard layout"));
        }
        out.push(self.w1.as_slice().expect("standard layout"));
        out.push(self.b1.as_slice().expect("standard layout"));
        out.push(self.w2.as_slice().expect("standard layout"));
        out.push(self.b2.as_slice().expect("standard layout"));
        out
    }
}

/// Transpose of the common-mode split, applied row by row.
fn common_mode_backward(mut dt: Array2<f64>) -> Array2<f64> {
    let m = dt.ncols() as f64;
    for mut row in dt.outer_iter_mut() {
        let rest: f64 = row.iter().skip(1).sum();
        let shift = (row[0] - rest) / m;
        row[0] = 0.0;
        row += shift;
    }
    dt
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<(), DecoderError> {
    if labels.len() != rows {
        return Err(DecoderError::ShapeMismatch(format!(
            "{rows} samples, {} labels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(DecoderError::ShapeMismatch(format!(
            "label {l} outside 0..{classes}"
        )));
    }
    Ok(())
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

enum OptimizerState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl OptimizerState {
    fn new(opt: Optimizer, model: &mut DecoderModel) -> Self {
        match opt {
            Optimizer::Sgd => Self::Sgd,
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let zeros: Vec<Vec<f64>> =
                    model.tensors_mut().iter().map(|t| vec![0.0; t.len()]).collect();
                Self::Adam {
                    beta1,
                    beta2,
                    epsilon,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    fn apply(&mut self, model: &mut DecoderModel, grads: &Gradients, lr: f64) {
        let g = grads.tensors();
        match self {
            Self::Sgd => {
                for (p, g) in model.tensors_mut().into_iter().zip(g) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Self::Adam {
                beta1,
                beta2,
                epsilon,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), m), v) in model.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
                    for i in 0..p.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * g[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *epsilon);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DecoderModel,
    /// Mean minibatch loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Minibatch training on cross-entropy.
///
/// `inputs` holds one sample per row: measurement vectors for
/// [`TrainMode::FixedPatterns`], active-pixel intensities for
/// [`TrainMode::EndToEnd`]. The shuffle order is drawn from `cfg.seed`, so
/// equal inputs and config give bit-identical models.
pub fn train(
    inputs: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, DecoderError> {
    cfg.validate()?;
    if inputs.nrows() == 0 {
        return Err(DecoderError::EmptyDataset);
    }
    check_labels(labels, inputs.nrows(), num_classes)?;
    let patterns = match cfg.mode {
        TrainMode::FixedPatterns => None,
        TrainMode::EndToEnd { patterns } => Some(patterns),
    };
    let mut model = DecoderModel::new(inputs.ncols(), cfg.hidden, num_classes, patterns, cfg.seed);
    model.fit_standardization(inputs);

    let mut opt = OptimizerState::new(cfg.optimizer, &mut model);
    let mut rng = Rng::stream(cfg.seed, tags::SHUFFLE);
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let act = model.activations(x.view());
            let (loss, grads) = model.backward(&act, &y);
            if !loss.is_finite() {
                return Err(DecoderError::NonFiniteLoss { epoch });
            }
            opt.apply(&mut model, &grads, cfg.learning_rate);
            if !model.all_finite() {
                return Err(DecoderError::NonFiniteLoss { epoch });
            }
            total += loss;
            batches += 1;
        }
        loss_curve.push(total / batches as f64);
    }
    Ok(TrainOutcome { model, loss_curve })
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(
    model: &DecoderModel,
    inputs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<f64, DecoderError> {
    if inputs.nrows() == 0 {
        return Err(DecoderError::EmptyDataset);
    }
    check_labels(labels, inputs.nrows(), model.classes())?;
    let logits = model.logits(inputs)?;
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.view()) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Arg-max predictions for each row.
pub fn predict(model: &DecoderModel, inputs: ArrayView2<f64>) -> Result<Vec<usize>, DecoderError> {
    let logits = model.logits(inputs)?;
    Ok(logits.outer_iter().map(|r| argmax(r)).collect())
}

/// Finite-difference step used by [`grad_check`].
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Parameters sampled by [`grad_check`] (all of them when the model is smaller).
pub const GRADCHECK_SAMPLES: usize = 256;

/// Largest relative error between analytic gradients and central finite
/// differences on one sample. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check(
    model: &DecoderModel,
    x: &[f64],
    label: usize,
    seed: u64,
) -> Result<f64, DecoderError> {
    let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    let (_, grads) = model.loss_and_gradients(xv, &[label])?;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut index: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(t, v)| (0..v.len()).map(move |i| (t, i)))
        .collect();
    if index.len() > GRADCHECK_SAMPLES {
        Rng::stream(seed, tags::GRADCHECK).shuffle(&mut index);
        // Always include some entries of every tensor.
        let mut picked: Vec<(usize, usize)> = Vec::with_capacity(GRADCHECK_SAMPLES);
        for t in 0..analytic.len() {
            picked.extend(index.iter().filter(|(tt, _)| *tt == t).take(16));
        }
        for &e in &index {
            if picked.len() >= GRADCHECK_SAMPLES {
                break;
            }
            if !picked.contains(&e) {
                picked.push(e);
            }
        }
        index = picked;
    }

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (t, i) in index {
        let orig = probe.tensors_mut()[t][i];
        probe.tensors_mut()[t][i] = orig + GRADCHECK_STEP;
        let up = probe.loss(xv, &[label])?;
        probe.tensors_mut()[t][i] = orig - GRADCHECK_STEP;
        let down = probe.loss(xv, &[label])?;
        probe.tensors_mut()[t][i] = orig;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let a = analytic[t][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Stack equal-length vectors into a sample-per-row matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>, DecoderError> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(DecoderError::ShapeMismatch("rows of unequal length".into()));
    }
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(&ArrayView1::from(r));
    }
    Ok(out)
}
