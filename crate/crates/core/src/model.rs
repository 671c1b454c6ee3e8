//! Local model: multinomial logistic regression (optionally a one-hidden-layer
//! tanh perceptron), mini-batch SGD, and evaluation.
//!
//! Logistic parameters are laid out one row per class, `[w_c1 .. w_cF, b_c]`,
//! so `dim = (features + 1) * classes`. The perceptron stores
//! `[W1 (hidden x features), b1, W2 (classes x hidden), b2]`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Matrix, ParamVector};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Logistic,
    Mlp { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub features: usize,
    pub classes: usize,
    pub kind: ModelKind,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::logistic(60, 10)
    }
}

impl ModelSpec {
    pub fn logistic(features: usize, classes: usize) -> Self {
        ModelSpec {
            features,
            classes,
            kind: ModelKind::Logistic,
        }
    }

    pub fn mlp(features: usize, classes: usize, hidden: usize) -> Self {
        ModelSpec {
            features,
            classes,
            kind: ModelKind::Mlp { hidden },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.features < 1 {
            return Err(Error::Config("model.features must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be >= 2".into()));
        }
        if let ModelKind::Mlp { hidden } = self.kind {
            if hidden < 1 {
                return Err(Error::Config("model.hidden must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            ModelKind::Logistic => (self.features + 1) * self.classes,
            ModelKind::Mlp { hidden } => hidden * (self.features + 1) + self.classes * (hidden + 1),
        }
    }
}

/// One client's local data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

impl ClientDataset {
    pub fn new(
        train_x: Matrix,
        train_y: Vec<usize>,
        test_x: Matrix,
        test_y: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if train_x.rows() == 0 || test_x.rows() == 0 {
            return Err(Error::InvalidArgument(
                "client needs at least one train and one test sample".into(),
            ));
        }
        if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
            return Err(Error::InvalidArgument("feature/label row count mismatch".into()));
        }
        if train_x.cols() != test_x.cols() {
            return Err(Error::DimensionMismatch {
                expected: train_x.cols(),
                got: test_x.cols(),
            });
        }
        if let Some(&bad) = train_y.iter().chain(&test_y).find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(ClientDataset {
            train_x,
            train_y,
            test_x,
            test_y,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train_y.len()
    }

    pub fn n_test(&self) -> usize {
        self.test_y.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: 10,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and >= 0".into()));
        }
        if self.local_epochs < 1 {
            return Err(Error::Config("E must be >= 1 (train.local_epochs)".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Zeros for logistic regression; seeded uniform `±1/sqrt(fan_in)` for the perceptron.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    match spec.kind {
        ModelKind::Logistic => ParamVector::zeros(spec.dim()),
        ModelKind::Mlp { hidden } => {
            let mut rng = rng::stream(seed, Domain::ModelInit, 0, 0);
            let mut v = Vec::with_capacity(spec.dim());
            let a1 = 1.0 / (spec.features as f64).sqrt();
            for _ in 0..hidden * spec.features {
                v.push(rng.random_range(-a1..a1));
            }
            v.extend(std::iter::repeat_n(0.0, hidden));
            let a2 = 1.0 / (hidden as f64).sqrt();
            for _ in 0..spec.classes * hidden {
                v.push(rng.random_range(-a2..a2));
            }
            v.extend(std::iter::repeat_n(0.0, spec.classes));
            ParamVector::from_vec(v)
        }
    }
}

/// Scratch space for forward/backward passes.
struct Workspace {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        let h = match spec.kind {
            ModelKind::Logistic => 0,
            ModelKind::Mlp { hidden } => hidden,
        };
        Workspace {
            hidden: vec![0.0; h],
            logits: vec![0.0; spec.classes],
            dhidden: vec![0.0; h],
        }
    }
}

fn forward(spec: &ModelSpec, p: &[f64], x: &[f64], ws: &mut Workspace) {
    let f = spec.features;
    match spec.kind {
        ModelKind::Logistic => {
            for (c, z) in ws.logits.iter_mut().enumerate() {
                let row = &p[c * (f + 1)..(c + 1) * (f + 1)];
                *z = row[f] + dot(&row[..f], x);
            }
        }
        ModelKind::Mlp { hidden } => {
            let (w1, rest) = p.split_at(hidden * f);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(spec.classes * hidden);
            for (j, h) in ws.hidden.iter_mut().enumerate() {
                *h = (b1[j] + dot(&w1[j * f..(j + 1) * f], x)).tanh();
            }
            for (c, z) in ws.logits.iter_mut().enumerate() {
                *z = b2[c] + dot(&w2[c * hidden..(c + 1) * hidden], &ws.hidden);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Turns logits into probabilities in place and returns the cross-entropy for `label`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
    sum.ln() - shifted_label
}

/// Accumulate `grad += d loss(x, y) / d params`, return the sample loss.
fn backward(spec: &ModelSpec, p: &[f64], x: &[f64], y: usize, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
    forward(spec, p, x, ws);
    let loss = softmax_xent(&mut ws.logits, y);
    ws.logits[y] -= 1.0; // now dL/dz
    let f = spec.features;
    match spec.kind {
        ModelKind::Logistic => {
            for (c, &dz) in ws.logits.iter().enumerate() {
                let row = &mut grad[c * (f + 1)..(c + 1) * (f + 1)];
                for (g, xi) in row[..f].iter_mut().zip(x) {
                    *g += dz * xi;
                }
                row[f] += dz;
            }
        }
        ModelKind::Mlp { hidden } => {
            let w2_off = hidden * f + hidden;
            let b2_off = w2_off + spec.classes * hidden;
            ws.dhidden.iter_mut().for_each(|d| *d = 0.0);
            for (c, &dz) in ws.logits.iter().enumerate() {
                for j in 0..hidden {
                    grad[w2_off + c * hidden + j] += dz * ws.hidden[j];
                    ws.dhidden[j] += dz * p[w2_off + c * hidden + j];
                }
                grad[b2_off + c] += dz;
            }
            for j in 0..hidden {
                let da = ws.dhidden[j] * (1.0 - ws.hidden[j] * ws.hidden[j]);
                for (g, xi) in grad[j * f..(j + 1) * f].iter_mut().zip(x) {
                    *g += da * xi;
                }
                grad[hidden * f + j] += da;
            }
        }
    }
    loss
}

/// Mean cross-entropy and its gradient over the rows in `idx`.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Matrix,
    y: &[usize],
    idx: &[usize],
) -> (f64, ParamVector) {
    let mut ws = Workspace::new(spec);
    let mut grad = ParamVector::zeros(params.dim());
    let loss = batch_grad(spec, params, x, y, idx, &mut ws, grad.as_mut_slice());
    (loss, grad)
}

fn batch_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    x: &Matrix,
    y: &[usize],
    idx: &[usize],
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    for &i in idx {
        total += backward(spec, params.as_slice(), x.row(i), y[i], ws, grad);
    }
    let inv = 1.0 / idx.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    total * inv
}

/// Mean cross-entropy over a whole set.
pub fn mean_loss(spec: &ModelSpec, params: &ParamVector, x: &Matrix, y: &[usize]) -> f64 {
    let mut ws = Workspace::new(spec);
    let mut total = 0.0;
    for (i, &label) in y.iter().enumerate() {
        forward(spec, params.as_slice(), x.row(i), &mut ws);
        total += softmax_xent(&mut ws.logits, label);
    }
    total / y.len() as f64
}

/// Runs `E` epochs of shuffled mini-batch SGD from `params`.
///
/// Returns the trained parameters and the training loss at the *input*
/// parameters (the `F_k(w^t)` that q-FedAvg weights by).
pub fn local_train<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &ClientDataset,
    hyper: &TrainHyper,
    rng: &mut R,
) -> Result<(ParamVector, f64)> {
    hyper.validate().map_err(|e| match e {
        Error::Config(m) => Error::InvalidArgument(m),
        other => other,
    })?;
    params.check_dim(spec.dim())?;
    let start_loss = mean_loss(spec, params, &data.train_x, &data.train_y);
    if !start_loss.is_finite() {
        return Err(Error::Divergence(format!(
            "training loss is {start_loss} at round-start parameters"
        )));
    }

    let mut w = params.clone();
    let mut grad = vec![0.0; w.dim()];
    let mut ws = Workspace::new(spec);
    let mut order: Vec<usize> = (0..data.n_train()).collect();
    for epoch in 0..hyper.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(hyper.batch_size) {
            batch_grad(spec, &w, &data.train_x, &data.train_y, batch, &mut ws, &mut grad);
            for (p, g) in w.as_mut_slice().iter_mut().zip(&grad) {
                *p -= hyper.learning_rate * g;
            }
        }
        if !w.is_finite() {
            return Err(Error::Divergence(format!(
                "parameters non-finite after local epoch {} (learning rate {} too large?)",
                epoch + 1,
                hyper.learning_rate
            )));
        }
    }
    Ok((w, start_loss))
}

/// Index of the largest logit; ties resolve to the lowest class index.
pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> usize {
    let mut ws = Workspace::new(spec);
    forward(spec, params.as_slice(), x, &mut ws);
    argmax(&ws.logits)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in v.iter().enumerate().skip(1) {
        if z > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, x: &Matrix, y: &[usize]) -> Result<Evaluation> {
    if y.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if x.cols() != spec.features {
        return Err(Error::DimensionMismatch {
            expected: spec.features,
            got: x.cols(),
        });
    }
    params.check_dim(spec.dim())?;
    let mut ws = Workspace::new(spec);
    let mut correct = 0;
    let mut total_loss = 0.0;
    for (i, &label) in y.iter().enumerate() {
        forward(spec, params.as_slice(), x.row(i), &mut ws);
        if argmax(&ws.logits) == label {
            correct += 1;
        }
        total_loss += softmax_xent(&mut ws.logits, label);
    }
    Ok(Evaluation {
        accuracy: correct as f64 / y.len() as f64,
        loss: total_loss / y.len() as f64,
        correct,
        total: y.len(),
    })
}
