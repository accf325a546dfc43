//! Softmax classifier over burst vectors.
//!
//! The same model type serves as the defender's detector (queried while
//! generating traces) and as the attacker's classifier; the two differ only in
//! their [`TrainConfig`]. Inputs are divided by `normalization_scale` before the
//! first layer, and every gradient this module reports is taken with respect to
//! that normalized input.
//!
//! Hidden layers use softplus, which keeps input gradients smooth enough to
//! check against finite differences.
//!
//! Model file layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes   "MBDM"
//! version      u32       1
//! arch_len     u32       byte length of arch_id
//! arch_id      utf-8
//! n_dims       u32       number of layer widths (input .. output)
//! dims         u64 x n_dims
//! norm_scale   f64
//! per layer    f64 x (in * out) weights, input-major, then f64 x out biases
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledDataset;
use crate::scalar::Scalar;
use crate::trace::BurstTrace;

const MAGIC: &[u8; 4] = b"MBDM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training data contains fewer than two classes")]
    SingleClassDataset,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("input width {actual} does not match model width {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("class {class} unknown to a model with {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("k = {k} must be between 1 and {classes}")]
    BadK { k: usize, classes: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub arch_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 1,
            hidden_dims: vec![128],
            arch_id: "mlp-softplus".into(),
        }
    }
}

impl TrainConfig {
    /// A second, differently shaped and seeded network standing in for the
    /// attacker's own classifier.
    pub fn attacker_default() -> Self {
        Self {
            seed: 1001,
            hidden_dims: vec![96],
            arch_id: "mlp-softplus-attacker".into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: &str| Err(DetectorError::InvalidConfig(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

/// Scalar objectives whose input gradients the generators need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `F_c`.
    ProbaOfClass(usize),
    /// `max_{i != t} F_i - F_t`; non-positive once `t` is the prediction.
    CwTargeted(usize),
    /// `F_y - max_{i != y} F_i`; non-positive once `y` is no longer predicted.
    CwUntargeted(usize),
}

impl Objective {
    fn class(self) -> usize {
        match self {
            Objective::ProbaOfClass(c) | Objective::CwTargeted(c) | Objective::CwUntargeted(c) => c,
        }
    }

    /// Sparse weights `w` such that the objective equals `sum_i w_i F_i`
    /// locally (the max picks the lowest index among ties).
    fn weights<S: Scalar>(self, probs: &[S]) -> Vec<S> {
        let mut w = vec![S::zero(); probs.len()];
        let c = self.class();
        let best_other = |probs: &[S]| {
            probs
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != c)
                .fold(None, |acc: Option<(usize, S)>, (i, &p)| match acc {
                    Some((_, bp)) if bp >= p => acc,
                    _ => Some((i, p)),
                })
                .map(|(i, _)| i)
        };
        match self {
            Objective::ProbaOfClass(_) => w[c] = S::one(),
            Objective::CwTargeted(_) => {
                if let Some(o) = best_other(probs) {
                    w[o] = S::one();
                }
                w[c] = -S::one();
            }
            Objective::CwUntargeted(_) => {
                if let Some(o) = best_other(probs) {
                    w[o] = -S::one();
                }
                w[c] = S::one();
            }
        }
        w
    }

    pub fn value<S: Scalar>(self, probs: &[S]) -> S {
        self.weights(probs)
            .iter()
            .zip(probs)
            .map(|(&w, &p)| w * p)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<S> {
    inputs: usize,
    outputs: usize,
    /// Row `j` holds the weights leaving input `j`.
    weights: Vec<S>,
    bias: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![S::zero(); inputs * outputs],
            bias: vec![S::zero(); outputs],
        }
    }

    fn row(&self, j: usize) -> &[S] {
        &self.weights[j * self.outputs..(j + 1) * self.outputs]
    }

    /// Skips zero inputs; burst vectors are mostly trailing zeros.
    fn forward(&self, x: &[S], out: &mut Vec<S>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (j, &xj) in x.iter().enumerate() {
            if xj != S::zero() {
                for (o, &w) in out.iter_mut().zip(self.row(j)) {
                    *o += w * xj;
                }
            }
        }
    }

    fn backward_input(&self, grad_out: &[S]) -> Vec<S> {
        (0..self.inputs)
            .map(|j| self.row(j).iter().zip(grad_out).map(|(&w, &g)| w * g).sum())
            .collect()
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Activations kept for backpropagation.
struct Pass<S> {
    /// `post[0]` is the normalized input, `post[l + 1]` the output of layer `l`
    /// (softplus for hidden layers, raw logits for the last one).
    post: Vec<Vec<S>>,
    pre: Vec<Vec<S>>,
    probs: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<S> {
    arch_id: String,
    layer_dims: Vec<usize>,
    normalization_scale: S,
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> DetectorModel<S> {
    /// All-zero parameters: predicts the uniform distribution everywhere.
    pub fn zeros(layer_dims: &[usize], normalization_scale: S, arch_id: &str) -> Self {
        assert!(layer_dims.len() >= 2, "need input and output widths");
        assert!(normalization_scale > S::zero(), "scale must be positive");
        Self {
            arch_id: arch_id.to_string(),
            layer_dims: layer_dims.to_vec(),
            normalization_scale,
            layers: layer_dims
                .windows(2)
                .map(|w| Layer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    /// Glorot-uniform weights from a seeded generator, zero biases.
    pub fn random(layer_dims: &[usize], normalization_scale: S, arch_id: &str, seed: u64) -> Self {
        let mut model = Self::zeros(layer_dims, normalization_scale, arch_id);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = S::of(rng.gen_range(-bound..bound));
            }
        }
        model
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_len(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_dims.last().expect("at least two dims")
    }

    pub fn normalization_scale(&self) -> S {
        self.normalization_scale
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Divides by the normalization scale.
    pub fn normalize(&self, trace: &BurstTrace<S>) -> Result<Vec<S>, DetectorError> {
        self.check_width(trace.fixed_len())?;
        Ok(trace
            .bursts()
            .iter()
            .map(|&v| v / self.normalization_scale)
            .collect())
    }

    fn check_width(&self, actual: usize) -> Result<(), DetectorError> {
        if actual != self.input_len() {
            return Err(DetectorError::DimensionMismatch {
                expected: self.input_len(),
                actual,
            });
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<(), DetectorError> {
        if class >= self.classes() {
            return Err(DetectorError::UnknownClass {
                class,
                classes: self.classes(),
            });
        }
        Ok(())
    }

    fn pass(&self, x: &[S]) -> Pass<S> {
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        post.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.forward(&post[l], &mut z);
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| softplus(v)).collect()
            };
            pre.push(z);
            post.push(a);
        }
        let probs = softmax(post.last().expect("output layer"));
        Pass { post, pre, probs }
    }

    /// Backpropagates `grad_logits` to the input of layer `stop_at`, optionally
    /// accumulating parameter gradients.
    fn backprop(
        &self,
        pass: &Pass<S>,
        grad_logits: Vec<S>,
        mut param_grads: Option<&mut [Layer<S>]>,
        want_input: bool,
    ) -> Option<Vec<S>> {
        let mut grad = grad_logits;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l + 1 < self.layers.len() {
                for (g, &z) in grad.iter_mut().zip(&pass.pre[l]) {
                    *g *= sigmoid(z);
                }
            }
            if let Some(acc) = param_grads.as_deref_mut() {
                let acc = &mut acc[l];
                for (b, &g) in acc.bias.iter_mut().zip(&grad) {
                    *b += g;
                }
                for (j, &xj) in pass.post[l].iter().enumerate() {
                    if xj != S::zero() {
                        let row = &mut acc.weights[j * layer.outputs..(j + 1) * layer.outputs];
                        for (w, &g) in row.iter_mut().zip(&grad) {
                            *w += xj * g;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            grad = layer.backward_input(&grad);
        }
        Some(grad)
    }

    /// Class probabilities for an already normalized input.
    pub fn predict_proba_normalized(&self, x: &[S]) -> Result<Vec<S>, DetectorError> {
        self.check_width(x.len())?;
        Ok(self.pass(x).probs)
    }

    pub fn predict_proba(&self, trace: &BurstTrace<S>) -> Result<Vec<S>, DetectorError> {
        let x = self.normalize(trace)?;
        Ok(self.pass(&x).probs)
    }

    pub fn predict(&self, trace: &BurstTrace<S>) -> Result<usize, DetectorError> {
        Ok(top_k_of(&self.predict_proba(trace)?, 1)[0])
    }

    /// Objective value and its gradient with respect to the normalized input.
    pub fn objective_gradient_normalized(
        &self,
        x: &[S],
        objective: Objective,
    ) -> Result<(S, Vec<S>), DetectorError> {
        self.check_width(x.len())?;
        self.check_class(objective.class())?;
        let pass = self.pass(x);
        let w = objective.weights(&pass.probs);
        let mean: S = w.iter().zip(&pass.probs).map(|(&w, &p)| w * p).sum();
        let grad_logits: Vec<S> = pass
            .probs
            .iter()
            .zip(&w)
            .map(|(&p, &wi)| p * (wi - mean))
            .collect();
        let grad = self
            .backprop(&pass, grad_logits, None, true)
            .expect("input gradient requested");
        Ok((mean, grad))
    }

    /// Gradient of `objective` with respect to the normalized input vector.
    pub fn input_gradient(
        &self,
        trace: &BurstTrace<S>,
        objective: Objective,
    ) -> Result<Vec<S>, DetectorError> {
        let x = self.normalize(trace)?;
        Ok(self.objective_gradient_normalized(&x, objective)?.1)
    }

    pub fn objective_value(
        &self,
        trace: &BurstTrace<S>,
        objective: Objective,
    ) -> Result<S, DetectorError> {
        self.check_class(objective.class())?;
        Ok(objective.value(&self.predict_proba(trace)?))
    }

    pub fn top_k_labels(
        &self,
        trace: &BurstTrace<S>,
        k: usize,
    ) -> Result<Vec<usize>, DetectorError> {
        if k == 0 || k > self.classes() {
            return Err(DetectorError::BadK {
                k,
                classes: self.classes(),
            });
        }
        Ok(top_k_of(&self.predict_proba(trace)?, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.arch_id.as_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.normalization_scale.to_f64_lossy().to_le_bytes());
        for layer in &self.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DetectorError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(DetectorError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(DetectorError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let arch_len = r.u32()? as usize;
        let arch_id = String::from_utf8(r.take(arch_len)?.to_vec())
            .map_err(|_| DetectorError::Format("arch_id is not utf-8".into()))?;
        let n_dims = r.u32()? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(DetectorError::Format(format!("{n_dims} layer widths")));
        }
        let dims = (0..n_dims)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.contains(&0) {
            return Err(DetectorError::Format("zero layer width".into()));
        }
        let scale = r.f64()?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DetectorError::Format(
                "normalization scale must be positive".into(),
            ));
        }
        let mut model = Self::zeros(&dims, S::of(scale), &arch_id);
        for layer in &mut model.layers {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = S::of(r.f64()?);
            }
        }
        if r.pos != bytes.len() {
            return Err(DetectorError::Format("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DetectorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DetectorError::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DetectorError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, DetectorError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, DetectorError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn top_k_of<S: Scalar>(probs: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Mini-batch gradient descent with momentum on softmax cross-entropy.
///
/// Single-threaded and fully determined by `config.seed`.
pub fn train<S: Scalar>(
    dataset: &LabeledDataset<BurstTrace<S>>,
    config: &TrainConfig,
) -> Result<DetectorModel<S>, DetectorError> {
    config.validate()?;
    let first = dataset.traces.first().ok_or(DetectorError::EmptyDataset)?;
    let width = first.fixed_len();
    if dataset.per_class_counts().len() < 2 || dataset.classes < 2 {
        return Err(DetectorError::SingleClassDataset);
    }
    for t in &dataset.traces {
        if t.fixed_len() != width {
            return Err(DetectorError::DimensionMismatch {
                expected: width,
                actual: t.fixed_len(),
            });
        }
    }
    let max_burst = dataset
        .traces
        .iter()
        .flat_map(|t| t.bursts().iter().copied())
        .fold(S::zero(), S::max);
    let scale = if max_burst > S::zero() {
        max_burst
    } else {
        S::one()
    };

    let mut dims = vec![width];
    dims.extend(&config.hidden_dims);
    dims.push(dataset.classes);
    let mut model = DetectorModel::random(&dims, scale, &config.arch_id, config.seed);

    let inputs: Vec<Vec<S>> = dataset
        .traces
        .iter()
        .map(|t| t.bursts().iter().map(|&v| v / scale).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut velocity: Vec<Layer<S>> = model
        .layers
        .iter()
        .map(|l| Layer::zeros(l.inputs, l.outputs))
        .collect();
    let mut grads = velocity.clone();
    let lr = S::of(config.learning_rate);
    let mu = S::of(config.momentum);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            for g in &mut grads {
                g.weights.iter_mut().for_each(|v| *v = S::zero());
                g.bias.iter_mut().for_each(|v| *v = S::zero());
            }
            for &i in batch {
                let pass = model.pass(&inputs[i]);
                let mut grad_logits = pass.probs.clone();
                grad_logits[dataset.traces[i].label] -= S::one();
                model.backprop(&pass, grad_logits, Some(&mut grads), false);
            }
            let step = lr / S::of_usize(batch.len());
            for ((layer, vel), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, v), &gw) in layer
                    .weights
                    .iter_mut()
                    .zip(vel.weights.iter_mut())
                    .zip(&g.weights)
                {
                    *v = mu * *v - step * gw;
                    *w += *v;
                }
                for ((b, v), &gb) in layer.bias.iter_mut().zip(vel.bias.iter_mut()).zip(&g.bias) {
                    *v = mu * *v - step * gb;
                    *b += *v;
                }
            }
        }
    }
    Ok(model)
}

/// Fraction of traces whose argmax prediction equals the label.
pub fn accuracy<S: Scalar>(
    model: &DetectorModel<S>,
    dataset: &LabeledDataset<BurstTrace<S>>,
) -> Result<f64, DetectorError> {
    if dataset.is_empty() {
        return Err(DetectorError::EmptyDataset);
    }
    let mut correct = 0usize;
    for t in &dataset.traces {
        if model.predict(t)? == t.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}
