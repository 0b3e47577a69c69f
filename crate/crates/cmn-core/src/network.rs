//! Minimal trainable stack around the memory module: an MLP feature
//! extractor, a linear classifier over the augmented feature, cross-entropy
//! loss, SGD with momentum and weight decay, and a step learning-rate
//! schedule.
//!
//! The forward path is `x -> MLP -> f -> read/augment -> classifier ->
//! logits`; [`backward`] chains analytically through the classifier, the
//! augmentation, the memory read path (see
//! [`CategoricalMemory::read_backward`]) and the MLP. Memory slots never
//! receive gradients.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bytes::{put_f64, put_u16, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::memory::{augment, CategoricalMemory, PredictorParams, ReadMode, ReadResult, Similarity};
use crate::numerics::{matvec, matvec_t, Matrix, Rng};

/// Serializable selector for the memory read mode; resolved against a model
/// (which owns the predictor parameters) into a [`ReadMode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReadModeSpec {
    Attention,
    Equal,
    TopK { k: usize },
    Predicted,
}

impl ReadModeSpec {
    pub fn label(&self) -> String {
        match self {
            ReadModeSpec::Attention => "attention".into(),
            ReadModeSpec::Equal => "equal".into(),
            ReadModeSpec::TopK { k } => format!("topk_{k}"),
            ReadModeSpec::Predicted => "predicted".into(),
        }
    }
}

/// One fully connected layer: `weight` is `out x in`, `bias` is `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = matvec(&self.weight, x)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }

    fn gaussian(out_dim: usize, in_dim: usize, std: f64, rng: &mut Rng) -> Self {
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for v in weight.data_mut() {
            *v = rng.normal(0.0, std);
        }
        Layer {
            weight,
            bias: vec![0.0; out_dim],
        }
    }
}

/// MLP feature extractor plus linear classifier.
///
/// ReLU is applied between the hidden layers; the last hidden layer's output
/// is the feature `f` (no activation), and the classifier maps the augmented
/// feature to logits. When the predicted read mode is in use the model also
/// owns the predictor layer, so that everything trainable checkpoints
/// together.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
    classifier: Layer,
    predictor: Option<PredictorParams>,
}

impl MlpModel {
    /// Seed-deterministic init: hidden layers are fan-in-scaled Gaussian
    /// (std `sqrt(2 / fan_in)`) with zero bias, the classifier is Gaussian
    /// with std 0.01 and zero bias.
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs a positive input dim, at least one hidden layer, and at least one class"
                    .into(),
            ));
        }
        if hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("hidden layer of width 0".into()));
        }
        let mut layers = Vec::with_capacity(hidden_dims.len());
        let mut in_dim = input_dim;
        for &out_dim in hidden_dims {
            let std = (2.0 / in_dim as f64).sqrt();
            layers.push(Layer::gaussian(out_dim, in_dim, std, rng));
            in_dim = out_dim;
        }
        let classifier = Layer::gaussian(num_classes, in_dim, 0.01, rng);
        Ok(MlpModel {
            layers,
            classifier,
            predictor: None,
        })
    }

    /// Assembles a model from explicit layers, validating shape
    /// compatibility.
    pub fn from_parts(
        layers: Vec<Layer>,
        classifier: Layer,
        predictor: Option<PredictorParams>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "model needs at least one hidden layer".into(),
            ));
        }
        let model = MlpModel {
            layers,
            classifier,
            predictor,
        };
        model.validate()?;
        Ok(model)
    }

    /// Attaches predictor parameters for [`ReadModeSpec::Predicted`], drawn
    /// from `rng`.
    pub fn enable_predictor(&mut self, rng: &mut Rng) {
        self.predictor = Some(PredictorParams::new(
            self.num_classes(),
            self.feature_dim(),
            rng,
        ));
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weight.rows()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn classifier(&self) -> &Layer {
        &self.classifier
    }

    pub fn predictor(&self) -> Option<&PredictorParams> {
        self.predictor.as_ref()
    }

    /// True when every parameter is finite. Training checks this after each
    /// optimizer step so a divergence is reported as a numerical failure at
    /// the step that caused it rather than as a shape-style error at the
    /// next forward pass.
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
            && self.classifier.weight.is_finite()
            && self.classifier.bias.iter().all(|v| v.is_finite())
            && self
                .predictor
                .as_ref()
                .map_or(true, |p| p.weight.is_finite() && p.bias.iter().all(|v| v.is_finite()))
    }

    /// Resolves a mode spec against this model's predictor parameters.
    pub fn read_mode(&self, spec: ReadModeSpec) -> Result<ReadMode<'_>> {
        Ok(match spec {
            ReadModeSpec::Attention => ReadMode::Attention,
            ReadModeSpec::Equal => ReadMode::Equal,
            ReadModeSpec::TopK { k } => ReadMode::TopK(k),
            ReadModeSpec::Predicted => ReadMode::Predicted(self.predictor.as_ref().ok_or_else(
                || {
                    Error::InvalidArgument(
                        "predicted read mode requires predictor parameters on the model".into(),
                    )
                },
            )?),
        })
    }

    fn validate(&self) -> Result<()> {
        let mut in_dim = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.cols() != in_dim || layer.bias.len() != layer.weight.rows() {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} dimensions are inconsistent"
                )));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} contains non-finite parameters"
                )));
            }
            in_dim = layer.weight.rows();
        }
        if self.classifier.weight.cols() != self.feature_dim()
            || self.classifier.bias.len() != self.num_classes()
        {
            return Err(Error::InvalidArgument(
                "classifier dimensions are inconsistent".into(),
            ));
        }
        if let Some(p) = &self.predictor {
            if p.weight.rows() != self.num_classes() || p.weight.cols() != self.feature_dim() {
                return Err(Error::InvalidArgument(
                    "predictor dimensions are inconsistent".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Training hyperparameters and run controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Hidden layer widths; the last entry is the feature dimension D.
    pub hidden_dims: Vec<usize>,
    pub lr_backbone: f64,
    /// Learning-rate multiplier for the newly added layers (classifier and,
    /// in predicted mode, the predictor).
    pub lr_multiplier_new: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    /// Epoch at which the single learning-rate decay is applied; set equal
    /// to `epochs` for a constant rate.
    pub lr_decay_epoch: usize,
    /// Memory update rate (moving-average coefficient).
    pub beta: f64,
    /// Attention softmax temperature.
    pub tau: f64,
    pub read_mode: ReadModeSpec,
    pub similarity: Similarity,
    pub seed: u64,
    /// When false, attention weights are treated as constants in the
    /// backward pass (stop-gradient ablation).
    pub backprop_through_attention: bool,
    /// When true (the default) the memory write happens after the optimizer
    /// step; when false it happens between backward and the step.
    pub write_after_step: bool,
    /// Slot std for the fixed random-module ablation; `None` means
    /// `1/sqrt(D)` so prototype norms are about 1.
    pub random_memory_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dims: vec![64, 32],
            lr_backbone: 4e-3,
            lr_multiplier_new: 5.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 60,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 40,
            beta: 0.9,
            tau: 0.1,
            read_mode: ReadModeSpec::Attention,
            similarity: Similarity::Cosine,
            seed: 0,
            backprop_through_attention: true,
            write_after_step: true,
            random_memory_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "hidden_dims must be nonempty with positive widths".into(),
            ));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_multiplier_new", self.lr_multiplier_new),
            ("lr_decay_factor", self.lr_decay_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be nonnegative and finite, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.lr_decay_epoch > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "lr_decay_epoch {} exceeds epochs {}",
                self.lr_decay_epoch, self.epochs
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in the open interval (0, 1), got {}",
                self.beta
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if let ReadModeSpec::TopK { k } = self.read_mode {
            if k == 0 {
                return Err(Error::InvalidArgument("top-k must have k >= 1".into()));
            }
        }
        if let Some(scale) = self.random_memory_scale {
            if !(scale > 0.0) || !scale.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "random_memory_scale must be positive, got {scale}"
                )));
            }
        }
        Ok(())
    }
}

/// Learning rates at a given epoch: `(backbone, newly added layers)`. The
/// base rate is multiplied by the decay factor once `epoch >=
/// lr_decay_epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> (f64, f64) {
    let base = if epoch >= config.lr_decay_epoch {
        config.lr_backbone * config.lr_decay_factor
    } else {
        config.lr_backbone
    };
    (base, base * config.lr_multiplier_new)
}

/// Everything produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub feature: Vec<f64>,
    pub read: ReadResult,
    pub augmented: Vec<f64>,
    pub logits: Vec<f64>,
}

struct Trace {
    /// `post[0]` is the input; `post[l + 1]` is layer `l`'s output after
    /// its activation.
    post: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    out: Forward,
}

fn forward_traced(
    model: &MlpModel,
    mem: &CategoricalMemory,
    x: &[f64],
    spec: ReadModeSpec,
    metric: Similarity,
) -> Result<Trace> {
    if x.len() != model.input_dim() {
        return Err(Error::Length {
            op: "forward",
            lhs: x.len(),
            rhs: model.input_dim(),
        });
    }
    if mem.dim() != model.feature_dim() {
        return Err(Error::Length {
            op: "forward memory dim",
            lhs: mem.dim(),
            rhs: model.feature_dim(),
        });
    }
    let num_layers = model.layers.len();
    let mut post = Vec::with_capacity(num_layers + 1);
    let mut pre = Vec::with_capacity(num_layers);
    post.push(x.to_vec());
    for (l, layer) in model.layers.iter().enumerate() {
        let z = layer.apply(post.last().unwrap())?;
        pre.push(z.clone());
        let h = if l + 1 < num_layers {
            z.into_iter().map(|v| v.max(0.0)).collect()
        } else {
            z
        };
        post.push(h);
    }
    let feature = post.last().unwrap().clone();
    let read = mem.read(&feature, model.read_mode(spec)?, metric)?;
    let augmented = augment(&feature, &read.response)?;
    let logits = model.classifier.apply(&augmented)?;
    Ok(Trace {
        post,
        pre,
        out: Forward {
            feature,
            read,
            augmented,
            logits,
        },
    })
}

/// Forward pass: feature, memory read, augmented feature, logits.
pub fn forward(
    model: &MlpModel,
    mem: &CategoricalMemory,
    x: &[f64],
    spec: ReadModeSpec,
    metric: Similarity,
) -> Result<Forward> {
    Ok(forward_traced(model, mem, x, spec, metric)?.out)
}

/// Cross-entropy loss of softmaxed logits (temperature 1) against `label`,
/// plus the gradient with respect to the logits: `softmax(logits) -
/// one_hot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::IndexOutOfRange {
            what: "label",
            index: label,
            size: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Gradients for every trainable tensor, plus the gradient with respect to
/// the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Per hidden layer: `(d weight, d bias)`.
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub classifier: (Matrix, Vec<f64>),
    pub predictor: Option<(Matrix, Vec<f64>)>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
            classifier: (
                Matrix::zeros(
                    model.classifier.weight.rows(),
                    model.classifier.weight.cols(),
                ),
                vec![0.0; model.classifier.bias.len()],
            ),
            predictor: model.predictor.as_ref().map(|p| {
                (
                    Matrix::zeros(p.weight.rows(), p.weight.cols()),
                    vec![0.0; p.bias.len()],
                )
            }),
            input: vec![0.0; model.input_dim()],
        }
    }

    /// Accumulates `other` into `self`. Batch gradients are plain sums of
    /// per-sample gradients.
    pub fn accumulate(&mut self, other: &Gradients) {
        fn add_pair(into: &mut (Matrix, Vec<f64>), from: &(Matrix, Vec<f64>)) {
            for (a, b) in into.0.data_mut().iter_mut().zip(from.0.data()) {
                *a += b;
            }
            for (a, b) in into.1.iter_mut().zip(&from.1) {
                *a += b;
            }
        }
        assert_eq!(self.layers.len(), other.layers.len());
        for (into, from) in self.layers.iter_mut().zip(&other.layers) {
            add_pair(into, from);
        }
        add_pair(&mut self.classifier, &other.classifier);
        match (&mut self.predictor, &other.predictor) {
            (Some(into), Some(from)) => add_pair(into, from),
            (None, None) => {}
            _ => panic!("predictor gradient presence mismatch"),
        }
        for (a, b) in self.input.iter_mut().zip(&other.input) {
            *a += b;
        }
    }
}

/// Loss, intermediates needed by the training loop, and all gradients for
/// one sample.
#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
    pub grads: Gradients,
}

fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(u.len(), v.len());
    for (i, ui) in u.iter().enumerate() {
        let row = out.row_mut(i);
        for (r, vj) in row.iter_mut().zip(v) {
            *r = ui * vj;
        }
    }
    out
}

/// Backward pass for one `(x, label)` sample under `config`'s read mode,
/// similarity metric, and attention-backprop setting.
///
/// Chain: cross-entropy -> classifier -> augmentation -> memory read path
/// -> MLP. With `backprop_through_attention` off, the attention weights are
/// constants, the response is locally constant in `f`, and the memory path
/// contributes nothing beyond the identity from the augmentation.
pub fn backward(
    model: &MlpModel,
    mem: &CategoricalMemory,
    x: &[f64],
    label: usize,
    config: &TrainConfig,
) -> Result<BackwardOutput> {
    let trace = forward_traced(model, mem, x, config.read_mode, config.similarity)?;
    let (loss, dlogits) = cross_entropy(&trace.out.logits, label)?;

    let d_classifier = (outer(&dlogits, &trace.out.augmented), dlogits.clone());
    let d_augmented = matvec_t(&model.classifier.weight, &dlogits)?;

    let (grad_feature, d_predictor) = if config.backprop_through_attention {
        let rb = mem.read_backward(
            &trace.out.feature,
            model.read_mode(config.read_mode)?,
            config.similarity,
            &d_augmented,
        )?;
        (rb.grad_input, rb.predictor)
    } else {
        (d_augmented.clone(), None)
    };
    // The model may own a predictor even when the read path produced no
    // gradient for it (stop-gradient ablation); keep tensor shapes aligned.
    let d_predictor = match (&model.predictor, d_predictor) {
        (Some(_), Some(g)) => Some(g),
        (Some(p), None) => Some((
            Matrix::zeros(p.weight.rows(), p.weight.cols()),
            vec![0.0; p.bias.len()],
        )),
        (None, g) => {
            debug_assert!(g.is_none());
            None
        }
    };

    let num_layers = model.layers.len();
    let mut layer_grads: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(num_layers);
    let mut g = grad_feature;
    for l in (0..num_layers).rev() {
        let dz: Vec<f64> = if l + 1 < num_layers {
            g.iter()
                .zip(&trace.pre[l])
                .map(|(gi, zi)| if *zi > 0.0 { *gi } else { 0.0 })
                .collect()
        } else {
            g
        };
        layer_grads.push((outer(&dz, &trace.post[l]), dz.clone()));
        g = matvec_t(&model.layers[l].weight, &dz)?;
    }
    layer_grads.reverse();

    Ok(BackwardOutput {
        loss,
        logits: trace.out.logits,
        feature: trace.out.feature,
        grads: Gradients {
            layers: layer_grads,
            classifier: d_classifier,
            predictor: d_predictor,
            input: g,
        },
    })
}

/// One SGD-with-momentum step on a parameter tensor:
/// `g' = grad + weight_decay * param; v <- momentum * v + g';
/// param <- param - lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Length {
            op: "sgd_step",
            lhs: params.len(),
            rhs: grads.len().max(velocity.len()),
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Per-parameter velocity buffers, zero at construction.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    classifier: (Vec<f64>, Vec<f64>),
    predictor: Option<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(model: &MlpModel) -> Self {
        OptimizerState {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.data().len()], vec![0.0; l.bias.len()]))
                .collect(),
            classifier: (
                vec![0.0; model.classifier.weight.data().len()],
                vec![0.0; model.classifier.bias.len()],
            ),
            predictor: model
                .predictor
                .as_ref()
                .map(|p| (vec![0.0; p.weight.data().len()], vec![0.0; p.bias.len()])),
        }
    }
}

/// Applies one SGD step to every trainable tensor. The backbone layers use
/// `lr_backbone`; the classifier and predictor (the newly added layers) use
/// `lr_new`.
pub fn apply_sgd(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr_backbone: f64,
    lr_new: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for ((layer, grad), vel) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.layers.iter_mut())
    {
        sgd_step(
            layer.weight.data_mut(),
            grad.0.data(),
            &mut vel.0,
            lr_backbone,
            momentum,
            weight_decay,
        )?;
        sgd_step(
            &mut layer.bias,
            &grad.1,
            &mut vel.1,
            lr_backbone,
            momentum,
            weight_decay,
        )?;
    }
    sgd_step(
        model.classifier.weight.data_mut(),
        grads.classifier.0.data(),
        &mut state.classifier.0,
        lr_new,
        momentum,
        weight_decay,
    )?;
    sgd_step(
        &mut model.classifier.bias,
        &grads.classifier.1,
        &mut state.classifier.1,
        lr_new,
        momentum,
        weight_decay,
    )?;
    if let (Some(p), Some(g), Some(v)) = (
        model.predictor.as_mut(),
        grads.predictor.as_ref(),
        state.predictor.as_mut(),
    ) {
        sgd_step(
            p.weight.data_mut(),
            g.0.data(),
            &mut v.0,
            lr_new,
            momentum,
            weight_decay,
        )?;
        sgd_step(&mut p.bias, &g.1, &mut v.1, lr_new, momentum, weight_decay)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CMNW";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained model with its memory and the read settings needed to
/// reproduce evaluation exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub memory: CategoricalMemory,
    pub read_mode: ReadModeSpec,
    pub similarity: Similarity,
}

fn put_layer(out: &mut Vec<u8>, weight: &Matrix, bias: &[f64]) {
    put_u32(out, weight.rows() as u32);
    put_u32(out, weight.cols() as u32);
    for v in weight.data() {
        put_f64(out, *v);
    }
    for v in bias {
        put_f64(out, *v);
    }
}

fn read_layer(cur: &mut Cursor) -> Result<(Matrix, Vec<f64>)> {
    let rows = cur.read_u32()? as usize;
    let cols = cur.read_u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(cur.read_f64()?);
    }
    let mut bias = Vec::with_capacity(rows);
    for _ in 0..rows {
        bias.push(cur.read_f64()?);
    }
    Ok((Matrix::from_vec(rows, cols, data)?, bias))
}

impl Checkpoint {
    /// Layout: magic `CMNW`, version u16, read-mode tag u8, top-k u32,
    /// similarity u8, layer count u32, then per layer (rows u32, cols u32,
    /// weight f64s, bias f64s), the classifier in the same shape, a
    /// predictor-present byte with optional predictor layer, and finally
    /// the embedded memory snapshot. The round-trip is bit-exact.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u16(&mut out, CHECKPOINT_VERSION);
        let (tag, k) = match self.read_mode {
            ReadModeSpec::Attention => (0u8, 0u32),
            ReadModeSpec::Equal => (1, 0),
            ReadModeSpec::TopK { k } => (2, k as u32),
            ReadModeSpec::Predicted => (3, 0),
        };
        out.push(tag);
        put_u32(&mut out, k);
        out.push(match self.similarity {
            Similarity::Cosine => 0,
            Similarity::Dot => 1,
        });
        put_u32(&mut out, self.model.layers.len() as u32);
        for layer in &self.model.layers {
            put_layer(&mut out, &layer.weight, &layer.bias);
        }
        put_layer(
            &mut out,
            &self.model.classifier.weight,
            &self.model.classifier.bias,
        );
        match &self.model.predictor {
            Some(p) => {
                out.push(1);
                put_layer(&mut out, &p.weight, &p.bias);
            }
            None => out.push(0),
        }
        self.memory.write_bytes(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let at = cur.pos();
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::parse_at_byte(at, "bad magic, expected CMNW"));
        }
        let at = cur.pos();
        let version = cur.read_u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse_at_byte(
                at,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let at = cur.pos();
        let tag = cur.read_u8()?;
        let k = cur.read_u32()? as usize;
        let read_mode = match tag {
            0 => ReadModeSpec::Attention,
            1 => ReadModeSpec::Equal,
            2 => ReadModeSpec::TopK { k },
            3 => ReadModeSpec::Predicted,
            v => return Err(Error::parse_at_byte(at, format!("bad read-mode tag {v}"))),
        };
        let at = cur.pos();
        let similarity = match cur.read_u8()? {
            0 => Similarity::Cosine,
            1 => Similarity::Dot,
            v => return Err(Error::parse_at_byte(at, format!("bad similarity tag {v}"))),
        };
        let layer_count = cur.read_u32()? as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let (weight, bias) = read_layer(&mut cur)?;
            layers.push(Layer { weight, bias });
        }
        if layers.is_empty() {
            return Err(Error::parse_at_byte(cur.pos(), "checkpoint has no layers"));
        }
        let (cw, cb) = read_layer(&mut cur)?;
        let at = cur.pos();
        let predictor = match cur.read_u8()? {
            0 => None,
            1 => {
                let (pw, pb) = read_layer(&mut cur)?;
                Some(PredictorParams {
                    weight: pw,
                    bias: pb,
                })
            }
            v => {
                return Err(Error::parse_at_byte(at, format!("bad predictor flag {v}")));
            }
        };
        let memory = CategoricalMemory::read_bytes(&mut cur)?;
        cur.expect_end()?;
        let model = MlpModel {
            layers,
            classifier: Layer {
                weight: cw,
                bias: cb,
            },
            predictor,
        };
        model.validate()?;
        if memory.dim() != model.feature_dim() || memory.num_classes() != model.num_classes() {
            return Err(Error::parse_at_byte(
                0,
                format!(
                    "memory {}x{} does not match model ({} classes, feature dim {})",
                    memory.num_classes(),
                    memory.dim(),
                    model.num_classes(),
                    model.feature_dim()
                ),
            ));
        }
        Ok(Checkpoint {
            model,
            memory,
            read_mode,
            similarity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests;
