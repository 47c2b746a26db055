//! The interpretable label predictor.
//!
//! Concept scores are plain dot products `g = x . E_C^T`. Class logits are
//! `g . act(W)^T` where `W` is `n_classes x n_concepts` and `act` is, by
//! default, a softmax over classes within each concept column.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{load_embeddings, save_embeddings, ClassId, EmbeddingMatrix, LabeledImageSet, StoreError};
use crate::submodular_select::Bottleneck;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Softmax,
    Sigmoid,
    Relu,
    None,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            "none" => Ok(Self::None),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
            Self::None => "none",
        })
    }
}

/// Axis the softmax normalizes over. `Classes` sums over classes for each
/// concept column; `Concepts` sums over concepts for each class row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxAxis {
    #[default]
    Classes,
    Concepts,
}

/// Class-concept affinity matrix, row-major `n_classes x n_concepts`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptWeightMatrix {
    pub n_classes: usize,
    pub n_concepts: usize,
    pub weights: Vec<f64>,
    pub activation: Activation,
    pub softmax_axis: SoftmaxAxis,
}

impl ConceptWeightMatrix {
    pub fn zeros(n_classes: usize, n_concepts: usize, activation: Activation) -> Self {
        Self {
            n_classes,
            n_concepts,
            weights: vec![0.0; n_classes * n_concepts],
            activation,
            softmax_axis: SoftmaxAxis::Classes,
        }
    }

    pub fn get(&self, class: usize, concept: usize) -> f64 {
        self.weights[class * self.n_concepts + concept]
    }

    /// `act(W)`, same layout as `weights`.
    pub fn normalized(&self) -> Vec<f64> {
        normalize_weights(self)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Applies the activation: max-stabilized softmax along the configured axis,
/// or an elementwise map.
pub fn normalize_weights(w: &ConceptWeightMatrix) -> Vec<f64> {
    let (n, m) = (w.n_classes, w.n_concepts);
    match w.activation {
        Activation::Softmax => {
            let mut out = vec![0.0; n * m];
            match w.softmax_axis {
                SoftmaxAxis::Classes => {
                    for c in 0..m {
                        let max = (0..n).map(|y| w.weights[y * m + c]).fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for y in 0..n {
                            let e = (w.weights[y * m + c] - max).exp();
                            out[y * m + c] = e;
                            total += e;
                        }
                        for y in 0..n {
                            out[y * m + c] /= total;
                        }
                    }
                }
                SoftmaxAxis::Concepts => {
                    for y in 0..n {
                        let row = &w.weights[y * m..(y + 1) * m];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        for (o, e) in out[y * m..(y + 1) * m].iter_mut().zip(exps) {
                            *o = e / total;
                        }
                    }
                }
            }
            out
        }
        Activation::Sigmoid => w.weights.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Relu => w.weights.iter().map(|&v| v.max(0.0)).collect(),
        Activation::None => w.weights.clone(),
    }
}

/// `W[y][r] = 1` when bottleneck row `r` belongs to class `y`, else 0.
pub fn init_prior(bottleneck: &Bottleneck, n_classes: usize, activation: Activation) -> ConceptWeightMatrix {
    let mut w = ConceptWeightMatrix::zeros(n_classes, bottleneck.n_concepts(), activation);
    for (r, &owner) in bottleneck.class_of_concept.iter().enumerate() {
        w.weights[owner * w.n_concepts + r] = 1.0;
    }
    w
}

/// Concept scores `g = x . E_C^T`.
pub fn concept_scores(x: &[f32], concepts: &EmbeddingMatrix) -> Result<Vec<f64>, ModelError> {
    if x.len() != concepts.dim() {
        return Err(ModelError::DimMismatch {
            expected: concepts.dim(),
            actual: x.len(),
        });
    }
    Ok(concepts
        .iter_rows()
        .map(|c| c.iter().zip(x).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum())
        .collect())
}

/// Concept scores of a batch of images, row-major `rows x n_concepts`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub n_concepts: usize,
    pub values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn compute(images: &EmbeddingMatrix, concepts: &EmbeddingMatrix) -> Result<Self, ModelError> {
        let mut values = Vec::with_capacity(images.rows() * concepts.rows());
        for x in images.iter_rows() {
            values.extend(concept_scores(x, concepts)?);
        }
        Ok(Self {
            rows: images.rows(),
            n_concepts: concepts.rows(),
            values,
        })
    }

    pub fn from_values(rows: usize, n_concepts: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * n_concepts, values.len());
        Self { rows, n_concepts, values }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_concepts..(i + 1) * self.n_concepts]
    }
}

fn logits_from_scores(scores: &[f64], act: &[f64], n_classes: usize) -> Vec<f64> {
    let m = scores.len();
    (0..n_classes)
        .map(|y| act[y * m..(y + 1) * m].iter().zip(scores).map(|(a, g)| a * g).sum())
        .collect()
}

/// Class logits `g(x) . act(W)^T` for one image.
pub fn forward(x: &[f32], concepts: &EmbeddingMatrix, w: &ConceptWeightMatrix) -> Result<Vec<f64>, ModelError> {
    if concepts.rows() != w.n_concepts {
        return Err(ModelError::DimMismatch {
            expected: w.n_concepts,
            actual: concepts.rows(),
        });
    }
    let g = concept_scores(x, concepts)?;
    Ok(logits_from_scores(&g, &w.normalized(), w.n_classes))
}

/// Logits for every scored row, row-major `rows x n_classes`.
pub fn forward_scores(scores: &ScoreMatrix, w: &ConceptWeightMatrix) -> Result<Vec<f64>, ModelError> {
    if scores.n_concepts != w.n_concepts {
        return Err(ModelError::DimMismatch {
            expected: w.n_concepts,
            actual: scores.n_concepts,
        });
    }
    let act = w.normalized();
    Ok((0..scores.rows)
        .flat_map(|i| logits_from_scores(scores.row(i), &act, w.n_classes))
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Mean cross-entropy over `rows` and its gradient with respect to `W`.
pub fn loss_and_grad(
    scores: &ScoreMatrix,
    labels: &[ClassId],
    rows: &[usize],
    w: &ConceptWeightMatrix,
) -> (f64, Vec<f64>) {
    let (n, m) = (w.n_classes, w.n_concepts);
    let act = w.normalized();
    // d loss / d act(W)
    let mut grad_act = vec![0.0; n * m];
    let mut loss = 0.0;
    let scale = 1.0 / rows.len() as f64;
    for &i in rows {
        let g = scores.row(i);
        let logp = log_softmax(&logits_from_scores(g, &act, n));
        loss -= logp[labels[i]];
        for y in 0..n {
            let delta = logp[y].exp() - if y == labels[i] { 1.0 } else { 0.0 };
            if delta == 0.0 {
                continue;
            }
            for (ga, &gc) in grad_act[y * m..(y + 1) * m].iter_mut().zip(g) {
                *ga += delta * gc;
            }
        }
    }
    loss *= scale;
    grad_act.iter_mut().for_each(|v| *v *= scale);

    let grad = match w.activation {
        Activation::Softmax => {
            let mut grad = vec![0.0; n * m];
            match w.softmax_axis {
                SoftmaxAxis::Classes => {
                    for c in 0..m {
                        let inner: f64 = (0..n).map(|y| grad_act[y * m + c] * act[y * m + c]).sum();
                        for y in 0..n {
                            grad[y * m + c] = act[y * m + c] * (grad_act[y * m + c] - inner);
                        }
                    }
                }
                SoftmaxAxis::Concepts => {
                    for y in 0..n {
                        let r = y * m..(y + 1) * m;
                        let inner: f64 = grad_act[r.clone()].iter().zip(&act[r]).map(|(g, a)| g * a).sum();
                        for c in 0..m {
                            grad[y * m + c] = act[y * m + c] * (grad_act[y * m + c] - inner);
                        }
                    }
                }
            }
            grad
        }
        Activation::Sigmoid => grad_act.iter().zip(&act).map(|(g, a)| g * a * (1.0 - a)).collect(),
        Activation::Relu => grad_act
            .iter()
            .zip(&w.weights)
            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
            .collect(),
        Activation::None => grad_act,
    };
    (loss, grad)
}

pub fn accuracy_from_scores(scores: &ScoreMatrix, labels: &[ClassId], w: &ConceptWeightMatrix) -> Result<f64, ModelError> {
    if scores.rows == 0 {
        return Ok(0.0);
    }
    let logits = forward_scores(scores, w)?;
    let correct = logits
        .chunks_exact(w.n_classes)
        .zip(labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count();
    Ok(correct as f64 / scores.rows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig("learning_rate must be finite and nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: ConceptWeightMatrix,
    /// Epoch of the kept snapshot; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
        }
    }
}

/// Minimizes mean cross-entropy with Adam over precomputed concept scores,
/// keeping the snapshot with the best dev accuracy (earliest on ties). The
/// initial weights count as epoch 0.
pub fn train_on_scores(
    train: &ScoreMatrix,
    train_labels: &[ClassId],
    dev: &ScoreMatrix,
    dev_labels: &[ClassId],
    init: &ConceptWeightMatrix,
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    config.validate()?;
    if train.n_concepts != init.n_concepts || dev.n_concepts != init.n_concepts {
        return Err(ModelError::DimMismatch {
            expected: init.n_concepts,
            actual: train.n_concepts,
        });
    }
    if train.rows != train_labels.len() || dev.rows != dev_labels.len() {
        return Err(ModelError::InvalidConfig("score rows and labels differ in length".into()));
    }
    let mut w = init.clone();
    let mut best = init.clone();
    let mut best_epoch = 0;
    let mut best_acc = accuracy_from_scores(dev, dev_labels, &w)?;
    let mut history = Vec::with_capacity(config.max_epochs);
    if train.rows == 0 {
        return Ok(TrainOutcome {
            weights: best,
            best_epoch,
            best_dev_accuracy: best_acc,
            history,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(w.weights.len());
    let mut order: Vec<usize> = (0..train.rows).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let (loss, grad) = loss_and_grad(train, train_labels, batch, &w);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                log::error!("non-finite loss {loss} at epoch {epoch}, step {step}");
                return Err(ModelError::NonFiniteLoss { epoch, step });
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut w.weights, &grad, config);
        }
        let dev_accuracy = accuracy_from_scores(dev, dev_labels, &w)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.rows as f64,
            dev_accuracy,
        });
        if dev_accuracy > best_acc {
            best_acc = dev_accuracy;
            best_epoch = epoch;
            best = w.clone();
        }
    }
    log::debug!("kept epoch {best_epoch} with dev accuracy {best_acc:.4}");
    Ok(TrainOutcome {
        weights: best,
        best_epoch,
        best_dev_accuracy: best_acc,
        history,
    })
}

/// Scores both image sets against `E_C` and trains.
pub fn train(
    train_set: &LabeledImageSet,
    dev_set: &LabeledImageSet,
    concepts: &EmbeddingMatrix,
    init: &ConceptWeightMatrix,
    config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    let tr = ScoreMatrix::compute(&train_set.embeddings, concepts)?;
    let dv = ScoreMatrix::compute(&dev_set.embeddings, concepts)?;
    train_on_scores(&tr, &train_set.labels, &dv, &dev_set.labels, init, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n_classes: usize,
    pub n_concepts: usize,
    pub activation: Activation,
    pub seed: u64,
    pub epoch: usize,
    pub dev_accuracy: f64,
    #[serde(default)]
    pub softmax_axis: SoftmaxAxis,
    /// Weight file name, relative to the header.
    pub weights_file: String,
}

/// Writes `<path>` (JSON header) and a sibling `.bin` file holding `W` in
/// the embedding format, one row per class.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    w: &ConceptWeightMatrix,
    seed: u64,
    epoch: usize,
    dev_accuracy: f64,
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let bin = path.with_extension("bin");
    let header = CheckpointHeader {
        n_classes: w.n_classes,
        n_concepts: w.n_concepts,
        activation: w.activation,
        seed,
        epoch,
        dev_accuracy,
        softmax_axis: w.softmax_axis,
        weights_file: bin.file_name().and_then(|s| s.to_str()).unwrap_or("weights.bin").to_string(),
    };
    let matrix = EmbeddingMatrix::new(
        w.n_classes,
        w.n_concepts,
        w.weights.iter().map(|&v| v as f32).collect(),
        false,
    )?;
    save_embeddings(&matrix, &bin)?;
    fs::write(path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, ConceptWeightMatrix), ModelError> {
    let path = path.as_ref();
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(path)?)?;
    let bin: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&header.weights_file);
    let m = load_embeddings(bin)?;
    if m.rows() != header.n_classes || m.dim() != header.n_concepts {
        return Err(ModelError::BadCheckpoint(format!(
            "header says {}x{}, weights are {}x{}",
            header.n_classes,
            header.n_concepts,
            m.rows(),
            m.dim()
        )));
    }
    let w = ConceptWeightMatrix {
        n_classes: header.n_classes,
        n_concepts: header.n_concepts,
        weights: m.values().iter().map(|&v| f64::from(v)).collect(),
        activation: header.activation,
        softmax_axis: header.softmax_axis,
    };
    Ok((header, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::submodular_select::{select_bottleneck, ClassCandidates, SubmodularConfig};

    fn two_class_bottleneck() -> Bottleneck {
        let emb = EmbeddingMatrix::new(1, 2, vec![1.0, 0.0], true).unwrap();
        let emb1 = EmbeddingMatrix::new(1, 2, vec![0.0, 1.0], true).unwrap();
        let c0 = ClassCandidates::new(0, 2, vec![0], &emb, vec![0.0]).unwrap();
        let c1 = ClassCandidates::new(1, 2, vec![1], &emb1, vec![0.0]).unwrap();
        select_bottleneck(&[c0, c1], &SubmodularConfig { k: 1, ..Default::default() }).unwrap()
    }

    #[test]
    fn orthonormal_scores_are_one_hot() {
        let e = EmbeddingMatrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], true).unwrap();
        assert_eq!(concept_scores(e.row(1), &e).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(concept_scores(&[0.0; 3], &e).unwrap(), vec![0.0; 3]);
        assert!(matches!(concept_scores(&[0.0; 2], &e), Err(ModelError::DimMismatch { .. })));
    }

    #[test]
    fn uniform_softmax_for_zero_weights() {
        let w = ConceptWeightMatrix::zeros(4, 3, Activation::Softmax);
        assert!(w.normalized().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_class_softmax() {
        let mut w = ConceptWeightMatrix::zeros(2, 1, Activation::Softmax);
        w.weights[0] = 1.0;
        let s = w.normalized();
        assert!((s[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((s[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn prior_init_is_identity_pattern() {
        let b = two_class_bottleneck();
        let w = init_prior(&b, 2, Activation::Softmax);
        assert_eq!(w.weights, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn prior_forward_prefers_owner() {
        let b = two_class_bottleneck();
        let w = init_prior(&b, 2, Activation::Softmax);
        let logits = forward(b.embeddings.row(0), &b.embeddings, &w).unwrap();
        let e = std::f64::consts::E;
        assert!((logits[0] - e / (e + 1.0)).abs() < 1e-9);
        assert!((logits[1] - 1.0 / (e + 1.0)).abs() < 1e-9);
        assert_eq!(argmax(&logits), 0);
        let zero = forward(&[0.0, 0.0], &b.embeddings, &w).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert_eq!(argmax(&zero), 0);
    }

    #[test]
    fn elementwise_activations() {
        let mut w = ConceptWeightMatrix::zeros(1, 3, Activation::Relu);
        w.weights = vec![-1.0, 0.0, 2.0];
        assert_eq!(w.normalized(), vec![0.0, 0.0, 2.0]);
        w.activation = Activation::None;
        assert_eq!(w.normalized(), vec![-1.0, 0.0, 2.0]);
        w.activation = Activation::Sigmoid;
        assert!((w.normalized()[1] - 0.5).abs() < 1e-15);
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
    }

    #[test]
    fn concept_axis_switch_normalizes_rows() {
        let mut w = ConceptWeightMatrix::zeros(2, 4, Activation::Softmax);
        w.softmax_axis = SoftmaxAxis::Concepts;
        w.weights[1] = 3.0;
        let s = w.normalized();
        assert!((s[..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s[4..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let scores = ScoreMatrix::from_values(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let labels = vec![1, 0];
        let mut init = ConceptWeightMatrix::zeros(2, 2, Activation::Softmax);
        init.weights = vec![1.0, 0.0, 0.0, 1.0];
        let cfg = TrainConfig { learning_rate: 0.0, max_epochs: 5, ..Default::default() };
        let out = train_on_scores(&scores, &labels, &scores, &labels, &init, &cfg).unwrap();
        assert_eq!(out.weights, init);
        assert_eq!(out.history.len(), 5);
    }

    #[test]
    fn separable_scores_reach_full_accuracy() {
        let scores = ScoreMatrix::from_values(4, 2, vec![1.0, 0.1, 0.9, 0.0, 0.1, 1.0, 0.0, 0.8]);
        let labels = vec![0, 0, 1, 1];
        let init = ConceptWeightMatrix::zeros(2, 2, Activation::Softmax);
        let cfg = TrainConfig { learning_rate: 0.1, max_epochs: 50, batch_size: 2, ..Default::default() };
        let out = train_on_scores(&scores, &labels, &scores, &labels, &init, &cfg).unwrap();
        assert_eq!(accuracy_from_scores(&scores, &labels, &out.weights).unwrap(), 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ConceptWeightMatrix::zeros(2, 3, Activation::Sigmoid);
        w.weights = vec![0.5, -1.0, 2.0, 0.0, 0.25, -0.75];
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &w, 7, 3, 0.5).unwrap();
        let (h, back) = load_checkpoint(&path).unwrap();
        assert_eq!(h.seed, 7);
        assert_eq!(h.epoch, 3);
        assert_eq!(back, w);
    }
}
