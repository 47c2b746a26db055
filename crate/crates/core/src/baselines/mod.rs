//! Black-box linear probe: L2-regularized multinomial logistic regression on
//! raw image features, fitted by L-BFGS, with a bracketing search over the
//! inverse regularization strength `C`.

pub mod lbfgs;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bottleneck_model::argmax;
use crate::embedding_store::{ClassId, LabeledImageSet};
use lbfgs::{minimize, LbfgsOptions, Termination};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("objective became non-finite (C = {c})")]
    NonFiniteObjective { c: f64 },
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub max_iterations: usize,
    pub c_grid: Vec<f64>,
    pub refine_steps: usize,
    pub lbfgs_memory: usize,
    pub gradient_tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            c_grid: vec![1e6, 1e4, 1e2, 1.0, 1e-2, 1e-4, 1e-6],
            refine_steps: 8,
            lbfgs_memory: 10,
            gradient_tolerance: 1e-6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.c_grid.is_empty() || self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(ProbeError::InvalidConfig("C grid must be non-empty and positive".into()));
        }
        if self.c_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ProbeError::InvalidConfig("C grid must be strictly decreasing".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(ProbeError::InvalidConfig("L-BFGS memory must be at least 1".into()));
        }
        Ok(())
    }

    fn lbfgs_options(&self) -> LbfgsOptions {
        LbfgsOptions {
            memory: self.lbfgs_memory,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            ..LbfgsOptions::default()
        }
    }
}

/// Features of a labeled set widened to f64, row-major.
#[derive(Debug, Clone)]
pub struct Design {
    pub rows: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub x: Vec<f64>,
    pub y: Vec<ClassId>,
}

impl Design {
    pub fn from_set(set: &LabeledImageSet) -> Self {
        Self {
            rows: set.len(),
            dim: set.dim(),
            n_classes: set.n_classes(),
            x: set.embeddings.values().iter().map(|&v| f64::from(v)).collect(),
            y: set.labels.clone(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

/// Regularized objective over packed parameters `[W (n_classes x dim), b (n_classes)]`:
/// summed multinomial cross-entropy plus `||W||^2 / (2C)`; the bias is not penalized.
pub fn logistic_objective(design: &Design, c: f64, params: &[f64], grad: &mut [f64]) -> f64 {
    let (k, d) = (design.n_classes, design.dim);
    let (w, b) = params.split_at(k * d);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut value = 0.0;
    let mut logits = vec![0.0; k];
    for i in 0..design.rows {
        let x = design.row(i);
        for (cls, l) in logits.iter_mut().enumerate() {
            *l = b[cls] + w[cls * d..(cls + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let y = design.y[i];
        value += lse - logits[y];
        for cls in 0..k {
            let delta = (logits[cls] - lse).exp() - if cls == y { 1.0 } else { 0.0 };
            for (g, v) in grad[cls * d..(cls + 1) * d].iter_mut().zip(x) {
                *g += delta * v;
            }
            grad[k * d + cls] += delta;
        }
    }
    let inv_c = 1.0 / c;
    for (g, wi) in grad[..k * d].iter_mut().zip(w) {
        *g += inv_c * wi;
    }
    value + 0.5 * inv_c * w.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub n_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub chosen_c: f64,
}

impl ProbeModel {
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                self.bias[c]
                    + self.weights[c * self.dim..(c + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(w, &v)| w * f64::from(v))
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict(&self, x: &[f32]) -> ClassId {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, set: &LabeledImageSet) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let correct = set
            .embeddings
            .iter_rows()
            .zip(&set.labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / set.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct FitDiagnostics {
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub line_search_failed: bool,
    pub trace: Vec<f64>,
}

pub fn fit_logistic(train: &LabeledImageSet, c: f64, config: &ProbeConfig) -> Result<(ProbeModel, FitDiagnostics), ProbeError> {
    fit_design(&Design::from_set(train), c, config)
}

pub fn fit_design(design: &Design, c: f64, config: &ProbeConfig) -> Result<(ProbeModel, FitDiagnostics), ProbeError> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(ProbeError::InvalidConfig(format!("C must be positive, got {c}")));
    }
    if design.rows == 0 {
        return Err(ProbeError::InvalidInput("empty training set".into()));
    }
    let (k, d) = (design.n_classes, design.dim);
    let result = minimize(
        |p: &[f64], g: &mut [f64]| logistic_objective(design, c, p, g),
        vec![0.0; k * d + k],
        &config.lbfgs_options(),
    );
    if result.termination == Termination::NonFinite || !result.value.is_finite() {
        return Err(ProbeError::NonFiniteObjective { c });
    }
    let diagnostics = FitDiagnostics {
        objective: result.value,
        gradient_norm: result.gradient_norm,
        iterations: result.iterations,
        termination: result.termination,
        line_search_failed: result.termination == Termination::LineSearchFailure,
        trace: result.trace,
    };
    let (w, b) = result.x.split_at(k * d);
    Ok((
        ProbeModel {
            n_classes: k,
            dim: d,
            weights: w.to_vec(),
            bias: b.to_vec(),
            chosen_c: c,
        },
        diagnostics,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CAccuracy {
    #[serde(rename = "C")]
    pub c: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub chosen_c: f64,
    pub model: ProbeModel,
    pub grid_accuracies: Vec<CAccuracy>,
    pub refinement_path: Vec<CAccuracy>,
}

impl SweepOutcome {
    pub fn chosen_dev_accuracy(&self) -> f64 {
        self.grid_accuracies
            .iter()
            .chain(&self.refinement_path)
            .find(|e| e.c == self.chosen_c)
            .map_or(0.0, |e| e.dev_accuracy)
    }

    pub fn report(&self, test_accuracy: Option<f64>) -> ProbeReport {
        ProbeReport {
            chosen_c: self.chosen_c,
            grid_accuracies: self.grid_accuracies.clone(),
            refinement_path: self.refinement_path.clone(),
            test_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    #[serde(rename = "chosen_C")]
    pub chosen_c: f64,
    pub grid_accuracies: Vec<CAccuracy>,
    pub refinement_path: Vec<CAccuracy>,
    pub test_accuracy: Option<f64>,
}

struct Evaluator<'a> {
    train: Design,
    dev: &'a LabeledImageSet,
    config: &'a ProbeConfig,
    cache: HashMap<u64, f64>,
    best: Option<(f64, f64, ProbeModel)>,
}

impl Evaluator<'_> {
    fn accuracy(&mut self, c: f64) -> Result<f64, ProbeError> {
        if let Some(&acc) = self.cache.get(&c.to_bits()) {
            return Ok(acc);
        }
        let (model, diag) = fit_design(&self.train, c, self.config)?;
        if diag.line_search_failed {
            // near a stationary point the objective stops resolving decreases
            if diag.gradient_norm > 100.0 * self.config.gradient_tolerance {
                log::warn!("probe fit at C = {c} stopped on a line-search failure, gradient norm {:e}", diag.gradient_norm);
            } else {
                log::debug!("probe fit at C = {c} stopped on a line-search failure near a stationary point");
            }
        }
        let acc = model.accuracy(self.dev);
        self.cache.insert(c.to_bits(), acc);
        // ties keep the larger C
        let replace = match &self.best {
            None => true,
            Some((bc, bacc, _)) => acc > *bacc || (acc == *bacc && c > *bc),
        };
        if replace {
            self.best = Some((c, acc, model));
        }
        Ok(acc)
    }
}

/// Dev-set search over `C`: evaluate the grid, bracket the best grid point by
/// its neighbours, then repeatedly move the worse bracket end to the
/// geometric midpoint. Returns the best `C` seen (larger `C` on ties).
pub fn sweep_c(train: &LabeledImageSet, dev: &LabeledImageSet, config: &ProbeConfig) -> Result<SweepOutcome, ProbeError> {
    config.validate()?;
    if dev.is_empty() {
        return Err(ProbeError::InvalidInput("dev split is empty".into()));
    }
    let mut eval = Evaluator {
        train: Design::from_set(train),
        dev,
        config,
        cache: HashMap::new(),
        best: None,
    };
    let grid = &config.c_grid;
    let mut grid_accuracies = Vec::with_capacity(grid.len());
    for &c in grid {
        grid_accuracies.push(CAccuracy {
            c,
            dev_accuracy: eval.accuracy(c)?,
        });
    }
    let best_idx = grid_accuracies
        .iter()
        .enumerate()
        .fold(0, |b, (i, e)| if e.dev_accuracy > grid_accuracies[b].dev_accuracy { i } else { b });

    let mut refinement_path = Vec::new();
    if grid.len() > 1 && config.refine_steps > 0 {
        // hi = larger C, lo = smaller C
        let (mut hi, mut lo) = match best_idx {
            0 => (grid[0], grid[1]),
            i if i == grid.len() - 1 => (grid[i - 1], grid[i]),
            i => (grid[i - 1], grid[i + 1]),
        };
        for _ in 0..config.refine_steps {
            let acc_hi = eval.accuracy(hi)?;
            let acc_lo = eval.accuracy(lo)?;
            let mid = (0.5 * (hi.ln() + lo.ln())).exp();
            let acc_mid = eval.accuracy(mid)?;
            refinement_path.push(CAccuracy { c: mid, dev_accuracy: acc_mid });
            if acc_hi >= acc_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let (chosen_c, _, model) = eval.best.expect("grid is non-empty");
    Ok(SweepOutcome {
        chosen_c,
        model,
        grid_accuracies,
        refinement_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::{EmbeddingMatrix, Split};

    fn set(xs: &[f32], dim: usize, labels: Vec<usize>, n: usize) -> LabeledImageSet {
        let emb = EmbeddingMatrix::new(labels.len(), dim, xs.to_vec(), false).unwrap();
        LabeledImageSet::new(emb, labels, Split::Train, n).unwrap()
    }

    #[test]
    fn separable_one_dimensional() {
        let train = set(&[-1.0, 1.0], 1, vec![0, 1], 2);
        let (m, diag) = fit_logistic(&train, 1e4, &ProbeConfig::default()).unwrap();
        assert_eq!(m.accuracy(&train), 1.0);
        // boundary w x + b between classes sits near zero
        let boundary = -(m.bias[1] - m.bias[0]) / (m.weights[1] - m.weights[0]);
        assert!(boundary.abs() < 0.1, "boundary {boundary}");
        assert!(diag.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn strong_penalty_predicts_prior_class() {
        let train = set(&[-1.0, -0.5, 0.8, 1.0, 1.2], 1, vec![0, 1, 1, 1, 0], 2);
        let (m, _) = fit_logistic(&train, 1e-8, &ProbeConfig::default()).unwrap();
        assert!(m.weights.iter().all(|w| w.abs() < 1e-6));
        for x in [-3.0f32, 0.0, 3.0] {
            assert_eq!(m.predict(&[x]), 1);
        }
    }

    #[test]
    fn grid_validation() {
        let cfg = ProbeConfig { c_grid: vec![1.0, 10.0], ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(ProbeConfig::default().validate().is_ok());
    }

    #[test]
    fn flat_dev_accuracy_returns_largest_c() {
        // a single class: every C predicts perfectly
        let train = set(&[0.1, 0.2, 0.3], 1, vec![0, 0, 0], 1);
        let out = sweep_c(&train, &train, &ProbeConfig::default()).unwrap();
        assert_eq!(out.chosen_c, 1e6);
    }

    #[test]
    fn no_refinement_yields_grid_point() {
        let train = set(&[-1.0, -0.2, 0.3, 1.0], 1, vec![0, 1, 0, 1], 2);
        let cfg = ProbeConfig { refine_steps: 0, ..Default::default() };
        let out = sweep_c(&train, &train, &cfg).unwrap();
        assert!(cfg.c_grid.contains(&out.chosen_c));
        assert!(out.refinement_path.is_empty());
    }
}
