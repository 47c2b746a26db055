//! Per-class concept selection by greedy submodular maximization.
//!
//! The utility of a subset `C` of a class's candidates `S` is
//!
//! ```text
//! F(C) = alpha * sum_{c in C} D(c) + beta * sum_{c1 in S} max_{c2 in C} cos(c1, c2)
//! ```
//!
//! where `D(c)` is the negative entropy of the concept's normalized class
//! association. Since `D(c) <= 0` the first term is shifted by `ln N` per
//! element when optimizing, which makes the objective monotone without
//! changing any greedy choice. Cosines are floored at zero inside the
//! coverage term so that facility location stays monotone submodular when
//! concepts point away from each other.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding_store::{ClassId, ConceptCatalog, ConceptId, EmbeddingMatrix, LabeledImageSet, StoreError};

pub const DEFAULT_K: usize = 50;
pub const DEFAULT_SIM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("class {0} has no images")]
    EmptyClass(ClassId),
    #[error("class {0} has no candidate concepts")]
    EmptyClassCandidates(ClassId),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubmodularConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub sim_floor: f64,
}

impl Default for SubmodularConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            k: DEFAULT_K,
            sim_floor: DEFAULT_SIM_FLOOR,
        }
    }
}

impl SubmodularConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        let bad = |m: &str| Err(SelectError::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return bad("alpha and beta cannot both be zero");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.sim_floor.is_nan() || self.sim_floor <= 0.0 {
            return bad("sim_floor must be positive");
        }
        Ok(())
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Mean dot product between the images of one class and a concept vector.
pub fn class_concept_similarity(class_images: &EmbeddingMatrix, concept_vec: &[f32]) -> Result<f64, SelectError> {
    if class_images.rows() == 0 {
        return Err(SelectError::EmptyClass(0));
    }
    if class_images.dim() != concept_vec.len() {
        return Err(SelectError::DimMismatch {
            left: class_images.dim(),
            right: concept_vec.len(),
        });
    }
    let total: f64 = class_images.iter_rows().map(|x| dot(x, concept_vec)).sum();
    Ok(total / class_images.rows() as f64)
}

/// Clamps each similarity below at `sim_floor` and rescales to sum to one.
pub fn normalized_association(sims: &[f64], sim_floor: f64) -> Vec<f64> {
    let clamped: Vec<f64> = sims.iter().map(|&s| s.max(sim_floor)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|s| s / total).collect()
}

/// Negative entropy of the normalized class association; in `[-ln N, 0]`.
pub fn discriminability(per_class_sims: &[f64], sim_floor: f64) -> f64 {
    normalized_association(per_class_sims, sim_floor)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
        .clamp(-(per_class_sims.len() as f64).ln(), 0.0)
}

/// Per-class mean image vectors; `Sim(y, c)` is the dot of the class mean with
/// the concept vector.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    means: Vec<Vec<f64>>,
}

impl ClassMeans {
    pub fn from_images(images: &LabeledImageSet) -> Result<Self, SelectError> {
        let dim = images.dim();
        let mut sums = vec![vec![0.0f64; dim]; images.n_classes()];
        let mut counts = vec![0usize; images.n_classes()];
        for (row, &class) in images.embeddings.iter_rows().zip(&images.labels) {
            counts[class] += 1;
            for (s, &v) in sums[class].iter_mut().zip(row) {
                *s += f64::from(v);
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(SelectError::EmptyClass(empty));
        }
        for (sum, &n) in sums.iter_mut().zip(&counts) {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
        Ok(Self { means: sums })
    }

    pub fn n_classes(&self) -> usize {
        self.means.len()
    }

    pub fn similarities(&self, concept_vec: &[f32]) -> Vec<f64> {
        self.means
            .iter()
            .map(|m| m.iter().zip(concept_vec).map(|(&a, &b)| a * f64::from(b)).sum())
            .collect()
    }
}

/// `D(c)` for every row of `concept_embeddings` against the given images.
pub fn discriminability_scores(
    images: &LabeledImageSet,
    concept_embeddings: &EmbeddingMatrix,
    sim_floor: f64,
) -> Result<Vec<f64>, SelectError> {
    if images.dim() != concept_embeddings.dim() {
        return Err(SelectError::DimMismatch {
            left: images.dim(),
            right: concept_embeddings.dim(),
        });
    }
    let means = ClassMeans::from_images(images)?;
    Ok(concept_embeddings
        .iter_rows()
        .map(|c| discriminability(&means.similarities(c), sim_floor))
        .collect())
}

/// Candidate concepts of one class, sorted by concept id.
#[derive(Debug, Clone)]
pub struct ClassCandidates {
    class_id: ClassId,
    n_classes: usize,
    concept_ids: Vec<ConceptId>,
    embeddings: EmbeddingMatrix,
    discriminability: Vec<f64>,
}

impl ClassCandidates {
    /// Entries are reordered by ascending concept id; embeddings are
    /// unit-normalized if they are not already.
    pub fn new(
        class_id: ClassId,
        n_classes: usize,
        concept_ids: Vec<ConceptId>,
        embeddings: &EmbeddingMatrix,
        discriminability: Vec<f64>,
    ) -> Result<Self, SelectError> {
        if concept_ids.len() != embeddings.rows() || concept_ids.len() != discriminability.len() {
            return Err(SelectError::Invalid(format!(
                "class {class_id}: {} ids, {} embedding rows, {} scores",
                concept_ids.len(),
                embeddings.rows(),
                discriminability.len()
            )));
        }
        let lower = -(n_classes as f64).ln() - 1e-12;
        if let Some(d) = discriminability.iter().find(|&&d| !(lower..=1e-12).contains(&d)) {
            return Err(SelectError::Invalid(format!(
                "class {class_id}: discriminability {d} outside [-ln {n_classes}, 0]"
            )));
        }
        let mut order: Vec<usize> = (0..concept_ids.len()).collect();
        order.sort_by_key(|&i| concept_ids[i]);
        if order.windows(2).any(|w| concept_ids[w[0]] == concept_ids[w[1]]) {
            return Err(SelectError::Invalid(format!("class {class_id}: duplicate concept id")));
        }
        let embeddings = embeddings.select_rows(&order);
        let embeddings = if embeddings.is_normalized() {
            embeddings
        } else {
            embeddings.normalize_rows()?
        };
        Ok(Self {
            class_id,
            n_classes,
            concept_ids: order.iter().map(|&i| concept_ids[i]).collect(),
            embeddings,
            discriminability: order.iter().map(|&i| discriminability[i]).collect(),
        })
    }

    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concept_ids.is_empty()
    }

    pub fn concept_ids(&self) -> &[ConceptId] {
        &self.concept_ids
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn discriminability(&self) -> &[f64] {
        &self.discriminability
    }

    /// Pairwise cosine matrix (row-major, `len x len`).
    pub fn similarity_matrix(&self) -> Vec<f64> {
        let n = self.len();
        let mut sims = vec![0.0; n * n];
        for i in 0..n {
            sims[i * n + i] = dot(self.embeddings.row(i), self.embeddings.row(i));
            for j in i + 1..n {
                let s = dot(self.embeddings.row(i), self.embeddings.row(j));
                sims[i * n + j] = s;
                sims[j * n + i] = s;
            }
        }
        sims
    }
}

/// Facility-location coverage, `sum_{c1 in S} max(0, max_{c2 in selected} cos(c1, c2))`.
/// `selected` holds candidate positions.
pub fn coverage(selected: &[usize], candidates: &ClassCandidates) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    let emb = candidates.embeddings();
    (0..candidates.len())
        .map(|i| {
            selected
                .iter()
                .map(|&j| dot(emb.row(i), emb.row(j)))
                .fold(0.0f64, f64::max)
        })
        .sum()
}

/// Unshifted utility `alpha * sum D + beta * coverage`.
pub fn utility(selected: &[usize], candidates: &ClassCandidates, config: &SubmodularConfig) -> f64 {
    let disc: f64 = selected.iter().map(|&j| candidates.discriminability[j]).sum();
    config.alpha * disc + config.beta * coverage(selected, candidates)
}

/// Utility with each discriminability term shifted by `ln N`; monotone
/// submodular for nonnegative weights.
pub fn shifted_utility(selected: &[usize], candidates: &ClassCandidates, config: &SubmodularConfig) -> f64 {
    let shift = (candidates.n_classes as f64).ln();
    utility(selected, candidates, config) + config.alpha * shift * selected.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub class_id: ClassId,
    /// Selected concept ids in the order they were picked.
    pub concept_ids: Vec<ConceptId>,
    /// Positions of the picks within the id-sorted candidate list.
    #[serde(skip)]
    pub positions: Vec<usize>,
    pub short_class: bool,
}

fn better(gain: f64, id: ConceptId, best: Option<(f64, ConceptId)>) -> bool {
    match best {
        None => true,
        Some((g, bid)) => gain > g || (gain == g && id < bid),
    }
}

/// Greedy maximization with incrementally maintained facility-location gains.
///
/// `best_cover[i]` holds the current `max(0, max_selected cos(i, s))`, so the
/// coverage gain of a candidate `v` is `sum_i max(0, cos(i, v) - best_cover[i])`.
pub fn greedy_select(candidates: &ClassCandidates, config: &SubmodularConfig) -> Result<Selection, SelectError> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(SelectError::EmptyClassCandidates(candidates.class_id));
    }
    let n = candidates.len();
    let target = config.k.min(n);
    let shift = (candidates.n_classes as f64).ln();
    let sims = candidates.similarity_matrix();
    let mut best_cover = vec![0.0f64; n];
    let mut taken = vec![false; n];
    let mut positions = Vec::with_capacity(target);

    for _ in 0..target {
        let mut best: Option<(f64, ConceptId)> = None;
        let mut pick = 0;
        for v in (0..n).filter(|&v| !taken[v]) {
            let col = &sims[v * n..(v + 1) * n];
            let cover_gain: f64 = col
                .iter()
                .zip(&best_cover)
                .map(|(&s, &b)| (s - b).max(0.0))
                .sum();
            let gain = config.alpha * (candidates.discriminability[v] + shift) + config.beta * cover_gain;
            let id = candidates.concept_ids[v];
            if better(gain, id, best) {
                best = Some((gain, id));
                pick = v;
            }
        }
        taken[pick] = true;
        positions.push(pick);
        let col = &sims[pick * n..(pick + 1) * n];
        for (b, &s) in best_cover.iter_mut().zip(col) {
            *b = b.max(s);
        }
    }

    Ok(Selection {
        class_id: candidates.class_id,
        concept_ids: positions.iter().map(|&p| candidates.concept_ids[p]).collect(),
        positions,
        short_class: n < config.k,
    })
}

/// Reference greedy that re-evaluates the full shifted utility for every
/// candidate at every step. Quadratically slower; used to check the
/// incremental version.
pub fn greedy_select_naive(candidates: &ClassCandidates, config: &SubmodularConfig) -> Result<Selection, SelectError> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(SelectError::EmptyClassCandidates(candidates.class_id));
    }
    let n = candidates.len();
    let target = config.k.min(n);
    let mut positions: Vec<usize> = Vec::with_capacity(target);
    for _ in 0..target {
        let base = shifted_utility(&positions, candidates, config);
        let mut best: Option<(f64, ConceptId)> = None;
        let mut pick = 0;
        for v in (0..n).filter(|v| !positions.contains(v)) {
            let mut trial = positions.clone();
            trial.push(v);
            let gain = shifted_utility(&trial, candidates, config) - base;
            let id = candidates.concept_ids[v];
            if better(gain, id, best) {
                best = Some((gain, id));
                pick = v;
            }
        }
        positions.push(pick);
    }
    Ok(Selection {
        class_id: candidates.class_id,
        concept_ids: positions.iter().map(|&p| candidates.concept_ids[p]).collect(),
        positions,
        short_class: n < config.k,
    })
}

/// The assembled concept layer: selected concepts of every class stacked in
/// class-major, selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub classes: Vec<Selection>,
    /// Row `r` embeds concept `concept_ids[r]`.
    pub embeddings: EmbeddingMatrix,
    pub concept_ids: Vec<ConceptId>,
    pub class_of_concept: Vec<ClassId>,
}

impl Bottleneck {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_ids.len()
    }

    fn assemble(classes: Vec<Selection>, candidates: &[ClassCandidates], config: &SubmodularConfig) -> Result<Self, SelectError> {
        let dim = candidates.first().map_or(0, |c| c.embeddings.dim());
        let mut concept_ids = Vec::new();
        let mut class_of_concept = Vec::new();
        let mut rows: Vec<&[f32]> = Vec::new();
        for (sel, cand) in classes.iter().zip(candidates) {
            for (&p, &id) in sel.positions.iter().zip(&sel.concept_ids) {
                concept_ids.push(id);
                class_of_concept.push(sel.class_id);
                rows.push(cand.embeddings.row(p));
            }
        }
        let embeddings = EmbeddingMatrix::from_rows(dim, rows)?.normalize_rows()?;
        Ok(Self {
            k: config.k,
            alpha: config.alpha,
            beta: config.beta,
            classes,
            embeddings,
            concept_ids,
            class_of_concept,
        })
    }

    /// Uses every candidate of every class (the no-selection ablation).
    pub fn from_all_candidates(candidates: &[ClassCandidates]) -> Result<Self, SelectError> {
        check_classes(candidates)?;
        let classes = candidates
            .iter()
            .map(|c| Selection {
                class_id: c.class_id,
                concept_ids: c.concept_ids.clone(),
                positions: (0..c.len()).collect(),
                short_class: false,
            })
            .collect();
        let k = candidates.iter().map(ClassCandidates::len).max().unwrap_or(0);
        let config = SubmodularConfig {
            k,
            alpha: 0.0,
            beta: 0.0,
            sim_floor: DEFAULT_SIM_FLOOR,
        };
        Self::assemble(classes, candidates, &config)
    }

    pub fn export(&self) -> BottleneckExport {
        BottleneckExport {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            classes: self
                .classes
                .iter()
                .map(|s| ExportedClass {
                    class_id: s.class_id,
                    concept_ids: s.concept_ids.clone(),
                    short_class: s.short_class,
                })
                .collect(),
        }
    }

    /// Rebuilds a bottleneck from its JSON description and `E_C` rows.
    pub fn from_export(export: &BottleneckExport, embeddings: EmbeddingMatrix) -> Result<Self, SelectError> {
        let mut concept_ids = Vec::new();
        let mut class_of_concept = Vec::new();
        let mut classes = Vec::new();
        for c in &export.classes {
            let start = concept_ids.len();
            concept_ids.extend_from_slice(&c.concept_ids);
            class_of_concept.extend(std::iter::repeat_n(c.class_id, c.concept_ids.len()));
            classes.push(Selection {
                class_id: c.class_id,
                concept_ids: c.concept_ids.clone(),
                positions: (start..concept_ids.len()).collect(),
                short_class: c.short_class,
            });
        }
        if embeddings.rows() != concept_ids.len() {
            return Err(SelectError::Invalid(format!(
                "bottleneck lists {} concepts but embedding file has {} rows",
                concept_ids.len(),
                embeddings.rows()
            )));
        }
        if classes.iter().enumerate().any(|(i, c)| c.class_id != i) {
            return Err(SelectError::Invalid("bottleneck classes must be listed in class order".into()));
        }
        Ok(Self {
            k: export.k,
            alpha: export.alpha,
            beta: export.beta,
            classes,
            embeddings,
            concept_ids,
            class_of_concept,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedClass {
    pub class_id: ClassId,
    pub concept_ids: Vec<ConceptId>,
    pub short_class: bool,
}

/// JSON companion of the `E_C` embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckExport {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub classes: Vec<ExportedClass>,
}

fn check_classes(candidates: &[ClassCandidates]) -> Result<(), SelectError> {
    for (i, c) in candidates.iter().enumerate() {
        if c.class_id != i {
            return Err(SelectError::Invalid(format!(
                "candidate list {i} belongs to class {}",
                c.class_id
            )));
        }
        if c.is_empty() {
            return Err(SelectError::EmptyClassCandidates(c.class_id));
        }
    }
    Ok(())
}

/// Runs the greedy selection independently for every class.
pub fn select_bottleneck(candidates: &[ClassCandidates], config: &SubmodularConfig) -> Result<Bottleneck, SelectError> {
    config.validate()?;
    check_classes(candidates)?;
    let classes = candidates
        .par_iter()
        .map(|c| greedy_select(c, config))
        .collect::<Result<Vec<_>, _>>()?;
    Bottleneck::assemble(classes, candidates, config)
}

/// Groups catalog entries by owning class, joining each entry with the
/// embedding row at the same position, and scores them with `discriminability`.
pub fn partition_candidates(
    catalog: &ConceptCatalog,
    concept_embeddings: &EmbeddingMatrix,
    discriminability: &[f64],
    n_classes: usize,
) -> Result<Vec<ClassCandidates>, SelectError> {
    if catalog.len() != concept_embeddings.rows() || catalog.len() != discriminability.len() {
        return Err(SelectError::Invalid(format!(
            "catalog has {} entries, concept embeddings {} rows, {} scores",
            catalog.len(),
            concept_embeddings.rows(),
            discriminability.len()
        )));
    }
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (r, e) in catalog.entries().iter().enumerate() {
        rows.get_mut(e.class_id)
            .ok_or_else(|| SelectError::Invalid(format!("concept {} has class {} >= {n_classes}", e.concept_id, e.class_id)))?
            .push(r);
    }
    rows.into_iter()
        .enumerate()
        .map(|(class, idx)| {
            if idx.is_empty() {
                return Err(SelectError::EmptyClassCandidates(class));
            }
            ClassCandidates::new(
                class,
                n_classes,
                idx.iter().map(|&r| catalog.entries()[r].concept_id).collect(),
                &concept_embeddings.select_rows(&idx),
                idx.iter().map(|&r| discriminability[r]).collect(),
            )
        })
        .collect()
}
