//! Few-shot experiment orchestration.
//!
//! A run is a grid of `(shots, seed)` groups. Each group samples a few-shot
//! training split, recomputes concept discriminability on it, selects a
//! bottleneck, and then trains and evaluates every requested method. Groups
//! are independent and may run on a thread pool; results are merged in
//! canonical `(shots, seed, method)` order, so the report is a pure function
//! of inputs and config.

use std::collections::HashMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{sweep_c, ProbeConfig, ProbeError};
use crate::bottleneck_model::{
    accuracy_from_scores, argmax, init_prior, train_on_scores, Activation, ConceptWeightMatrix, ModelError, ScoreMatrix,
    SoftmaxAxis, TrainConfig,
};
use crate::embedding_store::{
    ClassId, ConceptCatalog, ConceptId, EmbeddingMatrix, LabelTable, LabeledImageSet, Split, StoreError,
};
use crate::submodular_select::{
    discriminability_scores, partition_candidates, select_bottleneck, Bottleneck, ClassCandidates, SelectError,
    SubmodularConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("class {0} has no training images")]
    EmptyClass(ClassId),
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("shots={shots} seed={seed} method={method}: {source}")]
    Cell {
        shots: Shots,
        seed: u64,
        method: Method,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Shots per class: a fixed `K`, or every training image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "ShotsRepr", into = "ShotsRepr")]
pub enum Shots {
    K(usize),
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ShotsRepr {
    Count(usize),
    Word(String),
}

impl TryFrom<ShotsRepr> for Shots {
    type Error = String;

    fn try_from(r: ShotsRepr) -> Result<Self, Self::Error> {
        match r {
            ShotsRepr::Count(0) => Err("shots must be at least 1".into()),
            ShotsRepr::Count(k) => Ok(Shots::K(k)),
            ShotsRepr::Word(w) => w.parse(),
        }
    }
}

impl From<Shots> for ShotsRepr {
    fn from(s: Shots) -> Self {
        match s {
            Shots::K(k) => ShotsRepr::Count(k),
            Shots::Full => ShotsRepr::Word("full".into()),
        }
    }
}

impl std::str::FromStr for Shots {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "all" => Ok(Shots::Full),
            other => match other.parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("invalid shot count {s:?}")),
                Ok(k) => Ok(Shots::K(k)),
            },
        }
    }
}

impl fmt::Display for Shots {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shots::K(k) => write!(f, "{k}"),
            Shots::Full => f.write_str("full"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Labo,
    LaboNoPrior,
    LaboAllConcepts,
    Probe,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Labo, Method::LaboNoPrior, Method::LaboAllConcepts, Method::Probe];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Labo => "labo",
            Method::LaboNoPrior => "labo_no_prior",
            Method::LaboAllConcepts => "labo_all_concepts",
            Method::Probe => "probe",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub shots: Shots,
    pub seed: u64,
    /// Positions into the training set, ascending, one list per class.
    pub train_indices: Vec<Vec<usize>>,
}

impl FewShotSplit {
    pub fn flat_indices(&self) -> Vec<usize> {
        self.train_indices.iter().flatten().copied().collect()
    }
}

fn class_stream(seed: u64, class_id: ClassId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_id as u64);
    rng
}

/// Samples `K` training images per class without replacement. Each class
/// draws from its own ChaCha8 stream keyed by `(seed, class_id)`.
pub fn sample_few_shot(train: &LabeledImageSet, shots: Shots, seed: u64) -> Result<FewShotSplit, HarnessError> {
    let groups = train.indices_by_class();
    let mut train_indices = Vec::with_capacity(groups.len());
    for (class_id, members) in groups.into_iter().enumerate() {
        if members.is_empty() {
            return Err(HarnessError::EmptyClass(class_id));
        }
        let picked = match shots {
            Shots::K(k) if k < members.len() => {
                let mut rng = class_stream(seed, class_id);
                let mut chosen: Vec<usize> = sample(&mut rng, members.len(), k).into_iter().map(|i| members[i]).collect();
                chosen.sort_unstable();
                chosen
            }
            _ => members,
        };
        train_indices.push(picked);
    }
    Ok(FewShotSplit {
        shots,
        seed,
        train_indices,
    })
}

/// Fraction of images whose argmax logit (lowest class on ties) matches the label.
pub fn evaluate<F>(forward: F, test: &LabeledImageSet) -> f64
where
    F: Fn(&[f32]) -> Vec<f64>,
{
    if test.is_empty() {
        return 0.0;
    }
    let correct = test
        .embeddings
        .iter_rows()
        .zip(&test.labels)
        .filter(|(x, &y)| argmax(&forward(x)) == y)
        .count();
    correct as f64 / test.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub class_id: ClassId,
    pub rank: usize,
    pub concept_id: ConceptId,
    pub text: String,
    pub weight: f64,
}

/// Bottleneck concepts ranked by their normalized weight for `class_id`
/// (descending, ties by concept id), truncated to `top_m`.
pub fn explain(
    weights: &ConceptWeightMatrix,
    bottleneck: &Bottleneck,
    catalog: &ConceptCatalog,
    class_id: ClassId,
    top_m: usize,
) -> Result<Vec<Explanation>, HarnessError> {
    if class_id >= weights.n_classes {
        return Err(HarnessError::UnknownClass(class_id));
    }
    if weights.n_concepts != bottleneck.n_concepts() {
        return Err(HarnessError::Invalid(format!(
            "model has {} concepts, bottleneck {}",
            weights.n_concepts,
            bottleneck.n_concepts()
        )));
    }
    let texts: HashMap<ConceptId, &str> = catalog.entries().iter().map(|e| (e.concept_id, e.text.as_str())).collect();
    let act = weights.normalized();
    let row = &act[class_id * weights.n_concepts..(class_id + 1) * weights.n_concepts];
    let mut order: Vec<usize> = (0..weights.n_concepts).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .total_cmp(&row[a])
            .then(bottleneck.concept_ids[a].cmp(&bottleneck.concept_ids[b]))
    });
    Ok(order
        .into_iter()
        .take(top_m)
        .enumerate()
        .map(|(rank, r)| {
            let id = bottleneck.concept_ids[r];
            Explanation {
                class_id,
                rank: rank + 1,
                concept_id: id,
                text: texts.get(&id).copied().unwrap_or_default().to_string(),
                weight: row[r],
            }
        })
        .collect())
}

/// Everything an experiment reads, already split and validated.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub n_classes: usize,
    pub train: LabeledImageSet,
    pub dev: LabeledImageSet,
    pub test: LabeledImageSet,
    /// Features for the linear probe, row-aligned with the sets above.
    pub probe_features: Option<(LabeledImageSet, LabeledImageSet, LabeledImageSet)>,
    pub catalog: ConceptCatalog,
    pub concept_embeddings: EmbeddingMatrix,
}

impl ExperimentData {
    pub fn assemble(
        images: &EmbeddingMatrix,
        probe_images: Option<&EmbeddingMatrix>,
        labels: &LabelTable,
        catalog: ConceptCatalog,
        concept_embeddings: EmbeddingMatrix,
    ) -> Result<Self, HarnessError> {
        if catalog.len() != concept_embeddings.rows() {
            return Err(HarnessError::Invalid(format!(
                "catalog has {} entries but concept embeddings have {} rows",
                catalog.len(),
                concept_embeddings.rows()
            )));
        }
        if concept_embeddings.dim() != images.dim() {
            return Err(HarnessError::Invalid(format!(
                "image dim {} differs from concept dim {}",
                images.dim(),
                concept_embeddings.dim()
            )));
        }
        let concept_embeddings = if concept_embeddings.is_normalized() {
            concept_embeddings
        } else {
            concept_embeddings.normalize_rows()?
        };
        let probe_features = match probe_images {
            Some(p) => {
                if p.rows() != images.rows() {
                    return Err(HarnessError::Invalid("probe features and images differ in row count".into()));
                }
                Some((
                    labels.split(p, Split::Train)?,
                    labels.split(p, Split::Dev)?,
                    labels.split(p, Split::Test)?,
                ))
            }
            None => None,
        };
        Ok(Self {
            n_classes: labels.n_classes(),
            train: labels.split(images, Split::Train)?,
            dev: labels.split(images, Split::Dev)?,
            test: labels.split(images, Split::Test)?,
            probe_features,
            catalog,
            concept_embeddings,
        })
    }

    fn probe_sets(&self) -> (&LabeledImageSet, &LabeledImageSet, &LabeledImageSet) {
        match &self.probe_features {
            Some((a, b, c)) => (a, b, c),
            None => (&self.train, &self.dev, &self.test),
        }
    }

    /// Candidates of every class scored against the given training images.
    pub fn candidates(&self, train: &LabeledImageSet, sim_floor: f64) -> Result<Vec<ClassCandidates>, HarnessError> {
        let d = discriminability_scores(train, &self.concept_embeddings, sim_floor)?;
        Ok(partition_candidates(&self.catalog, &self.concept_embeddings, &d, self.n_classes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub shots: Vec<Shots>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub selection: SubmodularConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub activation: Activation,
    #[serde(default)]
    pub softmax_axis: SoftmaxAxis,
    /// Concepts per class in the explanation table.
    pub explain_top: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shots: vec![Shots::K(1), Shots::K(2), Shots::K(4), Shots::K(8), Shots::K(16)],
            seeds: vec![0, 1, 2],
            methods: Method::ALL.to_vec(),
            selection: SubmodularConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            activation: Activation::Softmax,
            softmax_axis: SoftmaxAxis::Classes,
            explain_top: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub shots: Shots,
    pub seed: u64,
    pub method: Method,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    pub n_concepts: Option<usize>,
    pub best_epoch: Option<usize>,
    #[serde(rename = "chosen_C")]
    pub chosen_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub shots: Shots,
    pub method: Method,
    pub n_seeds: usize,
    pub mean_dev_accuracy: f64,
    pub mean_test_accuracy: f64,
    pub std_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationTable {
    pub shots: Shots,
    pub seed: u64,
    pub rows: Vec<Explanation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub explanations: Option<ExplanationTable>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary_row(&self, shots: Shots, method: Method) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.shots == shots && r.method == method)
    }

    pub fn test_accuracies(&self, shots: Shots, method: Method) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.shots == shots && c.method == method)
            .map(|c| c.test_accuracy)
            .collect()
    }

    /// Tab-separated `shots  method  n  mean_dev  mean_test  std_test`.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("shots\tmethod\tn_seeds\tmean_dev\tmean_test\tstd_test\n");
        for r in &self.summary {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\n",
                r.shots, r.method, r.n_seeds, r.mean_dev_accuracy, r.mean_test_accuracy, r.std_test_accuracy
            ));
        }
        out
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

struct GroupOutput {
    cells: Vec<CellResult>,
    explanations: Option<Vec<Explanation>>,
}

fn run_bottleneck_method(
    data: &ExperimentData,
    config: &ExperimentConfig,
    train: &LabeledImageSet,
    bottleneck: &Bottleneck,
    prior: bool,
    seed: u64,
) -> Result<(f64, f64, usize, ConceptWeightMatrix), HarnessError> {
    let concepts = &bottleneck.embeddings;
    let init = if prior {
        init_prior(bottleneck, data.n_classes, config.activation)
    } else {
        ConceptWeightMatrix::zeros(data.n_classes, bottleneck.n_concepts(), config.activation)
    };
    let init = ConceptWeightMatrix {
        softmax_axis: config.softmax_axis,
        ..init
    };
    let tr = ScoreMatrix::compute(&train.embeddings, concepts)?;
    let dv = ScoreMatrix::compute(&data.dev.embeddings, concepts)?;
    let te = ScoreMatrix::compute(&data.test.embeddings, concepts)?;
    let train_cfg = TrainConfig { seed, ..config.train };
    let out = train_on_scores(&tr, &train.labels, &dv, &data.dev.labels, &init, &train_cfg)?;
    let test_acc = accuracy_from_scores(&te, &data.test.labels, &out.weights)?;
    Ok((out.best_dev_accuracy, test_acc, out.best_epoch, out.weights))
}

fn run_group(
    data: &ExperimentData,
    config: &ExperimentConfig,
    shots: Shots,
    seed: u64,
    explain_this: bool,
) -> Result<GroupOutput, HarnessError> {
    let wrap = |method: Method| move |e: HarnessError| HarnessError::Cell {
        shots,
        seed,
        method,
        source: Box::new(e),
    };
    let first = config.methods.first().copied().unwrap_or(Method::Labo);
    let split = sample_few_shot(&data.train, shots, seed).map_err(wrap(first))?;
    let indices = split.flat_indices();
    let train = data.train.subset(&indices);

    let needs_candidates = config.methods.iter().any(|m| *m != Method::Probe);
    let candidates = if needs_candidates {
        Some(data.candidates(&train, config.selection.sim_floor).map_err(wrap(first))?)
    } else {
        None
    };
    let mut selected: Option<Bottleneck> = None;
    let mut cells = Vec::with_capacity(config.methods.len());
    let mut explanations = None;

    for &method in &config.methods {
        let result = (|| -> Result<CellResult, HarnessError> {
            match method {
                Method::Labo | Method::LaboNoPrior | Method::LaboAllConcepts => {
                    let cands = candidates.as_ref().expect("computed above");
                    let all;
                    let bottleneck = if method == Method::LaboAllConcepts {
                        all = Bottleneck::from_all_candidates(cands)?;
                        &all
                    } else {
                        if selected.is_none() {
                            selected = Some(select_bottleneck(cands, &config.selection)?);
                        }
                        selected.as_ref().unwrap()
                    };
                    let prior = method != Method::LaboNoPrior;
                    let (dev, test, epoch, weights) = run_bottleneck_method(data, config, &train, bottleneck, prior, seed)?;
                    if method == Method::Labo && explain_this {
                        let mut rows = Vec::new();
                        for class in 0..data.n_classes {
                            rows.extend(explain(&weights, bottleneck, &data.catalog, class, config.explain_top)?);
                        }
                        explanations = Some(rows);
                    }
                    Ok(CellResult {
                        shots,
                        seed,
                        method,
                        dev_accuracy: dev,
                        test_accuracy: test,
                        n_concepts: Some(bottleneck.n_concepts()),
                        best_epoch: Some(epoch),
                        chosen_c: None,
                    })
                }
                Method::Probe => {
                    let (ptrain, pdev, ptest) = data.probe_sets();
                    let ptrain = ptrain.subset(&indices);
                    let sweep = sweep_c(&ptrain, pdev, &config.probe)?;
                    Ok(CellResult {
                        shots,
                        seed,
                        method,
                        dev_accuracy: sweep.chosen_dev_accuracy(),
                        test_accuracy: sweep.model.accuracy(ptest),
                        n_concepts: None,
                        best_epoch: None,
                        chosen_c: Some(sweep.chosen_c),
                    })
                }
            }
        })()
        .map_err(wrap(method))?;
        log::info!(
            "shots={shots} seed={seed} {method}: dev {:.4} test {:.4}",
            result.dev_accuracy,
            result.test_accuracy
        );
        cells.push(result);
    }
    Ok(GroupOutput { cells, explanations })
}

/// Runs every `(shots, seed, method)` cell. `jobs` caps the worker threads;
/// the report does not depend on it.
pub fn run_experiment(data: &ExperimentData, config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentReport, HarnessError> {
    if config.shots.is_empty() || config.seeds.is_empty() || config.methods.is_empty() {
        return Err(HarnessError::Invalid("shots, seeds and methods must be non-empty".into()));
    }
    config.selection.validate()?;
    config.train.validate()?;
    config.probe.validate()?;
    if data.dev.is_empty() || data.test.is_empty() {
        return Err(HarnessError::Invalid("dev and test splits must be non-empty".into()));
    }

    let groups: Vec<(Shots, u64)> = config
        .shots
        .iter()
        .flat_map(|&s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let explain_at = (*config.shots.last().unwrap(), config.seeds[0]);
    let run = || {
        groups
            .par_iter()
            .map(|&(shots, seed)| run_group(data, config, shots, seed, (shots, seed) == explain_at))
            .collect::<Vec<_>>()
    };
    let outputs = match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| HarnessError::Invalid(e.to_string()))?
            .install(run),
        None => run(),
    };

    let mut cells = Vec::new();
    let mut explanations = None;
    for (out, &(shots, seed)) in outputs.into_iter().zip(&groups) {
        let out = out?;
        cells.extend(out.cells);
        if let Some(rows) = out.explanations {
            explanations = Some(ExplanationTable { shots, seed, rows });
        }
    }

    let mut summary = Vec::new();
    for &shots in &config.shots {
        for &method in &config.methods {
            let picked: Vec<&CellResult> = cells.iter().filter(|c| c.shots == shots && c.method == method).collect();
            let test: Vec<f64> = picked.iter().map(|c| c.test_accuracy).collect();
            let dev: Vec<f64> = picked.iter().map(|c| c.dev_accuracy).collect();
            summary.push(SummaryRow {
                shots,
                method,
                n_seeds: picked.len(),
                mean_dev_accuracy: mean(&dev),
                mean_test_accuracy: mean(&test),
                std_test_accuracy: std_dev(&test),
            });
        }
    }
    Ok(ExperimentReport {
        config: config.clone(),
        cells,
        summary,
        explanations,
    })
}
