//! Planted-concept benchmark with known ground truth.
//!
//! Every class owns a few orthonormal *attribute* directions. An image of a
//! class shows a random non-empty subset of its attributes, on top of a
//! background direction shared by all images, plus isotropic Gaussian noise.
//! Each class's candidate pool holds one concept per attribute (the planted
//! concepts) and many distractors: generic concepts leaning on the shared
//! background with a random component, which score similarly for every class.
//!
//! With one shot a learner only sees some attributes of each class, while the
//! class-of-origin prior already links every planted concept to its class.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{
    save_catalog, save_embeddings, save_labels, ClassId, ConceptCatalog, ConceptEntry, ConceptId, EmbeddingMatrix,
    LabelRecord, LabelTable, Split, StoreError,
};
use crate::bottleneck_model::TrainConfig;
use crate::eval_harness::{ExperimentConfig, ExperimentData, HarnessError, Shots};
use crate::submodular_select::SubmodularConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_classes: usize,
    pub planted_per_class: usize,
    pub distractors_per_class: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of the image noise.
    pub noise: f64,
    /// Scale of each visible attribute in an image.
    pub attribute_strength: f64,
    /// Probability that an attribute is visible in a given image.
    pub attribute_prob: f64,
    /// Weight of the shared background direction in every image.
    pub background: f64,
    /// Weight of the background direction in each distractor concept, before
    /// normalization; the rest is a random unit direction.
    pub distractor_background: f64,
    pub train_per_class: usize,
    pub dev_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            planted_per_class: 5,
            distractors_per_class: 45,
            dim: 64,
            noise: 0.1,
            attribute_strength: 0.8,
            attribute_prob: 0.5,
            background: 0.5,
            distractor_background: 0.6,
            train_per_class: 40,
            dev_per_class: 10,
            test_per_class: 30,
            seed: 2023,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedBenchmark {
    pub config: PlantedConfig,
    pub class_names: Vec<String>,
    pub images: EmbeddingMatrix,
    pub labels: LabelTable,
    pub catalog: ConceptCatalog,
    pub concept_embeddings: EmbeddingMatrix,
    pub planted: BTreeSet<ConceptId>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// `count` orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

impl PlantedBenchmark {
    pub fn generate(config: &PlantedConfig) -> Self {
        let c = config;
        let needed = c.n_classes * c.planted_per_class + 1;
        assert!(c.dim >= needed, "dim {} cannot hold {needed} orthogonal directions", c.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let basis = orthonormal(&mut rng, c.dim, needed);
        let background = &basis[needed - 1];
        let attribute = |class: usize, j: usize| &basis[class * c.planted_per_class + j];

        // concepts, shuffled within the catalog so ids carry no signal
        let mut concepts: Vec<(ClassId, bool, usize, Vec<f64>)> = Vec::new();
        for class in 0..c.n_classes {
            for j in 0..c.planted_per_class {
                concepts.push((class, true, j, attribute(class, j).clone()));
            }
            for j in 0..c.distractors_per_class {
                let mut z = gaussian(&mut rng, c.dim);
                normalize(&mut z);
                let mut v: Vec<f64> = background
                    .iter()
                    .zip(&z)
                    .map(|(b, r)| c.distractor_background * b + (1.0 - c.distractor_background.powi(2)).sqrt() * r)
                    .collect();
                normalize(&mut v);
                concepts.push((class, false, j, v));
            }
        }
        concepts.shuffle(&mut rng);
        concepts.sort_by_key(|(class, ..)| *class);

        let mut entries = Vec::with_capacity(concepts.len());
        let mut planted = BTreeSet::new();
        let mut concept_values = Vec::with_capacity(concepts.len() * c.dim);
        for (id, (class, is_planted, j, v)) in concepts.iter().enumerate() {
            let id = id as ConceptId;
            let text = if *is_planted {
                planted.insert(id);
                format!("attribute {j} of class {class}")
            } else {
                format!("generic feature {j} suggested for class {class}")
            };
            entries.push(ConceptEntry {
                concept_id: id,
                text,
                class_id: *class,
                prompt_id: 0,
                sanitized: true,
            });
            concept_values.extend(v.iter().map(|&x| x as f32));
        }
        let concept_embeddings = EmbeddingMatrix::new(concepts.len(), c.dim, concept_values, false)
            .and_then(|m| m.normalize_rows())
            .expect("generated concepts are finite and nonzero");

        let per_class = c.train_per_class + c.dev_per_class + c.test_per_class;
        let mut image_values = Vec::with_capacity(c.n_classes * per_class * c.dim);
        let mut records = Vec::with_capacity(c.n_classes * per_class);
        for class in 0..c.n_classes {
            for i in 0..per_class {
                let split = if i < c.train_per_class {
                    Split::Train
                } else if i < c.train_per_class + c.dev_per_class {
                    Split::Dev
                } else {
                    Split::Test
                };
                let visible: Vec<usize> = loop {
                    let v: Vec<usize> = (0..c.planted_per_class).filter(|_| rng.random_bool(c.attribute_prob)).collect();
                    if !v.is_empty() {
                        break v;
                    }
                };
                let mut x: Vec<f64> = background.iter().map(|b| c.background * b).collect();
                for &j in &visible {
                    x.iter_mut().zip(attribute(class, j)).for_each(|(xi, a)| *xi += c.attribute_strength * a);
                }
                for xi in x.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *xi += c.noise * e;
                }
                records.push(LabelRecord {
                    index: records.len(),
                    class_id: class,
                    split,
                });
                image_values.extend(x.iter().map(|&v| v as f32));
            }
        }
        let images = EmbeddingMatrix::new(records.len(), c.dim, image_values, false).expect("finite images");

        Self {
            config: c.clone(),
            class_names: (0..c.n_classes).map(|i| format!("class {i}")).collect(),
            images,
            labels: LabelTable::new(records, c.n_classes).expect("labels in range"),
            catalog: ConceptCatalog::new(entries).expect("unique ids"),
            concept_embeddings,
            planted,
        }
    }

    pub fn experiment_data(&self) -> Result<ExperimentData, HarnessError> {
        ExperimentData::assemble(
            &self.images,
            None,
            &self.labels,
            self.catalog.clone(),
            self.concept_embeddings.clone(),
        )
    }

    /// Reference experiment on this benchmark: shots 1 to 16 plus full data,
    /// three seeds, five concepts per class.
    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            shots: vec![Shots::K(1), Shots::K(2), Shots::K(4), Shots::K(8), Shots::K(16), Shots::Full],
            seeds: vec![0, 1, 2],
            selection: SubmodularConfig {
                alpha: 1.0,
                beta: 0.02,
                k: self.config.planted_per_class,
                ..SubmodularConfig::default()
            },
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 32,
                max_epochs: 100,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    /// Writes `images.bin`, `labels.jsonl`, `concepts.jsonl`,
    /// `concept_embeddings.bin` and `classes.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        save_embeddings(&self.images, dir.join("images.bin"))?;
        save_labels(&self.labels, dir.join("labels.jsonl"))?;
        save_catalog(&self.catalog, dir.join("concepts.jsonl"))?;
        save_embeddings(&self.concept_embeddings, dir.join("concept_embeddings.bin"))?;
        fs::write(
            dir.join("classes.json"),
            serde_json::to_string_pretty(&self.class_names).map_err(std::io::Error::from)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_config() {
        let cfg = PlantedConfig::default();
        let b = PlantedBenchmark::generate(&cfg);
        assert_eq!(b.catalog.len(), 10 * 50);
        assert_eq!(b.planted.len(), 50);
        assert_eq!(b.images.rows(), 10 * 80);
        assert!(b.concept_embeddings.is_normalized());
        let data = b.experiment_data().unwrap();
        assert_eq!(data.train.len(), 400);
        assert_eq!(data.dev.len(), 100);
        assert_eq!(data.test.len(), 300);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PlantedConfig { train_per_class: 3, dev_per_class: 1, test_per_class: 1, ..Default::default() };
        let a = PlantedBenchmark::generate(&cfg);
        let b = PlantedBenchmark::generate(&cfg);
        assert_eq!(a.images, b.images);
        assert_eq!(a.catalog, b.catalog);
    }
}
