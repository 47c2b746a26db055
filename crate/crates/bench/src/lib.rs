//! Fixtures shared by the benchmarks, built from the planted-concept generator.

use labo_core::eval_harness::{sample_few_shot, ExperimentData, Shots};
use labo_core::submodular_select::ClassCandidates;
use labo_core::synthetic::{PlantedBenchmark, PlantedConfig};
use labo_core::LabeledImageSet;

/// Planted benchmark with `distractors` generic concepts per class.
pub fn planted(distractors: usize) -> ExperimentData {
    PlantedBenchmark::generate(&PlantedConfig {
        distractors_per_class: distractors,
        ..PlantedConfig::default()
    })
    .experiment_data()
    .expect("generated data is consistent")
}

/// Candidate pools of every class, scored against the full training split.
pub fn candidate_pools(data: &ExperimentData) -> Vec<ClassCandidates> {
    data.candidates(&data.train, 1e-8).expect("every class has images")
}

/// Few-shot training subset drawn with seed 0.
pub fn few_shot(data: &ExperimentData, shots: Shots) -> LabeledImageSet {
    let split = sample_few_shot(&data.train, shots, 0).expect("every class has images");
    data.train.subset(&split.flat_indices())
}
