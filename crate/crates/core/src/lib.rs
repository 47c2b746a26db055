//! Interpretable image classifiers built on a bottleneck of textual concepts.
//!
//! The pipeline works on precomputed embeddings:
//!
//! 1. [`concept_prep`] turns generated sentences into short, sanitized concepts.
//! 2. [`submodular_select`] picks, per class, `k` concepts that are
//!    discriminative and cover the candidate pool.
//! 3. [`bottleneck_model`] scores images against the selected concepts and
//!    learns a softmax-normalized class-concept weight matrix, initialized
//!    from each concept's class of origin.
//! 4. [`baselines`] provides the black-box linear probe it is compared to,
//!    and [`eval_harness`] runs the few-shot protocol.

pub mod baselines;
pub mod bottleneck_model;
pub mod concept_prep;
pub mod embedding_store;
pub mod eval_harness;
pub mod submodular_select;
pub mod synthetic;

pub use baselines::{fit_logistic, sweep_c, ProbeConfig, ProbeModel, ProbeReport};
pub use bottleneck_model::{Activation, ConceptWeightMatrix, TrainConfig};
pub use embedding_store::{
    ClassId, ConceptCatalog, ConceptEntry, ConceptId, EmbeddingMatrix, LabelTable, LabeledImageSet, Split,
};
pub use eval_harness::{ExperimentConfig, ExperimentData, ExperimentReport, Method, Shots};
pub use submodular_select::{Bottleneck, ClassCandidates, SubmodularConfig};
