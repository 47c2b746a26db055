//! Run manifest: a single JSON document naming the input files and every
//! configuration block. Command-line flags are applied on top of it.

use std::fs;
use std::path::{Path, PathBuf};

use labo_core::baselines::ProbeConfig;
use labo_core::bottleneck_model::{Activation, SoftmaxAxis, TrainConfig};
use labo_core::embedding_store::{load_catalog, load_embeddings, load_labels, read_jsonl, LabelRecord};
use labo_core::eval_harness::{ExperimentConfig, ExperimentData, Method, Shots};
use labo_core::SubmodularConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub images: Option<PathBuf>,
    /// Features for the linear probe; the probe uses `images` when absent.
    pub probe_images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub concept_embeddings: Option<PathBuf>,
    /// JSON array of class names, or one name per line.
    pub classes: Option<PathBuf>,
    pub n_classes: Option<usize>,
    pub sentences: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub superclass: String,
    pub out: Option<PathBuf>,
    pub selection: SubmodularConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub shots: Vec<Shots>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub activation: Activation,
    pub softmax_axis: SoftmaxAxis,
    pub explain_top: usize,
    pub prior_init: bool,
}

impl Default for RunManifest {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            images: None,
            probe_images: None,
            labels: None,
            catalog: None,
            concept_embeddings: None,
            classes: None,
            n_classes: None,
            sentences: None,
            templates: None,
            superclass: String::new(),
            out: None,
            selection: exp.selection,
            train: exp.train,
            probe: exp.probe,
            shots: exp.shots,
            seeds: exp.seeds,
            methods: exp.methods,
            activation: exp.activation,
            softmax_axis: exp.softmax_axis,
            explain_top: exp.explain_top,
            prior_init: true,
        }
    }
}

impl RunManifest {
    /// Reads a manifest; relative paths inside it are taken relative to the
    /// manifest's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut m.images,
            &mut m.probe_images,
            &mut m.labels,
            &mut m.catalog,
            &mut m.concept_embeddings,
            &mut m.classes,
            &mut m.sentences,
            &mut m.templates,
            &mut m.out,
        ] {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(m)
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            shots: self.shots.clone(),
            seeds: self.seeds.clone(),
            methods: self.methods.clone(),
            selection: self.selection,
            train: self.train,
            probe: self.probe.clone(),
            activation: self.activation,
            softmax_axis: self.softmax_axis,
            explain_top: self.explain_top,
        }
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::validation("no output directory: pass --out or set \"out\" in the manifest"))
    }

    pub fn seed(&self) -> u64 {
        self.seeds.first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.selection.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        Ok(())
    }
}

/// Returns `path` or a validation error naming the missing manifest key.
pub fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| CliError::validation(format!("missing input: set \"{key}\" in the manifest or pass --{}", key.replace('_', "-"))))?;
    if !p.exists() {
        return Err(CliError::validation(format!("{key} file {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn read_class_names(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot read class list {}: {e}", path.display())))?;
    if let Ok(names) = serde_json::from_str::<Vec<String>>(&text) {
        return Ok(names);
    }
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Class count from, in order: the manifest, the class list, the labels.
pub fn class_count(m: &RunManifest, labels: &Path) -> CliResult<usize> {
    if let Some(n) = m.n_classes {
        return Ok(n);
    }
    if m.classes.is_some() {
        return Ok(read_class_names(require(&m.classes, "classes")?)?.len());
    }
    let records: Vec<LabelRecord> = read_jsonl(labels)?;
    Ok(records.iter().map(|r| r.class_id + 1).max().unwrap_or(0))
}

/// Loads every input an experiment needs and checks their consistency.
pub fn load_experiment_data(m: &RunManifest) -> CliResult<ExperimentData> {
    let images_path = require(&m.images, "images")?;
    let labels_path = require(&m.labels, "labels")?;
    let catalog_path = require(&m.catalog, "catalog")?;
    let concepts_path = require(&m.concept_embeddings, "concept_embeddings")?;
    let n_classes = class_count(m, labels_path)?;
    let images = load_embeddings(images_path).map_err(|e| CliError::from(e).context(images_path.display()))?;
    let probe_images = match &m.probe_images {
        Some(_) => {
            let p = require(&m.probe_images, "probe_images")?;
            Some(load_embeddings(p).map_err(|e| CliError::from(e).context(p.display()))?)
        }
        None => None,
    };
    let labels = load_labels(labels_path, n_classes).map_err(|e| CliError::from(e).context(labels_path.display()))?;
    let catalog = load_catalog(catalog_path).map_err(|e| CliError::from(e).context(catalog_path.display()))?;
    let concepts = load_embeddings(concepts_path).map_err(|e| CliError::from(e).context(concepts_path.display()))?;
    Ok(ExperimentData::assemble(&images, probe_images.as_ref(), &labels, catalog, concepts)?)
}
