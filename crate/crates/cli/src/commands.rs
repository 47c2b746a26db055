use std::fs;
use std::path::{Path, PathBuf};

use labo_core::baselines::sweep_c;
use labo_core::bottleneck_model::{
    accuracy_from_scores, init_prior, load_checkpoint, save_checkpoint, train as train_model, ConceptWeightMatrix,
    EpochRecord, ScoreMatrix,
};
use labo_core::concept_prep::{default_templates, prepare_catalog, render_prompts, PromptTemplate, RawSentence};
use labo_core::embedding_store::{load_catalog, load_embeddings, read_jsonl, save_catalog, save_embeddings, write_jsonl};
use labo_core::eval_harness::{explain as explain_rows, run_experiment, sample_few_shot, ExperimentData, Shots};
use labo_core::submodular_select::{select_bottleneck, Bottleneck, BottleneckExport};
use labo_core::synthetic::{PlantedBenchmark, PlantedConfig};
use labo_core::{ClassId, LabeledImageSet};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{load_experiment_data, read_class_names, require, RunManifest};

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

#[derive(Serialize)]
struct ConfigEcho<'a, T: Serialize> {
    command: &'a str,
    manifest: &'a RunManifest,
    options: T,
}

/// Creates the output directory and records the resolved configuration in
/// `<command>.config.json` before any work starts.
fn prepare_out<T: Serialize>(m: &RunManifest, command: &str, options: T) -> CliResult<PathBuf> {
    let out = m.out_dir()?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| CliError::validation(format!("cannot create {}: {e}", out.display())))?;
    write_json(
        &out.join(format!("{command}.config.json")),
        &ConfigEcho {
            command,
            manifest: m,
            options,
        },
    )?;
    Ok(out)
}

#[derive(Serialize)]
struct PromptRecord {
    class_id: ClassId,
    prompt_id: u32,
    text: String,
}

pub fn prepare(m: &RunManifest) -> CliResult<()> {
    let sentences_path = require(&m.sentences, "sentences")?;
    let classes_path = require(&m.classes, "classes")?;
    let templates = match &m.templates {
        Some(_) => read_jsonl::<PromptTemplate>(require(&m.templates, "templates")?)?,
        None => default_templates(),
    };
    let out = prepare_out(m, "prepare", ())?;

    let class_names = read_class_names(classes_path)?;
    let sentences: Vec<RawSentence> =
        read_jsonl(sentences_path).map_err(|e| CliError::from(e).context(sentences_path.display()))?;
    if sentences.is_empty() {
        log::warn!("{} holds no sentences; writing an empty catalog", sentences_path.display());
    }
    let catalog = prepare_catalog(&sentences, &class_names, &m.superclass)?;
    save_catalog(&catalog, out.join("concepts.jsonl"))?;

    let mut prompts = Vec::new();
    for (class_id, name) in class_names.iter().enumerate() {
        for (t, text) in templates.iter().zip(render_prompts(name, &m.superclass, &templates)?) {
            prompts.push(PromptRecord {
                class_id,
                prompt_id: t.template_id,
                text,
            });
        }
    }
    write_jsonl(out.join("prompts.jsonl"), &prompts)?;
    println!(
        "{} concepts from {} sentences over {} classes",
        catalog.len(),
        sentences.len(),
        class_names.len()
    );
    Ok(())
}

fn train_subset(data: &ExperimentData, shots: Option<Shots>, seed: u64) -> CliResult<(LabeledImageSet, Vec<usize>)> {
    let split = sample_few_shot(&data.train, shots.unwrap_or(Shots::Full), seed)?;
    let idx = split.flat_indices();
    Ok((data.train.subset(&idx), idx))
}

fn save_bottleneck(b: &Bottleneck, out: &Path) -> CliResult<PathBuf> {
    let path = out.join("bottleneck.json");
    write_json(&path, &b.export())?;
    save_embeddings(&b.embeddings, path.with_extension("bin"))?;
    Ok(path)
}

fn load_bottleneck(path: &Path) -> CliResult<Bottleneck> {
    if !path.exists() {
        return Err(CliError::validation(format!("bottleneck {} does not exist", path.display())));
    }
    let export: BottleneckExport = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let emb = load_embeddings(path.with_extension("bin"))?;
    Ok(Bottleneck::from_export(&export, emb)?)
}

fn select_on(data: &ExperimentData, train: &LabeledImageSet, m: &RunManifest) -> CliResult<Bottleneck> {
    let candidates = data.candidates(train, m.selection.sim_floor)?;
    let b = select_bottleneck(&candidates, &m.selection)?;
    let short: Vec<ClassId> = b.classes.iter().filter(|c| c.short_class).map(|c| c.class_id).collect();
    if !short.is_empty() {
        log::warn!("classes with fewer than k = {} candidates: {short:?}", m.selection.k);
    }
    Ok(b)
}

#[derive(Serialize)]
struct ShotOptions {
    shots: Shots,
    seed: u64,
}

pub fn select(m: &RunManifest, shots: Option<Shots>) -> CliResult<()> {
    m.validate()?;
    let data = load_experiment_data(m)?;
    let opts = ShotOptions {
        shots: shots.unwrap_or(Shots::Full),
        seed: m.seed(),
    };
    let out = prepare_out(m, "select", &opts)?;
    let (train, _) = train_subset(&data, shots, opts.seed)?;
    let b = select_on(&data, &train, m)?;
    let path = save_bottleneck(&b, &out)?;
    println!("selected {} concepts for {} classes -> {}", b.n_concepts(), b.n_classes(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    shots: Shots,
    seed: u64,
    prior_init: bool,
    n_concepts: usize,
    best_epoch: usize,
    best_dev_accuracy: f64,
    test_accuracy: f64,
    history: Vec<EpochRecord>,
}

pub fn train(m: &RunManifest, shots: Option<Shots>, bottleneck: Option<&Path>) -> CliResult<()> {
    m.validate()?;
    let data = load_experiment_data(m)?;
    let seed = m.seed();
    let out = prepare_out(
        m,
        "train",
        ShotOptions {
            shots: shots.unwrap_or(Shots::Full),
            seed,
        },
    )?;
    let (train_set, _) = train_subset(&data, shots, seed)?;
    let b = match bottleneck {
        Some(p) => load_bottleneck(p)?,
        None => {
            let b = select_on(&data, &train_set, m)?;
            save_bottleneck(&b, &out)?;
            b
        }
    };
    if b.n_classes() != data.n_classes {
        return Err(CliError::validation(format!(
            "bottleneck covers {} classes, data has {}",
            b.n_classes(),
            data.n_classes
        )));
    }
    let init = if m.prior_init {
        init_prior(&b, data.n_classes, m.activation)
    } else {
        ConceptWeightMatrix::zeros(data.n_classes, b.n_concepts(), m.activation)
    };
    let init = ConceptWeightMatrix {
        softmax_axis: m.softmax_axis,
        ..init
    };
    let cfg = labo_core::TrainConfig { seed, ..m.train };
    let outcome = train_model(&train_set, &data.dev, &b.embeddings, &init, &cfg)?;
    let test = ScoreMatrix::compute(&data.test.embeddings, &b.embeddings)?;
    let test_accuracy = accuracy_from_scores(&test, &data.test.labels, &outcome.weights)?;
    save_checkpoint(
        out.join("checkpoint.json"),
        &outcome.weights,
        seed,
        outcome.best_epoch,
        outcome.best_dev_accuracy,
    )?;
    println!(
        "best epoch {}: dev {:.4}, test {:.4}",
        outcome.best_epoch, outcome.best_dev_accuracy, test_accuracy
    );
    write_json(
        &out.join("train_summary.json"),
        &TrainSummary {
            shots: shots.unwrap_or(Shots::Full),
            seed,
            prior_init: m.prior_init,
            n_concepts: b.n_concepts(),
            best_epoch: outcome.best_epoch,
            best_dev_accuracy: outcome.best_dev_accuracy,
            test_accuracy,
            history: outcome.history,
        },
    )
}

pub fn probe(m: &RunManifest, shots: Option<Shots>) -> CliResult<()> {
    m.validate()?;
    let data = load_experiment_data(m)?;
    let seed = m.seed();
    let out = prepare_out(
        m,
        "probe",
        ShotOptions {
            shots: shots.unwrap_or(Shots::Full),
            seed,
        },
    )?;
    let (_, idx) = train_subset(&data, shots, seed)?;
    let (ptrain, pdev, ptest) = match &data.probe_features {
        Some((a, b, c)) => (a, b, c),
        None => (&data.train, &data.dev, &data.test),
    };
    let sweep = sweep_c(&ptrain.subset(&idx), pdev, &m.probe)?;
    let test_accuracy = sweep.model.accuracy(ptest);
    write_json(&out.join("probe_report.json"), &sweep.report(Some(test_accuracy)))?;
    write_json(&out.join("probe_model.json"), &sweep.model)?;
    println!(
        "chosen C = {:e}: dev {:.4}, test {:.4}",
        sweep.chosen_c,
        sweep.chosen_dev_accuracy(),
        test_accuracy
    );
    Ok(())
}

fn bottleneck_beside(checkpoint: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("bottleneck.json")
    })
}

fn load_model(checkpoint: &Path, bottleneck: Option<&Path>) -> CliResult<(ConceptWeightMatrix, Bottleneck)> {
    if !checkpoint.exists() {
        return Err(CliError::validation(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let (_, w) = load_checkpoint(checkpoint)?;
    let b = load_bottleneck(&bottleneck_beside(checkpoint, bottleneck))?;
    if w.n_concepts != b.n_concepts() {
        return Err(CliError::validation(format!(
            "checkpoint has {} concepts, bottleneck {}",
            w.n_concepts,
            b.n_concepts()
        )));
    }
    Ok((w, b))
}

#[derive(Serialize)]
struct CheckpointEval {
    checkpoint: PathBuf,
    dev_accuracy: f64,
    test_accuracy: f64,
    n_test: usize,
}

pub fn eval_checkpoint(m: &RunManifest, checkpoint: &Path, bottleneck: Option<&Path>) -> CliResult<()> {
    let (w, b) = load_model(checkpoint, bottleneck)?;
    let data = load_experiment_data(m)?;
    if w.n_classes != data.n_classes {
        return Err(CliError::validation(format!(
            "checkpoint has {} classes, data has {}",
            w.n_classes, data.n_classes
        )));
    }
    let out = prepare_out(m, "eval", checkpoint)?;
    let acc = |set: &LabeledImageSet| -> CliResult<f64> {
        let scores = ScoreMatrix::compute(&set.embeddings, &b.embeddings)?;
        Ok(accuracy_from_scores(&scores, &set.labels, &w)?)
    };
    let result = CheckpointEval {
        checkpoint: checkpoint.to_path_buf(),
        dev_accuracy: acc(&data.dev)?,
        test_accuracy: acc(&data.test)?,
        n_test: data.test.len(),
    };
    println!("dev {:.4}, test {:.4} on {} images", result.dev_accuracy, result.test_accuracy, result.n_test);
    write_json(&out.join("eval.json"), &result)
}

pub fn experiment(m: &RunManifest, jobs: Option<usize>) -> CliResult<()> {
    m.validate()?;
    let data = load_experiment_data(m)?;
    let config = m.experiment_config();
    let out = prepare_out(m, "eval", &config)?;
    let report = run_experiment(&data, &config, jobs)?;
    fs::write(out.join("report.json"), report.to_json() + "\n")?;
    let tsv = report.summary_tsv();
    fs::write(out.join("summary.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

pub fn explain(m: &RunManifest, checkpoint: &Path, bottleneck: Option<&Path>, class_id: Option<ClassId>) -> CliResult<()> {
    let (w, b) = load_model(checkpoint, bottleneck)?;
    let catalog_path = require(&m.catalog, "catalog")?;
    let catalog = load_catalog(catalog_path)?;
    let out = prepare_out(m, "explain", (checkpoint, class_id))?;
    let classes: Vec<ClassId> = match class_id {
        Some(c) => vec![c],
        None => (0..w.n_classes).collect(),
    };
    let mut rows = Vec::new();
    for c in classes {
        rows.extend(explain_rows(&w, &b, &catalog, c, m.explain_top)?);
    }
    println!("class_id\trank\tconcept_id\tweight\ttext");
    for r in &rows {
        println!("{}\t{}\t{}\t{:.6}\t{}", r.class_id, r.rank, r.concept_id, r.weight, r.text);
    }
    write_json(&out.join("explanations.json"), &rows)
}

pub fn synth(m: &RunManifest, seed: Option<u64>) -> CliResult<()> {
    let config = PlantedConfig {
        seed: seed.unwrap_or(PlantedConfig::default().seed),
        ..PlantedConfig::default()
    };
    let out = prepare_out(m, "synth", &config)?;
    let bench = PlantedBenchmark::generate(&config);
    bench.write_to(&out)?;
    let exp = bench.experiment_config();
    let manifest = RunManifest {
        images: Some("images.bin".into()),
        labels: Some("labels.jsonl".into()),
        catalog: Some("concepts.jsonl".into()),
        concept_embeddings: Some("concept_embeddings.bin".into()),
        classes: Some("classes.json".into()),
        out: Some("run".into()),
        selection: exp.selection,
        train: exp.train,
        probe: exp.probe,
        shots: exp.shots,
        seeds: exp.seeds,
        methods: exp.methods,
        explain_top: exp.explain_top,
        ..RunManifest::default()
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "{} images, {} concepts ({} planted) -> {}",
        bench.images.rows(),
        bench.catalog.len(),
        bench.planted.len(),
        out.join("manifest.json").display()
    );
    Ok(())
}
