//! `labo` command-line interface.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use labo_core::bottleneck_model::Activation;
use labo_core::eval_harness::Shots;

use error::{CliError, CliResult};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "labo", version, about = "Language-guided concept bottleneck classifiers")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run manifest; flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for few-shot sampling and training (replaces the manifest's seed list)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct InputArgs {
    /// Image embedding file
    #[arg(long, value_name = "PATH")]
    images: Option<PathBuf>,
    /// Separate feature file for the linear probe
    #[arg(long, value_name = "PATH")]
    probe_images: Option<PathBuf>,
    /// Label JSONL file
    #[arg(long, value_name = "PATH")]
    labels: Option<PathBuf>,
    /// Concept catalog JSONL file
    #[arg(long, value_name = "PATH")]
    catalog: Option<PathBuf>,
    /// Concept embedding file, rows in catalog order
    #[arg(long, value_name = "PATH")]
    concept_embeddings: Option<PathBuf>,
    /// Class list (JSON array or one name per line)
    #[arg(long, value_name = "PATH")]
    classes: Option<PathBuf>,
    #[arg(long)]
    n_classes: Option<usize>,
}

#[derive(Debug, Args, Default)]
struct SelectionArgs {
    /// Concepts selected per class [default: 50]
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the discriminability term
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the coverage term
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Debug, Args, Default)]
struct TrainingArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// softmax, sigmoid, relu or none
    #[arg(long)]
    activation: Option<Activation>,
    /// Start from zero weights instead of the class-of-origin prior
    #[arg(long)]
    no_prior_init: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split candidate sentences into concepts and strip class names
    Prepare {
        /// JSONL of {class_id, prompt_id, text}
        #[arg(long, value_name = "PATH")]
        sentences: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        classes: Option<PathBuf>,
        /// JSONL of {template_id, text}; built-in templates when omitted
        #[arg(long, value_name = "PATH")]
        templates: Option<PathBuf>,
        #[arg(long)]
        superclass: Option<String>,
    },
    /// Select the concept bottleneck
    Select {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        /// Training images per class (number or "full") [default: full]
        #[arg(long)]
        shots: Option<Shots>,
    },
    /// Train the concept weight matrix
    Train {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        training: TrainingArgs,
        #[arg(long)]
        shots: Option<Shots>,
        /// Reuse a selected bottleneck (JSON with a sibling .bin)
        #[arg(long, value_name = "PATH")]
        bottleneck: Option<PathBuf>,
    },
    /// Fit the linear-probe baseline with a C sweep
    Probe {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        shots: Option<Shots>,
    },
    /// Evaluate a checkpoint, or run the full shots x seeds x methods experiment
    Eval {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        selection: SelectionArgs,
        #[command(flatten)]
        training: TrainingArgs,
        /// Checkpoint to evaluate on the test split
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        bottleneck: Option<PathBuf>,
        /// Comma-separated shot settings for the experiment
        #[arg(long, value_delimiter = ',')]
        shots: Vec<Shots>,
    },
    /// Rank the concepts behind a class
    Explain {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        bottleneck: Option<PathBuf>,
        /// Class to explain; every class when omitted
        #[arg(long = "class")]
        class_id: Option<usize>,
        #[arg(long)]
        top: Option<usize>,
    },
    /// Write the planted-concept benchmark and a manifest for it
    Synth,
}

fn apply_inputs(m: &mut RunManifest, a: InputArgs) {
    let set = |slot: &mut Option<PathBuf>, v: Option<PathBuf>| {
        if v.is_some() {
            *slot = v;
        }
    };
    set(&mut m.images, a.images);
    set(&mut m.probe_images, a.probe_images);
    set(&mut m.labels, a.labels);
    set(&mut m.catalog, a.catalog);
    set(&mut m.concept_embeddings, a.concept_embeddings);
    set(&mut m.classes, a.classes);
    if a.n_classes.is_some() {
        m.n_classes = a.n_classes;
    }
}

fn apply_selection(m: &mut RunManifest, a: SelectionArgs) {
    if let Some(k) = a.k {
        m.selection.k = k;
    }
    if let Some(alpha) = a.alpha {
        m.selection.alpha = alpha;
    }
    if let Some(beta) = a.beta {
        m.selection.beta = beta;
    }
}

fn apply_training(m: &mut RunManifest, a: TrainingArgs) {
    if let Some(lr) = a.lr {
        m.train.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        m.train.batch_size = b;
    }
    if let Some(e) = a.epochs {
        m.train.max_epochs = e;
    }
    if let Some(act) = a.activation {
        m.activation = act;
    }
    if a.no_prior_init {
        m.prior_init = false;
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut m = match &cli.common.manifest {
        Some(p) => RunManifest::load(p)?,
        None => RunManifest::default(),
    };
    if cli.common.out.is_some() {
        m.out = cli.common.out.clone();
    }
    if let Some(seed) = cli.common.seed {
        m.seeds = vec![seed];
        m.train.seed = seed;
    }
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(CliError::validation("--jobs must be at least 1"));
        }
        // a second initialization only happens in tests; ignore it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let jobs = cli.common.jobs;

    match cli.command {
        Command::Prepare { sentences, classes, templates, superclass } => {
            if sentences.is_some() {
                m.sentences = sentences;
            }
            if classes.is_some() {
                m.classes = classes;
            }
            if templates.is_some() {
                m.templates = templates;
            }
            if let Some(s) = superclass {
                m.superclass = s;
            }
            commands::prepare(&m)
        }
        Command::Select { inputs, selection, shots } => {
            apply_inputs(&mut m, inputs);
            apply_selection(&mut m, selection);
            commands::select(&m, shots)
        }
        Command::Train { inputs, selection, training, shots, bottleneck } => {
            apply_inputs(&mut m, inputs);
            apply_selection(&mut m, selection);
            apply_training(&mut m, training);
            commands::train(&m, shots, bottleneck.as_deref())
        }
        Command::Probe { inputs, shots } => {
            apply_inputs(&mut m, inputs);
            commands::probe(&m, shots)
        }
        Command::Eval { inputs, selection, training, checkpoint, bottleneck, shots } => {
            apply_inputs(&mut m, inputs);
            apply_selection(&mut m, selection);
            apply_training(&mut m, training);
            if !shots.is_empty() {
                m.shots = shots;
            }
            match checkpoint {
                Some(ckpt) => commands::eval_checkpoint(&m, &ckpt, bottleneck.as_deref()),
                None => commands::experiment(&m, jobs),
            }
        }
        Command::Explain { inputs, checkpoint, bottleneck, class_id, top } => {
            apply_inputs(&mut m, inputs);
            if let Some(t) = top {
                m.explain_top = t;
            }
            commands::explain(&m, &checkpoint, bottleneck.as_deref(), class_id)
        }
        Command::Synth => commands::synth(&m, cli.common.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LABO_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
