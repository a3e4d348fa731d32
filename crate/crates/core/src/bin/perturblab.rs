use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use perturblab::cli::{
    cmd_adv_train, cmd_evaluate, cmd_find_epsilon, cmd_gen_perturbs, cmd_synth_corpus,
    cmd_train_scorer, cmd_train_standard, RunConfig,
};
use perturblab::perturbgen::PerturbMethod;

/// Desk-scale laboratory connecting discrete text perturbations with
/// continuous embedding-space perturbation budgets.
#[derive(Parser)]
#[command(name = "perturblab", version, about)]
struct Cli {
    /// TOML run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the parallel stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the separable two-class keyword corpus.
    SynthCorpus,
    /// Train the classifier with plain SGD.
    TrainClassifier {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the classifier against embedding-space perturbations.
    AdvTrain {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Generate discrete perturbations for every corpus text.
    GenPerturbs {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// random, greedy, or both
        #[arg(long, default_value = "both")]
        method: String,
    },
    /// Sweep norm bounds for every perturbation and write the tuple dataset.
    FindEpsilon {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        perturbs: PathBuf,
    },
    /// Build scorer datasets from tuples, train and evaluate the scorer.
    TrainScorer {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tuples: PathBuf,
    },
    /// Evaluate a stored scorer on a scorer dataset (own or foreign).
    Evaluate {
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Dataset manifest carrying the vocabulary hash; defaults to
        /// `scorer-dataset-manifest.json` next to the test file.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Label for the train/test pairing in the report.
        #[arg(long, default_value = "cross")]
        setup: String,
    },
}

fn run(cli: Cli) -> perturblab::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }

    match cli.command {
        Command::SynthCorpus => cmd_synth_corpus(&cfg).map(drop),
        Command::TrainClassifier { corpus } => cmd_train_standard(&cfg, &corpus).map(drop),
        Command::AdvTrain { corpus } => cmd_adv_train(&cfg, &corpus).map(drop),
        Command::GenPerturbs {
            corpus,
            model,
            method,
        } => {
            let methods: Vec<PerturbMethod> = match method.as_str() {
                "both" => vec![PerturbMethod::Random, PerturbMethod::Greedy],
                other => vec![other.parse()?],
            };
            cmd_gen_perturbs(&cfg, &corpus, &model, &methods).map(drop)
        }
        Command::FindEpsilon {
            corpus,
            model,
            perturbs,
        } => cmd_find_epsilon(&cfg, &corpus, &model, &perturbs).map(drop),
        Command::TrainScorer {
            corpus,
            model,
            tuples,
        } => cmd_train_scorer(&cfg, &corpus, &model, &tuples).map(drop),
        Command::Evaluate {
            scorer,
            test,
            manifest,
            setup,
        } => {
            let manifest =
                manifest.unwrap_or_else(|| test.with_file_name("scorer-dataset-manifest.json"));
            cmd_evaluate(&cfg, &scorer, &test, &manifest, &setup).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}
