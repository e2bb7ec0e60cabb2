//! `patsim`: the end-to-end patient-similarity pipeline as subcommands.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use stages::SweepParam;

#[derive(Parser)]
#[command(
    name = "patsim",
    version,
    about = "Patient similarity from longitudinal event records",
    after_help = "Stages feed each other through files in the output directory:\n  \
                  synth -> embed -> represent -> train -> sim -> cluster -> eval"
)]
struct Cli {
    /// Pipeline configuration file (TOML); defaults apply when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-cohort event data plus ground truth.
    Synth(SynthArgs),
    /// Learn code embeddings from the event file.
    Embed(EmbedArgs),
    /// Turn each patient into the configured representation.
    Represent(RepresentArgs),
    /// Train the convolutional matcher on the train/dev splits.
    Train(TrainArgs),
    /// Score all patient pairs of a split into a similarity matrix.
    Sim(SimArgs),
    /// Group patients from the similarity matrix or vectors.
    Cluster(ClusterArgs),
    /// Score the clustering against the cohort labels.
    Eval,
    /// Re-run the deep pipeline across one hyperparameter grid.
    Sweep(SweepArgs),
    /// Export event-transition counts for the most similar patients of
    /// a cohort.
    Pathways(PathwaysArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    cohorts: Option<usize>,
    #[arg(long)]
    patients_per_cohort: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    mean_events: Option<usize>,
    #[arg(long)]
    shared_frac: Option<f64>,
    #[arg(long)]
    specific_frac: Option<f64>,
    #[arg(long)]
    chronic_frac: Option<f64>,
    /// Remove cohort-identifier codes after generating, mirroring the
    /// harder evaluation setting.
    #[arg(long)]
    strip_identifiers: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    freq_scale: Option<f64>,
    /// Use a fixed window instead of the frequency-adaptive one.
    #[arg(long)]
    fixed_window: bool,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    min_count: Option<usize>,
    /// Train bag-of-words instead of skip-gram.
    #[arg(long)]
    cbow: bool,
}

#[derive(Args)]
struct RepresentArgs {
    /// onehot | shallow | deep
    #[arg(long)]
    kind: Option<String>,
    /// L2-normalize matrix columns.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    filter_width: Option<usize>,
    #[arg(long)]
    feature_maps: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    positive_ratio: Option<f64>,
    /// cross_entropy | square
    #[arg(long)]
    loss: Option<String>,
}

#[derive(Args)]
struct SimArgs {
    /// rv | dcor | cnn
    #[arg(long)]
    measure: Option<String>,
    /// train | test | dev | all
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Cluster count; defaults to the number of cohorts.
    #[arg(long)]
    k: Option<usize>,
    /// kmeans | seeded
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seeded_frac: Option<f64>,
    /// sim | vectors | auto
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// dim | width | maps
    #[arg(long)]
    param: String,
}

#[derive(Args)]
struct PathwaysArgs {
    /// Cohort whose most similar patients are mined.
    #[arg(long)]
    cohort: String,
    #[arg(long)]
    top_k: Option<usize>,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    std::fs::create_dir_all(&config.out_dir)?;

    match cli.command {
        Command::Synth(args) => {
            set(&mut config.synth.n_cohorts, args.cohorts);
            set(&mut config.synth.patients_per_cohort, args.patients_per_cohort);
            set(&mut config.synth.vocab_size, args.vocab_size);
            set(&mut config.synth.mean_events_per_patient, args.mean_events);
            set(&mut config.synth.shared_vocab_frac, args.shared_frac);
            set(&mut config.synth.cohort_specific_frac, args.specific_frac);
            set(&mut config.synth.chronic_frac, args.chronic_frac);
            stages::cmd_synth(&config, args.strip_identifiers)
        }
        Command::Embed(args) => {
            set(&mut config.embedding.dim, args.dim);
            set(&mut config.embedding.base_window, args.window);
            set(&mut config.embedding.freq_scale, args.freq_scale);
            if args.fixed_window {
                config.embedding.adaptive = false;
            }
            set(&mut config.embedding.negatives, args.negatives);
            set(&mut config.embedding.epochs, args.epochs);
            set(&mut config.embedding.learning_rate, args.learning_rate);
            set(&mut config.embedding.min_count, args.min_count);
            if args.cbow {
                config.embedding.cbow = true;
            }
            stages::cmd_embed(&config)
        }
        Command::Represent(args) => {
            set(&mut config.representation.kind, args.kind);
            if args.normalize {
                config.representation.normalize = true;
            }
            stages::cmd_represent(&config)
        }
        Command::Train(args) => {
            set(&mut config.matcher.filter_width, args.filter_width);
            set(&mut config.matcher.n_filters, args.feature_maps);
            set(&mut config.matcher.hidden_size, args.hidden_size);
            set(&mut config.matcher.dropout, args.dropout);
            set(&mut config.matcher.learning_rate, args.learning_rate);
            set(&mut config.matcher.minibatch, args.minibatch);
            set(&mut config.matcher.max_epochs, args.max_epochs);
            set(&mut config.matcher.patience, args.patience);
            set(&mut config.matcher.pairs_per_epoch, args.pairs_per_epoch);
            set(&mut config.matcher.positive_ratio, args.positive_ratio);
            set(&mut config.matcher.loss, args.loss);
            stages::cmd_train(&config)
        }
        Command::Sim(args) => {
            set(&mut config.similarity.measure, args.measure);
            set(&mut config.similarity.split, args.split);
            stages::cmd_sim(&config)
        }
        Command::Cluster(args) => {
            set(&mut config.cluster.k, args.k);
            set(&mut config.cluster.method, args.method);
            set(&mut config.cluster.seeded_frac, args.seeded_frac);
            set(&mut config.cluster.source, args.source);
            set(&mut config.cluster.max_iters, args.max_iters);
            stages::cmd_cluster(&config)
        }
        Command::Eval => stages::cmd_eval(&config),
        Command::Sweep(args) => {
            let param: SweepParam = args.param.parse()?;
            stages::cmd_sweep(&config, param)
        }
        Command::Pathways(args) => {
            set(&mut config.pathways.top_k, args.top_k);
            stages::cmd_pathways(&config, &args.cohort, config.pathways.top_k)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(value) = value {
        *slot = value;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}
