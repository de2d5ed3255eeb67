//! `deeplinker`: split, train, evaluate, rank, embed, classify and
//! robustness runs from one binary.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "deeplinker",
    version,
    about = "Link prediction, node ranking and embeddings with attention over sampled neighborhoods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition edges into train/validation/test parts with negatives.
    Split {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        fracs: SplitArgs,
    },
    /// Train a model and write its best checkpoint and history.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        fracs: SplitArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Test-set accuracy and AUC of a checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare node rankings against ground truth.
    Rank {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ground-truth file: one id per line (binary) or `id score` (real).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// `binary` or `real`.
        #[arg(long)]
        truth_kind: Option<String>,
        /// Comma-separated: attention, pagerank, closeness, betweenness, degree.
        #[arg(long)]
        methods: Option<String>,
        /// Top-k cut for hit accuracy (default: size of the truth set).
        #[arg(long)]
        k: Option<usize>,
        /// Expected attention mode of the checkpoint.
        #[arg(long)]
        attention: Option<String>,
    },
    /// Export one embedding per node.
    Embed {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Micro-F1 of logistic regression on exported embeddings.
    Classify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// `node_id label` lines.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Comma-separated training fractions.
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Break a fraction of the edges, then split, train and evaluate.
    Robustness {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        fracs: SplitArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Fraction of edges removed before splitting.
        #[arg(long)]
        break_frac: Option<f64>,
    },
}

#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (default `runs/<command>-<unix time>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default 1).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct GraphArgs {
    /// Whitespace-separated edge list.
    #[arg(long)]
    pub edges: Option<PathBuf>,
    /// `onehot` or a `node_id idx:val ...` feature file.
    #[arg(long)]
    pub features: Option<String>,
    /// Split file written by `split` or `train`.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct SplitArgs {
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub heads1: Option<usize>,
    #[arg(long)]
    pub heads2: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// `learned` or `all_ones`.
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub sample_size: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let f = failure::Failure::usage(first.trim_start_matches("error: "));
            eprintln!("{}", f.to_json_line());
            return ExitCode::from(f.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Split { run, graph, fracs } => commands::split(run, graph, fracs),
        Command::Train {
            run,
            graph,
            fracs,
            model,
            train,
        } => commands::train(run, graph, fracs, model, train),
        Command::Evaluate {
            run,
            graph,
            checkpoint,
        } => commands::evaluate(run, graph, checkpoint),
        Command::Rank {
            run,
            graph,
            checkpoint,
            truth,
            truth_kind,
            methods,
            k,
            attention,
        } => commands::rank(
            run,
            graph,
            commands::RankArgs {
                checkpoint,
                truth,
                truth_kind,
                methods,
                k,
                attention,
            },
        ),
        Command::Embed {
            run,
            graph,
            checkpoint,
        } => commands::embed(run, graph, checkpoint),
        Command::Classify {
            run,
            embeddings,
            labels,
            fractions,
            repeats,
        } => commands::classify(run, embeddings, labels, fractions, repeats),
        Command::Robustness {
            run,
            graph,
            fracs,
            model,
            train,
            break_frac,
        } => commands::robustness(run, graph, fracs, model, train, break_frac),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json_line());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
