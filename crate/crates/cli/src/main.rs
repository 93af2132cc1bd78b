//! labelnoise: train text classifiers robustly under label noise.
//!
//! Subcommands: `inject` (corrupt labels under a seeded protocol), `train`
//! (warmup + mixture fit + de-noising or baseline training), `fit-bmm`
//! (mixture fit over an external loss CSV), `sweep` (t0/beta grid search),
//! `eval` (score a checkpoint on a dataset).
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use labelnoise::data::DataFormat;
use labelnoise::model::RepMode;
use labelnoise::noise::{MatchMode, NoiseKind, NoiseSpec};
use labelnoise::training::Mode;

use config::{NoiseChoice, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "labelnoise",
    version,
    about = "Label-noise-robust text classification: seeded noise injection, beta-mixture clean-sample scoring, and joint classifier/noise-model training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt dataset labels under a seeded noise protocol and write the
    /// noisy TSV plus a report.
    Inject(InjectArgs),
    /// Run one training experiment (noise, warmup, mixture fit, de-noising
    /// or baseline) and write its artifacts.
    Train(TrainArgs),
    /// Fit the two-component beta mixture on an external id,raw_loss CSV.
    FitBmm(FitBmmArgs),
    /// Grid-search t0 and beta with derived per-cell sub-seeds.
    Sweep(SweepArgs),
    /// Evaluate a saved checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Generate a seeded synthetic corpus in TREC or AG-News format.
    Synth(SynthArgs),
}

#[derive(Args)]
struct InjectArgs {
    /// Input dataset file.
    #[arg(long)]
    input: PathBuf,
    /// Input format: trec | agnews | tsv.
    #[arg(long)]
    format: DataFormat,
    /// Noise protocol: random | token | length.
    #[arg(long)]
    noise: NoiseChoice,
    /// Noise level (fraction of the eligible set), in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    level: f64,
    /// Comma-separated trigger tokens (token noise only).
    #[arg(long, default_value = "")]
    tokens: String,
    /// Trigger matching: contains | starts_with.
    #[arg(long, default_value = "starts_with")]
    r#match: MatchMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output TSV path.
    #[arg(long)]
    output: PathBuf,
    /// Report path (default: noise_report.json next to the output).
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Every `train` flag mirrors a config-file key of the same name; flags win
/// over file values.
#[derive(Args, Clone)]
struct TrainArgs {
    /// key = value config file providing defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "train_path", alias = "train-path")]
    train_path: Option<PathBuf>,
    #[arg(long = "train_format", alias = "train-format")]
    train_format: Option<DataFormat>,
    #[arg(long = "test_path", alias = "test-path")]
    test_path: Option<PathBuf>,
    #[arg(long = "test_format", alias = "test-format")]
    test_format: Option<DataFormat>,
    #[arg(long = "val_path", alias = "val-path")]
    val_path: Option<PathBuf>,
    #[arg(long = "val_fraction", alias = "val-fraction")]
    val_fraction: Option<f64>,
    #[arg(long = "min_freq", alias = "min-freq")]
    min_freq: Option<usize>,
    #[arg(long = "embeddings_path", alias = "embeddings-path")]
    embeddings_path: Option<PathBuf>,
    /// none | random | token | length.
    #[arg(long)]
    noise: Option<NoiseChoice>,
    #[arg(long)]
    level: Option<f64>,
    /// Comma-separated trigger tokens.
    #[arg(long)]
    tokens: Option<String>,
    /// contains | starts_with.
    #[arg(long)]
    r#match: Option<MatchMode>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// baseline | dn-soft | dn-hard.
    #[arg(long)]
    mode: Option<Mode>,
    /// logits | concat.
    #[arg(long = "rep_mode", alias = "rep-mode")]
    rep_mode: Option<RepMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long = "embedding_dim", alias = "embedding-dim")]
    embedding_dim: Option<usize>,
    #[arg(long = "hidden_dim", alias = "hidden-dim")]
    hidden_dim: Option<usize>,
    #[arg(long = "eval_every", alias = "eval-every")]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "out_dir", alias = "out-dir")]
    out_dir: Option<PathBuf>,
    /// Audit switch: replace train/validation clean labels with a sentinel
    /// before training; training outputs must be unaffected.
    #[arg(long = "audit_poison_clean_labels", alias = "audit-poison-clean-labels", default_value_t = false)]
    audit_poison_clean_labels: bool,
}

#[derive(Args)]
struct FitBmmArgs {
    /// CSV with header "id,raw_loss".
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving bmm.json and losses_scored.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated warmup-epoch grid, e.g. 6,10,20.
    #[arg(long = "grid-t0", alias = "grid_t0")]
    grid_t0: String,
    /// Comma-separated beta grid, e.g. 2,4,6,8,10.
    #[arg(long = "grid-beta", alias = "grid_beta")]
    grid_beta: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// trec | agnews | tsv.
    #[arg(long)]
    format: DataFormat,
}

#[derive(Args)]
struct SynthArgs {
    /// trec | agnews.
    #[arg(long)]
    kind: String,
    #[arg(long)]
    num: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// First unique-token number (TREC kind); keep train/test ranges disjoint.
    #[arg(long = "uid_start", alias = "uid-start", default_value_t = 0)]
    uid_start: usize,
    /// Omit per-example unique tokens (TREC kind).
    #[arg(long = "no_unique_tokens", alias = "no-unique-tokens", default_value_t = false)]
    no_unique_tokens: bool,
    /// Own-class keyword probability per body token (TREC kind).
    #[arg(long = "p_own", alias = "p-own")]
    p_own: Option<f64>,
    /// Other-class keyword probability per body token (TREC kind).
    #[arg(long = "p_other", alias = "p-other")]
    p_other: Option<f64>,
    /// Fraction of rows carrying the AP source token (AG-News kind).
    #[arg(long = "ap_fraction", alias = "ap-fraction")]
    ap_fraction: Option<f64>,
    /// Fraction of rows carrying the Reuters source token (AG-News kind).
    #[arg(long = "reuters_fraction", alias = "reuters-fraction")]
    reuters_fraction: Option<f64>,
}

impl TrainArgs {
    /// defaults <- config file <- flags.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        if let Some(v) = &self.train_path {
            config.train_path = Some(v.clone());
        }
        if let Some(v) = self.train_format {
            config.train_format = v;
        }
        if let Some(v) = &self.test_path {
            config.test_path = Some(v.clone());
        }
        if let Some(v) = self.test_format {
            config.test_format = Some(v);
        }
        if let Some(v) = &self.val_path {
            config.val_path = Some(v.clone());
        }
        if let Some(v) = self.val_fraction {
            config.val_fraction = v;
        }
        if let Some(v) = self.min_freq {
            config.min_freq = v;
        }
        if let Some(v) = &self.embeddings_path {
            config.embeddings_path = Some(v.clone());
        }
        if let Some(v) = self.noise {
            config.noise = v;
        }
        if let Some(v) = self.level {
            config.level = v;
        }
        if let Some(v) = &self.tokens {
            config.set("tokens", v)?;
        }
        if let Some(v) = self.r#match {
            config.match_mode = v;
        }
        if let Some(v) = self.t0 {
            config.t0 = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.beta {
            config.beta = v;
        }
        if let Some(v) = self.mode {
            config.mode = v;
        }
        if let Some(v) = self.rep_mode {
            config.rep_mode = v;
        }
        if let Some(v) = self.lr {
            config.lr = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.dropout {
            config.dropout = v;
        }
        if let Some(v) = self.embedding_dim {
            config.embedding_dim = v;
        }
        if let Some(v) = self.hidden_dim {
            config.hidden_dim = v;
        }
        if let Some(v) = self.eval_every {
            config.eval_every = v;
        }
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = &self.out_dir {
            config.out_dir = Some(v.clone());
        }
        Ok(config)
    }
}

fn parse_grid<T: std::str::FromStr>(name: &str, text: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let values: Result<Vec<T>, _> = text
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("bad {name} entry {s:?}: {e}")))
        })
        .collect();
    let values = values?;
    if values.is_empty() {
        return Err(CliError::Usage(format!("{name} grid is empty")));
    }
    Ok(values)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Inject(args) => {
            let kind = match args.noise {
                NoiseChoice::None => {
                    return Err(CliError::Usage(
                        "inject requires --noise random|token|length".into(),
                    ))
                }
                NoiseChoice::Random => NoiseKind::Random,
                NoiseChoice::Token => NoiseKind::TokenConditional,
                NoiseChoice::Length => NoiseKind::LengthConditional,
            };
            let trigger_tokens: Vec<String> = args
                .tokens
                .split(',')
                .filter(|t| !t.is_empty())
                .map(|t| t.to_string())
                .collect();
            if kind == NoiseKind::TokenConditional && trigger_tokens.is_empty() {
                return Err(CliError::Usage("--noise token requires --tokens".into()));
            }
            let spec = NoiseSpec {
                kind,
                level: args.level,
                trigger_tokens,
                match_mode: args.r#match,
                seed: args.seed,
            };
            commands::cmd_inject(
                &args.input,
                args.format,
                &spec,
                &args.output,
                args.report.as_deref(),
            )
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            commands::run_single_train(&config, args.audit_poison_clean_labels, false)?;
            Ok(())
        }
        Command::FitBmm(args) => commands::cmd_fit_bmm(&args.input, &args.out_dir),
        Command::Sweep(args) => {
            let base = args.train.resolve()?;
            let grid_t0: Vec<usize> = parse_grid("grid_t0", &args.grid_t0)?;
            let grid_beta: Vec<f64> = parse_grid("grid_beta", &args.grid_beta)?;
            commands::cmd_sweep(&base, &grid_t0, &grid_beta)
        }
        Command::Eval(args) => commands::cmd_eval(&args.checkpoint, &args.data, args.format),
        Command::Synth(args) => commands::cmd_synth(&args),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}
