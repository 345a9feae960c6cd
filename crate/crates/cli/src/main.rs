mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use specvae::augment::{Backbone, PowerClassifier, SkipPattern};
use specvae::synth::parse_class_list;
use specvae::{Dims, Error, LatentMode, Result};

use crate::commands::Status;
use crate::config::{FileConfig, Seeded};

/// Disentangled VAE compression and latent-interpolation augmentation for
/// RF interference spectrograms.
#[derive(Parser, Debug)]
#[command(name = "specvae", version)]
struct Cli {
    /// TOML file with one table per command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic spectrogram dataset.
    Synth(SynthArgs),
    /// Train a FactorVAE, vanilla VAE or CVAE-GAN.
    Train(TrainArgs),
    /// Encode a dataset into a LATC stream.
    Compress(CompressArgs),
    /// Interpolate between two power bins and write the new samples.
    Augment(AugmentArgs),
    /// Compressed-classifier sweep and timing against the baseline CNN.
    Bench(BenchArgs),
    /// Power-bin classification with and without interpolated samples.
    AugmentEval(AugmentEvalArgs),
    /// Decode sweeps of single latent coordinates.
    Traverse(TraverseArgs),
    /// Interference-to-noise histogram of one spectrogram.
    Histogram(HistogramArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Comma separated, e.g. `tone,chirp`.
    #[arg(long)]
    classes: Option<String>,
    /// Samples per (class, power bin) cell.
    #[arg(long)]
    n: Option<usize>,
    /// `HEIGHTxWIDTH`.
    #[arg(long)]
    dims: Option<Dims>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    power_bins: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// factorvae, vae or cvae-gan.
    #[arg(long, value_parser = parse_backbone)]
    model: Option<Backbone>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct CompressArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// mu, mu_concat_sigma or reparam.
    #[arg(long)]
    mode: Option<LatentMode>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// all or every-second.
    #[arg(long, value_parser = parse_skip)]
    skip_pattern: Option<SkipPattern>,
    #[arg(long)]
    pairs: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    latent_dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<LatentMode>>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Encoder training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct AugmentEvalArgs {
    /// factorvae, vae or cvae-gan.
    #[arg(long, value_parser = parse_backbone)]
    backbone: Option<Backbone>,
    /// cnn or latent.
    #[arg(long, value_parser = parse_classifier)]
    classifier: Option<PowerClassifier>,
    /// Backbone training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    train_bins: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct TraverseArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct HistogramArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
}

fn parse_backbone(s: &str) -> std::result::Result<Backbone, String> {
    match s.replace('-', "_").as_str() {
        "factorvae" => Ok(Backbone::Factorvae),
        "vae" => Ok(Backbone::Vae),
        "cvae_gan" => Ok(Backbone::CvaeGan),
        _ => Err(format!("unknown model `{s}` (factorvae, vae, cvae-gan)")),
    }
}

fn parse_skip(s: &str) -> std::result::Result<SkipPattern, String> {
    match s.replace('-', "_").as_str() {
        "all" => Ok(SkipPattern::All),
        "every_second" => Ok(SkipPattern::EverySecond),
        _ => Err(format!("unknown skip pattern `{s}` (all, every-second)")),
    }
}

fn parse_classifier(s: &str) -> std::result::Result<PowerClassifier, String> {
    match s {
        "cnn" => Ok(PowerClassifier::Cnn),
        "latent" => Ok(PowerClassifier::Latent),
        _ => Err(format!("unknown classifier `{s}` (cnn, latent)")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

/// Applies the global seed, writes the resolved-config snapshot and runs.
fn execute<C: Serialize + Seeded>(
    name: &str,
    mut cfg: C,
    seed: Option<u64>,
    out: &Path,
    run: impl FnOnce(&C, &Path) -> Result<Status>,
) -> Result<Status> {
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    std::fs::create_dir_all(out)?;
    let mut table = toml::Table::new();
    table.insert("command".into(), name.into());
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::try_from(s).map_err(|e| Error::Config(e.to_string()))?);
    }
    table.insert(name.replace('-', "_"), toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?);
    let text = toml::to_string_pretty(&table).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join("resolved_config.toml"), text)?;
    run(&cfg, out)
}

fn run(cli: Cli) -> Result<Status> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let threads = cli.threads.or(file.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Range { field: "threads", msg: "must be at least 1".into() });
        }
        specvae::exec::init_threads(n);
    }
    let seed = cli.seed.or(file.seed);
    let out = cli.out.or(file.out).unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Synth(a) => {
            let mut c = file.synth;
            if let Some(s) = a.classes {
                c.dataset.class_set = parse_class_list(&s)?;
            }
            set(&mut c.dataset.n_per_class, a.n);
            set(&mut c.dataset.dims, a.dims);
            set(&mut c.dataset.power_bins, a.power_bins);
            execute("synth", c, seed, &out, commands::synth)
        }
        Command::Train(a) => {
            let mut c = file.train;
            set_opt(&mut c.data, a.data);
            set(&mut c.model, a.model);
            set(&mut c.latent_dim, a.latent_dim);
            set(&mut c.vae.epochs, a.epochs);
            set(&mut c.cvae_gan.epochs, a.epochs);
            set(&mut c.vae.batch_size, a.batch_size);
            set(&mut c.cvae_gan.batch_size, a.batch_size);
            set(&mut c.vae.beta, a.beta);
            set(&mut c.vae.gamma, a.gamma);
            set(&mut c.vae.lr, a.lr);
            set(&mut c.cvae_gan.lr, a.lr);
            execute("train", c, seed, &out, commands::train)
        }
        Command::Compress(a) => {
            let mut c = file.compress;
            set_opt(&mut c.model, a.model);
            set_opt(&mut c.data, a.data);
            set(&mut c.mode, a.mode);
            execute("compress", c, seed, &out, commands::compress_cmd)
        }
        Command::Augment(a) => {
            let mut c = file.augment;
            set_opt(&mut c.model, a.model);
            set_opt(&mut c.data, a.data);
            set(&mut c.lo, a.lo);
            set(&mut c.hi, a.hi);
            set(&mut c.n_steps, a.steps);
            set(&mut c.skip_pattern, a.skip_pattern);
            set_opt(&mut c.pairs, a.pairs);
            execute("augment", c, seed, &out, commands::augment)
        }
        Command::Bench(a) => {
            let mut c = file.bench;
            set_opt(&mut c.data, a.data);
            set(&mut c.latent_dims, a.latent_dims);
            set(&mut c.modes, a.modes);
            set(&mut c.repetitions, a.repetitions);
            set(&mut c.vae.epochs, a.epochs);
            execute("bench", c, seed, &out, commands::bench)
        }
        Command::AugmentEval(a) => {
            let mut c = file.augment_eval;
            set(&mut c.backbone, a.backbone);
            set(&mut c.classifier, a.classifier);
            set(&mut c.vae.epochs, a.epochs);
            set(&mut c.cvae_gan.epochs, a.epochs);
            set(&mut c.train_bins, a.train_bins);
            execute("augment-eval", c, seed, &out, commands::augment_eval_cmd)
        }
        Command::Traverse(a) => {
            let mut c = file.traverse;
            set_opt(&mut c.model, a.model);
            set_opt(&mut c.data, a.data);
            set(&mut c.index, a.index);
            set_opt(&mut c.dim, a.dim);
            set(&mut c.lo, a.lo);
            set(&mut c.hi, a.hi);
            set(&mut c.steps, a.steps);
            execute("traverse", c, seed, &out, commands::traverse)
        }
        Command::Histogram(a) => {
            let mut c = file.histogram;
            set_opt(&mut c.data, a.data);
            set(&mut c.index, a.index);
            execute("histogram", c, seed, &out, commands::histogram)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownClass(_) | Error::Range { .. } | Error::Dims { .. } | Error::Empty(_) | Error::NonFinite(_) => 2,
        Error::Diverged { .. } => 3,
        Error::MissingEndpoint { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial(msg)) => {
            eprintln!("specvae: partial failure: {msg}");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("specvae: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
