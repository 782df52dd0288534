//! Command-line entry point: dataset generation, training, separation,
//! evaluation, and complexity analysis.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors. All
//! randomness flows from explicit seeds; no environment variables are read,
//! and outputs carry no timestamps, so identical invocations produce
//! byte-identical results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dprcnet::checkpoint::{self, CheckpointMeta};
use dprcnet::dataset::{self, Manifest};
use dprcnet::runconfig::{self, RunConfig};
use dprcnet::wav;
use dprcnet_core::analysis;
use dprcnet_core::separator::DpRcNet;
use dprcnet_core::signal::DEFAULT_SAMPLE_RATE;
use dprcnet_core::train::{self, EpochRecord};

#[derive(Parser)]
#[command(
    name = "dprcnet",
    about = "Dual-path recurrent-convolutional speech separation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-speaker mixture corpus with a manifest.
    GenData {
        /// Number of mixtures.
        #[arg(long)]
        num: usize,
        /// Duration of each mixture in seconds.
        #[arg(long)]
        seconds: f64,
        /// Output directory for WAVs and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Master seed; the corpus is a pure function of it.
        #[arg(long)]
        seed: u64,
    },
    /// Train a model from a run configuration and dataset manifests.
    Train {
        /// Run configuration file (key = value lines).
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "train-manifest")]
        train_manifest: PathBuf,
        #[arg(long = "valid-manifest")]
        valid_manifest: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Separate a mixture WAV into per-speaker WAVs.
    Separate {
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Input mixture (mono 16-bit PCM WAV).
        #[arg(long)]
        input: PathBuf,
        /// Output directory; writes <stem>_s1.wav, <stem>_s2.wav, ...
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model over a manifest and print the metric report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Print parameter and MACs counts for a configuration.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Forward-pass duration the MACs are counted for.
        #[arg(long, default_value_t = 4.0)]
        seconds: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 2; --help/--version print and exit 0.
            e.exit();
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), String> {
    match command {
        Command::GenData { num, seconds, out, seed } => gen_data(num, seconds, &out, seed),
        Command::Train { config, train_manifest, valid_manifest, out } => {
            run_train(&config, &train_manifest, &valid_manifest, &out)
        }
        Command::Separate { model, input, out } => separate(&model, &input, &out),
        Command::Evaluate { model, manifest } => evaluate(&model, &manifest),
        Command::Analyze { config, seconds } => analyze(&config, seconds),
    }
}

fn gen_data(num: usize, seconds: f64, out: &Path, seed: u64) -> Result<(), String> {
    let manifest = dataset::build_dataset(num, seconds, out, seed, DEFAULT_SAMPLE_RATE)
        .map_err(|e| e.to_string())?;
    println!(
        "wrote {} mixtures ({} files) and {}",
        manifest.entries.len(),
        manifest.entries.len() * 3,
        out.join("manifest.tsv").display()
    );
    Ok(())
}

fn load_manifest_samples(path: &Path) -> Result<Vec<dprcnet_core::signal::MixtureSample>, String> {
    let manifest = Manifest::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    manifest.load_samples().map_err(|e| format!("{}: {e}", path.display()))
}

fn render_history(history: &[EpochRecord]) -> String {
    let mut out = String::from("# epoch\ttrain_loss\tvalid_sisdri\tlr\n");
    for r in history {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.train_loss, r.valid_si_sdri, r.lr);
    }
    out
}

fn run_train(
    config: &Path,
    train_manifest: &Path,
    valid_manifest: &Path,
    out: &Path,
) -> Result<(), String> {
    let cfg: RunConfig = runconfig::parse_file(config).map_err(|e| e.to_string())?;
    let train_set = load_manifest_samples(train_manifest)?;
    let valid_set = load_manifest_samples(valid_manifest)?;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;

    let mut model =
        DpRcNet::init(cfg.model.clone(), cfg.train.seed).map_err(|e| e.to_string())?;
    let best_path = out.join("best.ckpt");
    let outcome = train::train(&mut model, &train_set, &valid_set, &cfg.train, |m, rec| {
        let meta = CheckpointMeta { epoch: rec.epoch as u64, best_score: Some(rec.valid_si_sdri) };
        if let Err(e) = checkpoint::save(m, meta, &best_path) {
            eprintln!("warning: failed to write checkpoint: {e}");
        }
    })
    .map_err(|e| e.to_string())?;

    std::fs::write(out.join("train_log.tsv"), render_history(&outcome.history))
        .map_err(|e| e.to_string())?;
    println!(
        "trained {} epochs; best validation SI-SDRi {:.4} dB at epoch {}{}",
        outcome.history.len(),
        outcome.best_score,
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    println!("checkpoint: {}", best_path.display());
    println!("log: {}", out.join("train_log.tsv").display());
    Ok(())
}

fn separate(model_path: &Path, input: &Path, out: &Path) -> Result<(), String> {
    let (model, _) = checkpoint::load(model_path).map_err(|e| e.to_string())?;
    let mixture = wav::read_wav(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let estimates = model.separate(&mixture).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| format!("cannot derive a file stem from {}", input.display()))?;
    let mut clipped_total = 0;
    for (i, estimate) in estimates.iter().enumerate() {
        let path = out.join(format!("{stem}_s{}.wav", i + 1));
        clipped_total += wav::write_wav(estimate, &path).map_err(|e| e.to_string())?;
        println!("{}", path.display());
    }
    if clipped_total > 0 {
        eprintln!("warning: {clipped_total} samples clipped to [-1, 1]");
    }
    Ok(())
}

fn evaluate(model_path: &Path, manifest: &Path) -> Result<(), String> {
    let (model, _) = checkpoint::load(model_path).map_err(|e| e.to_string())?;
    let samples = load_manifest_samples(manifest)?;
    let report = analysis::evaluate_samples(&model, &samples).map_err(|e| e.to_string())?;
    print!("{}", analysis::render_eval_report(&report, &model.config));
    Ok(())
}

fn analyze(config: &Path, seconds: f64) -> Result<(), String> {
    let cfg: RunConfig = runconfig::parse_file(config).map_err(|e| e.to_string())?;
    let report =
        analysis::estimate_macs(&cfg.model, seconds, cfg.sample_rate).map_err(|e| e.to_string())?;
    print!("{}", analysis::render_complexity_text(&report));
    print!("{}", analysis::render_complexity_kv(&report));
    Ok(())
}
