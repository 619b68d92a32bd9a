use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use automask::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use automask::config::{Config, Mode, Precision};
use automask::data::{generate_dataset, read_dataset, write_dataset, ShapeSample, DATASET_VERSION};
use automask::generator::{visualize_mask, write_pgm};
use automask::gradcheck::run_gradcheck;
use automask::probe::linear_probe;
use automask::sweep::{beta_sweep, write_sweep_csv, SWEEP_HEADER};
use automask::train::{pretrain, run_trainer, split_holdout, ModelBundle, RunOutputs, Trainer, METRICS_HEADER};
use automask::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "automask", version, about = "Adversarial mask generation for masked autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a masked autoencoder; writes a checkpoint and a metrics CSV.
    Pretrain(Common),
    /// Linear-probe the encoder of a checkpoint; writes probe.json.
    Probe(Common),
    /// Bbox-boost sweep over `sweep.betas` × `sweep.seeds`; writes sweep.csv.
    SweepBeta(Common),
    /// Top-quarter mask grids of held-out samples as PGM images.
    VizMasks(Common),
    /// Finite-difference gradient checks.
    Gradcheck(Common),
    /// Generate the synthetic shapes dataset file.
    GenData(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.mode`.
    #[arg(long)]
    mode: Option<String>,
    /// Checkpoint to resume (pretrain) or evaluate (probe, viz-masks).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Pretrain(_) => "pretrain",
            Self::Probe(_) => "probe",
            Self::SweepBeta(_) => "sweep-beta",
            Self::VizMasks(_) => "viz-masks",
            Self::Gradcheck(_) => "gradcheck",
            Self::GenData(_) => "gen-data",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Self::Pretrain(c)
            | Self::Probe(c)
            | Self::SweepBeta(c)
            | Self::VizMasks(c)
            | Self::Gradcheck(c)
            | Self::GenData(c) => c,
        }
    }
}

fn resolve_config(args: &Common) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.train.mode = Mode::parse(mode)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_manifest(command: &str, cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let manifest = json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg,
        "formats": {
            "checkpoint": CHECKPOINT_VERSION,
            "dataset": DATASET_VERSION,
            "metrics_header": METRICS_HEADER,
            "sweep_header": SWEEP_HEADER,
        },
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
    std::fs::write(out.join("run.json"), text + "\n")?;
    Ok(())
}

fn load_samples(cfg: &Config) -> Result<Vec<ShapeSample>> {
    match &cfg.data.path {
        Some(p) => read_dataset(p),
        None => generate_dataset(cfg.data.samples, cfg.data.seed, cfg.data.noise_level),
    }
}

fn require_checkpoint(args: &Common) -> Result<Checkpoint> {
    let path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    Checkpoint::load(path)
}

fn pretrain_cmd<T: Scalar>(cfg: &Config, args: &Common) -> Result<()> {
    let samples = load_samples(cfg)?;
    let (train, _) = split_holdout(&samples, cfg.data.holdout_fraction);
    let outputs = RunOutputs {
        metrics_csv: Some(args.out.join("metrics.csv")),
        checkpoint: Some(args.out.join("checkpoint.amae")),
    };
    let run = match &args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut t = Trainer::<T>::from_checkpoint(cfg, cfg.seed, train, &ckpt)?;
            let rows = t.epoch;
            let csv = outputs.metrics_csv.as_ref().expect("metrics path");
            let resume = csv.exists().then_some(rows);
            run_trainer(&mut t, &outputs, resume)?
        }
        None => pretrain::<T>(cfg, cfg.seed, train, None, &outputs)?,
    };
    for m in &run.metrics {
        println!("{}", m.csv_row());
    }
    println!("checkpoint: {}", args.out.join("checkpoint.amae").display());
    Ok(())
}

fn probe_cmd<T: Scalar>(cfg: &Config, args: &Common) -> Result<()> {
    let ckpt = require_checkpoint(args)?;
    let models = ModelBundle::<T>::from_checkpoint(cfg, cfg.seed, &ckpt)?;
    let samples = load_samples(cfg)?;
    let (train, test) = split_holdout(&samples, cfg.data.holdout_fraction);
    let mae = &models.mae;
    let r = linear_probe(&mae.encoder, &mae.encoder_params, train, test, &cfg.probe, cfg.seed)?;
    let report = json!({
        "accuracy": r.accuracy,
        "train_accuracy": r.train_accuracy,
        "train_samples": train.len(),
        "test_samples": test.len(),
        "seed": cfg.seed,
    });
    std::fs::write(args.out.join("probe.json"), format!("{report:#}\n"))?;
    println!("probe accuracy {:.4} (train {:.4})", r.accuracy, r.train_accuracy);
    Ok(())
}

fn sweep_cmd<T: Scalar>(cfg: &Config, args: &Common) -> Result<()> {
    let samples = load_samples(cfg)?;
    let (rows, cells) = beta_sweep::<T>(cfg, &samples, &cfg.sweep.betas, &cfg.sweep.seeds)?;
    for c in &cells {
        println!("beta={} seed={} accuracy={:.4}", c.beta, c.seed, c.accuracy);
    }
    write_sweep_csv(&args.out.join("sweep.csv"), &rows)?;
    println!("{SWEEP_HEADER}");
    for r in &rows {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn viz_cmd<T: Scalar>(cfg: &Config, args: &Common) -> Result<()> {
    let ckpt = require_checkpoint(args)?;
    let models = ModelBundle::<T>::from_checkpoint(cfg, cfg.seed, &ckpt)?;
    let samples = load_samples(cfg)?;
    let (_, test) = split_holdout(&samples, cfg.data.holdout_fraction);
    let chosen = &test[..cfg.viz.count.min(test.len())];
    let fields = models.mask_fields(chosen, cfg.mask.generator)?;
    let grid = cfg.model.grid();
    for (i, field) in fields.iter().enumerate() {
        let path = args.out.join(format!("mask_{i:03}.pgm"));
        write_pgm(&path, &visualize_mask(field), grid, grid, 8)?;
    }
    println!("wrote {} mask grids to {}", fields.len(), args.out.display());
    Ok(())
}

fn gradcheck_cmd(cfg: &Config, args: &Common) -> Result<bool> {
    let report = run_gradcheck(&cfg.gradcheck)?;
    let text = report.render();
    print!("{text}");
    std::fs::write(args.out.join("gradcheck.txt"), &text)?;
    Ok(report.all_passed())
}

fn gen_data_cmd(cfg: &Config, args: &Common) -> Result<()> {
    let samples = generate_dataset(cfg.data.samples, cfg.data.seed, cfg.data.noise_level)?;
    let path = args.out.join("dataset.amds");
    write_dataset(&path, &samples)?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn dispatch<T: Scalar>(command: &Command, cfg: &Config) -> Result<bool> {
    let args = command.common();
    match command {
        Command::Pretrain(_) => pretrain_cmd::<T>(cfg, args)?,
        Command::Probe(_) => probe_cmd::<T>(cfg, args)?,
        Command::SweepBeta(_) => sweep_cmd::<T>(cfg, args)?,
        Command::VizMasks(_) => viz_cmd::<T>(cfg, args)?,
        Command::Gradcheck(_) => return gradcheck_cmd(cfg, args),
        Command::GenData(_) => gen_data_cmd(cfg, args)?,
    }
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    let args = cli.command.common();
    let cfg = resolve_config(args)?;
    write_manifest(cli.command.name(), &cfg, &args.out)?;
    match cfg.train.precision {
        Precision::F64 => dispatch::<f64>(&cli.command, &cfg),
        Precision::F32 => dispatch::<f32>(&cli.command, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient checks failed");
            ExitCode::from(1)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
