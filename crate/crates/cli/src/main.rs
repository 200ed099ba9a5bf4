use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nfnet::agc::ClipMode;
use nfnet::arch::{count_flops, count_params};
use nfnet::harness::config::TrainConfig;
use nfnet::harness::data::{write_synthetic_cifar, DatasetName};
use nfnet::harness::experiments::parse_rows;
use nfnet::nfblock::BlockToggles;
use nfnet::signalprop::{compare_schedule, probe_config, write_csv};
use nfnet::tensor::Precision;

#[derive(Parser)]
#[command(name = "nfnet", version, about = "Normalizer-free network training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics and checkpoints.
    Train(RunArgs),
    /// Train every (batch size, λ) pair and report the best λ per batch size.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated λ grid.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',')]
        batches: Vec<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Train each block-toggle set with the same budget.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// A toggle set such as `bn`, `skipinit-only` or `1,2,3,4`; repeatable.
        #[arg(long = "row")]
        rows: Vec<String>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Compare per-block activation variance at initialization with the analytic schedule.
    Signalprop {
        #[arg(long, default_value = "nfresnet-cifar-26")]
        arch: String,
        /// Replace the block toggles, e.g. `1,2,3` to disable SkipInit.
        #[arg(long)]
        toggles: Option<String>,
        /// Per-channel input values to draw (images × positions).
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
        /// Write the per-block table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print parameter and multiply-accumulate counts.
    Count {
        #[arg(long)]
        arch: String,
        /// Defaults to the architecture's test resolution.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Write a small synthetic dataset in the CIFAR-10 binary layout.
    Synthetic {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        per_file: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the default training configuration.
    InitConfig { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipArg {
    Agc,
    AgcLayerwise,
    Global,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataArg {
    Cifar10,
    Mnist,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

/// Config file plus flag overrides shared by the training commands.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    toggles: Option<String>,
    #[arg(long, value_enum)]
    dataset: Option<DataArg>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_subset: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    clip: Option<ClipArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    sam_rho: Option<f64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(v) = &self.arch {
            c.arch = v.clone();
        }
        if let Some(v) = &self.toggles {
            c.toggles = Some(BlockToggles::parse(v)?);
        }
        if let Some(v) = self.dataset {
            c.dataset.name = match v {
                DataArg::Cifar10 => DatasetName::Cifar10,
                DataArg::Mnist => DatasetName::Mnist,
            };
        }
        if let Some(v) = &self.data_dir {
            c.dataset.dir = v.clone();
        }
        if self.train_subset.is_some() {
            c.dataset.train_subset = self.train_subset;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        if let Some(v) = self.lambda {
            c.clip.lambda = v;
        }
        if let Some(v) = self.clip {
            c.clip.mode = match v {
                ClipArg::Agc => ClipMode::Agc,
                ClipArg::AgcLayerwise => ClipMode::AgcLayerwise,
                ClipArg::Global => ClipMode::Global,
                ClipArg::None => ClipMode::None,
            };
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.lr_scale {
            c.optimizer.lr_scale = v;
        }
        if let Some(v) = self.sam_rho {
            c.optimizer.sam_rho = v;
        }
        if let Some(v) = self.precision {
            c.precision = match v {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn resolve_arch(name: &str, toggles: Option<&str>) -> Result<nfnet::arch::ArchConfig> {
    let cfg = TrainConfig {
        arch: name.to_string(),
        toggles: toggles.map(BlockToggles::parse).transpose()?,
        ..TrainConfig::default()
    };
    Ok(cfg.resolve_arch()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = nfnet::harness::train(&cfg)?;
            let fmt = |a: Option<f64>| a.map_or("n/a".to_string(), |a| format!("{:.4}", a));
            println!(
                "steps={} diverged={} final_loss={:.4} holdout_acc={} ema_holdout_acc={} output={}",
                s.steps,
                s.diverged,
                s.final_train_loss,
                fmt(s.final_holdout_acc),
                fmt(s.ema_holdout_acc),
                cfg.output_dir.display()
            );
        }
        Command::Sweep {
            run,
            lambdas,
            batches,
            runs,
        } => {
            let mut cfg = run.resolve()?;
            if let Some(r) = runs {
                cfg.sweep.runs = r;
            }
            let lambdas = if lambdas.is_empty() {
                cfg.sweep.lambdas.clone()
            } else {
                lambdas
            };
            let batches = if batches.is_empty() {
                cfg.sweep.batch_sizes.clone()
            } else {
                batches
            };
            cfg.validate()?;
            let s = nfnet::harness::sweep(&cfg, &lambdas, &batches)?;
            println!("batch_size,best_lambda,score");
            for b in &s.best {
                println!("{},{},{:.4}", b.batch_size, b.lambda, b.score);
            }
            println!(
                "rerun batch={} lambda={} seed={} holdout_acc={:?} diverged={}",
                s.rerun.batch_size, s.rerun.lambda, s.rerun.seed, s.rerun.holdout_acc, s.rerun.diverged
            );
            println!(
                "best lambda non-increasing with batch size: {}",
                s.best_lambda_non_increasing()
            );
        }
        Command::Ablate { run, rows, runs } => {
            let mut cfg = run.resolve()?;
            if let Some(r) = runs {
                cfg.ablate.runs = r;
            }
            if !rows.is_empty() {
                cfg.ablate.rows = rows;
            }
            cfg.validate()?;
            let toggles = parse_rows(&cfg.ablate.rows)?;
            let table = nfnet::harness::ablate(&cfg, &toggles)?;
            println!("row,runs,diverged_runs,mean_holdout_acc,unstable");
            for r in &table {
                let acc = r.mean_holdout_acc.map_or("--".to_string(), |a| format!("{a:.4}"));
                println!(
                    "{},{},{},{},{}",
                    r.label,
                    r.runs.len(),
                    r.diverged_runs,
                    acc,
                    r.unstable()
                );
            }
        }
        Command::Signalprop {
            arch,
            toggles,
            samples,
            seed,
            tolerance,
            csv,
        } => {
            let a = resolve_arch(&arch, toggles.as_deref())?;
            let report = probe_config(&a, samples, seed)?;
            match csv {
                Some(p) => write_csv(&report, std::fs::File::create(&p)?)?,
                None => write_csv(&report, std::io::stdout())?,
            }
            let check = compare_schedule(&report, tolerance);
            eprintln!(
                "max relative error {:.4} (block {:?}); within {tolerance}: {}",
                check.max_relative_error, check.worst_block, check.pass
            );
        }
        Command::Count { arch, resolution } => {
            let a = resolve_arch(&arch, None)?;
            let res = resolution.unwrap_or(a.test_res);
            println!(
                "{} params={} flops@{res}={}",
                a.name,
                count_params(&a)?,
                count_flops(&a, res)?
            );
        }
        Command::Synthetic {
            dir,
            per_file,
            test,
            seed,
        } => {
            if per_file == 0 || test == 0 {
                bail!("record counts must be positive");
            }
            write_synthetic_cifar(&dir, per_file, test, seed)?;
            println!(
                "wrote {} training and {test} test records to {}",
                5 * per_file,
                dir.display()
            );
        }
        Command::InitConfig { path } => {
            TrainConfig::default().save(&path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
