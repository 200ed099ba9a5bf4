use std::cell::RefCell;
use std::fs;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Network};
use crate::error::{Error, Result};
use crate::nfblock::Mode;
use crate::optim::{sam_step, train_step, OptimState, Schedule, StepOptions, StepOutcome, StepPhase};
use crate::tensor::{ParamStore, Precision, Real, Tape, Tensor};

use super::augment::{crop_flip, mixup_cutmix};
use super::config::TrainConfig;
use super::data::{load_dataset, Dataset, Splits};
use super::loss::{accuracy, label_smoothed_loss, one_hot};
use super::metrics::{save_checkpoint, write_metrics, MetricsRow};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const EMA_CHECKPOINT: &str = "ema.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub diverged: bool,
    /// Optimizer steps that completed.
    pub steps: usize,
    pub final_train_loss: f64,
    /// Holdout accuracy of the final parameters; absent after divergence.
    pub final_holdout_acc: Option<f64>,
    pub ema_holdout_acc: Option<f64>,
}

impl RunSummary {
    /// Holdout accuracy with diverged runs scored as zero.
    pub fn score(&self) -> f64 {
        self.final_holdout_acc.unwrap_or(0.0)
    }
}

/// Loads the configured dataset and applies the subset limits.
pub fn load_splits(cfg: &TrainConfig) -> Result<Splits> {
    let mut s = load_dataset(cfg.dataset.name, &cfg.dataset.dir)?;
    if let Some(n) = cfg.dataset.train_subset {
        s.train.truncate(n);
    }
    if let Some(n) = cfg.dataset.test_subset {
        s.test.truncate(n);
    }
    Ok(s)
}

/// Matches input channels, classes and resolution to the dataset.
pub fn fit_arch_to_data(arch: &mut ArchConfig, data: &Dataset) -> Result<()> {
    if data.height != data.width {
        return Err(Error::Data(format!("non-square images {}×{}", data.height, data.width)));
    }
    arch.in_channels = data.channels;
    arch.num_classes = data.classes;
    arch.train_res = data.height;
    arch.test_res = data.height;
    arch.validate()
}

/// Holdout accuracy in evaluation mode.
pub fn evaluate<T: Real>(net: &mut Network, store: &ParamStore<T>, data: &Dataset, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.gather(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.cast::<T>());
        let logits = net.forward(&mut tape, store, xv, Mode::Eval, &mut rng)?;
        correct += accuracy(tape.value(logits), &labels)? * chunk.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

pub fn train(cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    train_on(cfg, &splits)
}

pub fn train_on(cfg: &TrainConfig, splits: &Splits) -> Result<RunSummary> {
    let arch = cfg.resolve_arch()?;
    train_arch(cfg, arch, splits, &mut |_| {})
}

/// Runs the training loop for an explicit architecture; `hook` sees every
/// phase of every step.
pub fn train_arch(
    cfg: &TrainConfig,
    mut arch: ArchConfig,
    splits: &Splits,
    hook: &mut dyn FnMut(StepPhase),
) -> Result<RunSummary> {
    cfg.validate()?;
    fit_arch_to_data(&mut arch, &splits.train)?;
    match cfg.precision {
        Precision::F32 => run::<f32>(cfg, arch, splits, hook),
        Precision::F64 => run::<f64>(cfg, arch, splits, hook),
    }
}

struct Batch<T> {
    images: Tensor<T>,
    targets: Tensor<T>,
    labels: Vec<u8>,
}

fn make_batch<T: Real>(cfg: &TrainConfig, data: &Dataset, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch<T>> {
    let (mut x, labels) = data.gather(idx)?;
    if cfg.augment.crop_flip {
        crop_flip(&mut x, cfg.augment.crop_pad, rng)?;
    }
    let mut targets = one_hot::<f32>(&labels, data.classes)?;
    if cfg.augment.mixup_cutmix && idx.len() >= 2 {
        let m = mixup_cutmix(&x, &targets, cfg.augment.mix_alpha, rng)?;
        x = m.images;
        targets = m.targets;
    }
    Ok(Batch {
        images: x.cast(),
        targets: targets.cast(),
        labels,
    })
}

#[allow(clippy::too_many_arguments)]
fn step<T: Real>(
    cfg: &TrainConfig,
    net: &mut Network,
    store: &mut ParamStore<T>,
    state: &mut OptimState<T>,
    opts: &StepOptions,
    lr: f64,
    batch: &Batch<T>,
    rng: &mut ChaCha8Rng,
    hook: &mut dyn FnMut(StepPhase),
) -> Result<(StepOutcome, f64)> {
    let smoothing = cfg.augment.label_smoothing;
    let b = batch.labels.len();
    if state.sam_rho > 0.0 {
        let shared = RefCell::new((net, rng, 0.0));
        let (out, _) = sam_step(
            store,
            state,
            opts,
            lr,
            b,
            cfg.optimizer.sam_fraction,
            |tape, s, range| {
                let mut g = shared.borrow_mut();
                let (net, rng, acc) = &mut *g;
                let full = range.len() == b;
                let xv = tape.constant(batch.images.slice_outer(range.clone())?);
                let logits = net.forward(tape, s, xv, Mode::Train, &mut **rng)?;
                if full {
                    *acc = accuracy(tape.value(logits), &batch.labels)?;
                }
                label_smoothed_loss(tape, logits, &batch.targets.slice_outer(range)?, smoothing)
            },
            hook,
        )?;
        let acc = shared.borrow().2;
        return Ok((out, acc));
    }
    let mut acc = 0.0;
    let out = train_step(
        store,
        state,
        opts,
        lr,
        |tape, s| {
            let xv = tape.constant(batch.images.clone());
            let logits = net.forward(tape, s, xv, Mode::Train, rng)?;
            acc = accuracy(tape.value(logits), &batch.labels)?;
            label_smoothed_loss(tape, logits, &batch.targets, smoothing)
        },
        hook,
    )?;
    Ok((out, acc))
}

fn run<T: Real>(
    cfg: &TrainConfig,
    arch: ArchConfig,
    splits: &Splits,
    hook: &mut dyn FnMut(StepPhase),
) -> Result<RunSummary> {
    let train = &splits.train;
    let b = cfg.batch_size;
    let steps_per_epoch = train.len() / b;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {b} exceeds the {} training examples",
            train.len()
        )));
    }
    let total = (cfg.epochs * steps_per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let o = &cfg.optimizer;
    let schedule = Schedule {
        base_lr_per_256: o.base_lr_per_256 * o.lr_scale,
        warmup_epochs: o.warmup_epochs,
        ..Schedule::new(b, steps_per_epoch, total)
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);

    let mut store = ParamStore::<T>::new();
    let mut net = Network::new(arch, &mut store, &mut init_rng)?;
    let mut state = OptimState::<T>::new(o.momentum, o.weight_decay);
    state.sam_rho = o.sam_rho;
    let opts = StepOptions {
        clip: cfg.clip.clone(),
        check_finite: true,
        use_ema: o.ema,
    };

    let clock = Instant::now();
    let wall = |c: &Instant| {
        if cfg.record_wallclock {
            c.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut diverged = false;
    let mut steps = 0;
    let mut last_loss = f64::NAN;
    let mut holdout = None;

    for s in 0..total {
        let epoch = s / steps_per_epoch;
        let pos = s % steps_per_epoch;
        if pos == 0 {
            order.shuffle(&mut data_rng);
        }
        let batch = make_batch::<T>(cfg, train, &order[pos * b..(pos + 1) * b], &mut data_rng)?;
        let lr = schedule.lr_at(s)?;
        match step(
            cfg,
            &mut net,
            &mut store,
            &mut state,
            &opts,
            lr,
            &batch,
            &mut noise_rng,
            hook,
        ) {
            Ok((out, acc)) => {
                steps += 1;
                last_loss = out.loss;
                let last = s + 1 == total;
                let eval = last || pos + 1 == steps_per_epoch;
                let acc_holdout = if eval {
                    Some(evaluate(&mut net, &store, &splits.test, cfg.eval_batch_size)?)
                } else {
                    None
                };
                if let Some(a) = acc_holdout {
                    holdout = Some(a);
                }
                if s % cfg.log_every == 0 || eval {
                    rows.push(MetricsRow {
                        step: s,
                        epoch,
                        lr,
                        train_loss: out.loss,
                        train_acc: acc,
                        holdout_acc: acc_holdout,
                        grad_global_norm: out.grad_norm,
                        clip_fraction: out.clip.overall_fraction(),
                        diverged: false,
                        wallclock_s: wall(&clock),
                    });
                }
            }
            Err(Error::NonFinite { .. }) => {
                diverged = true;
                rows.push(MetricsRow {
                    step: s,
                    epoch,
                    lr,
                    train_loss: f64::NAN,
                    train_acc: 0.0,
                    holdout_acc: None,
                    grad_global_norm: f64::NAN,
                    clip_fraction: 0.0,
                    diverged: true,
                    wallclock_s: wall(&clock),
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let ema_holdout_acc = match (&state.ema, diverged) {
        (Some(_), false) => Some(evaluate(
            &mut net,
            &state.ema_store(&store),
            &splits.test,
            cfg.eval_batch_size,
        )?),
        _ => None,
    };
    let summary = RunSummary {
        rows,
        diverged,
        steps,
        final_train_loss: last_loss,
        final_holdout_acc: if diverged { None } else { holdout },
        ema_holdout_acc,
    };
    write_outputs(cfg, &net, &store, &state, &summary)?;
    Ok(summary)
}

fn write_outputs<T: Real>(
    cfg: &TrainConfig,
    net: &Network,
    store: &ParamStore<T>,
    state: &OptimState<T>,
    summary: &RunSummary,
) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_metrics(&summary.rows, fs::File::create(dir.join(METRICS_FILE))?)?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    net.config.save(&dir.join("arch.toml"))?;
    if cfg.write_checkpoints {
        save_checkpoint(store, &dir.join(FINAL_CHECKPOINT))?;
        if state.ema.is_some() {
            save_checkpoint(&state.ema_store(store), &dir.join(EMA_CHECKPOINT))?;
        }
    }
    Ok(())
}
