//! Signal propagation at initialization: unit-Gaussian inputs are pushed
//! through a fresh network and the variance entering each block is compared
//! with the analytic `β²` schedule.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Network};
use crate::error::{Error, Result};
use crate::nfblock::{variance_schedule, Mode};
use crate::tensor::{ParamStore, Tape, Tensor};

pub const MIN_SAMPLES: usize = 1000;
const CHUNK_VALUES: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockVariance {
    /// `ℓ` indexes the input of block `ℓ`; the last entry is the network body output.
    pub block_index: usize,
    pub predicted_var: f64,
    pub empirical_var: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropReport {
    pub blocks: Vec<BlockVariance>,
    pub max_relative_error: f64,
    pub sample_count: usize,
    pub seed: u64,
    /// Variance of every batch-norm output, averaged over channels (empty
    /// for normalizer-free models).
    pub batch_norm_vars: Vec<f64>,
}

/// Per-channel running moments merged across chunks.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new() -> Self {
        Self {
            n: 0.0,
            mean: Vec::new(),
            m2: Vec::new(),
        }
    }

    fn merge(&mut self, t: &Tensor<f64>) -> Result<()> {
        let (mean, var) = t.channel_moments()?;
        let nb = (t.numel() / mean.len()) as f64;
        if self.n == 0.0 {
            self.mean = mean;
            self.m2 = var.iter().map(|v| v * nb).collect();
            self.n = nb;
            return Ok(());
        }
        let n = self.n + nb;
        for c in 0..mean.len() {
            let d = mean[c] - self.mean[c];
            self.mean[c] += d * nb / n;
            self.m2[c] += var[c] * nb + d * d * self.n * nb / n;
        }
        self.n = n;
        Ok(())
    }

    /// Channel variances averaged over channels.
    fn mean_variance(&self) -> f64 {
        let c = self.m2.len() as f64;
        self.m2.iter().map(|m| m / self.n).sum::<f64>() / c
    }
}

/// Probe a freshly initialized network with unit-Gaussian inputs at its
/// training resolution. `n_samples` counts per-channel input values
/// (images × positions), since variances are taken per channel over batch and
/// space. Stochastic depth and dropout must be off; batch norm, if present,
/// uses batch statistics.
pub fn probe(net: &Network, store: &ParamStore<f64>, n_samples: usize, seed: u64) -> Result<PropReport> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::Config(format!(
            "probe needs at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    let cfg = &net.config;
    if cfg.dropout_rate != 0.0 || cfg.stochastic_depth_rate != 0.0 {
        return Err(Error::Config(
            "probe requires dropout and stochastic depth disabled".into(),
        ));
    }
    let sched = variance_schedule(&cfg.stage_depths, cfg.alpha)?;
    let mut predicted = sched.betas.iter().map(|b| b * b).collect::<Vec<_>>();
    predicted.push(sched.expected_var);

    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moments = vec![Moments::new(); predicted.len()];
    let mut bn_moments: Vec<Moments> = Vec::new();
    let res = cfg.train_res;
    let images = n_samples.div_ceil(res * res);
    let chunk = (CHUNK_VALUES / (res * res)).max(1);
    let mut done = 0;
    while done < images {
        let b = chunk.min(images - done);
        let x = Tensor::<f64>::randn(&[b, cfg.in_channels, res, res], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let trace = net.forward_trace(&mut tape, store, xv, Mode::Train, &mut rng)?;
        for (m, &v) in moments.iter_mut().zip(&trace.block_inputs) {
            m.merge(tape.value(v))?;
        }
        let bn = tape.batch_norm_outputs();
        if bn_moments.is_empty() {
            bn_moments = vec![Moments::new(); bn.len()];
        }
        for (m, v) in bn_moments.iter_mut().zip(bn) {
            m.merge(tape.value(v))?;
        }
        done += b;
    }
    let blocks: Vec<BlockVariance> = predicted
        .iter()
        .zip(&moments)
        .enumerate()
        .map(|(i, (&p, m))| {
            let e = m.mean_variance();
            BlockVariance {
                block_index: i,
                predicted_var: p,
                empirical_var: e,
                rel_error: (e - p).abs() / p,
            }
        })
        .collect();
    let max_relative_error = blocks.iter().map(|b| b.rel_error).fold(0.0, f64::max);
    Ok(PropReport {
        blocks,
        max_relative_error,
        sample_count: images * res * res,
        seed,
        batch_norm_vars: bn_moments.iter().map(Moments::mean_variance).collect(),
    })
}

/// Builds `cfg` with parameters drawn from `seed` and probes it. Dropout and
/// stochastic depth are switched off first.
pub fn probe_config(cfg: &ArchConfig, n_samples: usize, seed: u64) -> Result<PropReport> {
    let cfg = ArchConfig {
        dropout_rate: 0.0,
        stochastic_depth_rate: 0.0,
        ..cfg.clone()
    };
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    probe(&net, &store, n_samples, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleCheck {
    pub pass: bool,
    pub worst_block: Option<usize>,
    pub max_relative_error: f64,
}

/// Pass iff every block's relative error is within `tolerance`.
pub fn compare_schedule(report: &PropReport, tolerance: f64) -> ScheduleCheck {
    let worst = report.blocks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    let max = worst.map_or(0.0, |b| b.rel_error);
    ScheduleCheck {
        pass: max <= tolerance,
        worst_block: worst.map(|b| b.block_index),
        max_relative_error: max,
    }
}

pub const CSV_HEADER: [&str; 4] = ["block_index", "predicted_var", "empirical_var", "rel_error"];

pub fn write_csv<W: Write>(report: &PropReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for b in &report.blocks {
        w.write_record([
            b.block_index.to_string(),
            b.predicted_var.to_string(),
            b.empirical_var.to_string(),
            b.rel_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
