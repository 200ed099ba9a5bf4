//! λ × batch-size sweeps and block ablations built on repeated training runs.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agc::ClipMode;
use crate::error::{Error, Result};
use crate::nfblock::BlockToggles;

use super::config::{Aggregate, TrainConfig};
use super::data::Splits;
use super::train::{load_splits, train_arch, RunSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub holdout_acc: Option<f64>,
    pub diverged: bool,
    pub final_train_loss: f64,
}

impl RunRecord {
    fn from_summary(cfg: &TrainConfig, s: &RunSummary) -> Self {
        Self {
            batch_size: cfg.batch_size,
            lambda: cfg.clip.lambda,
            seed: cfg.seed,
            holdout_acc: s.final_holdout_acc,
            diverged: s.diverged,
            final_train_loss: s.final_train_loss,
        }
    }

    fn score(&self) -> f64 {
        self.holdout_acc.unwrap_or(0.0)
    }
}

/// Reduces repeated runs to one number; diverged runs count as zero.
pub fn aggregate(runs: &[RunRecord], how: Aggregate) -> f64 {
    let mut scores: Vec<f64> = runs.iter().map(RunRecord::score).collect();
    if scores.is_empty() {
        return 0.0;
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    let k = match how {
        Aggregate::Mean => scores.len(),
        Aggregate::BestOf(k) => k.clamp(1, scores.len()),
    };
    scores[..k].iter().sum::<f64>() / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub batch_size: usize,
    pub lambda: f64,
    pub runs: Vec<RunRecord>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestLambda {
    pub batch_size: usize,
    pub lambda: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<SweepCell>,
    /// One entry per batch size, in grid order.
    pub best: Vec<BestLambda>,
    /// The best cell rerun with the next unused seed.
    pub rerun: RunRecord,
}

impl SweepSummary {
    /// Whether the best λ never grows as the batch size grows.
    pub fn best_lambda_non_increasing(&self) -> bool {
        let mut best = self.best.clone();
        best.sort_by_key(|b| b.batch_size);
        best.windows(2).all(|w| w[1].lambda <= w[0].lambda)
    }
}

fn run_dir(cfg: &TrainConfig, sub: &str) -> TrainConfig {
    TrainConfig {
        output_dir: cfg.output_dir.join(sub),
        ..cfg.clone()
    }
}

fn run_one(cfg: &TrainConfig, splits: &Splits) -> Result<RunRecord> {
    let arch = cfg.resolve_arch()?;
    let s = train_arch(cfg, arch, splits, &mut |_| {})?;
    Ok(RunRecord::from_summary(cfg, &s))
}

fn run_all(jobs: &[TrainConfig], splits: &Splits, parallel: bool) -> Result<Vec<RunRecord>> {
    if parallel {
        jobs.par_iter().map(|c| run_one(c, splits)).collect()
    } else {
        jobs.iter().map(|c| run_one(c, splits)).collect()
    }
}

pub fn sweep(cfg: &TrainConfig, lambdas: &[f64], batches: &[usize]) -> Result<SweepSummary> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    sweep_on(cfg, &splits, lambdas, batches)
}

/// Trains every (batch, λ) cell `cfg.sweep.runs` times with seeds
/// `seed, seed + 1, …`, picks the best λ per batch (ties go to the smaller λ),
/// and reruns the overall best cell once more with the next seed.
pub fn sweep_on(cfg: &TrainConfig, splits: &Splits, lambdas: &[f64], batches: &[usize]) -> Result<SweepSummary> {
    if lambdas.is_empty() || batches.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    if lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Config("sweep lambdas must be positive".into()));
    }
    if cfg.clip.mode == ClipMode::None {
        return Err(Error::Config("a λ sweep needs a clipping mode".into()));
    }
    let runs = cfg.sweep.runs as u64;
    let cell_cfg = |b: usize, l: f64, seed: u64| {
        let mut c = run_dir(cfg, &format!("sweep/b{b}_l{l}_s{seed}"));
        c.batch_size = b;
        c.clip.lambda = l;
        c.seed = seed;
        c
    };
    let mut jobs = Vec::new();
    for &b in batches {
        for &l in lambdas {
            for r in 0..runs {
                jobs.push(cell_cfg(b, l, cfg.seed + r));
            }
        }
    }
    for j in &jobs {
        j.validate()?;
    }
    let records = run_all(&jobs, splits, cfg.sweep.parallel)?;
    let cells: Vec<SweepCell> = records
        .chunks(runs as usize)
        .map(|rs| SweepCell {
            batch_size: rs[0].batch_size,
            lambda: rs[0].lambda,
            score: aggregate(rs, cfg.sweep.aggregate),
            runs: rs.to_vec(),
        })
        .collect();
    let mut best = Vec::new();
    for &b in batches {
        let top = cells
            .iter()
            .filter(|c| c.batch_size == b)
            .fold(None::<&SweepCell>, |acc, c| match acc {
                Some(a) if a.score > c.score || (a.score == c.score && a.lambda <= c.lambda) => Some(a),
                _ => Some(c),
            })
            .expect("non-empty grid");
        best.push(BestLambda {
            batch_size: b,
            lambda: top.lambda,
            score: top.score,
        });
    }
    let top = best.iter().fold(best[0], |a, &c| if c.score > a.score { c } else { a });
    let rerun = run_one(&cell_cfg(top.batch_size, top.lambda, cfg.seed + runs), splits)?;
    let summary = SweepSummary { cells, best, rerun };
    write_sweep(&summary, &cfg.output_dir)?;
    Ok(summary)
}

pub const SWEEP_RUNS_HEADER: [&str; 8] = [
    "batch_size",
    "lambda",
    "seed",
    "holdout_acc",
    "diverged",
    "final_train_loss",
    "cell_score",
    "rerun",
];
pub const SWEEP_BEST_HEADER: [&str; 3] = ["batch_size", "best_lambda", "score"];

pub fn write_sweep(summary: &SweepSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("sweep_runs.csv"))?;
    w.write_record(SWEEP_RUNS_HEADER)?;
    let rows = summary
        .cells
        .iter()
        .flat_map(|c| c.runs.iter().map(move |r| (r, c.score.to_string(), false)))
        .chain(std::iter::once((&summary.rerun, String::new(), true)));
    for (r, score, rerun) in rows {
        w.write_record([
            r.batch_size.to_string(),
            r.lambda.to_string(),
            r.seed.to_string(),
            r.holdout_acc.map_or(String::new(), |a| a.to_string()),
            r.diverged.to_string(),
            r.final_train_loss.to_string(),
            score,
            rerun.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("sweep_best.csv"))?;
    w.write_record(SWEEP_BEST_HEADER)?;
    for b in &summary.best {
        w.write_record([b.batch_size.to_string(), b.lambda.to_string(), b.score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: BlockToggles,
    pub runs: Vec<RunRecord>,
    pub diverged_runs: usize,
    /// Mean over the runs that finished; absent when every run failed.
    pub mean_holdout_acc: Option<f64>,
}

impl AblationRow {
    /// More than one run failed.
    pub fn unstable(&self) -> bool {
        self.diverged_runs > 1
    }
}

pub fn parse_rows(rows: &[String]) -> Result<Vec<BlockToggles>> {
    rows.iter().map(|r| BlockToggles::parse(r)).collect()
}

pub fn ablate(cfg: &TrainConfig, rows: &[BlockToggles]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    ablate_on(cfg, &splits, rows)
}

/// Trains every toggle set `cfg.ablate.runs` times with the same budget and
/// seeds. Rows without batch norm get the configured dropout and stochastic depth.
pub fn ablate_on(cfg: &TrainConfig, splits: &Splits, rows: &[BlockToggles]) -> Result<Vec<AblationRow>> {
    if rows.is_empty() {
        return Err(Error::Config("ablation needs at least one row".into()));
    }
    let mut out = Vec::with_capacity(rows.len());
    for t in rows {
        let mut records = Vec::new();
        for r in 0..cfg.ablate.runs as u64 {
            let mut c = run_dir(cfg, &format!("ablate/{}_s{}", t.label(), cfg.seed + r));
            c.seed = cfg.seed + r;
            c.toggles = Some(*t);
            let mut arch = c.resolve_arch()?;
            if !t.batch_norm {
                arch.dropout_rate = cfg.ablate.dropout_without_bn;
                arch.stochastic_depth_rate = cfg.ablate.stochastic_depth_without_bn;
            }
            let s = train_arch(&c, arch, splits, &mut |_| {})?;
            records.push(RunRecord::from_summary(&c, &s));
        }
        let done: Vec<f64> = records.iter().filter_map(|r| r.holdout_acc).collect();
        out.push(AblationRow {
            label: t.label(),
            toggles: *t,
            diverged_runs: records.iter().filter(|r| r.diverged).count(),
            mean_holdout_acc: (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64),
            runs: records,
        });
    }
    write_ablation(&out, &cfg.output_dir)?;
    Ok(out)
}

pub const ABLATION_HEADER: [&str; 5] = ["row", "runs", "diverged_runs", "mean_holdout_acc", "unstable"];

pub fn write_ablation(rows: &[AblationRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.runs.len().to_string(),
            r.diverged_runs.to_string(),
            r.mean_holdout_acc.map_or(String::new(), |a| a.to_string()),
            r.unstable().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
