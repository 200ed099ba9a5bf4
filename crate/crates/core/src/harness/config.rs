use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agc::{ClipConfig, ClipMode};
use crate::arch::{build_nfresnet, build_variant, ArchConfig, StemConv, VARIANTS};
use crate::error::{Error, Result};
use crate::gains::Activation;
use crate::nfblock::BlockToggles;
use crate::tensor::Precision;

use super::data::DatasetName;

/// The λ grid used by default in sweeps.
pub const LAMBDA_GRID: [f64; 5] = [0.01, 0.02, 0.04, 0.08, 0.16];
pub const SWEEP_BATCHES: [usize; 3] = [64, 256, 1024];
pub const DESK_ARCH: &str = "nfresnet-cifar-26";
/// Recorded for future work; RandAugment itself is not implemented.
pub const RANDAUGMENT_MAGNITUDES: [usize; 7] = [5, 10, 10, 15, 15, 15, 15];

/// Architecture presets accepted by name in [`TrainConfig::arch`].
pub fn arch_preset(name: &str) -> Option<ArchConfig> {
    if VARIANTS.contains(&name) {
        return build_variant(name).ok();
    }
    if let Some(depth) = name.strip_prefix("nfresnet-") {
        return build_nfresnet(depth).ok();
    }
    (name == "desk-tiny").then(desk_tiny)
}

/// A two-stage NF-ResNet small enough for seconds-long smoke runs on 32×32 inputs.
pub fn desk_tiny() -> ArchConfig {
    ArchConfig {
        name: "desk-tiny".into(),
        in_channels: 3,
        num_classes: 10,
        stem: vec![StemConv::new(3, 2, 16)],
        stem_pool: false,
        stage_depths: vec![1, 1],
        stage_widths: vec![32, 64],
        group_width: None,
        bottleneck_ratio: 0.5,
        second_conv: false,
        alpha: 0.2,
        se_ratio: 0.0,
        dropout_rate: 0.0,
        stochastic_depth_rate: 0.0,
        train_res: 32,
        test_res: 32,
        expansion_multiplier: 0,
        classifier_init_std: 0.01,
        activation: Activation::Relu,
        toggles: BlockToggles::nf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub name: DatasetName,
    pub dir: PathBuf,
    /// Keep only the first `n` training examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            name: DatasetName::Cifar10,
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            train_subset: None,
            test_subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Pad-4 random crop plus horizontal flip.
    pub crop_flip: bool,
    pub crop_pad: usize,
    pub mixup_cutmix: bool,
    pub mix_alpha: f64,
    pub label_smoothing: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_flip: true,
            crop_pad: 4,
            mixup_cutmix: false,
            mix_alpha: 0.2,
            label_smoothing: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Peak learning rate per 256 examples; the peak grows linearly with batch size.
    pub base_lr_per_256: f64,
    /// Multiplies the peak learning rate (stability experiments use 4).
    pub lr_scale: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sam_rho: f64,
    pub sam_fraction: f64,
    pub ema: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr_per_256: 0.1,
            lr_scale: 1.0,
            warmup_epochs: 5.0,
            momentum: 0.9,
            weight_decay: 2e-5,
            sam_rho: 0.0,
            sam_fraction: 0.2,
            ema: true,
        }
    }
}

/// How repeated runs of one setting are reduced to a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Mean holdout accuracy over all runs, diverged runs counting as 0.
    Mean,
    /// Mean over the best `k` runs.
    BestOf(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub lambdas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub runs: usize,
    pub aggregate: Aggregate,
    /// Run cells on the rayon pool.
    pub parallel: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            lambdas: LAMBDA_GRID.to_vec(),
            batch_sizes: SWEEP_BATCHES.to_vec(),
            runs: 1,
            aggregate: Aggregate::Mean,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    /// Toggle sets such as `bn`, `skipinit-only`, `2,4` or `1,2,3,4`.
    pub rows: Vec<String>,
    pub runs: usize,
    /// Regularization given to rows without batch norm.
    pub dropout_without_bn: f64,
    pub stochastic_depth_without_bn: f64,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            rows: ["bn", "skipinit-only", "2,4", "1,2,3", "1,2,4", "1,2,3,4"]
                .map(String::from)
                .to_vec(),
            runs: 1,
            dropout_without_bn: 0.25,
            stochastic_depth_without_bn: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name (`F0`, `nfresnet-cifar-26`, `desk-tiny`, ...) or path to an architecture file.
    pub arch: String,
    /// Replaces the architecture's block toggles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toggles: Option<BlockToggles>,
    pub dataset: DataConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps; the schedule is compressed to fit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
    pub clip: ClipConfig,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub log_every: usize,
    pub eval_batch_size: usize,
    /// When false the `wallclock_s` column is written as 0 so logs are reproducible.
    pub record_wallclock: bool,
    pub write_checkpoints: bool,
    pub output_dir: PathBuf,
    pub sweep: SweepSettings,
    pub ablate: AblateSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: DESK_ARCH.into(),
            toggles: None,
            dataset: DataConfig::default(),
            batch_size: 128,
            epochs: 50,
            max_steps: None,
            seed: 0,
            precision: Precision::F32,
            clip: ClipConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: OptimizerConfig::default(),
            log_every: 50,
            eval_batch_size: 500,
            record_wallclock: true,
            write_checkpoints: true,
            output_dir: PathBuf::from("runs/default"),
            sweep: SweepSettings::default(),
            ablate: AblateSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1");
        }
        if self.clip.mode != ClipMode::None && !(self.clip.lambda > 0.0) {
            return bad("clipping lambda must be positive");
        }
        if !(self.clip.eps > 0.0) {
            return bad("clipping eps must be positive");
        }
        if !(0.0..1.0).contains(&self.augment.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if self.augment.mixup_cutmix && !(self.augment.mix_alpha > 0.0) {
            return bad("mix_alpha must be positive");
        }
        let o = &self.optimizer;
        if !(o.base_lr_per_256 >= 0.0 && o.lr_scale > 0.0 && o.warmup_epochs >= 0.0) {
            return bad("learning-rate settings must be non-negative");
        }
        if !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 || o.sam_rho < 0.0 {
            return bad("momentum must be in [0, 1); weight_decay and sam_rho non-negative");
        }
        if !(o.sam_fraction > 0.0 && o.sam_fraction <= 1.0) {
            return bad("sam_fraction must be in (0, 1]");
        }
        if self.log_every == 0 || self.eval_batch_size == 0 {
            return bad("log_every and eval_batch_size must be at least 1");
        }
        if self.sweep.runs == 0 || self.ablate.runs == 0 {
            return bad("run counts must be at least 1");
        }
        if let Aggregate::BestOf(k) = self.sweep.aggregate {
            if k == 0 || k > self.sweep.runs {
                return bad("best_of must be between 1 and the run count");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// The architecture named by `arch`, with the toggle override applied.
    pub fn resolve_arch(&self) -> Result<ArchConfig> {
        let mut a = match arch_preset(&self.arch) {
            Some(a) => a,
            None => {
                let p = Path::new(&self.arch);
                if !p.is_file() {
                    return Err(Error::Config(format!("unknown architecture `{}`", self.arch)));
                }
                ArchConfig::load(p)?
            }
        };
        if let Some(t) = self.toggles {
            a.toggles = t;
        }
        a.validate()?;
        Ok(a)
    }
}
