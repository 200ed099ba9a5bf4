//! Network configurations (the NFNet family and NF-ResNets), model
//! construction, and structural parameter / multiply-accumulate counting.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gains::{Activation, NonlinearityGain};
use crate::nfblock::{dropout, variance_schedule, BatchNorm, BlockSpec, BlockToggles, Dense, Mode, NFBlock};
use crate::tensor::{Conv2dSpec, Padding, ParamFlags, ParamStore, PoolMode, Real, Tape, Var};
use crate::wsconv::{ws_forward, WSLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConv {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl StemConv {
    pub const fn new(kernel: usize, stride: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride,
            channels,
        }
    }
}

pub const NFNET_STEM: [StemConv; 4] = [
    StemConv::new(3, 2, 16),
    StemConv::new(3, 1, 32),
    StemConv::new(3, 1, 64),
    StemConv::new(3, 2, 128),
];
pub const NFNET_WIDTHS: [usize; 4] = [256, 512, 1536, 1536];
pub const NFNET_PLUS_WIDTHS: [usize; 4] = [384, 768, 2048, 2048];
pub const NFNET_BASE_DEPTHS: [usize; 4] = [1, 2, 6, 3];

/// Names accepted by [`build_variant`].
pub const VARIANTS: [&str; 8] = ["F0", "F1", "F2", "F3", "F4", "F5", "F6", "F4+"];

/// Full description of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem: Vec<StemConv>,
    /// 3×3 stride-2 max pool after the stem.
    #[serde(default)]
    pub stem_pool: bool,
    pub stage_depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    /// Target channels per group in the 3×3 convs; absent means ungrouped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_width: Option<usize>,
    pub bottleneck_ratio: f64,
    pub second_conv: bool,
    pub alpha: f64,
    pub se_ratio: f64,
    pub dropout_rate: f64,
    /// Rate of the deepest block; earlier blocks scale linearly with depth.
    pub stochastic_depth_rate: f64,
    pub train_res: usize,
    pub test_res: usize,
    /// Final 1×1 conv widens to `multiplier × last width`; 0 omits it.
    pub expansion_multiplier: usize,
    pub classifier_init_std: f64,
    pub activation: Activation,
    pub toggles: BlockToggles,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.name)));
        if self.stage_depths.is_empty() || self.stage_depths.len() != self.stage_widths.len() {
            return bad(format!(
                "{} stage depths vs {} stage widths",
                self.stage_depths.len(),
                self.stage_widths.len()
            ));
        }
        if self.stage_depths.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("input channels and classes must be positive".into());
        }
        if self
            .stem
            .iter()
            .any(|s| s.kernel == 0 || s.stride == 0 || s.channels == 0)
        {
            return bad("stem convs need positive kernel, stride and channels".into());
        }
        if self.group_width == Some(0) {
            return bad("group width must be positive".into());
        }
        for &w in &self.stage_widths {
            let mid = self.mid_channels(w);
            if mid == 0 || !mid.is_multiple_of(self.groups(mid)) {
                return bad(format!(
                    "width {w}: bottleneck {mid} not divisible into {} groups",
                    self.groups(mid)
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..=1.0).contains(&self.stochastic_depth_rate) {
            return bad("drop rates out of range".into());
        }
        if !(self.alpha >= 0.0 && self.se_ratio >= 0.0 && self.bottleneck_ratio > 0.0) {
            return bad("alpha, se ratio and bottleneck ratio must be non-negative".into());
        }
        Ok(())
    }

    pub fn mid_channels(&self, width: usize) -> usize {
        (width as f64 * self.bottleneck_ratio) as usize
    }

    /// Group count of a bottleneck, `⌊mid / group_width⌋` and at least one, so a
    /// bottleneck narrower than two groups falls back to a single group.
    pub fn groups(&self, mid: usize) -> usize {
        match self.group_width {
            Some(gw) if gw > 0 => (mid / gw).max(1),
            _ => 1,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }

    pub fn stem_channels(&self) -> usize {
        self.stem.last().map_or(self.in_channels, |s| s.channels)
    }

    pub fn final_channels(&self) -> usize {
        let last = *self.stage_widths.last().unwrap_or(&self.stem_channels());
        if self.expansion_multiplier > 0 {
            last * self.expansion_multiplier
        } else {
            last
        }
    }

    /// Per-block specs with the β schedule and stochastic depth rates filled in.
    pub fn block_specs(&self) -> Result<Vec<BlockSpec>> {
        self.validate()?;
        let sched = variance_schedule(&self.stage_depths, self.alpha)?;
        let total = self.total_blocks();
        let mut specs = Vec::with_capacity(total);
        let mut cin = self.stem_channels();
        let mut k = 0;
        for (stage, (&depth, &width)) in self.stage_depths.iter().zip(&self.stage_widths).enumerate() {
            let mid = self.mid_channels(width);
            for i in 0..depth {
                let transition = i == 0;
                specs.push(BlockSpec {
                    transition,
                    in_channels: cin,
                    out_channels: width,
                    mid_channels: mid,
                    stride: if transition && stage > 0 { 2 } else { 1 },
                    alpha: self.alpha,
                    beta: sched.betas[k],
                    group_width: mid / self.groups(mid),
                    second_conv: self.second_conv,
                    se_ratio: self.se_ratio,
                    activation: self.activation,
                    toggles: self.toggles,
                    stochastic_depth_rate: self.stochastic_depth_rate * k as f64 / total as f64,
                });
                cin = width;
                k += 1;
            }
        }
        Ok(specs)
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
}

fn nfnet_config(name: &str, n: usize, widths: [usize; 4], dropout: f64, train: usize, test: usize) -> ArchConfig {
    ArchConfig {
        name: name.to_string(),
        in_channels: 3,
        num_classes: 1000,
        stem: NFNET_STEM.to_vec(),
        stem_pool: false,
        stage_depths: NFNET_BASE_DEPTHS.iter().map(|d| d * n).collect(),
        stage_widths: widths.to_vec(),
        group_width: Some(128),
        bottleneck_ratio: 0.5,
        second_conv: true,
        alpha: 0.2,
        se_ratio: 0.5,
        dropout_rate: dropout,
        stochastic_depth_rate: 0.25,
        train_res: train,
        test_res: test,
        expansion_multiplier: 2,
        classifier_init_std: 0.01,
        activation: Activation::Gelu,
        toggles: BlockToggles::nf(),
    }
}

/// NFNet-F0 … F6 and the wider F4+.
pub fn build_variant(name: &str) -> Result<ArchConfig> {
    let (n, dropout, train, test) = match name.trim_end_matches('+') {
        "F0" => (1, 0.2, 192, 256),
        "F1" => (2, 0.3, 224, 320),
        "F2" => (3, 0.4, 256, 352),
        "F3" => (4, 0.4, 320, 416),
        "F4" => (5, 0.5, 384, 512),
        "F5" => (6, 0.5, 416, 544),
        "F6" => (7, 0.5, 448, 576),
        _ => return Err(Error::Config(format!("unknown variant {name:?}"))),
    };
    let widths = match name {
        "F4+" => NFNET_PLUS_WIDTHS,
        _ if name.ends_with('+') => return Err(Error::Config(format!("unknown variant {name:?}"))),
        _ => NFNET_WIDTHS,
    };
    Ok(nfnet_config(&format!("NFNet-{name}"), n, widths, dropout, train, test))
}

/// Depth specs accepted by [`build_nfresnet`].
pub const NFRESNET_SPECS: [&str; 5] = ["26", "50", "101", "152", "cifar-26"];

/// Pre-activation bottleneck NF-ResNets. `"cifar-26"` is a desk-scale model
/// for 32×32 inputs with a single 3×3 stride-1 stem conv and 10 classes.
pub fn build_nfresnet(depth_spec: &str) -> Result<ArchConfig> {
    let depths: Vec<usize> = match depth_spec {
        "26" | "cifar-26" => vec![2, 2, 2, 2],
        "50" => vec![3, 4, 6, 3],
        "101" => vec![3, 4, 23, 3],
        "152" => vec![3, 8, 36, 3],
        _ => return Err(Error::Config(format!("unsupported NF-ResNet depth {depth_spec:?}"))),
    };
    let base = ArchConfig {
        name: format!("NF-ResNet-{depth_spec}"),
        in_channels: 3,
        num_classes: 1000,
        stem: vec![StemConv::new(7, 2, 64)],
        stem_pool: true,
        stage_depths: depths,
        stage_widths: vec![256, 512, 1024, 2048],
        group_width: None,
        bottleneck_ratio: 0.25,
        second_conv: false,
        alpha: 0.2,
        se_ratio: 0.0,
        dropout_rate: 0.0,
        stochastic_depth_rate: 0.0,
        train_res: 224,
        test_res: 224,
        expansion_multiplier: 0,
        classifier_init_std: 0.01,
        activation: Activation::Relu,
        toggles: BlockToggles::nf(),
    };
    if depth_spec == "cifar-26" {
        return Ok(ArchConfig {
            name: "NF-ResNet-26-CIFAR".into(),
            num_classes: 10,
            stem: vec![StemConv::new(3, 1, 32)],
            stem_pool: false,
            stage_widths: vec![64, 128, 256, 512],
            train_res: 32,
            test_res: 32,
            ..base
        });
    }
    Ok(base)
}

/// Weights plus optional bias of a dense layer.
pub fn dense_params(nin: usize, nout: usize, bias: bool) -> usize {
    nin * nout + if bias { nout } else { 0 }
}

/// Exact number of trainable scalars, by structural traversal.
pub fn count_params(cfg: &ArchConfig) -> Result<usize> {
    let specs = cfg.block_specs()?;
    let bn = cfg.toggles.batch_norm;
    // weight + optional per-unit gain and bias
    let conv = |cin: usize, cout: usize, k: usize, groups: usize, affine: bool| {
        cout * (cin / groups) * k * k + if affine { 2 * cout } else { 0 }
    };
    let mut p = 0;
    let mut cin = cfg.in_channels;
    for (i, s) in cfg.stem.iter().enumerate() {
        let feeds_bn = bn && i + 1 < cfg.stem.len();
        p += conv(cin, s.channels, s.kernel, 1, !feeds_bn);
        if feeds_bn {
            p += 2 * s.channels;
        }
        cin = s.channels;
    }
    for s in &specs {
        let (mid, out, g) = (s.mid_channels, s.out_channels, s.groups());
        let inner_convs = if s.second_conv { 2 } else { 1 };
        p += conv(s.in_channels, mid, 1, 1, !bn);
        p += inner_convs * conv(mid, mid, 3, g, !bn);
        p += conv(mid, out, 1, 1, true);
        if s.transition {
            p += conv(s.in_channels, out, 1, 1, true);
        }
        let hid = s.se_hidden();
        if s.se_ratio > 0.0 && hid > 0 {
            p += dense_params(out, hid, true) + dense_params(hid, out, true);
        }
        if s.toggles.skipinit {
            p += 1;
        }
        if bn {
            p += 2 * s.in_channels + 2 * mid * (1 + inner_convs);
        }
        cin = out;
    }
    if cfg.expansion_multiplier > 0 {
        p += conv(cin, cfg.final_channels(), 1, 1, !bn);
    }
    if bn {
        p += 2 * cfg.final_channels();
    }
    p += dense_params(cfg.final_channels(), cfg.num_classes, true);
    Ok(p)
}

fn same_extent(h: usize, stride: usize) -> usize {
    h.div_ceil(stride)
}

/// Multiply-accumulates of one forward pass for a single square image.
/// Pooling and elementwise work are not counted.
pub fn count_flops(cfg: &ArchConfig, resolution: usize) -> Result<u64> {
    let specs = cfg.block_specs()?;
    let min_res = cfg.stem.iter().map(|s| s.stride).product::<usize>() * if cfg.stem_pool { 2 } else { 1 };
    if resolution < min_res {
        return Err(Error::Config(format!(
            "resolution {resolution} below stem minimum {min_res}"
        )));
    }
    let mut f: u64 = 0;
    let mut h = resolution;
    let mut cin = cfg.in_channels;
    let conv = |cin: usize, cout: usize, k: usize, groups: usize, out: usize| {
        (cout * out * out * (cin / groups) * k * k) as u64
    };
    for s in &cfg.stem {
        h = same_extent(h, s.stride);
        f += conv(cin, s.channels, s.kernel, 1, h);
        cin = s.channels;
    }
    if cfg.stem_pool {
        h = same_extent(h, 2);
    }
    for s in &specs {
        let (mid, out, g) = (s.mid_channels, s.out_channels, s.groups());
        let ho = same_extent(h, s.stride);
        f += conv(s.in_channels, mid, 1, 1, h);
        f += conv(mid, mid, 3, g, ho);
        if s.second_conv {
            f += conv(mid, mid, 3, g, ho);
        }
        f += conv(mid, out, 1, 1, ho);
        let hid = s.se_hidden();
        if s.se_ratio > 0.0 && hid > 0 {
            f += (2 * out * hid) as u64;
        }
        if s.transition {
            f += conv(s.in_channels, out, 1, 1, ho);
        }
        cin = out;
        h = ho;
    }
    if cfg.expansion_multiplier > 0 {
        f += conv(cin, cfg.final_channels(), 1, 1, h);
    }
    f += (cfg.final_channels() * cfg.num_classes) as u64;
    Ok(f)
}

/// An instantiated network whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ArchConfig,
    pub stem: Vec<WSLayer>,
    pub stem_norms: Vec<BatchNorm>,
    pub blocks: Vec<NFBlock>,
    pub final_conv: Option<WSLayer>,
    pub final_norm: Option<BatchNorm>,
    pub classifier: Dense,
}

/// Forward results with the input of every block and the stem output kept.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: Var,
    /// `block_inputs[ℓ]` is the input of block ℓ; the last entry is the
    /// output of the final block.
    pub block_inputs: Vec<Var>,
}

impl Network {
    pub fn new<T: Real, R: Rng + ?Sized>(config: ArchConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let specs = config.block_specs()?;
        let ws = config.toggles.scaled_ws;
        let bn = config.toggles.batch_norm;
        let mut stem = Vec::new();
        let mut stem_norms = Vec::new();
        let mut cin = config.in_channels;
        for (i, s) in config.stem.iter().enumerate() {
            let feeds_bn = bn && i + 1 < config.stem.len();
            let spec = Conv2dSpec::new(s.stride, Padding::Same, 1);
            let name = format!("stem.conv{i}");
            stem.push(WSLayer::conv_with_affine(
                store, &name, cin, s.channels, s.kernel, spec, ws, !feeds_bn, rng,
            )?);
            if feeds_bn {
                stem_norms.push(BatchNorm::new(store, &format!("stem.bn{i}"), s.channels));
            }
            cin = s.channels;
        }
        let mut blocks = Vec::with_capacity(specs.len());
        let mut per_stage = vec![0usize; config.stage_depths.len()];
        let mut stage = 0;
        for s in specs {
            if s.transition && !blocks.is_empty() {
                stage += 1;
            }
            let name = format!("stage{stage}.block{}", per_stage[stage]);
            per_stage[stage] += 1;
            cin = s.out_channels;
            blocks.push(NFBlock::new(s, store, &name, rng)?);
        }
        let final_conv = if config.expansion_multiplier > 0 {
            let spec = Conv2dSpec::new(1, Padding::Explicit(0), 1);
            let layer =
                WSLayer::conv_with_affine(store, "final_conv", cin, config.final_channels(), 1, spec, ws, !bn, rng)?;
            Some(layer)
        } else {
            None
        };
        let final_norm = bn.then(|| BatchNorm::new(store, "final_bn", config.final_channels()));
        let classifier = Dense::new(
            store,
            "classifier",
            config.final_channels(),
            config.num_classes,
            config.classifier_init_std,
            ParamFlags::classifier_weight(),
            true,
            rng,
        );
        Ok(Self {
            config,
            stem,
            stem_norms,
            blocks,
            final_conv,
            final_norm,
            classifier,
        })
    }

    pub fn nonlinearity(&self) -> NonlinearityGain {
        if self.config.toggles.scaled_ws {
            NonlinearityGain::new(self.config.activation)
        } else {
            NonlinearityGain {
                kind: self.config.activation,
                gamma: 1.0,
            }
        }
    }

    /// Stem only: a nonlinearity between convs, none after the last one.
    pub fn stem_forward<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let act = self.nonlinearity();
        let mut h = x;
        let n = self.stem.len();
        for i in 0..n {
            h = ws_forward(tape, store, &self.stem[i], h)?;
            if i + 1 < n {
                if let Some(bn) = self.stem_norms.get_mut(i) {
                    h = bn.forward(tape, store, h, mode)?;
                }
                h = act.apply(tape, h)?;
            }
        }
        if self.config.stem_pool {
            h = tape.pool2d(h, PoolMode::Max3x3s2)?;
        }
        Ok(h)
    }

    pub fn forward_trace<T: Real, R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Trace> {
        let mut h = self.stem_forward(tape, store, x, mode)?;
        let mut block_inputs = Vec::with_capacity(self.blocks.len() + 1);
        for block in &mut self.blocks {
            block_inputs.push(h);
            h = block.forward(tape, store, h, mode, rng)?;
        }
        block_inputs.push(h);
        if let Some(layer) = &self.final_conv {
            h = ws_forward(tape, store, layer, h)?;
        }
        if let Some(bn) = &mut self.final_norm {
            h = bn.forward(tape, store, h, mode)?;
        }
        h = self.nonlinearity().apply(tape, h)?;
        h = tape.pool2d(h, PoolMode::GlobalAvg)?;
        h = dropout(tape, h, self.config.dropout_rate, mode, rng)?;
        let logits = self.classifier.forward(tape, store, h)?;
        Ok(Trace { logits, block_inputs })
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        Ok(self.forward_trace(tape, store, x, mode, rng)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_names_are_rejected() {
        assert!(build_variant("F7").is_err());
        assert!(build_variant("F0+").is_err());
        assert!(build_nfresnet("34").is_err());
    }

    #[test]
    fn plus_variant_only_changes_widths() {
        let a = build_variant("F4").unwrap();
        let b = build_variant("F4+").unwrap();
        assert_eq!(b.stage_widths, NFNET_PLUS_WIDTHS.to_vec());
        assert_eq!(
            ArchConfig {
                name: a.name.clone(),
                stage_widths: a.stage_widths.clone(),
                ..b
            },
            a
        );
    }

    #[test]
    fn dense_count() {
        assert_eq!(dense_params(10, 5, true), 55);
    }

    #[test]
    fn conv_flops_hand_value() {
        // Cin=3, Cout=8, 3×3, 32×32 output
        let cfg = ArchConfig {
            name: "probe".into(),
            in_channels: 3,
            num_classes: 1,
            stem: vec![StemConv::new(3, 1, 8)],
            stem_pool: false,
            stage_depths: vec![1],
            stage_widths: vec![8],
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
        };
        let total = count_flops(&cfg, 32).unwrap();
        let block = 4 * 32 * 32 * 8 + 4 * 32 * 32 * 4 * 9 + 8 * 32 * 32 * 4 + 8 * 32 * 32 * 8;
        assert_eq!(total, 221_184 + block + 8);
    }
}
