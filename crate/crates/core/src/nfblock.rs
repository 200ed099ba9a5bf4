//! Normalizer-free residual blocks `h + α·s·f(h/β)`.
//!
//! Transition blocks (first block of a stage) tap their shortcut after the
//! β downscale and nonlinearity, average-pool it when striding, and reset the
//! expected variance to `1 + α²`. Non-transition blocks use `h` itself as the
//! shortcut. The residual branch is a pre-activation bottleneck
//! `1×1 → 3×3 (grouped, strided) → [3×3 grouped] → 1×1 → SE`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gains::{Activation, NonlinearityGain};
use crate::tensor::{
    BatchNormMode, Conv2dSpec, Padding, ParamFlags, ParamId, ParamStore, Parameter, PoolMode, Real, RunningStats, Tape,
    Tensor, Var,
};
use crate::wsconv::{ws_forward, WSLayer};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Block modifications that can be switched independently for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockToggles {
    /// (1) divide the block input by β.
    pub beta_downscale: bool,
    /// (2) scaled weight standardization plus γ-scaled activations.
    pub scaled_ws: bool,
    /// (3) multiply the branch output by α.
    pub alpha_scale: bool,
    /// (4) zero-initialized learnable scalar on the branch.
    pub skipinit: bool,
    /// Batch normalization before every activation (baseline only).
    pub batch_norm: bool,
}

impl BlockToggles {
    pub fn nf() -> Self {
        Self {
            beta_downscale: true,
            scaled_ws: true,
            alpha_scale: true,
            skipinit: true,
            batch_norm: false,
        }
    }

    pub fn batch_norm_baseline() -> Self {
        Self {
            beta_downscale: false,
            scaled_ws: false,
            alpha_scale: false,
            skipinit: false,
            batch_norm: true,
        }
    }

    pub fn skipinit_only() -> Self {
        Self {
            skipinit: true,
            ..Self::plain()
        }
    }

    /// Plain unnormalized pre-activation residual block.
    pub fn plain() -> Self {
        Self {
            beta_downscale: false,
            scaled_ws: false,
            alpha_scale: false,
            skipinit: false,
            batch_norm: false,
        }
    }

    /// Parse a comma list such as `1,2,3,4`, `bn` or `skipinit-only`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "bn" => return Ok(Self::batch_norm_baseline()),
            "skipinit-only" => return Ok(Self::skipinit_only()),
            "none" | "" => return Ok(Self::plain()),
            _ => {}
        }
        let mut t = Self::plain();
        for part in s.split(['+', ',']) {
            match part.trim() {
                "1" => t.beta_downscale = true,
                "2" => t.scaled_ws = true,
                "3" => t.alpha_scale = true,
                "4" => t.skipinit = true,
                "bn" => t.batch_norm = true,
                other => return Err(Error::Config(format!("unknown block toggle `{other}`"))),
            }
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.beta_downscale {
            parts.push("1");
        }
        if self.scaled_ws {
            parts.push("2");
        }
        if self.alpha_scale {
            parts.push("3");
        }
        if self.skipinit {
            parts.push("4");
        }
        if self.batch_norm {
            parts.push("bn");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub transition: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Bottleneck width of the branch.
    pub mid_channels: usize,
    pub stride: usize,
    pub alpha: f64,
    pub beta: f64,
    pub group_width: usize,
    /// Second grouped 3×3 conv in the bottleneck.
    pub second_conv: bool,
    /// SE hidden width is `int(out_channels · se_ratio)`; 0 disables SE.
    pub se_ratio: f64,
    pub activation: Activation,
    pub toggles: BlockToggles,
    pub stochastic_depth_rate: f64,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta >= 1.0) {
            return bad(format!("beta {} < 1", self.beta));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha {} < 0", self.alpha));
        }
        if self.group_width == 0 || !self.mid_channels.is_multiple_of(self.group_width) {
            return bad(format!(
                "group width {} does not divide {} bottleneck channels",
                self.group_width, self.mid_channels
            ));
        }
        if self.stride == 0 || self.stride > 2 {
            return bad(format!("stride {} unsupported", self.stride));
        }
        if !self.transition && (self.in_channels != self.out_channels || self.stride != 1) {
            return bad(format!(
                "non-transition block must keep shape: {}->{} stride {}",
                self.in_channels, self.out_channels, self.stride
            ));
        }
        if !(0.0..=1.0).contains(&self.stochastic_depth_rate) {
            return bad(format!("stochastic depth rate {}", self.stochastic_depth_rate));
        }
        if !(self.se_ratio >= 0.0) {
            return bad(format!("se ratio {}", self.se_ratio));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        self.mid_channels / self.group_width
    }

    pub fn se_hidden(&self) -> usize {
        (self.out_channels as f64 * self.se_ratio) as usize
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.toggles.alpha_scale {
            self.alpha
        } else {
            1.0
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.toggles.beta_downscale {
            self.beta
        } else {
            1.0
        }
    }

    pub fn nonlinearity(&self) -> NonlinearityGain {
        if self.toggles.scaled_ws {
            NonlinearityGain::new(self.activation)
        } else {
            NonlinearityGain {
                kind: self.activation,
                gamma: 1.0,
            }
        }
    }
}

/// Analytic variance ledger: `Var(x₀) = 1`, non-transition blocks add α²,
/// transition blocks reset to `1 + α²`, and `βℓ = √Var` before block ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceState {
    pub expected_var: f64,
    pub betas: Vec<f64>,
}

impl Default for VarianceState {
    fn default() -> Self {
        Self::new()
    }
}

impl VarianceState {
    pub fn new() -> Self {
        Self {
            expected_var: 1.0,
            betas: Vec::new(),
        }
    }

    /// Record one block and return its β.
    pub fn push_block(&mut self, transition: bool, alpha: f64) -> f64 {
        let beta = self.expected_var.sqrt();
        self.betas.push(beta);
        self.expected_var = if transition {
            1.0 + alpha * alpha
        } else {
            self.expected_var + alpha * alpha
        };
        beta
    }
}

/// β for every block of a network whose stages start with a transition block.
pub fn variance_schedule(stage_depths: &[usize], alpha: f64) -> Result<VarianceState> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha {alpha} < 0")));
    }
    if stage_depths.contains(&0) {
        return Err(Error::Config("stage depths must be >= 1".into()));
    }
    let mut state = VarianceState::new();
    for &depth in stage_depths {
        for i in 0..depth {
            state.push_block(i == 0, alpha);
        }
    }
    Ok(state)
}

/// Plain dense layer (no standardization).
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        nin: usize,
        nout: usize,
        init_std: f64,
        flags: ParamFlags,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(Parameter::new(
            format!("{name}.weight"),
            Tensor::randn(&[nout, nin], init_std, rng),
            flags,
        ));
        let bias = bias.then(|| {
            store.add(Parameter::new(
                format!("{name}.bias"),
                Tensor::zeros(&[nout]),
                ParamFlags::gain_or_bias(),
            ))
        });
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub fc1: Dense,
    pub fc2: Dense,
    pub act: NonlinearityGain,
}

impl SqueezeExcite {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        act: NonlinearityGain,
        rng: &mut R,
    ) -> Self {
        let lecun = |n: usize| (1.0 / n as f64).sqrt();
        let fc1 = Dense::new(
            store,
            &format!("{name}.fc1"),
            channels,
            hidden,
            lecun(channels),
            ParamFlags::weight(),
            true,
            rng,
        );
        let fc2 = Dense::new(
            store,
            &format!("{name}.fc2"),
            hidden,
            channels,
            lecun(hidden),
            ParamFlags::weight(),
            true,
            rng,
        );
        Self { fc1, fc2, act }
    }
}

/// `2σ(FC(act(FC(pool h)))) · h`, a per-channel multiplier in (0, 2).
pub fn se_forward<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, se: &SqueezeExcite, h: Var) -> Result<Var> {
    let pooled = tape.pool2d(h, PoolMode::GlobalAvg)?;
    let z = se.fc1.forward(tape, store, pooled)?;
    let z = se.act.apply(tape, z)?;
    let z = se.fc2.forward(tape, store, z)?;
    let s = tape.sigmoid(z)?;
    let s = tape.scale(s, T::lit(2.0))?;
    tape.mul_outer(h, s)
}

/// Per-sample branch drop: with probability `rate` a sample's branch is
/// zeroed, otherwise scaled by `1/(1 − rate)`. Identity in eval mode.
pub fn stochastic_depth<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("stochastic depth rate {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let batch = tape.shape(x)[0];
    let keep = 1.0 - rate;
    let mask: Vec<T> = (0..batch)
        .map(|_| {
            if keep > 0.0 && rng.random::<f64>() < keep {
                T::lit(1.0 / keep)
            } else {
                T::zero()
            }
        })
        .collect();
    let m = tape.constant(Tensor::new(&[batch], mask)?);
    tape.mul_outer(x, m)
}

/// Inverted dropout. Identity in eval mode.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} must be in [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let scale = T::lit(1.0 / keep);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let m = tape.constant(Tensor::new(&shape, mask)?);
    tape.mul(x, m)
}

/// Affine batch normalization with its running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RunningStats,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(Parameter::new(
            format!("{name}.gamma"),
            Tensor::ones(&[channels]),
            ParamFlags::gain_or_bias(),
        ));
        let beta = store.add(Parameter::new(
            format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            ParamFlags::gain_or_bias(),
        ));
        Self {
            gamma,
            beta,
            running: RunningStats::new(channels),
        }
    }

    pub fn forward<T: Real>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        };
        tape.batch_norm(x, g, b, bn_mode, &mut self.running, T::lit(BN_EPS))
    }
}

#[derive(Debug, Clone)]
pub struct NFBlock {
    pub spec: BlockSpec,
    pub conv0: WSLayer,
    pub conv1: WSLayer,
    pub conv1b: Option<WSLayer>,
    pub conv2: WSLayer,
    pub shortcut: Option<WSLayer>,
    pub se: Option<SqueezeExcite>,
    pub skip_gain: Option<ParamId>,
    /// One per activation in the block when the BN toggle is on.
    pub norms: Vec<BatchNorm>,
}

impl NFBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        spec: BlockSpec,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let ws = spec.toggles.scaled_ws;
        let (cin, mid, cout) = (spec.in_channels, spec.mid_channels, spec.out_channels);
        let pw = Conv2dSpec::new(1, Padding::Explicit(0), 1);
        // convs that feed batch normalization carry no gain or bias
        let affine = !spec.toggles.batch_norm;
        let conv0 = WSLayer::conv_with_affine(store, &format!("{name}.conv0"), cin, mid, 1, pw, ws, affine, rng)?;
        let grouped = |stride| Conv2dSpec::new(stride, Padding::Same, spec.groups());
        let conv1 = WSLayer::conv_with_affine(
            store,
            &format!("{name}.conv1"),
            mid,
            mid,
            3,
            grouped(spec.stride),
            ws,
            affine,
            rng,
        )?;
        let conv1b = if spec.second_conv {
            Some(WSLayer::conv_with_affine(
                store,
                &format!("{name}.conv1b"),
                mid,
                mid,
                3,
                grouped(1),
                ws,
                affine,
                rng,
            )?)
        } else {
            None
        };
        let conv2 = WSLayer::conv(store, &format!("{name}.conv2"), mid, cout, 1, pw, ws, rng)?;
        let shortcut = if spec.transition {
            Some(WSLayer::conv(
                store,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                pw,
                ws,
                rng,
            )?)
        } else {
            None
        };
        let hidden = spec.se_hidden();
        let se = (spec.se_ratio > 0.0 && hidden > 0)
            .then(|| SqueezeExcite::new(store, &format!("{name}.se"), cout, hidden, spec.nonlinearity(), rng));
        let skip_gain = spec.toggles.skipinit.then(|| {
            store.add(Parameter::new(
                format!("{name}.skip_gain"),
                Tensor::zeros(&[]),
                ParamFlags::gain_or_bias(),
            ))
        });
        let mut norms = Vec::new();
        if spec.toggles.batch_norm {
            norms.push(BatchNorm::new(store, &format!("{name}.bn0"), cin));
            let inner = if spec.second_conv { 3 } else { 2 };
            for i in 1..=inner {
                norms.push(BatchNorm::new(store, &format!("{name}.bn{i}"), mid));
            }
        }
        Ok(Self {
            spec,
            conv0,
            conv1,
            conv1b,
            conv2,
            shortcut,
            se,
            skip_gain,
            norms,
        })
    }

    fn norm_act<T: Real>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        index: usize,
        mode: Mode,
    ) -> Result<Var> {
        let x = match self.norms.get_mut(index) {
            Some(bn) => bn.forward(tape, store, x, mode)?,
            None => x,
        };
        self.spec.nonlinearity().apply(tape, x)
    }

    pub fn forward<T: Real, R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let expected = [self.spec.in_channels];
        if tape.shape(h).get(1..2) != Some(&expected[..]) {
            return Err(Error::Shape {
                op: "nf_block",
                detail: format!("input {:?}, block expects {} channels", tape.shape(h), expected[0]),
            });
        }
        let beta = self.spec.effective_beta();
        let x = if beta != 1.0 {
            tape.scale(h, T::lit(1.0 / beta))?
        } else {
            h
        };
        let out = self.norm_act(tape, store, x, 0, mode)?;

        let skip = match &self.shortcut {
            Some(layer) => {
                let s = if self.spec.stride == 2 {
                    tape.pool2d(out, PoolMode::Avg2x2s2)?
                } else {
                    out
                };
                ws_forward(tape, store, layer, s)?
            }
            None => h,
        };

        let mut y = ws_forward(tape, store, &self.conv0, out)?;
        y = self.norm_act(tape, store, y, 1, mode)?;
        y = ws_forward(tape, store, &self.conv1, y)?;
        y = self.norm_act(tape, store, y, 2, mode)?;
        if let Some(layer) = self.conv1b.clone() {
            y = ws_forward(tape, store, &layer, y)?;
            y = self.norm_act(tape, store, y, 3, mode)?;
        }
        y = ws_forward(tape, store, &self.conv2, y)?;
        if let Some(se) = &self.se {
            y = se_forward(tape, store, se, y)?;
        }
        if let Some(g) = self.skip_gain {
            let s = tape.param(store, g);
            y = tape.mul_outer(y, s)?;
        }
        y = stochastic_depth(tape, y, self.spec.stochastic_depth_rate, mode, rng)?;
        let alpha = self.spec.effective_alpha();
        if alpha != 1.0 {
            y = tape.scale(y, T::lit(alpha))?;
        }
        if tape.shape(y) != tape.shape(skip) {
            return Err(Error::Shape {
                op: "nf_block",
                detail: format!("branch {:?} vs shortcut {:?}", tape.shape(y), tape.shape(skip)),
            });
        }
        tape.add(skip, y)
    }
}

/// Free-function form of [`NFBlock::forward`].
pub fn nf_block_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &mut NFBlock,
    h: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    block.forward(tape, store, h, mode, rng)
}
