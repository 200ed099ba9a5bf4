//! One test per acceptance criterion. Each prints a single `ACn PASS|FAIL` line
//! straight to stderr so it shows up even when output capture is on.
//!
//! AC8–AC10 have two forms. The smoke tests run the real pipeline on a small
//! synthetic CIFAR-format dataset and check its contracts. The full tests are
//! `#[ignore]`d and need the CIFAR-10 binary files in `NFNET_CIFAR_DIR`:
//! `cargo test --test acceptance -- --ignored`.

use std::cell::RefCell;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use nfnet::agc::{agc_clip, clip_store, unit_norms, ClipConfig, ClipMode, DEFAULT_EPS};
use nfnet::arch::{build_nfresnet, build_variant, count_flops, count_params, ArchConfig, Network};
use nfnet::gains::{gamma_for, Activation, NonlinearityGain, GELU_GAMMA, SILU_GAMMA};
use nfnet::harness::config::{TrainConfig, LAMBDA_GRID, SWEEP_BATCHES};
use nfnet::harness::data::write_synthetic_cifar;
use nfnet::harness::experiments::{ablate_on, parse_rows, sweep_on, AblationRow};
use nfnet::harness::train::{load_splits, train_on, RunSummary};
use nfnet::nfblock::{BlockSpec, BlockToggles, Mode, NFBlock};
use nfnet::optim::{ema_decay, sam_step, sgd_nesterov_step, train_step, OptimState, Schedule, StepOptions};
use nfnet::signalprop::{compare_schedule, probe};
use nfnet::tensor::{
    grad_check, grad_check_params, BatchNormMode, Conv2dSpec, Padding, ParamFlags, ParamStore, Parameter, PoolMode,
    RunningStats, Tape, Tensor, Var,
};
use nfnet::wsconv::{standardize_weight, EPS_VAR};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Tests share one core; running them one at a time keeps the runtimes honest.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, pass: bool, elapsed: Duration, budget: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "{id} {verdict} {detail} runtime={:.2}s budget={:.0}s",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
}

fn finish(id: &str, ok: bool, t0: Instant, budget: Duration, detail: String) {
    let elapsed = t0.elapsed();
    let pass = ok && elapsed < budget;
    report(id, pass, elapsed, budget, &detail);
    assert!(ok, "{id}: {detail}");
    assert!(
        elapsed < budget,
        "{id}: {:.2}s over the {:.0}s budget",
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- AC1

#[test]
fn ac1_weight_standardization() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst_mean = 0.0f64;
    let mut worst_norm = 0.0f64;
    let mut exact = true;
    let mut invariance_draws = 0;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let units = r.random_range(1..8);
        let fan = r.random_range(2..100);
        let scale = 10f64.powf(r.random_range(-1.0..1.5));
        let shift = r.random_range(-2.0..2.0);
        let w64 = Tensor::<f64>::randn(&[units, fan], scale, &mut r).map(|v| v + shift);
        let w32 = w64.cast::<f32>();
        let s64 = standardize_weight(&w64, EPS_VAR).unwrap();
        let s32 = standardize_weight(&w32, EPS_VAR).unwrap();
        let s32: Vec<f64> = s32.data().iter().map(|&v| v as f64).collect();
        let mut min_var = f64::INFINITY;
        for (k, raw) in w64.data().chunks(fan).enumerate() {
            let m = raw.iter().sum::<f64>() / fan as f64;
            let var = raw.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / fan as f64;
            min_var = min_var.min(var);
            for row in [&s64.data()[k * fan..(k + 1) * fan], &s32[k * fan..(k + 1) * fan]] {
                worst_mean = worst_mean.max((row.iter().sum::<f64>() / fan as f64).abs());
                if var > EPS_VAR * 1.01 {
                    worst_norm = worst_norm.max((l2(row) - 1.0).abs());
                }
            }
        }
        // power-of-two rescaling is exact in floating point, so the output must be too;
        // the variance floor deliberately breaks invariance, so stay above it
        let c = 2f64.powi(r.random_range(-8..9));
        if min_var.min(min_var * c * c) > EPS_VAR {
            invariance_draws += 1;
            exact &= standardize_weight(&w64.scale(c), EPS_VAR).unwrap() == s64;
        }
    }
    let ok = worst_mean < 1e-6 && worst_norm < 1e-6 && exact && invariance_draws >= 100;
    finish(
        "AC1",
        ok,
        t0,
        Duration::from_secs(1),
        format!("max|row mean|={worst_mean:.2e} max|row norm-1|={worst_norm:.2e} scale_invariant_exact={exact} ({invariance_draws} draws)"),
    );
}

// ---------------------------------------------------------------- AC2

fn clip_rows(g: &[f64], w: &[f64], cols: usize, lambda: f64) -> Vec<f64> {
    let rows = g.len() / cols;
    let gt = Tensor::new(&[rows, cols], g.to_vec()).unwrap();
    let wt = Tensor::new(&[rows, cols], w.to_vec()).unwrap();
    agc_clip(&gt, &wt, Some(0), lambda, DEFAULT_EPS)
        .unwrap()
        .data()
        .to_vec()
}

fn clip_fraction(g: &Tensor<f64>, w: &Tensor<f64>, lambda: f64) -> f64 {
    let mut store = ParamStore::<f64>::new();
    let id = store.add(Parameter::new("conv.weight", w.clone(), ParamFlags::ws_weight()));
    store.get_mut(id).grad = g.clone();
    let cfg = ClipConfig {
        lambda,
        ..ClipConfig::default()
    };
    clip_store(&mut store, &cfg).unwrap().overall_fraction()
}

#[test]
fn ac2_adaptive_gradient_clipping() {
    let _g = serial();
    let t0 = Instant::now();
    // below threshold: ‖G‖/‖W‖ = 0.1/2 = 0.05 < 0.1
    let g = [0.06, 0.08];
    let ex1 = clip_rows(&g, &[1.2, 1.6], 2, 0.1) == g;
    // ‖W‖ = 2, ‖G‖ = 1, λ = 0.1
    let ex2 = (l2(&clip_rows(&[0.6, 0.8], &[1.2, 1.6], 2, 0.1)) - 0.2).abs();
    // zero weights fall back to the ε floor
    let ex3 = (l2(&clip_rows(&[0.6, 0.8], &[0.0, 0.0], 2, 0.01)) - 1e-5).abs();
    let norms = unit_norms(&Tensor::<f64>::new(&[1, 2], vec![3.0, 4.0]).unwrap(), Some(0)).unwrap();
    let examples = ex1 && ex2 < 1e-7 && ex3 < 1e-7 && norms == [5.0];

    let mut idem_err = 0.0f64;
    let mut monotone = true;
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let units = r.random_range(1..10);
        let fan = r.random_range(1..30);
        let w = Tensor::<f64>::randn(&[units, fan], 10f64.powf(r.random_range(-2.0..1.0)), &mut r);
        let g = Tensor::<f64>::randn(&[units, fan], 10f64.powf(r.random_range(-3.0..1.0)), &mut r);
        let lambda = 10f64.powf(r.random_range(-3.0..0.0));
        let once = agc_clip(&g, &w, Some(0), lambda, DEFAULT_EPS).unwrap();
        let twice = agc_clip(&once, &w, Some(0), lambda, DEFAULT_EPS).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            idem_err = idem_err.max((a - b).abs() / a.abs().max(1e-12));
        }
        let other = 10f64.powf(r.random_range(-3.0..0.0));
        let (lo, hi) = if lambda <= other {
            (lambda, other)
        } else {
            (other, lambda)
        };
        monotone &= clip_fraction(&g, &w, hi) <= clip_fraction(&g, &w, lo);
    }
    let ok = examples && idem_err <= 1e-7 && monotone;
    finish(
        "AC2",
        ok,
        t0,
        Duration::from_secs(10),
        format!(
            "examples_ok={examples} (|Δ|={ex2:.1e},{ex3:.1e}) idempotence_max_rel={idem_err:.1e} lambda_monotone={monotone} draws=1000"
        ),
    );
}

// ---------------------------------------------------------------- AC3

fn mc_gamma(kind: Activation, n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (mut s, mut ss) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(&mut r);
        let y = kind.eval(x);
        s += y;
        ss += y * y;
    }
    let m = s / n as f64;
    1.0 / (ss / n as f64 - m * m).sqrt()
}

#[test]
fn ac3_activation_gains() {
    let _g = serial();
    let t0 = Instant::now();
    let relu = gamma_for(Activation::Relu);
    let closed = (2.0 / (1.0 - 1.0 / std::f64::consts::PI)).sqrt();
    let relu_ok = (relu - closed).abs() < 1e-6 && (relu - 1.7129).abs() < 5e-5;
    let identity_ok = gamma_for(Activation::Identity) == 1.0;

    let mut vars = Vec::new();
    let x = Tensor::<f64>::randn(&[1_000_000], 1.0, &mut rng(7));
    for kind in Activation::ALL {
        let y = NonlinearityGain::new(kind).eval_tensor(&x);
        let m = y.mean();
        let v = y.data().iter().map(|a| (a - m) * (a - m)).sum::<f64>() / y.numel() as f64;
        vars.push((kind, v));
    }
    let vars_ok = vars.iter().all(|&(_, v)| (0.96..=1.04).contains(&v));
    let frozen: Vec<f64> = [(Activation::Gelu, GELU_GAMMA), (Activation::Silu, SILU_GAMMA)]
        .iter()
        .map(|&(k, c)| (mc_gamma(k, 10_000_000, 0) - c).abs() / c)
        .collect();
    let frozen_ok = frozen.iter().all(|&e| e < 2e-3);
    let ok = relu_ok && identity_ok && vars_ok && frozen_ok;
    let var_text: Vec<String> = vars.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    finish(
        "AC3",
        ok,
        t0,
        Duration::from_secs(60),
        format!(
            "relu_gamma={relu:.7} |Δclosed|={:.1e} variances[{}] frozen_vs_oracle_rel={:.1e},{:.1e}",
            (relu - closed).abs(),
            var_text.join(" "),
            frozen[0],
            frozen[1]
        ),
    );
}

// ---------------------------------------------------------------- AC4

const GC_SEEDS: u64 = 5;

fn project(t: &mut Tape<f64>, v: Var, seed: u64) -> nfnet::Result<Var> {
    let r = Tensor::randn(t.shape(v), 1.0, &mut rng(seed ^ 0xabcd));
    let rv = t.constant(r);
    let p = t.mul(v, rv)?;
    t.sum(p)
}

fn gc<F>(results: &mut Vec<(String, f64)>, name: &str, inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var], u64) -> nfnet::Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..GC_SEEDS {
        let x = inputs(&mut rng(seed));
        let e = grad_check(|t, v| f(t, v, seed), &x, 1e-5).unwrap();
        worst = worst.max(e);
    }
    results.push((name.to_string(), worst));
}

fn block_spec(transition: bool, toggles: BlockToggles) -> BlockSpec {
    let (cin, cout, stride) = if transition { (4, 8, 2) } else { (8, 8, 1) };
    BlockSpec {
        transition,
        in_channels: cin,
        out_channels: cout,
        mid_channels: cout / 2,
        stride,
        alpha: 0.2,
        beta: 1.2,
        group_width: 2,
        second_conv: true,
        se_ratio: 0.5,
        activation: Activation::Gelu,
        toggles,
        stochastic_depth_rate: 0.0,
    }
}

fn block_gradcheck(transition: bool, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let s = block_spec(transition, BlockToggles::nf());
    let (cin, cout, stride) = (s.in_channels, s.out_channels, s.stride);
    let block = NFBlock::new(s, &mut store, "b", &mut r).unwrap();
    // move every zero- or one-initialized parameter off its special value
    if let Some(g) = block.skip_gain {
        store.get_mut(g).value.fill(0.7);
    }
    for p in store.iter_mut() {
        let n = p.value.numel();
        if p.name.ends_with(".gain") {
            p.value = Tensor::randn(&[n], 0.3, &mut r).map(|v| 1.0 + v);
        }
        if p.name.ends_with(".bias") {
            p.value = Tensor::randn(&[n], 0.1, &mut r);
        }
    }
    let x = Tensor::<f64>::randn(&[2, cin, 4, 4], 1.0, &mut r);
    let proj = Tensor::<f64>::randn(&[2, cout, 4 / stride, 4 / stride], 1.0, &mut r);
    let loss = |t: &mut Tape<f64>, st: &ParamStore<f64>, xv: Var| {
        let mut b = block.clone();
        let y = b.forward(t, st, xv, Mode::Train, &mut rng(0))?;
        let pv = t.constant(proj.clone());
        let p = t.mul(y, pv)?;
        t.sum(p)
    };
    let frozen = store.clone();
    let wrt_input = grad_check(|t, v| loss(t, &frozen, v[0]), std::slice::from_ref(&x), 1e-5).unwrap();
    let wrt_params = grad_check_params(
        |t, st| {
            let xv = t.constant(x.clone());
            loss(t, st, xv)
        },
        &mut store,
        1e-5,
    )
    .unwrap();
    wrt_input.max(wrt_params)
}

#[test]
fn ac4_gradient_checks() {
    let _g = serial();
    let t0 = Instant::now();
    let mut res = Vec::new();
    let conv = |g: usize, pad: Padding, s: usize| Conv2dSpec::new(s, pad, g);
    gc(
        &mut res,
        "conv2d",
        |r| {
            vec![
                Tensor::randn(&[2, 3, 5, 5], 1.0, r),
                Tensor::randn(&[4, 3, 3, 3], 0.3, r),
            ]
        },
        |t, v, s| {
            let y = t.conv2d(v[0], v[1], &conv(1, Padding::Same, 1))?;
            project(t, y, s)
        },
    );
    gc(
        &mut res,
        "conv2d_grouped_strided",
        |r| {
            vec![
                Tensor::randn(&[2, 4, 6, 6], 1.0, r),
                Tensor::randn(&[4, 2, 3, 3], 0.3, r),
            ]
        },
        |t, v, s| {
            let y = t.conv2d(v[0], v[1], &conv(2, Padding::Same, 2))?;
            project(t, y, s)
        },
    );
    gc(
        &mut res,
        "conv2d_1x1",
        |r| {
            vec![
                Tensor::randn(&[3, 3, 4, 4], 1.0, r),
                Tensor::randn(&[5, 3, 1, 1], 0.5, r),
            ]
        },
        |t, v, s| {
            let y = t.conv2d(v[0], v[1], &conv(1, Padding::Explicit(0), 1))?;
            project(t, y, s)
        },
    );
    gc(
        &mut res,
        "linear",
        |r| {
            vec![
                Tensor::randn(&[3, 5], 1.0, r),
                Tensor::randn(&[4, 5], 0.5, r),
                Tensor::randn(&[4], 0.5, r),
            ]
        },
        |t, v, s| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, s)
        },
    );
    gc(
        &mut res,
        "add_sub_mul_scale",
        |r| vec![Tensor::randn(&[2, 3, 2], 1.0, r), Tensor::randn(&[2, 3, 2], 1.0, r)],
        |t, v, s| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(v[0], v[1])?;
            let c = t.mul(a, b)?;
            let d = t.scale(c, 0.7)?;
            project(t, d, s)
        },
    );
    gc(
        &mut res,
        "mul_outer",
        |r| {
            vec![
                Tensor::randn(&[2, 3, 2, 2], 1.0, r),
                Tensor::randn(&[2, 3], 1.0, r),
                Tensor::randn(&[], 1.0, r),
            ]
        },
        |t, v, s| {
            let a = t.mul_outer(v[0], v[1])?;
            let b = t.mul_outer(a, v[2])?;
            project(t, b, s)
        },
    );
    gc(
        &mut res,
        "add_channel",
        |r| vec![Tensor::randn(&[2, 3, 2, 2], 1.0, r), Tensor::randn(&[3], 1.0, r)],
        |t, v, s| {
            let y = t.add_channel(v[0], v[1])?;
            project(t, y, s)
        },
    );
    for kind in [Activation::Identity, Activation::Gelu, Activation::Silu] {
        gc(
            &mut res,
            &format!("activation_{kind}+sigmoid"),
            |r| vec![Tensor::randn(&[10], 1.5, r)],
            |t, v, s| {
                let y = t.activation(v[0], kind, gamma_for(kind))?;
                let z = t.sigmoid(y)?;
                project(t, z, s)
            },
        );
    }
    gc(
        &mut res,
        "activation_relu",
        |r| vec![Tensor::<f64>::randn(&[12], 1.0, r).map(|v| if v.abs() < 1e-3 { 0.3 } else { v })],
        |t, v, s| {
            let y = t.activation(v[0], Activation::Relu, gamma_for(Activation::Relu))?;
            project(t, y, s)
        },
    );
    for mode in [PoolMode::Avg2x2s2, PoolMode::GlobalAvg, PoolMode::Max3x3s2] {
        gc(
            &mut res,
            &format!("pool2d_{mode:?}"),
            |r| vec![Tensor::randn(&[2, 2, 4, 4], 1.0, r)],
            |t, v, s| {
                let y = t.pool2d(v[0], mode)?;
                project(t, y, s)
            },
        );
    }
    gc(
        &mut res,
        "reshape_mean_sum",
        |r| vec![Tensor::randn(&[2, 6], 1.0, r)],
        |t, v, s| {
            let y = t.reshape(v[0], &[3, 4])?;
            let sq = t.mul(y, y)?;
            let m = t.mean(sq)?;
            let p = project(t, y, s)?;
            let m3 = t.scale(m, 3.0)?;
            t.add(m3, p)
        },
    );
    for (name, scale) in [("standardize", 1.0), ("standardize_floored", 1e-4)] {
        gc(
            &mut res,
            name,
            |r| vec![Tensor::randn(&[3, 2, 2, 2], scale, r)],
            |t, v, s| {
                let y = t.standardize(v[0], EPS_VAR)?;
                project(t, y, s)
            },
        );
    }
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        gc(
            &mut res,
            &format!("batch_norm_{mode:?}"),
            |r| {
                vec![
                    Tensor::randn(&[3, 2, 2, 2], 2.0, r),
                    Tensor::randn(&[2], 1.0, r),
                    Tensor::randn(&[2], 1.0, r),
                ]
            },
            |t, v, s| {
                let mut rs = RunningStats::new(2);
                rs.mean = vec![0.3, -0.2];
                rs.var = vec![1.5, 0.7];
                let y = t.batch_norm(v[0], v[1], v[2], mode, &mut rs, 1e-5)?;
                project(t, y, s)
            },
        );
    }
    gc(
        &mut res,
        "softmax_cross_entropy",
        |r| vec![Tensor::randn(&[3, 4], 2.0, r)],
        |t, v, s| {
            let mut target = Tensor::<f64>::rand_uniform(&[3, 4], 0.0, 1.0, &mut rng(s + 1000));
            for row in target.data_mut().chunks_mut(4) {
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= z);
            }
            t.softmax_cross_entropy(v[0], &target)
        },
    );
    for transition in [false, true] {
        let worst = (0..3).map(|s| block_gradcheck(transition, s)).fold(0.0, f64::max);
        res.push((format!("nf_block_transition={transition}"), worst));
    }
    let (worst_name, worst) = res
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let failing: Vec<&str> = res
        .iter()
        .filter(|r| r.1.is_nan() || r.1 >= 1e-4)
        .map(|r| r.0.as_str())
        .collect();
    finish(
        "AC4",
        failing.is_empty(),
        t0,
        Duration::from_secs(300),
        format!(
            "checks={} max_rel_err={worst:.2e} ({worst_name}) failing={failing:?}",
            res.len()
        ),
    );
}

// ---------------------------------------------------------------- AC5

fn stack(blocks: usize, toggles: BlockToggles) -> ArchConfig {
    ArchConfig {
        name: "stack".into(),
        in_channels: 32,
        num_classes: 2,
        stem: vec![],
        stem_pool: false,
        stage_depths: vec![blocks],
        stage_widths: vec![32],
        group_width: Some(8),
        bottleneck_ratio: 0.5,
        second_conv: true,
        alpha: 0.2,
        se_ratio: 0.5,
        dropout_rate: 0.0,
        stochastic_depth_rate: 0.0,
        train_res: 32,
        test_res: 32,
        expansion_multiplier: 0,
        classifier_init_std: 0.01,
        activation: Activation::Gelu,
        toggles,
    }
}

#[test]
fn ac5_signal_propagation() {
    let _g = serial();
    let t0 = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let no_skip = BlockToggles {
        skipinit: false,
        ..BlockToggles::nf()
    };
    let net = Network::new(stack(8, no_skip), &mut store, &mut rng(1)).unwrap();
    let rep = probe(&net, &store, 100_000, 7).unwrap();
    let check = compare_schedule(&rep, 0.10);
    let schedule_ok = rep.blocks.len() == 9
        && rep
            .blocks
            .iter()
            .all(|b| (b.predicted_var - (1.0 + b.block_index as f64 * 0.04)).abs() < 1e-12)
        && check.pass;

    // with SkipInit every non-transition block returns its input bit for bit
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(stack(8, BlockToggles::nf()), &mut store, &mut rng(2)).unwrap();
    let rep_skip = probe(&net, &store, 1000, 3).unwrap();
    let probe_identity = rep_skip.blocks[1..]
        .windows(2)
        .all(|w| w[0].empirical_var == w[1].empirical_var);
    let mut block_identity = true;
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let mut st = ParamStore::<f64>::new();
        let mut spec = block_spec(false, BlockToggles::nf());
        spec.beta = r.random_range(1.0..3.0);
        let mut b = NFBlock::new(spec, &mut st, "b", &mut r).unwrap();
        let x = Tensor::randn(&[2, 8, 6, 6], r.random_range(0.1..4.0), &mut r);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = b.forward(&mut t, &st, xv, Mode::Train, &mut r).unwrap();
        block_identity &= *t.value(y) == x;
    }
    let ok = schedule_ok && probe_identity && block_identity;
    finish(
        "AC5",
        ok,
        t0,
        Duration::from_secs(120),
        format!(
            "blocks=8 samples=100000 max_rel_err={:.4} (block {:?}, tol 0.10) skipinit_identity_exact={}",
            check.max_relative_error,
            check.worst_block,
            probe_identity && block_identity
        ),
    );
}

// ---------------------------------------------------------------- AC6

const TABLE2: [(&str, [usize; 4], f64, usize, usize); 7] = [
    ("F0", [1, 2, 6, 3], 0.2, 192, 256),
    ("F1", [2, 4, 12, 6], 0.3, 224, 320),
    ("F2", [3, 6, 18, 9], 0.4, 256, 352),
    ("F3", [4, 8, 24, 12], 0.4, 320, 416),
    ("F4", [5, 10, 30, 15], 0.5, 384, 512),
    ("F5", [6, 12, 36, 18], 0.5, 416, 544),
    ("F6", [7, 14, 42, 21], 0.5, 448, 576),
];

#[test]
fn ac6_structural_counts() {
    let _g = serial();
    let t0 = Instant::now();
    let f0 = count_params(&build_variant("F0").unwrap()).unwrap();
    let f1 = count_params(&build_variant("F1").unwrap()).unwrap();
    let r50 = count_flops(&build_nfresnet("50").unwrap(), 224).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let (e0, e1, e50) = (rel(f0 as f64, 71.5e6), rel(f1 as f64, 132.6e6), rel(r50 as f64, 4.10e9));
    let mut rows_ok = true;
    for (name, depths, drop, train, test) in TABLE2 {
        let c = build_variant(name).unwrap();
        rows_ok &= c.stage_depths == depths && c.dropout_rate == drop && c.train_res == train && c.test_res == test;
    }
    let ok = e0 < 0.02 && e1 < 0.02 && e50 < 0.03 && rows_ok;
    finish(
        "AC6",
        ok,
        t0,
        Duration::from_secs(10),
        format!(
            "F0_params={f0} ({:+.2}%) F1_params={f1} ({:+.2}%) resnet50_macs@224={r50} ({:+.2}%) table2_rows_exact={rows_ok}",
            100.0 * (f0 as f64 / 71.5e6 - 1.0),
            100.0 * (f1 as f64 / 132.6e6 - 1.0),
            100.0 * (r50 as f64 / 4.10e9 - 1.0)
        ),
    );
}

// ---------------------------------------------------------------- AC7

fn toy_store(seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    s.add(Parameter::new(
        "w",
        Tensor::randn(&[3, 4], 1.0, &mut r),
        ParamFlags::ws_weight(),
    ));
    s.add(Parameter::new(
        "g",
        Tensor::randn(&[3], 1.0, &mut r),
        ParamFlags::gain_or_bias(),
    ));
    s.add(Parameter::new("skip", Tensor::zeros(&[]), ParamFlags::gain_or_bias()));
    s.add(Parameter::new(
        "cls",
        Tensor::randn(&[2, 3], 1.0, &mut r),
        ParamFlags::classifier_weight(),
    ));
    s
}

#[test]
fn ac7_schedule_ema_and_decay() {
    let _g = serial();
    let t0 = Instant::now();
    let s = Schedule::new(1024, 49, 49 * 90);
    let w = s.warmup_steps();
    let lr0 = s.lr_at(0).unwrap();
    let peak = s.lr_at(w).unwrap();
    let end = s.lr_at(s.total_steps).unwrap();
    let junction = (s.lr_at(w - 1).unwrap() + peak / w as f64 - peak).abs();
    let sched_ok = lr0 == 0.0 && peak == 0.4 && s.peak_lr() == 0.4 && end.abs() < 1e-9 && junction < 1e-9;
    let ema_ok = ema_decay(0) == 0.1 && ema_decay(10_000_000) == 0.99999 && ema_decay(u64::MAX / 2) == 0.99999;

    let mut store = toy_store(3);
    store.zero_grad();
    let before = store.clone();
    let mut st = OptimState::new(0.9, 0.5);
    for _ in 0..5 {
        sgd_nesterov_step(&mut store, &mut st, 0.3).unwrap();
    }
    let mut decay_ok = true;
    for (a, b) in store.iter().zip(before.iter()) {
        decay_ok &= if a.flags.weight_decayed {
            a.value != b.value
        } else {
            a.value == b.value
        };
    }
    finish(
        "AC7",
        sched_ok && ema_ok && decay_ok,
        t0,
        Duration::from_secs(1),
        format!(
            "lr(0)={lr0} peak@B=1024={peak} lr(end)={end:.1e} ema_decay(0)={} cap={} wd_exclusions_bit_exact={decay_ok}",
            ema_decay(0),
            ema_decay(u64::MAX / 2)
        ),
    );
}

// ---------------------------------------------------------------- AC8–AC10 shared

fn synthetic(root: &Path) -> PathBuf {
    let dir = root.join("cifar");
    write_synthetic_cifar(&dir, 500, 500, 11).unwrap();
    dir
}

fn desk_tiny(data: &Path, out: &Path) -> TrainConfig {
    let mut c = TrainConfig {
        arch: "desk-tiny".into(),
        log_every: 10,
        eval_batch_size: 250,
        output_dir: out.to_path_buf(),
        write_checkpoints: false,
        ..TrainConfig::default()
    };
    c.dataset.dir = data.to_path_buf();
    c
}

fn cifar_dir() -> PathBuf {
    match std::env::var_os("NFNET_CIFAR_DIR") {
        Some(d) => PathBuf::from(d),
        None => {
            let _ = writeln!(
                std::io::stderr(),
                "full run needs NFNET_CIFAR_DIR pointing at the CIFAR-10 binary files"
            );
            panic!("NFNET_CIFAR_DIR is not set");
        }
    }
}

fn acc(s: &RunSummary) -> String {
    s.final_holdout_acc.map_or("diverged".into(), |a| format!("{a:.4}"))
}

fn stability_verdict(agc: &RunSummary, none: &RunSummary) -> bool {
    match (agc.final_holdout_acc, none.final_holdout_acc) {
        (Some(_), None) => true,
        (Some(a), Some(n)) => n <= a - 0.05,
        _ => false,
    }
}

// ---------------------------------------------------------------- AC8

#[test]
fn ac8_stability_smoke() {
    let _g = serial();
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic(tmp.path());
    // batch 64 with its learning rate scaled 16× so the peak equals the B = 1024 peak of 0.4
    let mut cfg = desk_tiny(&data, &tmp.path().join("agc"));
    cfg.batch_size = 64;
    cfg.optimizer.lr_scale = 16.0;
    cfg.optimizer.warmup_epochs = 1.0;
    cfg.max_steps = Some(200);
    cfg.dataset.test_subset = Some(250);
    cfg.clip.mode = ClipMode::Agc;
    cfg.clip.lambda = 0.01;
    let splits = load_splits(&cfg).unwrap();
    let agc = train_on(&cfg, &splits).unwrap();
    let mut none_cfg = cfg.clone();
    none_cfg.clip.mode = ClipMode::None;
    none_cfg.output_dir = tmp.path().join("none");
    let none = train_on(&none_cfg, &splits).unwrap();

    let logged = |s: &RunSummary| !s.rows.is_empty() && (s.diverged || s.steps == 200);
    let ok = !agc.diverged && agc.steps == 200 && logged(&none) && agc.final_holdout_acc.unwrap() > 0.1;
    finish(
        "AC8",
        ok,
        t0,
        Duration::from_secs(120),
        format!(
            "smoke: 200 steps, synthetic data, peak lr 0.4; agc acc={} unclipped acc={} (unclipped ≥5pt worse or diverged: {}); full criterion: cargo test --test acceptance -- --ignored",
            acc(&agc),
            acc(&none),
            stability_verdict(&agc, &none)
        ),
    );
}

#[test]
#[ignore = "needs CIFAR-10 in NFNET_CIFAR_DIR and hours of compute"]
fn ac8_stability_full() {
    let t0 = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig {
        batch_size: 1024,
        epochs: 50,
        output_dir: out.path().join("agc"),
        ..TrainConfig::default()
    };
    cfg.dataset.dir = cifar_dir();
    cfg.clip.mode = ClipMode::Agc;
    cfg.clip.lambda = 0.01;
    let splits = load_splits(&cfg).unwrap();
    let agc = train_on(&cfg, &splits).unwrap();
    let mut none_cfg = cfg.clone();
    none_cfg.clip.mode = ClipMode::None;
    none_cfg.output_dir = out.path().join("none");
    let none = train_on(&none_cfg, &splits).unwrap();
    let reached = agc.final_holdout_acc.is_some_and(|a| a >= 0.85);
    let ok = reached && stability_verdict(&agc, &none);
    let elapsed = t0.elapsed();
    report(
        "AC8",
        ok,
        elapsed,
        Duration::from_secs(7200),
        &format!("full: agc acc={} unclipped acc={}", acc(&agc), acc(&none)),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- AC9

#[test]
fn ac9_lambda_trend_smoke() {
    let _g = serial();
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic(tmp.path());
    let mut cfg = desk_tiny(&data, &tmp.path().join("sweep"));
    cfg.dataset.train_subset = Some(1024);
    cfg.dataset.test_subset = Some(250);
    cfg.max_steps = Some(3);
    cfg.optimizer.warmup_epochs = 0.0;
    let splits = load_splits(&cfg).unwrap();
    let s = sweep_on(&cfg, &splits, &LAMBDA_GRID, &SWEEP_BATCHES).unwrap();
    let written = std::fs::read_to_string(cfg.output_dir.join("sweep_best.csv")).unwrap();
    let ok = s.cells.len() == LAMBDA_GRID.len() * SWEEP_BATCHES.len()
        && s.best.len() == SWEEP_BATCHES.len()
        && s.best.iter().zip(SWEEP_BATCHES).all(|(b, n)| b.batch_size == n)
        && written.lines().count() == 1 + SWEEP_BATCHES.len();
    let best: Vec<String> = s
        .best
        .iter()
        .map(|b| format!("B{}:λ{}", b.batch_size, b.lambda))
        .collect();
    finish(
        "AC9",
        ok,
        t0,
        Duration::from_secs(120),
        format!(
            "smoke: 15-cell grid, 3 steps per cell, synthetic subset; best [{}] non_increasing={}; full criterion: --ignored",
            best.join(" "),
            s.best_lambda_non_increasing()
        ),
    );
}

#[test]
#[ignore = "needs CIFAR-10 in NFNET_CIFAR_DIR and hours of compute"]
fn ac9_lambda_trend_full() {
    let t0 = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig {
        epochs: 5,
        output_dir: out.path().to_path_buf(),
        ..TrainConfig::default()
    };
    cfg.dataset.dir = cifar_dir();
    cfg.sweep.parallel = true;
    let splits = load_splits(&cfg).unwrap();
    let s = sweep_on(&cfg, &splits, &LAMBDA_GRID, &SWEEP_BATCHES).unwrap();
    let ok = s.best_lambda_non_increasing();
    let best: Vec<String> = s
        .best
        .iter()
        .map(|b| format!("B{}:λ{}", b.batch_size, b.lambda))
        .collect();
    report(
        "AC9",
        ok,
        t0.elapsed(),
        Duration::from_secs(6 * 3600),
        &format!("full: best [{}]", best.join(" ")),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- AC10

fn ablation_line(rows: &[AblationRow]) -> String {
    rows.iter()
        .map(|r| {
            let a = r.mean_holdout_acc.map_or("--".into(), |a| format!("{a:.3}"));
            format!("{}:acc={a},diverged={}/{}", r.label, r.diverged_runs, r.runs.len())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn ablation_verdict(rows: &[AblationRow]) -> bool {
    let find = |t: BlockToggles| rows.iter().find(|r| r.toggles == t);
    let (Some(nf), Some(bn), Some(skip)) = (
        find(BlockToggles::nf()),
        find(BlockToggles::batch_norm_baseline()),
        find(BlockToggles::skipinit_only()),
    ) else {
        return false;
    };
    let close = match (nf.mean_holdout_acc, bn.mean_holdout_acc) {
        (Some(a), Some(b)) => a >= b - 0.01,
        _ => false,
    };
    close && nf.diverged_runs < skip.diverged_runs
}

#[test]
fn ac10_ablation_smoke() {
    let _g = serial();
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic(tmp.path());
    let mut cfg = desk_tiny(&data, &tmp.path().join("ablate"));
    cfg.batch_size = 256;
    cfg.dataset.train_subset = Some(1024);
    cfg.dataset.test_subset = Some(250);
    cfg.max_steps = Some(8);
    cfg.optimizer.warmup_epochs = 0.5;
    let rows = parse_rows(&["bn".into(), "1,2,3,4".into(), "skipinit-only".into()]).unwrap();
    let splits = load_splits(&cfg).unwrap();
    let table = ablate_on(&cfg, &splits, &rows).unwrap();
    let written = std::fs::read_to_string(cfg.output_dir.join("ablation.csv")).unwrap();
    let ok = table.len() == 3
        && table
            .iter()
            .all(|r| r.runs.len() == 1 && r.runs.iter().all(|x| x.batch_size == 256))
        && written.lines().count() == 4;
    finish(
        "AC10",
        ok,
        t0,
        Duration::from_secs(120),
        format!(
            "smoke: 3 rows, 8 steps, synthetic subset; {}; direction holds={}; full criterion: --ignored",
            ablation_line(&table),
            ablation_verdict(&table)
        ),
    );
}

#[test]
#[ignore = "needs CIFAR-10 in NFNET_CIFAR_DIR and hours of compute"]
fn ac10_ablation_full() {
    let t0 = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig {
        batch_size: 1024,
        epochs: 10,
        output_dir: out.path().to_path_buf(),
        ..TrainConfig::default()
    };
    cfg.dataset.dir = cifar_dir();
    cfg.ablate.runs = 3;
    let rows = parse_rows(&cfg.ablate.rows).unwrap();
    let splits = load_splits(&cfg).unwrap();
    let table = ablate_on(&cfg, &splits, &rows).unwrap();
    let ok = ablation_verdict(&table);
    report(
        "AC10",
        ok,
        t0.elapsed(),
        Duration::from_secs(8 * 3600),
        &format!("full: {}", ablation_line(&table)),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- AC11

fn sam_opts() -> StepOptions {
    StepOptions {
        clip: ClipConfig {
            mode: ClipMode::Agc,
            lambda: 0.05,
            ..ClipConfig::default()
        },
        check_finite: true,
        use_ema: true,
    }
}

fn batch_loss<'a>(
    x: &'a Tensor<f64>,
    y: &'a Tensor<f64>,
) -> impl Fn(&mut Tape<f64>, &ParamStore<f64>, std::ops::Range<usize>) -> nfnet::Result<Var> + 'a {
    move |t, s, r| {
        let xs = t.constant(x.slice_outer(r.clone())?);
        let ys = t.constant(y.slice_outer(r)?);
        let w = t.param(s, s.find("w").unwrap());
        let g = t.param(s, s.find("g").unwrap());
        let k = t.param(s, s.find("skip").unwrap());
        let c = t.param(s, s.find("cls").unwrap());
        let h = t.linear(xs, w, Some(g))?;
        let h = t.activation(h, Activation::Relu, 1.0)?;
        let h2 = t.mul_outer(h, k)?;
        let h = t.add(h, h2)?;
        let o = t.linear(h, c, None)?;
        let d = t.sub(o, ys)?;
        let sq = t.mul(d, d)?;
        t.mean(sq)
    }
}

#[test]
fn ac11_sam_contract() {
    let _g = serial();
    let t0 = Instant::now();
    let mut zero_ok = true;
    let mut worst_radius = 0.0f64;
    let mut prefix_ok = true;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let x = Tensor::randn(&[10, 4], 1.0, &mut r);
        let y = Tensor::randn(&[10, 2], 1.0, &mut r);
        let f = batch_loss(&x, &y);

        let mut a = toy_store(seed + 100);
        let mut b = a.clone();
        let mut sa = OptimState::new(0.9, 2e-5);
        let mut sb = sa.clone();
        let (out, applied) = sam_step(&mut a, &mut sa, &sam_opts(), 0.1, 10, 0.2, &f, &mut |_| {}).unwrap();
        let plain = train_step(&mut b, &mut sb, &sam_opts(), 0.1, |t, s| f(t, s, 0..10), &mut |_| {}).unwrap();
        zero_ok &= applied == 0.0 && out == plain && a.values() == b.values();

        let rho = r.random_range(0.01..1.0);
        let ranges = RefCell::new(Vec::new());
        let rec = |t: &mut Tape<f64>, s: &ParamStore<f64>, rg: std::ops::Range<usize>| {
            ranges.borrow_mut().push(rg.clone());
            f(t, s, rg)
        };
        let mut s = toy_store(seed + 200);
        let mut st = OptimState::new(0.9, 0.0);
        st.sam_rho = rho;
        let opts = StepOptions {
            clip: ClipConfig {
                mode: ClipMode::None,
                ..ClipConfig::default()
            },
            ..sam_opts()
        };
        let (_, applied) = sam_step(&mut s, &mut st, &opts, 0.05, 10, 0.2, rec, &mut |_| {}).unwrap();
        worst_radius = worst_radius.max((applied - rho).abs());
        prefix_ok &= *ranges.borrow() == vec![0..2, 0..10];
    }
    let ok = zero_ok && worst_radius <= 1e-6 && prefix_ok;
    finish(
        "AC11",
        ok,
        t0,
        Duration::from_secs(60),
        format!("rho0_matches_plain_step={zero_ok} max|‖ε‖-ρ|={worst_radius:.1e} ascent_prefix_0..2_of_10={prefix_ok}"),
    );
}
