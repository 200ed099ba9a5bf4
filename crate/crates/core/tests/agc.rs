use nfnet::agc::{agc_clip, clip_store, global_norm_clip, unit_norms, ClipConfig, ClipMode, DEFAULT_EPS};
use nfnet::tensor::{ParamFlags, ParamStore, Parameter, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(seed: u64, shape: &[usize], gscale: f64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(shape, 1.0, &mut rng);
    let g = Tensor::randn(shape, gscale, &mut rng);
    (g, w)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let n = t.numel() / t.shape()[0];
    t.data().chunks(n).map(|c| c.to_vec()).collect()
}

proptest! {
    #[test]
    fn clipped_units_respect_the_bound_and_keep_direction(
        seed in 0u64..10_000,
        units in 1usize..8,
        fan in 1usize..30,
        gscale in 0.001f64..10.0,
        lambda in 0.001f64..1.0,
    ) {
        let (g, w) = pair(seed, &[units, fan], gscale);
        let out = agc_clip(&g, &w, Some(0), lambda, DEFAULT_EPS).unwrap();
        let wn = unit_norms(&w, Some(0)).unwrap();
        for ((gi, oi), wi) in rows(&g).iter().zip(rows(&out)).zip(wn) {
            let gn = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let on = oi.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bound = lambda * wi.max(DEFAULT_EPS);
            prop_assert!(on <= bound * (1.0 + 1e-12) || gi == &oi);
            if gi != &oi {
                let s = on / gn;
                for (a, b) in gi.iter().zip(&oi) {
                    prop_assert!((a * s - b).abs() <= 1e-12 * gn.max(1.0));
                }
            } else {
                prop_assert!(gn / wi.max(DEFAULT_EPS) <= lambda);
            }
        }
    }

    #[test]
    fn clipping_is_idempotent(
        seed in 0u64..10_000,
        gscale in 0.001f64..10.0,
        lambda in 0.001f64..1.0,
    ) {
        let (g, w) = pair(seed, &[4, 3, 3, 3], gscale);
        let once = agc_clip(&g, &w, Some(0), lambda, DEFAULT_EPS).unwrap();
        let twice = agc_clip(&once, &w, Some(0), lambda, DEFAULT_EPS).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-7 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn clipped_output_depends_only_on_gradient_direction(
        seed in 0u64..10_000,
        c in 1.0f64..100.0,
    ) {
        // with a tiny λ every unit is above threshold for both scales
        let (g, w) = pair(seed, &[5, 7], 1.0);
        let a = agc_clip(&g, &w, Some(0), 1e-4, DEFAULT_EPS).unwrap();
        let b = agc_clip(&g.scale(c), &w, Some(0), 1e-4, DEFAULT_EPS).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-12));
        }
    }

    #[test]
    fn clip_fraction_is_non_increasing_in_lambda(
        seed in 0u64..10_000,
        l1 in 0.001f64..1.0,
        l2 in 0.001f64..1.0,
    ) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let (g, w) = pair(seed, &[16, 9], 0.2);
        let frac = |lambda: f64| {
            let mut store = ParamStore::<f64>::new();
            let id = store.add(Parameter::new("conv.weight", w.clone(), ParamFlags::ws_weight()));
            store.get_mut(id).grad = g.clone();
            let cfg = ClipConfig { lambda, ..ClipConfig::default() };
            clip_store(&mut store, &cfg).unwrap().overall_fraction()
        };
        let (f_lo, f_hi) = (frac(lo), frac(hi));
        prop_assert!((0.0..=1.0).contains(&f_lo) && (0.0..=1.0).contains(&f_hi));
        prop_assert!(f_hi <= f_lo);
    }

    #[test]
    fn global_clip_bounds_norm_and_preserves_direction(
        seed in 0u64..10_000,
        gscale in 0.01f64..10.0,
        lambda in 0.01f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orig = vec![Tensor::<f64>::randn(&[3, 4], gscale, &mut rng), Tensor::randn(&[5], gscale, &mut rng)];
        let mut g = orig.clone();
        let n0 = global_norm_clip(&mut g, lambda).unwrap();
        let n1 = g.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
        prop_assert!(n1 <= lambda * (1.0 + 1e-12));
        if n0 <= lambda {
            prop_assert_eq!(&g, &orig);
        }
        for (a, b) in orig.iter().zip(&g) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x / n0 - y / n1).abs() < 1e-12);
            }
        }
    }
}

fn model_store(seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let specs: [(&str, &[usize], ParamFlags); 5] = [
        ("stem.conv0.weight", &[8, 3, 3, 3], ParamFlags::ws_weight()),
        ("stage0.block0.conv0.weight", &[8, 8, 1, 1], ParamFlags::ws_weight()),
        ("stage0.block0.skip_gain", &[], ParamFlags::gain_or_bias()),
        ("stage0.block0.conv0.bias", &[8], ParamFlags::gain_or_bias()),
        ("classifier.weight", &[10, 8], ParamFlags::classifier_weight()),
    ];
    for (name, shape, flags) in specs {
        let v = if name.ends_with("skip_gain") {
            Tensor::zeros(shape)
        } else {
            Tensor::randn(shape, 1.0, &mut rng)
        };
        let id = store.add(Parameter::new(name, v, flags));
        store.get_mut(id).grad = Tensor::randn(shape, 50.0, &mut rng);
    }
    store
}

#[test]
fn classifier_weight_passes_through_bit_identically() {
    let mut store = model_store(1);
    let before = store.grads();
    let report = clip_store(&mut store, &ClipConfig::default()).unwrap();
    let cls = store.find("classifier.weight").unwrap();
    assert_eq!(store.get(cls).grad, before[cls.index()]);
    assert!(report.params.iter().all(|p| p.name != "classifier.weight"));
    // every other parameter had huge gradients and got clipped
    for p in &report.params {
        assert_eq!(p.fraction_of_units_clipped, 1.0, "{}", p.name);
        assert_eq!(p.lambda_used, 0.01);
    }
}

#[test]
fn zero_initialized_scalar_is_clipped_against_the_eps_floor() {
    let mut store = model_store(2);
    clip_store(&mut store, &ClipConfig::default()).unwrap();
    let id = store.find("stage0.block0.skip_gain").unwrap();
    let g = store.get(id).grad.item();
    assert!((g.abs() - 0.01 * DEFAULT_EPS).abs() < 1e-18, "{g}");
}

#[test]
fn stem_flag_and_prefix_exclusions() {
    let mut store = model_store(3);
    let before = store.grads();
    let cfg = ClipConfig {
        clip_stem: false,
        exclude_prefixes: vec!["stage0.block0.conv0".into()],
        ..ClipConfig::default()
    };
    let report = clip_store(&mut store, &cfg).unwrap();
    for name in [
        "stem.conv0.weight",
        "stage0.block0.conv0.weight",
        "stage0.block0.conv0.bias",
    ] {
        let id = store.find(name).unwrap();
        assert_eq!(store.get(id).grad, before[id.index()], "{name}");
    }
    assert_eq!(report.params.len(), 1);
}

#[test]
fn layerwise_mode_treats_each_tensor_as_one_unit() {
    let (g, w) = pair(4, &[6, 10], 1.0);
    let mut store = ParamStore::<f64>::new();
    let id = store.add(Parameter::new("w", w.clone(), ParamFlags::weight()));
    store.get_mut(id).grad = g.clone();
    let cfg = ClipConfig {
        mode: ClipMode::AgcLayerwise,
        lambda: 0.05,
        ..ClipConfig::default()
    };
    clip_store(&mut store, &cfg).unwrap();
    let out = &store.get(id).grad;
    assert!((out.l2_norm() - 0.05 * w.l2_norm()).abs() < 1e-12);
    assert!((out.data()[0] / g.data()[0] - out.data()[7] / g.data()[7]).abs() < 1e-12);
}

#[test]
fn global_mode_reports_pre_clip_norm() {
    let mut store = model_store(5);
    let n = store.grad_global_norm();
    let cfg = ClipConfig {
        mode: ClipMode::Global,
        lambda: 1.0,
        ..ClipConfig::default()
    };
    let report = clip_store(&mut store, &cfg).unwrap();
    assert_eq!(report.global_norm, Some(n));
    assert!((store.grad_global_norm() - 1.0).abs() < 1e-12);
}
