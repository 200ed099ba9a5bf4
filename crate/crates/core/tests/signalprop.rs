use nfnet::arch::{ArchConfig, Network};
use nfnet::gains::Activation;
use nfnet::nfblock::BlockToggles;
use nfnet::signalprop::{compare_schedule, probe, write_csv, CSV_HEADER};
use nfnet::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Single-stage stack fed directly with unit-Gaussian activations (no stem).
fn stack(blocks: usize, toggles: BlockToggles, activation: Activation) -> ArchConfig {
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
        activation,
        toggles,
    }
}

fn build(cfg: ArchConfig, seed: u64) -> (Network, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::new(cfg, &mut store, &mut rng).unwrap();
    (net, store)
}

fn no_skipinit() -> BlockToggles {
    BlockToggles {
        skipinit: false,
        ..BlockToggles::nf()
    }
}

#[test]
fn eight_block_stack_tracks_one_plus_l_alpha_squared() {
    let (net, store) = build(stack(8, no_skipinit(), Activation::Gelu), 1);
    let r = probe(&net, &store, 100_000, 7).unwrap();
    assert_eq!(r.blocks.len(), 9);
    for b in &r.blocks {
        let want = 1.0 + b.block_index as f64 * 0.04;
        assert!((b.predicted_var - want).abs() < 1e-12);
        assert!(
            b.rel_error < 0.10,
            "block {}: {} vs {}",
            b.block_index,
            b.empirical_var,
            b.predicted_var
        );
    }
    assert!(compare_schedule(&r, 0.10).pass);
}

#[test]
fn skipinit_blocks_pass_variance_through_exactly() {
    let (net, store) = build(stack(4, BlockToggles::nf(), Activation::Relu), 2);
    let r = probe(&net, &store, 1000, 3).unwrap();
    // block 0 is the transition; every later block is an identity
    for w in r.blocks[1..].windows(2) {
        assert_eq!(w[0].empirical_var, w[1].empirical_var);
    }
}

#[test]
fn twelve_block_relu_stack_drifts_sub_linearly() {
    let (net, store) = build(stack(12, no_skipinit(), Activation::Relu), 4);
    let r = probe(&net, &store, 5000, 5).unwrap();
    for b in &r.blocks {
        assert!(b.rel_error <= 0.15, "block {}: {}", b.block_index, b.rel_error);
    }
}

#[test]
fn batch_norm_outputs_have_unit_variance() {
    let (net, store) = build(stack(3, BlockToggles::batch_norm_baseline(), Activation::Relu), 6);
    let r = probe(&net, &store, 2000, 1).unwrap();
    assert!(!r.batch_norm_vars.is_empty());
    for v in &r.batch_norm_vars {
        assert!((v - 1.0).abs() < 0.05, "{v}");
    }
}

#[test]
fn probe_is_deterministic_and_validates_inputs() {
    let (net, store) = build(stack(2, no_skipinit(), Activation::Silu), 8);
    assert_eq!(
        probe(&net, &store, 1000, 9).unwrap(),
        probe(&net, &store, 1000, 9).unwrap()
    );
    assert!(probe(&net, &store, 999, 9).is_err());
    let mut cfg = stack(2, no_skipinit(), Activation::Silu);
    cfg.dropout_rate = 0.1;
    let (net, store) = build(cfg, 8);
    assert!(probe(&net, &store, 1000, 9).is_err());
}

#[test]
fn csv_has_fixed_header() {
    let (net, store) = build(stack(2, no_skipinit(), Activation::Gelu), 10);
    let r = probe(&net, &store, 1000, 0).unwrap();
    let mut buf = Vec::new();
    write_csv(&r, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(lines.count(), 3);
}
