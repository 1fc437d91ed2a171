mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use steer_core::mlp::{
    apply_mlp, loss_on_outputs, smooth_l1, train_mlp, Architecture, MlpModel, Network, Preset,
    TrainConfig,
};
use steer_core::{AlignmentPairs, Error};

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..20 {
        let c = gradient_check(seed);
        assert!(c.params <= 1000, "seed {seed}: {} params", c.params);
        assert!(c.terms.iter().all(|&t| t > 0.0), "seed {seed}: inactive term {:?}", c.terms);
        assert!(c.checked * 10 >= c.params * 9, "seed {seed}: skipped {}", c.skipped);
        assert!(c.max_rel_error < 1e-3, "seed {seed}: {c:?}");
    }
}

#[test]
fn forward_matches_naive_loops() {
    let mut r = rng(3);
    for (seed, dims) in [(0, vec![4, 3]), (1, vec![5, 8, 2]), (2, vec![3, 6, 7, 4])] {
        let net = Network::<f32>::kaiming(&dims, seed).unwrap();
        let x = gaussian_set(&mut r, 9, dims[0], "x");
        let out = net.forward(x.view()).unwrap();
        for (i, row) in x.rows().enumerate() {
            let want = naive_forward(&net, row);
            for (j, w) in want.iter().enumerate() {
                assert!((out[(i, j)] as f64 - w).abs() < 1e-5 * w.abs().max(1.0));
            }
        }
    }
}

#[test]
fn loss_terms_have_exact_values() {
    let cfg = |tau: f64| TrainConfig {
        tau,
        huber_delta: 1.0,
        ..TrainConfig::default()
    };
    // Rows at cosine 0.9 with their targets.
    let pred = Array2::from_shape_vec((2, 2), vec![0.9, 0.19f64.sqrt(), 0.9, -0.19f64.sqrt()]).unwrap();
    let target = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let (lb, _) = loss_on_outputs(pred.view(), target.view(), &cfg(0.8), false).unwrap();
    assert!((lb.sim_penalty - 0.1).abs() < 1e-9, "{}", lb.sim_penalty);
    let (lb, _) = loss_on_outputs(pred.view(), target.view(), &cfg(1.0), false).unwrap();
    assert_eq!(lb.sim_penalty, 0.0);

    let target = Array2::from_elem((3, 4), 1.0f64);
    let pred = target.mapv(|v| v + 0.5);
    let (lb, _) = loss_on_outputs(pred.view(), target.view(), &cfg(0.9), false).unwrap();
    assert!((lb.huber - 0.125).abs() < 1e-9);
    assert!((lb.mse - 1.0).abs() < 1e-12);
    assert_eq!(smooth_l1(0.5, 1.0), 0.125);
    assert_eq!(smooth_l1(-3.0, 1.0), 2.5);
}

fn tiny_pairs(seed: u64) -> AlignmentPairs {
    let mut r = rng(seed);
    let local = gaussian_set(&mut r, 64, 3, "x");
    let server = gaussian_set(&mut r, 64, 2, "x");
    AlignmentPairs::checked(local, server).unwrap()
}

#[test]
fn training_is_bitwise_reproducible() {
    let pairs = tiny_pairs(1);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 42,
        ..TrainConfig::default()
    };
    let arch = Architecture::Custom(vec![32]);
    let (a, ha) = train_mlp(&pairs, &arch, &cfg).unwrap();
    let (b, hb) = train_mlp(&pairs, &arch, &cfg).unwrap();
    let bits = |m: &MlpModel| m.network().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(ha, hb);
    let (c, _) = train_mlp(&pairs, &arch, &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn training_reduces_loss_on_a_learnable_map() {
    let mut r = rng(8);
    let local = gaussian_set(&mut r, 256, 4, "x");
    let server = steer_core::EmbeddingSet::from_rows(
        local.ids().iter().zip(local.rows()).map(|(id, x)| {
            let v: Vec<f32> = vec![x[0] + x[1], (x[2] - x[3]).tanh(), x[0].abs() + 0.5];
            (id.clone(), v)
        }),
        "server",
    )
    .unwrap();
    let pairs = AlignmentPairs::checked(local, server).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 32,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let (model, hist) = train_mlp(&pairs, &Architecture::Custom(vec![32]), &cfg).unwrap();
    let first = hist.epochs[0].total;
    let last = hist.last().unwrap().total;
    assert!(last < 0.25 * first, "{first} -> {last}");
    let approx = apply_mlp(&model, &pairs.local).unwrap();
    assert_eq!(approx.space_label(), "approx");
}

#[test]
fn preset_dims() {
    assert_eq!(Architecture::Preset(Preset::Small).layer_dims(5, 3), [5, 1024, 3]);
    assert_eq!(Architecture::Preset(Preset::Medium).layer_dims(5, 3), [5, 2048, 3]);
    assert_eq!(Architecture::Preset(Preset::Base).layer_dims(5, 3), [5, 4096, 4096, 3]);
}

#[test]
fn divergence_is_reported() {
    let pairs = tiny_pairs(2);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 1e30,
        ..TrainConfig::default()
    };
    match train_mlp(&pairs, &Architecture::Custom(vec![8]), &cfg) {
        Err(Error::TrainingDiverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_zero_only_at_exact_fit_without_penalty(
        vals in proptest::collection::vec(0.1f64..3.0, 6),
        shift in -1.0f64..1.0,
    ) {
        let target = Array2::from_shape_vec((2, 3), vals).unwrap();
        let cfg = TrainConfig { gamma: 0.0, ..TrainConfig::default() };
        let (lb, _) = loss_on_outputs(target.view(), target.view(), &cfg, false).unwrap();
        prop_assert!(lb.total.abs() < 1e-12);
        let pred = target.mapv(|v| v + shift);
        let (lb, _) = loss_on_outputs(pred.view(), target.view(), &cfg, false).unwrap();
        prop_assert!(lb.total >= 0.0);
        prop_assert!(
            (lb.total - (lb.mse + cfg.alpha * lb.cos_dist + cfg.beta * lb.huber)).abs() < 1e-12
        );
    }

    #[test]
    fn cos_term_is_scale_invariant(scale in 0.1f64..10.0, seed in 0u64..100) {
        let mut r = rng(seed);
        let t = gaussian_set(&mut r, 4, 5, "t");
        let target = Array2::from_shape_vec((4, 5), t.vectors().iter().map(|&v| v as f64).collect()).unwrap();
        let p = gaussian_set(&mut r, 4, 5, "p");
        let pred = Array2::from_shape_vec((4, 5), p.vectors().iter().map(|&v| v as f64).collect()).unwrap();
        let cfg = TrainConfig::default();
        let (a, _) = loss_on_outputs(pred.view(), target.view(), &cfg, false).unwrap();
        let scaled = pred.mapv(|v| v * scale);
        let (b, _) = loss_on_outputs(scaled.view(), target.view(), &cfg, false).unwrap();
        prop_assert!((a.cos_dist - b.cos_dist).abs() < 1e-12);
        prop_assert!((a.sim_penalty - b.sim_penalty).abs() < 1e-12);
    }
}
