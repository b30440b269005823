use proptest::prelude::*;

use patchmoe::affinity::affinity_post;
use patchmoe::backbone::{Model, ModelConfig};
use patchmoe::dataset::{generate, SynthSpec};
use patchmoe::expert_init::{build_expert, importance_permutation, moefy_layer, DenseMLPSnapshot, ExpertInitConfig, RouterSpec};
use patchmoe::ops::{minmax_apply, minmax_fit, Activation};
use patchmoe::rng::SeededRng;
use patchmoe::router_init::{build_router, pixel_max, select_representative_patches, RouterInitConfig};
use patchmoe::tensor::Tensor;

fn snapshot(rng: &mut SeededRng, d: usize, f: usize) -> DenseMLPSnapshot {
    DenseMLPSnapshot::new(
        (vec![1.0; d], vec![0.0; d]),
        rng.normal_tensor(&[d, f], 0.5),
        rng.normal_tensor::<f64>(&[f], 0.1).into_data(),
        rng.normal_tensor(&[f, d], 0.5),
        rng.normal_tensor::<f64>(&[d], 0.1).into_data(),
        Activation::Silu,
    )
    .unwrap()
}

/// Sliced expert applied to one normalized vector, computed from the
/// expert's own weights.
fn expert_out(w: &patchmoe::expert_init::ExpertWeights, x: &[f64]) -> Vec<f64> {
    let (d, de) = w.w1.rows_cols();
    let mut h = w.b1.clone();
    for j in 0..de {
        for i in 0..d {
            h[j] += x[i] * w.w1.data()[i * de + j];
        }
        h[j] = Activation::Silu.apply(h[j]);
    }
    let mut y = w.b2.clone();
    for (i, yi) in y.iter_mut().enumerate() {
        for j in 0..de {
            *yi += h[j] * w.w2.data()[j * d + i];
        }
    }
    y.iter()
        .zip(&w.correction)
        .map(|(a, c)| (1.0 - w.gamma) * a + w.gamma * c)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_rows_come_from_the_input(seed in 0u64..10_000, n in 2usize..20, k in 1usize..8, t in 0usize..5) {
        prop_assume!(k <= n);
        let x: Tensor<f64> = SeededRng::new(seed).normal_tensor(&[n, 3, 4], 1.0);
        let pooled = pixel_max(&x).unwrap();
        let s = select_representative_patches(&x, k, t).unwrap();
        prop_assert_eq!(s.indices.len(), k);
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        for (r, &i) in s.indices.iter().enumerate() {
            prop_assert_eq!(s.rows.row(r), pooled.row(i));
        }
    }

    #[test]
    fn selection_is_permutation_invariant(seed in 0u64..10_000, n in 2usize..20, k in 1usize..8, t in 0usize..5) {
        prop_assume!(k <= n);
        let mut rng = SeededRng::new(seed);
        let x: Tensor<f64> = rng.normal_tensor(&[n, 2, 3], 1.0);
        let perm = rng.permutation(n);
        let xp = Tensor::new(
            vec![n, 2, 3],
            perm.iter().flat_map(|&i| x.data()[i * 6..(i + 1) * 6].to_vec()).collect(),
        )
        .unwrap();
        let a = select_representative_patches(&x, k, t).unwrap();
        let b = select_representative_patches(&xp, k, t).unwrap();
        let mut mapped: Vec<usize> = b.indices.iter().map(|&j| perm[j]).collect();
        let mut orig = a.indices.clone();
        mapped.sort_unstable();
        orig.sort_unstable();
        prop_assert_eq!(mapped, orig);
    }

    #[test]
    fn expert_indices_are_distinct_and_in_range(seed in 0u64..10_000, de in 1usize..12) {
        let mut rng = SeededRng::new(seed);
        let snap = snapshot(&mut rng, 4, 12);
        let c: Vec<f64> = rng.normal_tensor::<f64>(&[4], 1.0).into_data();
        let idx = importance_permutation(&snap, &c, de).unwrap();
        prop_assert_eq!(idx.len(), de);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < 12));
    }

    #[test]
    fn expert_at_its_centroid_is_within_the_blend_bound(seed in 0u64..10_000) {
        let mut rng = SeededRng::new(seed);
        let snap = snapshot(&mut rng, 4, 8);
        let samples: Tensor<f64> = rng.normal_tensor(&[10, 4], 1.0);
        let scaler = minmax_fit(&samples).unwrap();
        let raw: Vec<f64> = samples.row(3).to_vec();
        let scaled = minmax_apply(&scaler, &Tensor::matrix(1, 4, raw.clone()).unwrap()).unwrap().into_data();
        let idx = importance_permutation(&snap, &raw, 4).unwrap();
        let w = build_expert(&snap, &idx, &scaled, &scaler, 0.9).unwrap();
        let out = expert_out(&w, &raw);
        let full = snap.body(&raw, None);
        let sliced = snap.body(&raw, Some(&idx));
        for i in 0..4 {
            let bound = 0.1 * (sliced[i] - full[i]).abs();
            prop_assert!((out[i] - full[i]).abs() <= bound + 1e-9, "{} > {}", (out[i] - full[i]).abs(), bound);
        }
    }

    #[test]
    fn sliced_experts_stay_finite(seed in 0u64..10_000, scale in 1e-3f64..1e3) {
        let mut rng = SeededRng::new(seed);
        let snap = snapshot(&mut rng, 4, 8);
        let samples: Tensor<f64> = rng.normal_tensor(&[6, 4], scale);
        let scaler = minmax_fit(&samples).unwrap();
        let c: Vec<f64> = rng.uniform_tensor::<f64>(&[4], 0.0, 1.0).into_data();
        let raw = patchmoe::ops::minmax_invert(&scaler, &Tensor::matrix(1, 4, c.clone()).unwrap()).unwrap().into_data();
        let idx = importance_permutation(&snap, &raw, 4).unwrap();
        let w = build_expert(&snap, &idx, &c, &scaler, 0.9).unwrap();
        let x: Vec<f64> = rng.normal_tensor::<f64>(&[4], scale).into_data();
        prop_assert!(expert_out(&w, &x).iter().all(|v| v.is_finite()));
    }
}

fn small_setup() -> (Model<f64>, patchmoe::dataset::Dataset) {
    let ds = generate(&SynthSpec {
        num_classes: 4,
        families: 2,
        image_size: 16,
        glyph_patches: 1,
        samples_per_class: 5,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = ModelConfig {
        image_size: 16,
        dim: 8,
        ffn_dim: 16,
        layers: 2,
        heads: 2,
        num_classes: 4,
        moe_layers: vec![1],
        experts: 3,
        ..ModelConfig::default()
    };
    (Model::new(cfg, 2).unwrap(), ds)
}

#[test]
fn build_router_is_deterministic() {
    let (m, ds) = small_setup();
    let cfg = RouterInitConfig {
        k: 4,
        samples_per_class: 3,
        ..RouterInitConfig::default()
    };
    let a = build_router(&m, &ds, 1, 3, &cfg, 7).unwrap();
    let b = build_router(&m, &ds, 1, 3, &cfg, 7).unwrap();
    assert_eq!(a.centroids, b.centroids);
    assert_eq!(a.class_clusters, b.class_clusters);
    assert_eq!(a.scaler, b.scaler);
    assert_eq!(a.tree, b.tree);
}

#[test]
fn post_affinity_rows_are_distributions() {
    let (mut m, ds) = small_setup();
    let cfg = RouterInitConfig {
        k: 4,
        samples_per_class: 3,
        ..RouterInitConfig::default()
    };
    let init = build_router(&m, &ds, 1, 3, &cfg, 1).unwrap();
    moefy_layer(&mut m, 1, &RouterSpec::from(&init), &ExpertInitConfig::default()).unwrap();
    // 4 batches of the whole validation split: every class is sampled
    let a = affinity_post(&m, &ds, 1, 4, 64, 3).unwrap();
    assert!(a.missing.iter().all(|&x| !x));
    for c in 0..4 {
        assert!((a.row(c).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(a, affinity_post(&m, &ds, 1, 4, 64, 3).unwrap());

    // a single one-image batch leaves most classes unsampled
    let b = affinity_post(&m, &ds, 1, 1, 1, 3).unwrap();
    assert_eq!(b.missing.iter().filter(|&&x| x).count(), 3);
}
