mod common;

use attnfield::attention::{init_params, query_feature, self_attention_features, DecoderShape, InitMode};
use attnfield::effector::EffectorModel;
use attnfield::energy::{penetration_energy, self_penetration_energy};
use attnfield::keypoints::{scene_order, select_keypoints, SelectionConfig};
use attnfield::numerics::Tensor;
use attnfield::scene::{idw_feature, idw_weights, knn, FeaturedCloud, Metric, QueryPoint};
use attnfield::synth::success_metric;
use attnfield::training::{infonce_loss, DenominatorMode};
use common::*;
use rand::Rng;

#[test]
fn idw_matches_brute_force() {
    for seed in 0..10 {
        let cloud = random_cloud(seed, 32, 5);
        let mut r = rng(100 + seed);
        for _ in 0..10 {
            let q = [r.random_range(-0.1..0.1), r.random_range(-0.1..0.1), r.random_range(-0.1..0.1)];
            let got = idw_feature(&cloud, QueryPoint(q), 1e-8);
            assert!(max_abs_diff(&got, &naive_idw_feature(&cloud, q, 1e-8)) < 1e-10);
            assert!(max_abs_diff(&idw_weights(&cloud, QueryPoint(q), 1e-8), &naive_idw_weights(&cloud, q, 1e-8)) < 1e-12);
        }
    }
}

#[test]
fn idw_at_a_scene_point_returns_its_feature() {
    let cloud = random_cloud(3, 16, 4);
    let f = idw_feature(&cloud, QueryPoint(cloud.point(5)), 1e-12);
    assert!(max_abs_diff(&f, cloud.feature(5)) < 1e-6);
}

#[test]
fn knn_matches_full_sort() {
    for seed in 0..5 {
        // Large enough to exercise the spatial grid as well as the scan.
        for n in [32, 300] {
            let cloud = random_cloud(seed, n, 3);
            let pts: Vec<Vec<f64>> = (0..n).map(|i| cloud.point(i).to_vec()).collect();
            let feats: Vec<Vec<f64>> = (0..n).map(|i| cloud.feature(i).to_vec()).collect();
            for probe in 0..5 {
                let center = pts[probe * 3].iter().map(|v| v + 0.003).collect::<Vec<_>>();
                assert_eq!(knn(&cloud, &center, 5, Metric::Spatial).unwrap(), naive_knn(&pts, &center, 5));
                assert_eq!(knn(&cloud, &feats[probe], 5, Metric::Feature).unwrap(), naive_knn(&feats, &feats[probe], 5));
            }
        }
    }
}

#[test]
fn knn_breaks_ties_by_index() {
    let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
    let cloud = FeaturedCloud::from_points(&pts, Tensor::zeros(4, 1), None).unwrap();
    assert_eq!(knn(&cloud, &[0.0; 3], 3, Metric::Spatial).unwrap(), vec![0, 1, 2]);
}

/// Scenes whose features are small perturbations of a shared set, so that
/// a good share of chains survive.
fn related_clouds(seed: u64, scenes: usize, n: usize) -> Vec<FeaturedCloud> {
    let base = random_cloud(seed, n, 3);
    let mut r = rng(seed + 1);
    (0..scenes)
        .map(|_| {
            let noise = random_tensor(&mut r, n, 3, 0.3);
            let f = base.features().zip_map(&noise, |a, b| a + b);
            FeaturedCloud::new(random_tensor(&mut r, n, 3, 0.05), f, None).unwrap()
        })
        .collect()
}

#[test]
fn keypoints_match_exhaustive_chains() {
    let mut nonempty = 0;
    for seed in 0..12 {
        for scenes in [2, 3] {
            let clouds = related_clouds(seed, scenes, 6 + seed as usize % 7);
            for k_nn in [1, 3] {
                let cfg = SelectionConfig { k_nn, seed, max_keypoints: 512 };
                let want = naive_chains(&clouds, &scene_order(scenes, seed), k_nn);
                match select_keypoints(&clouds, cfg) {
                    Ok(corr) => {
                        assert_eq!(corr.rows(), &want[..], "seed {seed} I={scenes} k={k_nn}");
                        nonempty += 1;
                    }
                    Err(attnfield::Error::NoKeypoints) => assert!(want.is_empty()),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
    assert!(nonempty > 20);
}

#[test]
fn corrupted_point_breaks_exactly_one_chain() {
    // Three 5-point scenes with identical, well separated features; one
    // point of the last scene takes a wrong partner's feature.
    let feats = [0.0, 1.0, 2.0, 3.0, 4.0];
    let scene = |f: &[f64]| {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        FeaturedCloud::from_points(&pts, Tensor::from_vec(5, 1, f.to_vec()).unwrap(), None).unwrap()
    };
    let mut bad = feats;
    bad[2] = 3.05;
    let clouds = [scene(&feats), scene(&feats), scene(&bad)];
    for seed in 0..6 {
        let order = scene_order(3, seed);
        let want = naive_chains(&clouds, &order, 1);
        let got = select_keypoints(&clouds, SelectionConfig { k_nn: 1, seed, max_keypoints: 512 }).unwrap();
        assert_eq!(got.rows(), &want[..]);
        assert_eq!(got.len(), 4);
        assert!(got.rows().iter().all(|r| r[0] != 2));
    }
}

#[test]
fn infonce_matches_triple_loop() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let sets: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, 6, 4, 1.0)).collect();
        for mode in [DenominatorMode::Exclusive, DenominatorMode::Standard] {
            for tau in [0.1, 0.7] {
                let got = infonce_loss(&sets, tau, mode).unwrap();
                let want = naive_infonce(&sets, tau, mode);
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }
}

#[test]
fn infonce_hand_values() {
    let e = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
    let got = infonce_loss(&[e.clone(), e.clone()], 1.0, DenominatorMode::Exclusive).unwrap();
    assert!((got + 4.0).abs() < 1e-9);
    // Constant similarity: each term is log(K − 1), zero for K = 2.
    let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
    assert!(infonce_loss(&[same.clone(), same], 0.3, DenominatorMode::Exclusive).unwrap().abs() < 1e-12);
}

#[test]
fn success_metric_matches_double_loop() {
    let hand = EffectorModel::three_finger_hand();
    for seed in 0..5 {
        let mut r = rng(seed);
        let n = 200;
        let pts = random_tensor(&mut r, n, 3, 0.1);
        let labels: Vec<i32> = (0..n).map(|_| r.random_range(0..3)).collect();
        let cloud = FeaturedCloud::new(pts, Tensor::filled(n, 1, 1.0), Some(labels)).unwrap();
        let pose = hand.random_pose(&mut r, [-0.05; 3], [0.05; 3]);
        for region in 0..3 {
            let got = success_metric(&hand, &pose, &cloud, region).unwrap();
            assert!((got - naive_success_metric(&hand, &pose, &cloud, region)).abs() < 1e-12);
        }
        assert!(success_metric(&hand, &pose, &cloud, 7).is_err());
    }
}

#[test]
fn decoder_matches_straight_line_evaluation() {
    // N=4, C=2, H=1, d=2 as a small hand-checkable case, then larger ones.
    for (n, c, h, d, layers) in [(4, 2, 1, 2, 1), (12, 3, 2, 4, 1), (10, 4, 3, 2, 2)] {
        for seed in 0..3 {
            let cloud = random_cloud(seed, n, c);
            let params = init_params(DecoderShape { feature_dim: c, heads: h, head_dim: d, layers }, seed, InitMode::Random).unwrap();
            let mut r = rng(seed + 50);
            for _ in 0..5 {
                let q = [r.random_range(-0.08..0.08), r.random_range(-0.08..0.08), r.random_range(-0.08..0.08)];
                let (f, trace) = query_feature(&params, &cloud, QueryPoint(q), 1e-8).unwrap();
                let (nf, nw) = naive_query_feature(&params, &cloud, q, 1e-8);
                assert!(max_abs_diff(&f, &nf) < 1e-10);
                for (a, b) in trace.weights.iter().zip(&nw) {
                    assert!(max_abs_diff(a, b) < 1e-10);
                }
            }
        }
    }
}

#[test]
fn self_attention_matches_per_point_loop() {
    let cloud = random_cloud(9, 8, 3);
    let params = init_params(DecoderShape { feature_dim: 3, heads: 2, head_dim: 4, layers: 1 }, 4, InitMode::Random).unwrap();
    let batched = self_attention_features(&params, &cloud, 1e-8).unwrap();
    for i in 0..cloud.len() {
        let (naive, _) = naive_query_feature(&params, &cloud, cloud.point(i), 1e-8);
        assert!(max_abs_diff(batched.row_slice(i), &naive) < 1e-10);
        let (single, _) = query_feature(&params, &cloud, QueryPoint(cloud.point(i)), 1e-8).unwrap();
        assert!(max_abs_diff(batched.row_slice(i), &single) < 1e-12);
    }
}

#[test]
fn single_point_cloud_attends_fully() {
    let cloud = random_cloud(1, 1, 3);
    let params = init_params(DecoderShape { feature_dim: 3, heads: 2, head_dim: 2, layers: 1 }, 2, InitMode::Random).unwrap();
    let (f, trace) = query_feature(&params, &cloud, QueryPoint([0.3, -0.2, 0.1]), 1e-8).unwrap();
    assert!(trace.weights.iter().all(|w| w == &vec![1.0]));
    let layer = &params.layers()[0];
    let mut cat = Vec::new();
    for head in &layer.heads {
        cat.extend(Tensor::row(cloud.feature(0)).matmul(&head.value).unwrap().into_vec());
    }
    let want = Tensor::row(&cat).matmul(&layer.output).unwrap();
    assert!(max_abs_diff(&f, want.data()) < 1e-14);
}

#[test]
fn penetration_energies_by_hand() {
    let r = 0.01;
    let cloud = FeaturedCloud::from_points(&[[r / 2.0, 0.0, 0.0], [1.0, 1.0, 1.0]], Tensor::zeros(2, 1), None).unwrap();
    let q = Tensor::from_rows(&[[0.0, 0.0, 0.0], [-0.5, -0.5, -0.5]]).unwrap();
    assert!((penetration_energy(&cloud, &q, &[r, r]) - r / 2.0).abs() < 1e-15);
    let far = Tensor::from_rows(&[[5.0, 5.0, 5.0], [-5.0, -5.0, -5.0]]).unwrap();
    assert_eq!(penetration_energy(&cloud, &far, &[r, r]), 0.0);

    // Two samples on non-adjacent links δ/2 apart: each ordered pair adds δ/2.
    let hand = EffectorModel::three_finger_hand();
    let links = hand.sample_links();
    let mask = hand.collision_mask();
    let m = hand.sample_count();
    let (a, b) = (0..m)
        .flat_map(|a| (0..m).map(move |b| (a, b)))
        .find(|&(a, b)| mask[a * m + b])
        .expect("some colliding pair");
    assert!(!hand.adjacent(links[a], links[b]) && links[a] != links[b]);
    let delta = 0.01;
    let mut queries = Tensor::zeros(m, 3);
    for s in 0..m {
        queries.set(s, 0, 10.0 * s as f64);
    }
    queries.set(b, 0, 10.0 * a as f64 + delta / 2.0);
    // Keep `b` away from every other sample.
    let e = self_penetration_energy(&hand, &queries, delta);
    assert!((e - delta).abs() < 1e-15, "{e}");
}
