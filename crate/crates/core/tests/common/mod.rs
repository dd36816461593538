//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite. Each one is written straight from the
//! defining formula, without reusing library internals.

#![allow(dead_code)]

pub mod gradients;

use attnfield::attention::DecoderParams;
use attnfield::effector::{EffectorModel, PoseVector};
use attnfield::numerics::Tensor;
use attnfield::scene::FeaturedCloud;
use attnfield::training::DenominatorMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `n` points in a 10 cm cube with features in `[-1, 1)`.
pub fn random_cloud(seed: u64, n: usize, c: usize) -> FeaturedCloud {
    let mut r = rng(seed);
    let pts = random_tensor(&mut r, n, 3, 0.05);
    let feats = random_tensor(&mut r, n, c, 1.0);
    FeaturedCloud::new(pts, feats, None).unwrap()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn naive_idw_weights(cloud: &FeaturedCloud, q: [f64; 3], eps: f64) -> Vec<f64> {
    let mut w = Vec::new();
    let mut total = 0.0;
    for i in 0..cloud.len() {
        let wi = 1.0 / (sq(&cloud.point(i), &q) + eps);
        total += wi;
        w.push(wi);
    }
    w.iter().map(|x| x / total).collect()
}

pub fn naive_idw_feature(cloud: &FeaturedCloud, q: [f64; 3], eps: f64) -> Vec<f64> {
    let w = naive_idw_weights(cloud, q, eps);
    (0..cloud.feature_dim()).map(|ch| (0..cloud.len()).map(|i| w[i] * cloud.feature(i)[ch]).sum()).collect()
}

/// Full sort by (distance, index).
pub fn naive_knn(rows: &[Vec<f64>], center: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = rows.iter().enumerate().map(|(i, r)| (sq(r, center), i)).collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

fn feature_rows(c: &FeaturedCloud) -> Vec<Vec<f64>> {
    (0..c.len()).map(|i| c.feature(i).to_vec()).collect()
}

/// Every chain of the cyclic order `order`, enumerated over all `N^I`
/// index tuples. A tuple survives when each element's feature nearest
/// neighbour in the next scene is the next element, each element is among
/// the `k` feature neighbours of its successor, and the cycle closes.
/// Rows are indexed by scene, sorted by the start index in `order[0]`, and
/// rows reusing an index already taken are dropped.
pub fn naive_chains(clouds: &[FeaturedCloud], order: &[usize], k: usize) -> Vec<Vec<usize>> {
    let i_count = clouds.len();
    let feats: Vec<Vec<Vec<f64>>> = clouds.iter().map(feature_rows).collect();
    let sizes: Vec<usize> = order.iter().map(|&s| clouds[s].len()).collect();
    let total: usize = sizes.iter().product();
    let mut rows = Vec::new();
    for code in 0..total {
        // Decode with the first scene most significant so rows come out
        // sorted by start index.
        let mut tuple = vec![0; i_count];
        let mut rest = code;
        for t in (0..i_count).rev() {
            tuple[t] = rest % sizes[t];
            rest /= sizes[t];
        }
        let ok = (0..i_count).all(|t| {
            let (a, b) = (order[t], order[(t + 1) % i_count]);
            let (ia, ib) = (tuple[t], tuple[(t + 1) % i_count]);
            let nn = naive_knn(&feats[b], &feats[a][ia], 1)[0];
            let back = naive_knn(&feats[a], &feats[b][ib], k.min(feats[a].len()));
            nn == ib && back.contains(&ia)
        });
        if ok {
            let mut row = vec![0; i_count];
            for t in 0..i_count {
                row[order[t]] = tuple[t];
            }
            rows.push(row);
        }
    }
    let mut used: Vec<Vec<usize>> = vec![Vec::new(); i_count];
    rows.retain(|r| {
        if r.iter().enumerate().any(|(s, i)| used[s].contains(i)) {
            return false;
        }
        r.iter().enumerate().for_each(|(s, &i)| used[s].push(i));
        true
    });
    rows
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Triple loop over ordered scene pairs, anchors and candidates.
pub fn naive_infonce(sets: &[Tensor], tau: f64, mode: DenominatorMode) -> f64 {
    let mut loss = 0.0;
    for i in 0..sets.len() {
        for j in 0..sets.len() {
            if i == j {
                continue;
            }
            let k_count = sets[i].rows();
            for k in 0..k_count {
                let pos = (cosine(sets[i].row_slice(k), sets[j].row_slice(k)) / tau).exp();
                let mut denom = 0.0;
                for kk in 0..k_count {
                    if kk != k || mode == DenominatorMode::Standard {
                        denom += (cosine(sets[i].row_slice(k), sets[j].row_slice(kk)) / tau).exp();
                    }
                }
                loss -= (pos / denom).ln();
            }
        }
    }
    loss
}

/// Mean over hand samples of the distance to the closest region point.
pub fn naive_success_metric(model: &EffectorModel, pose: &PoseVector, cloud: &FeaturedCloud, region: i32) -> f64 {
    let q = model.sample_queries(pose).unwrap();
    let labels = cloud.labels().unwrap();
    let mut total = 0.0;
    for s in 0..q.rows() {
        let mut best = f64::INFINITY;
        for i in 0..cloud.len() {
            if labels[i] == region {
                best = best.min(sq(q.row_slice(s), &cloud.point(i)).sqrt());
            }
        }
        total += best;
    }
    total / q.rows() as f64
}

/// Straight-line evaluation of the decoder at one query, returning the
/// feature and the per-head attention weights.
pub fn naive_query_feature(params: &DecoderParams, cloud: &FeaturedCloud, q: [f64; 3], eps: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = cloud.len();
    let mut center = [0.0; 3];
    for i in 0..n {
        for k in 0..3 {
            center[k] += cloud.point(i)[k] / n as f64;
        }
    }
    let radius = ((0..n).map(|i| sq(&cloud.point(i), &center)).sum::<f64>() / n as f64).sqrt().max(1e-6);
    let norm = |p: [f64; 3]| -> Vec<f64> { (0..3).map(|k| (p[k] - center[k]) / radius).collect() };
    let w = naive_idw_weights(cloud, q, eps);
    let d = params.shape().head_dim;
    let mut feat = naive_idw_feature(cloud, q, eps);
    let mut all_weights = Vec::new();
    // x·M for a row vector x.
    let vecmat = |x: &[f64], m: &Tensor| -> Vec<f64> { (0..m.cols()).map(|c| (0..m.rows()).map(|r| x[r] * m.get(r, c)).sum()).collect() };
    for layer in params.layers() {
        let mut token = norm(q);
        token.extend(&feat);
        let mut concat = Vec::new();
        for head in &layer.heads {
            let qh = vecmat(&token, &head.query);
            let mut logits = Vec::with_capacity(n);
            for i in 0..n {
                let mut key = norm(cloud.point(i));
                key.extend(cloud.feature(i));
                let kh = vecmat(&key, &head.key);
                let dot: f64 = qh.iter().zip(&kh).map(|(a, b)| a * b).sum();
                logits.push(dot / (d as f64).sqrt() + w[i].ln());
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let a: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            let mut out = vec![0.0; d];
            for i in 0..n {
                let v = vecmat(cloud.feature(i), &head.value);
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += a[i] * vi;
                }
            }
            concat.extend(out);
            all_weights.push(a);
        }
        feat = vecmat(&concat, &layer.output);
    }
    (feat, all_weights)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
