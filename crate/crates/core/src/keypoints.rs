//! Cross-scene keypoint correspondences by cyclic mutual nearest neighbours.
//!
//! Scenes are visited in a seeded random cyclic order. A chain starts at a
//! point of the first scene and hops to the feature-nearest point of each
//! following scene, then back to the first. It is kept when it closes on
//! its starting point and, for every adjacent pair, the earlier point lies
//! among the `k_nn` feature-nearest neighbours (within its own scene) of
//! the point it was matched to.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::scene::{knn, FeaturedCloud, Metric};
use crate::{Error, Result};

pub const DEFAULT_K_NN: usize = 3;
pub const DEFAULT_MAX_KEYPOINTS: usize = 512;

/// `K` aligned rows; row `k` holds one point index per scene, in the order
/// the clouds were passed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeypointCorrespondence {
    rows: Vec<Vec<usize>>,
    scenes: usize,
}

impl KeypointCorrespondence {
    pub fn new(rows: Vec<Vec<usize>>, scenes: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::NoKeypoints);
        }
        if rows.iter().any(|r| r.len() != scenes) {
            return Err(Error::Config(format!("every keypoint row needs {scenes} indices")));
        }
        Ok(Self { rows, scenes })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scene_count(&self) -> usize {
        self.scenes
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Point indices of every keypoint in scene `i`.
    pub fn column(&self, i: usize) -> Vec<usize> {
        self.rows.iter().map(|r| r[i]).collect()
    }

    /// Checks indices against the clouds and that no index repeats within a scene.
    pub fn validate(&self, clouds: &[FeaturedCloud]) -> Result<()> {
        if clouds.len() != self.scenes {
            return Err(Error::Config(format!("{} clouds for a {}-scene correspondence", clouds.len(), self.scenes)));
        }
        for (i, cloud) in clouds.iter().enumerate() {
            let mut seen = vec![false; cloud.len()];
            for r in &self.rows {
                if r[i] >= cloud.len() || std::mem::replace(&mut seen[r[i]], true) {
                    return Err(Error::Config(format!("invalid or repeated keypoint index {} in scene {i}", r[i])));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionConfig {
    pub k_nn: usize,
    pub seed: u64,
    pub max_keypoints: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { k_nn: DEFAULT_K_NN, seed: 0, max_keypoints: DEFAULT_MAX_KEYPOINTS }
    }
}

/// Seeded cyclic visiting order of `scenes` scenes.
pub fn scene_order(scenes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Matches from scene `a` into scene `b`: the nearest neighbour of every
/// point of `a`, and for every point of `b` its `k` nearest points in `a`.
struct PairLinks {
    nn: Vec<usize>,
    back: Vec<Vec<usize>>,
}

fn pair_links(a: &FeaturedCloud, b: &FeaturedCloud, k: usize) -> Result<PairLinks> {
    let nn = (0..a.len())
        .into_par_iter()
        .map(|i| knn(b, a.feature(i), 1, Metric::Feature).map(|v| v[0]))
        .collect::<Result<Vec<_>>>()?;
    let k = k.min(a.len());
    let back = (0..b.len()).into_par_iter().map(|j| knn(a, b.feature(j), k, Metric::Feature)).collect::<Result<Vec<_>>>()?;
    Ok(PairLinks { nn, back })
}

/// Cyclic mutual-nearest-neighbour keypoint selection. `k_nn` larger than a
/// scene is clamped to the scene size.
pub fn select_keypoints(clouds: &[FeaturedCloud], config: SelectionConfig) -> Result<KeypointCorrespondence> {
    let scenes = clouds.len();
    if scenes < 2 {
        return Err(Error::Config(format!("keypoint selection needs at least 2 scenes, got {scenes}")));
    }
    if config.k_nn == 0 {
        return Err(Error::Config("k_nn must be at least 1".into()));
    }
    let c = clouds[0].feature_dim();
    if let Some(bad) = clouds.iter().find(|cl| cl.feature_dim() != c) {
        return Err(Error::FeatureDim { expected: c, got: bad.feature_dim() });
    }
    let order = scene_order(scenes, config.seed);
    let links = (0..scenes)
        .map(|t| pair_links(&clouds[order[t]], &clouds[order[(t + 1) % scenes]], config.k_nn))
        .collect::<Result<Vec<_>>>()?;

    let first = order[0];
    let rows: Vec<Vec<usize>> = (0..clouds[first].len())
        .into_par_iter()
        .filter_map(|start| {
            let mut row = vec![0usize; scenes];
            let mut cur = start;
            for (t, link) in links.iter().enumerate() {
                row[order[t]] = cur;
                let next = link.nn[cur];
                if !link.back[next].contains(&cur) {
                    return None;
                }
                cur = next;
            }
            (cur == start).then_some(row)
        })
        .collect();

    let mut rows = dedup_rows(rows, scenes);
    if rows.is_empty() {
        return Err(Error::NoKeypoints);
    }
    if rows.len() > config.max_keypoints.max(1) {
        rows = farthest_point_subsample(&rows, &clouds[first], first, config.max_keypoints.max(1));
    }
    KeypointCorrespondence::new(rows, scenes)
}

/// Drops rows that reuse an index already taken in some scene, keeping the
/// earliest row.
fn dedup_rows(rows: Vec<Vec<usize>>, scenes: usize) -> Vec<Vec<usize>> {
    let mut used: Vec<std::collections::HashSet<usize>> = vec![Default::default(); scenes];
    rows.into_iter()
        .filter(|r| {
            if r.iter().enumerate().any(|(i, idx)| used[i].contains(idx)) {
                return false;
            }
            r.iter().enumerate().for_each(|(i, &idx)| {
                used[i].insert(idx);
            });
            true
        })
        .collect()
}

/// Greedy farthest-point subset in feature space of scene `scene`,
/// starting from the first row; the survivors keep their original order.
fn farthest_point_subsample(rows: &[Vec<usize>], cloud: &FeaturedCloud, scene: usize, keep: usize) -> Vec<Vec<usize>> {
    let dist = |a: usize, b: usize| -> f64 {
        cloud.feature(rows[a][scene]).iter().zip(cloud.feature(rows[b][scene])).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut chosen = vec![0usize];
    let mut min_d: Vec<f64> = (0..rows.len()).map(|r| dist(r, 0)).collect();
    while chosen.len() < keep {
        let (next, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        chosen.push(next);
        for (r, m) in min_d.iter_mut().enumerate() {
            *m = m.min(dist(r, next));
        }
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|r| rows[r].clone()).collect()
}
