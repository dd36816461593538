//! Featured point clouds, nearest-neighbour queries and the
//! inverse-distance-weighted feature field.
//!
//! The field value at `q` is `f = Σ wᵢ fᵢ` with
//! `wᵢ ∝ 1 / (‖q − xᵢ‖² + ε)`. The `ε` keeps the field finite and
//! differentiable on the scene points themselves.

use std::sync::OnceLock;

use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Default regularizer of the inverse-distance weights, in m².
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Spatial queries switch from an exhaustive scan to a uniform grid at this size.
pub const GRID_THRESHOLD: usize = 4096;

/// A query location in scene coordinates (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryPoint(pub [f64; 3]);

impl From<[f64; 3]> for QueryPoint {
    fn from(p: [f64; 3]) -> Self {
        Self(p)
    }
}

/// Scene points with per-point features and optional region labels.
#[derive(Clone, Debug)]
pub struct FeaturedCloud {
    points: Tensor,
    features: Tensor,
    labels: Option<Vec<i32>>,
    grid: OnceLock<SpatialGrid>,
}

impl PartialEq for FeaturedCloud {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.features == other.features && self.labels == other.labels
    }
}

impl FeaturedCloud {
    /// `points` is `N×3`, `features` is `N×C`; `labels`, when given, has `N` entries.
    pub fn new(points: Tensor, features: Tensor, labels: Option<Vec<i32>>) -> Result<Self> {
        let n = points.rows();
        if n == 0 {
            return Err(Error::Cloud("cloud has no points".into()));
        }
        if points.cols() != 3 {
            return Err(Error::Cloud(format!("points must be Nx3, got {:?}", points.shape())));
        }
        if features.rows() != n || features.cols() == 0 {
            return Err(Error::Cloud(format!("{} points but features are {:?}", n, features.shape())));
        }
        if !points.is_finite() || !features.is_finite() {
            return Err(Error::Cloud("non-finite coordinate or feature".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Cloud(format!("{} labels for {n} points", l.len())));
            }
        }
        Ok(Self { points, features, labels, grid: OnceLock::new() })
    }

    pub fn from_points(points: &[[f64; 3]], features: Tensor, labels: Option<Vec<i32>>) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(points.len(), 3, flat)?, features, labels)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[i32]> {
        self.labels.as_deref()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.points.row_slice(i);
        [r[0], r[1], r[2]]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row_slice(i)
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for i in 0..self.len() {
            for (a, b) in c.iter_mut().zip(self.points.row_slice(i)) {
                *a += b;
            }
        }
        c.map(|v| v / self.len() as f64)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..self.len() {
            for k in 0..3 {
                let v = self.points.get(i, k);
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        (lo, hi)
    }

    /// Applies `x ↦ R x + t` to every point; features and labels are kept.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let mut pts = self.points.clone();
        for i in 0..self.len() {
            let p = self.point(i);
            let row = pts.row_slice_mut(i);
            for r in 0..3 {
                row[r] = (0..3).map(|c| rotation[r][c] * p[c]).sum::<f64>() + translation[r];
            }
        }
        Self { points: pts, features: self.features.clone(), labels: self.labels.clone(), grid: OnceLock::new() }
    }

    /// Reorders points (with their features and labels) so that new row `i`
    /// is old row `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Cloud("not a permutation of the point indices".into()));
        }
        let pick = |t: &Tensor| {
            let mut out = Tensor::zeros(t.rows(), t.cols());
            for (k, &i) in order.iter().enumerate() {
                out.row_slice_mut(k).copy_from_slice(t.row_slice(i));
            }
            out
        };
        let labels = self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect());
        Self::new(pick(&self.points), pick(&self.features), labels)
    }

    fn grid(&self) -> &SpatialGrid {
        self.grid.get_or_init(|| SpatialGrid::build(&self.points))
    }
}

/// Distance used by [`knn`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Euclidean distance between point coordinates; `center` is a 3-vector.
    Spatial,
    /// Euclidean distance between raw features; `center` is a `C`-vector.
    Feature,
}

/// Indices of the `k` nearest points to `center`, nearest first. Equal
/// distances resolve to the lower index. Always exact.
pub fn knn(cloud: &FeaturedCloud, center: &[f64], k: usize, metric: Metric) -> Result<Vec<usize>> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    match metric {
        Metric::Spatial => {
            if center.len() != 3 {
                return Err(Error::Cloud(format!("spatial query needs 3 coordinates, got {}", center.len())));
            }
            let c = [center[0], center[1], center[2]];
            if n >= GRID_THRESHOLD {
                return Ok(cloud.grid().knn(&cloud.points, c, k));
            }
            Ok(scan(cloud.points(), center, k))
        }
        Metric::Feature => {
            if center.len() != cloud.feature_dim() {
                return Err(Error::FeatureDim { expected: cloud.feature_dim(), got: center.len() });
            }
            Ok(scan(cloud.features(), center, k))
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn scan(rows: &Tensor, center: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..rows.rows()).map(|i| (sq_dist(rows.row_slice(i), center), i)).collect();
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, by_dist_then_index);
        d.truncate(k);
    }
    d.sort_by(by_dist_then_index);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Uniform bucket grid for exact spatial kNN on large clouds.
#[derive(Clone, Debug)]
struct SpatialGrid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl SpatialGrid {
    fn build(points: &Tensor) -> Self {
        let n = points.rows();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for i in 0..n {
            for k in 0..3 {
                lo[k] = lo[k].min(points.get(i, k));
                hi[k] = hi[k].max(points.get(i, k));
            }
        }
        let ext: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
        let max_ext = ext.iter().copied().fold(0.0, f64::max).max(1e-9);
        let vol: f64 = ext.iter().map(|e| e.max(max_ext / 256.0)).product();
        let cell = (2.0 * vol / n as f64).cbrt().max(max_ext / 256.0);
        let dims = [0, 1, 2].map(|k| (ext[k] / cell).floor() as usize + 1);
        let cell_of = |p: &[f64]| -> usize {
            let c = [0, 1, 2].map(|k| (((p[k] - lo[k]) / cell).floor() as usize).min(dims[k] - 1));
            (c[0] * dims[1] + c[1]) * dims[2] + c[2]
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let ids: Vec<usize> = (0..n).map(|i| cell_of(points.row_slice(i))).collect();
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; n];
        for (i, &c) in ids.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Self { origin: lo, cell, dims, starts: counts, items }
    }

    fn knn(&self, points: &Tensor, c: [f64; 3], k: usize) -> Vec<usize> {
        let ci = [0, 1, 2].map(|a| {
            let f = ((c[a] - self.origin[a]) / self.cell).floor();
            (f.max(0.0) as usize).min(self.dims[a] - 1) as isize
        });
        let mut cand: Vec<(f64, usize)> = Vec::new();
        let mut r: isize = 0;
        loop {
            let lo = [0, 1, 2].map(|a| (ci[a] - r).max(0));
            let hi = [0, 1, 2].map(|a| (ci[a] + r).min(self.dims[a] as isize - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let cheb = (x - ci[0]).abs().max((y - ci[1]).abs()).max((z - ci[2]).abs());
                        if cheb != r {
                            continue;
                        }
                        let cell = ((x as usize) * self.dims[1] + y as usize) * self.dims[2] + z as usize;
                        for &i in &self.items[self.starts[cell]..self.starts[cell + 1]] {
                            cand.push((sq_dist(points.row_slice(i), &c), i));
                        }
                    }
                }
            }
            let covers_all = (0..3).all(|a| lo[a] == 0 && hi[a] == self.dims[a] as isize - 1);
            if covers_all {
                break;
            }
            if cand.len() >= k {
                // Distance from the center to the nearest face of the visited
                // box that still has unvisited cells behind it.
                let mut bound = f64::INFINITY;
                for a in 0..3 {
                    if lo[a] > 0 {
                        bound = bound.min(c[a] - (self.origin[a] + lo[a] as f64 * self.cell));
                    }
                    if hi[a] < self.dims[a] as isize - 1 {
                        bound = bound.min(self.origin[a] + (hi[a] + 1) as f64 * self.cell - c[a]);
                    }
                }
                cand.sort_by(by_dist_then_index);
                if bound > 0.0 && cand[k - 1].0 < bound * bound {
                    break;
                }
            }
            r += 1;
        }
        cand.sort_by(by_dist_then_index);
        cand.truncate(k);
        cand.into_iter().map(|(_, i)| i).collect()
    }
}

/// Normalized inverse-distance weights of every scene point for query `q`.
pub fn idw_weights(cloud: &FeaturedCloud, q: QueryPoint, epsilon: f64) -> Vec<f64> {
    let inv: Vec<f64> =
        (0..cloud.len()).map(|i| 1.0 / (sq_dist(cloud.points.row_slice(i), &q.0) + epsilon)).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|w| w / total).collect()
}

/// Inverse-distance-weighted feature at `q`.
pub fn idw_feature(cloud: &FeaturedCloud, q: QueryPoint, epsilon: f64) -> Vec<f64> {
    let w = idw_weights(cloud, q, epsilon);
    let mut f = vec![0.0; cloud.feature_dim()];
    for (i, wi) in w.iter().enumerate() {
        for (acc, x) in f.iter_mut().zip(cloud.feature(i)) {
            *acc += wi * x;
        }
    }
    f
}

/// Log-domain distance bias `−log(‖q − xᵢ‖² + ε)` (`Q×N`). Its row-wise
/// softmax is exactly the inverse-distance weighting.
pub fn idw_log_bias(tape: &mut Tape, points: Var, queries: Var, epsilon: f64) -> Result<Var> {
    let d2 = tape.pairwise_sq_dist(queries, points)?;
    let shifted = tape.add_const(d2, epsilon);
    let log = tape.log(shifted);
    Ok(tape.neg(log))
}

/// Differentiable inverse-distance field for a batch of `Q×3` queries.
/// Returns the `Q×C` features and the log bias they were weighted by.
pub fn idw_field(tape: &mut Tape, points: Var, features: Var, queries: Var, epsilon: f64) -> Result<(Var, Var)> {
    let bias = idw_log_bias(tape, points, queries, epsilon)?;
    let weights = tape.softmax_rows(bias);
    Ok((tape.matmul(weights, features)?, bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 3]], feats: &[&[f64]]) -> FeaturedCloud {
        FeaturedCloud::from_points(points, Tensor::from_rows(feats).unwrap(), None).unwrap()
    }

    #[test]
    fn construction_validates() {
        let f = Tensor::zeros(1, 2);
        assert!(FeaturedCloud::from_points(&[], Tensor::zeros(0, 2), None).is_err());
        assert!(FeaturedCloud::from_points(&[[0.0, f64::NAN, 0.0]], f.clone(), None).is_err());
        assert!(FeaturedCloud::from_points(&[[0.0; 3]], f.clone(), Some(vec![1, 2])).is_err());
        assert!(FeaturedCloud::from_points(&[[0.0; 3], [1.0; 3]], f, None).is_err());
    }

    #[test]
    fn knn_coincident_and_full() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], &[&[0.0], &[1.0], &[2.0]]);
        assert_eq!(knn(&c, &[1.0, 0.0, 0.0], 1, Metric::Spatial).unwrap(), vec![1]);
        assert_eq!(knn(&c, &[0.1, 0.0, 0.0], 3, Metric::Spatial).unwrap(), vec![0, 1, 2]);
        assert_eq!(knn(&c, &[1.9], 2, Metric::Feature).unwrap(), vec![2, 1]);
        assert!(matches!(knn(&c, &[0.0; 3], 4, Metric::Spatial), Err(Error::KTooLarge { k: 4, n: 3 })));
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let c = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[&[0.0], &[0.0], &[0.0]]);
        assert_eq!(knn(&c, &[0.0; 3], 2, Metric::Spatial).unwrap(), vec![0, 1]);
    }

    #[test]
    fn single_point_field_is_that_feature() {
        let c = cloud(&[[0.3, -0.2, 0.1]], &[&[2.0, -1.0]]);
        for q in [[0.0; 3], [5.0, 1.0, -3.0], [0.3, -0.2, 0.1]] {
            assert_eq!(idw_feature(&c, QueryPoint(q), DEFAULT_EPSILON), vec![2.0, -1.0]);
        }
    }

    #[test]
    fn equidistant_points_average() {
        let c = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], &[&[1.0, 0.0], &[0.0, 3.0]]);
        let f = idw_feature(&c, QueryPoint([0.0; 3]), DEFAULT_EPSILON);
        assert!((f[0] - 0.5).abs() < 1e-15 && (f[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn ring_weights_are_uniform() {
        let c = cloud(
            &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
            &[&[0.0], &[0.0], &[0.0], &[0.0]],
        );
        for w in idw_weights(&c, QueryPoint([0.0; 3]), DEFAULT_EPSILON) {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn coincident_query_concentrates_weight() {
        let pts: Vec<[f64; 3]> = (0..5).map(|i| [i as f64 * 0.1, 0.0, 0.0]).collect();
        let c = FeaturedCloud::from_points(&pts, Tensor::zeros(5, 1), None).unwrap();
        let w = idw_weights(&c, QueryPoint(pts[3]), 1e-12);
        assert!(w[3] > 1.0 - 1e-9);
    }

    #[test]
    fn tape_field_matches_plain_field() {
        let c = cloud(&[[0.0; 3], [0.1, 0.2, 0.0], [0.3, -0.1, 0.2]], &[&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]]);
        let q = [0.05, 0.05, 0.02];
        let mut t = Tape::new();
        let (p, f) = (t.leaf(c.points().clone()), t.leaf(c.features().clone()));
        let qv = t.leaf(Tensor::row(&q));
        let (field, _) = idw_field(&mut t, p, f, qv, DEFAULT_EPSILON).unwrap();
        let plain = idw_feature(&c, QueryPoint(q), DEFAULT_EPSILON);
        for (a, b) in t.value(field).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
