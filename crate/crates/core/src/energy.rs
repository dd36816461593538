//! The transfer objective and the pose optimizer.
//!
//! ```text
//! E(β) = E_feat + λ_pen·E_pen + λ_spen·E_spen + λ_pose·E_pose
//! ```
//!
//! `E_feat` is the L1 difference between the demonstrated sample features
//! and the features of the same samples at `β` in the target scene. The hand
//! volume is the union of the sample spheres: `E_pen` sums how deep each
//! scene point sits inside it, `E_spen` penalizes samples of non-adjacent
//! links closer than `δ`, and `E_pose` is the squared joint-limit excess.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{DecoderParams, FrozenField};
use crate::effector::{EffectorModel, PoseVector};
use crate::numerics::{Tape, Tensor, Var};
use crate::scene::{idw_field, FeaturedCloud, DEFAULT_EPSILON};
use crate::{Error, Result};

/// A feature field bound to one scene.
#[derive(Clone, Debug)]
pub enum FeatureField {
    Attention(FrozenField),
    Idw { points: Tensor, features: Tensor, epsilon: f64 },
}

impl FeatureField {
    pub fn attention(params: &DecoderParams, cloud: &FeaturedCloud, epsilon: f64) -> Result<Self> {
        Ok(Self::Attention(FrozenField::new(params, cloud, epsilon)?))
    }

    pub fn idw(cloud: &FeaturedCloud, epsilon: f64) -> Self {
        Self::Idw { points: cloud.points().clone(), features: cloud.features().clone(), epsilon }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Self::Attention(f) => f.feature_dim(),
            Self::Idw { features, .. } => features.cols(),
        }
    }

    /// `Q×C` features of a `Q×3` query variable.
    pub fn decode(&self, tape: &mut Tape, queries: Var) -> Result<Var> {
        match self {
            Self::Attention(f) => Ok(f.decode(tape, queries)?.features),
            Self::Idw { points, features, epsilon } => {
                let p = tape.leaf(points.clone());
                let f = tape.leaf(features.clone());
                Ok(idw_field(tape, p, f, queries, *epsilon)?.0)
            }
        }
    }

    pub fn features_at(&self, queries: &Tensor) -> Result<Tensor> {
        match self {
            Self::Attention(f) => f.features_at(queries),
            Self::Idw { .. } => {
                let mut tape = Tape::new();
                let q = tape.leaf(queries.clone());
                let f = self.decode(&mut tape, q)?;
                Ok(tape.value(f).clone())
            }
        }
    }
}

/// A demonstrated pose together with the features its samples saw.
#[derive(Clone, Debug)]
pub struct Demonstration {
    pub model: EffectorModel,
    pub pose: PoseVector,
    /// `Q×C` features of the model's samples at `pose` in the source scene.
    pub features: Tensor,
}

impl Demonstration {
    /// Records the demonstration in `source`, a field built on the source scene.
    pub fn record(source: &FeatureField, model: EffectorModel, pose: PoseVector) -> Result<Self> {
        pose.check()?;
        let features = source.features_at(&recorded_queries(&model, &pose)?)?;
        Ok(Self { model, pose, features })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyConfig {
    pub lambda_pen: f64,
    pub lambda_spen: f64,
    pub lambda_pose: f64,
    /// Self-penetration threshold in meters.
    pub delta: f64,
    pub steps: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub restarts: usize,
    pub seed: u64,
    pub epsilon: f64,
    /// Relative growth of the target bounding box for random initial translations.
    pub init_inflation: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            lambda_pen: 1e-1,
            lambda_spen: 1e-2,
            lambda_pose: 1e-2,
            delta: 0.01,
            steps: 300,
            step_size: 1e-2,
            momentum: 0.9,
            restarts: 8,
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            init_inflation: 0.2,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_pen, self.lambda_spen, self.lambda_pose];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config(format!("energy weights must be non-negative: {lambdas:?}")));
        }
        if !(self.delta > 0.0) || !(self.step_size > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("delta, step size and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.restarts == 0 || !(self.init_inflation >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1), restarts ≥ 1, inflation ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub feature: f64,
    pub penetration: f64,
    pub self_penetration: f64,
    pub pose: f64,
    pub total: f64,
}

impl EnergyReport {
    pub fn combine(feature: f64, penetration: f64, self_penetration: f64, pose: f64, config: &EnergyConfig) -> Self {
        let total =
            feature + config.lambda_pen * penetration + config.lambda_spen * self_penetration + config.lambda_pose * pose;
        Self { feature, penetration, self_penetration, pose, total }
    }
}

/// Depth of every scene point inside the union of sample spheres, summed.
pub fn penetration_energy(cloud: &FeaturedCloud, queries: &Tensor, radii: &[f64]) -> f64 {
    (0..cloud.len())
        .map(|i| {
            let x = cloud.point(i);
            (0..queries.rows())
                .map(|k| radii[k] - dist(&x, queries.row_slice(k)))
                .fold(0.0, f64::max)
        })
        .sum()
}

/// `Σ max(δ − ‖p − q‖, 0)` over ordered pairs of samples on non-adjacent links.
pub fn self_penetration_energy(model: &EffectorModel, queries: &Tensor, delta: f64) -> f64 {
    let q = queries.rows();
    let mask = model.collision_mask();
    let mut e = 0.0;
    for i in 0..q {
        for j in 0..q {
            if mask[i * q + j] {
                e += (delta - dist(queries.row_slice(i), queries.row_slice(j))).max(0.0);
            }
        }
    }
    e
}

pub fn pose_energy(model: &EffectorModel, pose: &PoseVector) -> Result<f64> {
    Ok(model.joint_limit_excess(pose)?.iter().map(|e| e * e).sum())
}

/// Sample positions through the tape kinematics, the path every energy
/// takes, so `E_feat(β̂)` is exactly 0 when the target is the source scene.
fn recorded_queries(model: &EffectorModel, pose: &PoseVector) -> Result<Tensor> {
    let mut tape = Tape::new();
    let beta = tape.leaf(pose.to_tensor());
    let queries = model.queries_on_tape(&mut tape, beta)?;
    Ok(tape.value(queries).clone())
}

pub fn feature_energy(field: &FeatureField, demo: &Demonstration, pose: &PoseVector) -> Result<f64> {
    let f = field.features_at(&recorded_queries(&demo.model, pose)?)?;
    Ok(f.zip_map(&demo.features, |a, b| (a - b).abs()).sum())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// The energy terms of a pose variable, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EnergyVars {
    pub feature: Var,
    pub penetration: Var,
    pub self_penetration: Var,
    pub pose: Var,
    pub total: Var,
}

/// Everything needed to score poses in one target scene.
#[derive(Clone, Debug)]
pub struct Objective<'a> {
    pub field: &'a FeatureField,
    pub demo: &'a Demonstration,
    pub target: &'a FeaturedCloud,
    pub config: &'a EnergyConfig,
}

impl Objective<'_> {
    fn check(&self) -> Result<()> {
        if self.field.feature_dim() != self.demo.features.cols() {
            return Err(Error::FeatureDim { expected: self.demo.features.cols(), got: self.field.feature_dim() });
        }
        self.config.validate()
    }

    /// Records every term for the `1×(9+J)` pose variable `beta`.
    pub fn record(&self, tape: &mut Tape, beta: Var) -> Result<EnergyVars> {
        let model = &self.demo.model;
        let queries = model.queries_on_tape(tape, beta)?;

        let feats = self.field.decode(tape, queries)?;
        let demo = tape.leaf(self.demo.features.clone());
        let diff = tape.sub(feats, demo)?;
        let abs = tape.abs(diff);
        let feature = tape.sum(abs);

        let penetration = self.record_penetration(tape, queries)?;

        let mask = Tensor::from_vec(
            model.sample_count(),
            model.sample_count(),
            model.collision_mask().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )?;
        let d = tape.pairwise_dist(queries, queries)?;
        let gap = tape.neg(d);
        let gap = tape.add_const(gap, self.config.delta);
        let hinge = tape.max_const(gap, 0.0);
        let mask = tape.leaf(mask);
        let counted = tape.mul(hinge, mask)?;
        let self_penetration = tape.sum(counted);

        let pose = match model.joint_limit_excess_on_tape(tape, beta)? {
            Some(ex) => {
                let sq = tape.mul(ex, ex)?;
                tape.sum(sq)
            }
            None => tape.leaf(Tensor::scalar(0.0)),
        };

        let c = self.config;
        let parts = [
            feature,
            tape.scale(penetration, c.lambda_pen),
            tape.scale(self_penetration, c.lambda_spen),
            tape.scale(pose, c.lambda_pose),
        ];
        let stacked = tape.concat_rows(&parts)?;
        let total = tape.sum(stacked);
        Ok(EnergyVars { feature, penetration, self_penetration, pose, total })
    }

    /// Scene points farther than every sphere radius from every sample
    /// contribute nothing, so only the rest go on the tape.
    fn record_penetration(&self, tape: &mut Tape, queries: Var) -> Result<Var> {
        let radii = self.demo.model.radii();
        let q = tape.value(queries).clone();
        let near: Vec<usize> = (0..self.target.len())
            .filter(|&i| {
                let x = self.target.point(i);
                (0..q.rows()).any(|k| dist(&x, q.row_slice(k)) < radii[k])
            })
            .collect();
        if near.is_empty() {
            return Ok(tape.leaf(Tensor::scalar(0.0)));
        }
        let mut pts = Tensor::zeros(near.len(), 3);
        for (r, &i) in near.iter().enumerate() {
            pts.row_slice_mut(r).copy_from_slice(&self.target.point(i));
        }
        let pts = tape.leaf(pts);
        let d = tape.pairwise_dist(pts, queries)?;
        let neg = tape.neg(d);
        let r = tape.leaf(Tensor::row(&radii));
        let depth = tape.add_row(neg, r)?;
        let deepest = tape.row_max(depth)?;
        let clamped = tape.max_const(deepest, 0.0);
        Ok(tape.sum(clamped))
    }

    /// Energy report and gradient with respect to the flattened pose.
    pub fn evaluate(&self, pose: &PoseVector) -> Result<(EnergyReport, Vec<f64>)> {
        self.check()?;
        let mut tape = Tape::new();
        let beta = tape.leaf(pose.to_tensor());
        let v = self.record(&mut tape, beta)?;
        let grad = tape.gradients(v.total, &Tensor::scalar(1.0))?.get(beta).into_vec();
        let val = |x: Var| tape.value(x).item();
        let report = EnergyReport::combine(val(v.feature), val(v.penetration), val(v.self_penetration), val(v.pose), self.config);
        Ok((report, grad))
    }
}

pub fn total_energy(
    field: &FeatureField,
    demo: &Demonstration,
    target: &FeaturedCloud,
    pose: &PoseVector,
    config: &EnergyConfig,
) -> Result<EnergyReport> {
    Ok(Objective { field, demo, target, config }.evaluate(pose)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub step: usize,
    pub pose: PoseVector,
    pub report: EnergyReport,
}

#[derive(Clone, Debug)]
pub struct RestartResult {
    pub restart: usize,
    pub pose: PoseVector,
    pub report: EnergyReport,
    /// The accepted pose after every step, starting with the initial pose.
    pub trajectory: Vec<TrajectoryStep>,
}

#[derive(Clone, Debug)]
pub struct OptimizationResult {
    pub best: RestartResult,
    /// Restarts dropped after reaching a non-finite energy.
    pub abandoned: Vec<usize>,
    /// Final report of every completed restart, by restart index.
    pub finals: Vec<(usize, EnergyReport)>,
}

/// Re-expresses the rotation columns as an exact orthonormal pair. The
/// energy only sees the Gram–Schmidt result, so this never changes it.
fn tidy(pose: &mut PoseVector) -> Result<()> {
    pose.rotation6d = crate::effector::matrix_to_r6(&pose.rotation()?);
    Ok(())
}

/// Decay of the running squared gradient in [`descend`].
const SECOND_MOMENT_DECAY: f64 = 0.999;

/// Momentum descent with per-coordinate step scaling (bias-corrected first
/// and second moments). A step that raises the energy is rejected, the step
/// size halves and both moments reset; accepted steps let the step size
/// recover by 25% up to its initial value.
pub fn descend(objective: &Objective<'_>, init: PoseVector, restart: usize) -> Result<RestartResult> {
    let c = objective.config;
    let mut pose = init;
    pose.check()?;
    let (mut report, mut grad) = objective.evaluate(&pose)?;
    if !report.total.is_finite() {
        return Err(Error::AllRestartsFailed);
    }
    let mut trajectory = vec![TrajectoryStep { step: 0, pose: pose.clone(), report }];
    let mut first = vec![0.0; grad.len()];
    let mut second = vec![0.0; grad.len()];
    let mut t = 0;
    let mut eta = c.step_size;
    for step in 1..=c.steps {
        if grad.iter().all(|g| g.is_finite()) && grad.iter().any(|&g| g != 0.0) {
            t += 1;
            for ((m, v), g) in first.iter_mut().zip(second.iter_mut()).zip(&grad) {
                *m = c.momentum * *m + (1.0 - c.momentum) * g;
                *v = SECOND_MOMENT_DECAY * *v + (1.0 - SECOND_MOMENT_DECAY) * g * g;
            }
            let (b1, b2) = (1.0 - c.momentum.powi(t), 1.0 - SECOND_MOMENT_DECAY.powi(t));
            let cand: Vec<f64> = pose
                .to_vec()
                .iter()
                .zip(first.iter().zip(&second))
                .map(|(x, (m, v))| x - eta * (m / b1) / ((v / b2).sqrt() + 1e-12))
                .collect();
            let accepted = PoseVector::from_slice(&cand).and_then(|mut p| {
                tidy(&mut p)?;
                let (r, g) = objective.evaluate(&p)?;
                Ok((p, r, g))
            });
            match accepted {
                Ok((p, r, g)) if r.total.is_finite() && r.total <= report.total => {
                    pose = p;
                    report = r;
                    grad = g;
                    eta = (eta * 1.25).min(c.step_size);
                }
                Ok((_, r, _)) if !r.total.is_finite() => return Err(Error::AllRestartsFailed),
                _ => {
                    eta *= 0.5;
                    first.iter_mut().chain(second.iter_mut()).for_each(|x| *x = 0.0);
                    t = 0;
                }
            }
        }
        trajectory.push(TrajectoryStep { step, pose: pose.clone(), report });
    }
    Ok(RestartResult { restart, pose, report, trajectory })
}

/// Initial poses of every restart, each drawn from its own stream of `seed`.
pub fn initial_poses(model: &EffectorModel, target: &FeaturedCloud, config: &EnergyConfig) -> Vec<PoseVector> {
    let (lo, hi) = target.bounds();
    let grow: [f64; 3] = std::array::from_fn(|k| 0.5 * config.init_inflation * (hi[k] - lo[k]));
    let lo = std::array::from_fn(|k| lo[k] - grow[k]);
    let hi = std::array::from_fn(|k| hi[k] + grow[k]);
    (0..config.restarts)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            model.random_pose(&mut rng, lo, hi)
        })
        .collect()
}

/// Initial poses for transferring `demonstrated` into `target`: the first
/// restart starts from the demonstrated pose itself, the rest from
/// [`initial_poses`].
pub fn transfer_inits(model: &EffectorModel, demonstrated: &PoseVector, target: &FeaturedCloud, config: &EnergyConfig) -> Vec<PoseVector> {
    let mut inits = initial_poses(model, target, config);
    if let Some(first) = inits.first_mut() {
        *first = demonstrated.clone();
    }
    inits
}

/// Runs one descent per initial pose in parallel and keeps the lowest
/// final total (ties to the lower restart index).
pub fn optimize_from(objective: &Objective<'_>, inits: Vec<PoseVector>) -> Result<OptimizationResult> {
    objective.check()?;
    let runs: Vec<(usize, Result<RestartResult>)> =
        inits.into_par_iter().enumerate().map(|(i, p)| (i, descend(objective, p, i))).collect();
    let mut abandoned = Vec::new();
    let mut done = Vec::new();
    for (i, r) in runs {
        match r {
            Ok(r) => done.push(r),
            Err(Error::AllRestartsFailed) => abandoned.push(i),
            Err(e) => return Err(e),
        }
    }
    let finals = done.iter().map(|r| (r.restart, r.report)).collect();
    let best = done
        .into_iter()
        .min_by(|a, b| a.report.total.total_cmp(&b.report.total).then(a.restart.cmp(&b.restart)))
        .ok_or(Error::AllRestartsFailed)?;
    Ok(OptimizationResult { best, abandoned, finals })
}

/// Random restarts per `config`, then [`optimize_from`].
pub fn optimize_pose(
    field: &FeatureField,
    demo: &Demonstration,
    target: &FeaturedCloud,
    config: &EnergyConfig,
) -> Result<OptimizationResult> {
    let objective = Objective { field, demo, target, config };
    optimize_from(&objective, initial_poses(&demo.model, target, config))
}

/// One cell of an energy slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SliceCell {
    pub row: usize,
    pub col: usize,
    pub x: f64,
    pub y: f64,
    pub feature: f64,
}

/// `E_feat` with the base translation swept over an `n×n` grid on the
/// plane `z`, spanning `lo..=hi` in x and y; orientation and joints come
/// from `template`. Cells are row-major with rows along y.
pub fn feature_slice(
    field: &FeatureField,
    demo: &Demonstration,
    template: &PoseVector,
    z: f64,
    n: usize,
    lo: [f64; 2],
    hi: [f64; 2],
) -> Result<Vec<SliceCell>> {
    if n < 2 {
        return Err(Error::Config(format!("an energy slice needs a grid of at least 2, got {n}")));
    }
    let at = |k: usize, axis: usize| lo[axis] + (hi[axis] - lo[axis]) * k as f64 / (n - 1) as f64;
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    cells
        .into_par_iter()
        .map(|(row, col)| {
            let (x, y) = (at(col, 0), at(row, 1));
            let pose = PoseVector { translation: [x, y, z], ..template.clone() };
            Ok(SliceCell { row, col, x, y, feature: feature_energy(field, demo, &pose)? })
        })
        .collect()
}
