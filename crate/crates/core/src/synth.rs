//! Procedural desk scenes with known semantics, and the transfer benchmark.
//!
//! Objects are unions of part spheres. Every part carries a label from a
//! shared vocabulary; a surface point's feature is its label's embedding
//! plus a smooth term that depends on where on the part it sits, plus
//! Gaussian noise. Surface samples follow a Fibonacci spiral in the part's
//! frame, so two scenes of the same object list corresponding points at
//! the same indices.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::DecoderParams;
use crate::effector::{EffectorModel, PoseVector};
use crate::energy::{optimize_from, transfer_inits, Demonstration, EnergyConfig, FeatureField, Objective};
use crate::numerics::Tensor;
use crate::scene::{knn, FeaturedCloud, Metric};
use crate::training::{train, TrainingConfig};
use crate::{Error, Result};

pub const DEFAULT_FEATURE_DIM: usize = 8;
pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_THRESHOLD: f64 = 0.03;
/// Surface points per square meter of part surface.
pub const DEFAULT_DENSITY: f64 = 9000.0;

/// Label embeddings and positional bases shared by every scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    embeddings: Vec<Vec<f64>>,
    /// Per label, three `C`-vectors mixed by the surface direction.
    bases: Vec<[Vec<f64>; 3]>,
    gamma: f64,
}

impl Vocabulary {
    /// Unit embeddings, mutually orthogonal while `labels ≤ dim`.
    pub fn new(labels: usize, dim: usize, gamma: f64, seed: u64) -> Result<Self> {
        if dim == 0 || labels == 0 {
            return Err(Error::Config("vocabulary needs at least one label and one channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gaussian = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(labels);
        while embeddings.len() < labels {
            let mut v = gaussian(dim);
            if embeddings.len() < dim {
                for e in &embeddings {
                    let p = crate::numerics::dot(&v, e);
                    v.iter_mut().zip(e).for_each(|(x, y)| *x -= p * y);
                }
            }
            let n = crate::numerics::dot(&v, &v).sqrt();
            if n > 1e-6 {
                embeddings.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let bases = (0..labels)
            .map(|_| {
                std::array::from_fn(|_| {
                    let v = gaussian(dim);
                    let n = crate::numerics::dot(&v, &v).sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
            })
            .collect();
        Ok(Self { embeddings, bases, gamma })
    }

    pub fn standard() -> Self {
        Self::new(8, DEFAULT_FEATURE_DIM, DEFAULT_GAMMA, 7).expect("valid vocabulary")
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn labels(&self) -> usize {
        self.embeddings.len()
    }

    pub fn embedding(&self, label: i32) -> Result<&[f64]> {
        usize::try_from(label)
            .ok()
            .and_then(|l| self.embeddings.get(l))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("label {label} outside the {}-label vocabulary", self.labels())))
    }

    /// Noise-free feature of a point of part `label` whose direction from
    /// the part center, in the object frame, is `u`.
    pub fn feature(&self, label: i32, u: [f64; 3]) -> Result<Vec<f64>> {
        let mut f = self.embedding(label)?.to_vec();
        let basis = &self.bases[label as usize];
        for (k, b) in basis.iter().enumerate() {
            f.iter_mut().zip(b).for_each(|(x, y)| *x += self.gamma * u[k] * y);
        }
        Ok(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub center: [f64; 3],
    pub radius: f64,
    pub label: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub name: String,
    pub parts: Vec<Part>,
    pub density: f64,
}

impl SynthObject {
    /// Object-frame surface samples with their labels and part directions.
    /// Points that fall inside another part of the same object are dropped.
    fn surface(&self) -> Vec<([f64; 3], i32, [f64; 3])> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut out = Vec::new();
        for (pi, part) in self.parts.iter().enumerate() {
            let area = 4.0 * std::f64::consts::PI * part.radius * part.radius;
            let n = (self.density * area).ceil().max(4.0) as usize;
            for i in 0..n {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                let u = [r * phi.cos(), r * phi.sin(), z];
                let p: [f64; 3] = std::array::from_fn(|k| part.center[k] + part.radius * u[k]);
                let buried = self.parts.iter().enumerate().any(|(qi, q)| {
                    qi != pi && (0..3).map(|k| (p[k] - q.center[k]).powi(2)).sum::<f64>() < q.radius * q.radius
                });
                if !buried {
                    out.push((p, part.label, u));
                }
            }
        }
        out
    }

    /// The same object with every part radius and offset scaled by `scale[p]`.
    pub fn reproportioned(&self, scale: &[f64]) -> Self {
        let mut obj = self.clone();
        let anchor = self.parts[0].center;
        for (p, s) in obj.parts.iter_mut().zip(scale) {
            p.radius *= s;
            for k in 0..3 {
                p.center[k] = anchor[k] + (p.center[k] - anchor[k]) * s;
            }
        }
        obj
    }
}

/// Built-in objects. The mug is the default target; its handle (label 1)
/// is the default target region.
pub fn catalog() -> Vec<SynthObject> {
    let obj = |name: &str, parts: &[([f64; 3], f64, i32)]| SynthObject {
        name: name.into(),
        parts: parts.iter().map(|&(center, radius, label)| Part { center, radius, label }).collect(),
        density: DEFAULT_DENSITY,
    };
    vec![
        obj("mug", &[([0.0, 0.0, 0.035], 0.035, 0), ([0.05, 0.0, 0.04], 0.018, 1)]),
        obj("teddy", &[([0.0, 0.0, 0.03], 0.03, 2), ([0.0, 0.0, 0.075], 0.02, 3)]),
        obj("ball", &[([0.0, 0.0, 0.028], 0.028, 4)]),
        obj("bottle", &[([0.0, 0.0, 0.03], 0.03, 5), ([0.0, 0.0, 0.07], 0.017, 6)]),
    ]
}

/// A rigid placement `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub rotation: Matrix3<f64>,
    pub translation: [f64; 3],
}

impl Placement {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: [0.0; 3] }
    }

    /// Rotation by `angle` about the vertical axis, then a shift.
    pub fn planar(angle: f64, translation: [f64; 3]) -> Self {
        Self { rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner(), translation }
    }

    /// A uniformly random rotation and the given shift.
    pub fn random<R: Rng>(rng: &mut R, translation: [f64; 3]) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Self { rotation: quat.to_rotation_matrix().into_inner(), translation }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation * Vector3::from(p) + Vector3::from(self.translation);
        [v.x, v.y, v.z]
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.rotation[(r, c)]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSceneSpec {
    pub target: SynthObject,
    pub target_pose: Placement,
    pub distractors: Vec<(SynthObject, Placement)>,
    pub noise: f64,
    pub seed: u64,
}

/// Samples every object, target first. Labels are the part labels.
pub fn generate_scene(spec: &SynthSceneSpec, vocab: &Vocabulary) -> Result<FeaturedCloud> {
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("feature noise must be non-negative, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::new();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let objects = std::iter::once((&spec.target, &spec.target_pose)).chain(spec.distractors.iter().map(|(o, p)| (o, p)));
    for (obj, place) in objects {
        if obj.parts.is_empty() {
            return Err(Error::Config(format!("object {} has no parts", obj.name)));
        }
        for (p, label, u) in obj.surface() {
            points.push(place.apply(p));
            let mut f = vocab.feature(label, u)?;
            if spec.noise > 0.0 {
                f.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
            }
            feats.extend(f);
            labels.push(label);
        }
    }
    let n = points.len();
    FeaturedCloud::from_points(&points, Tensor::from_vec(n, vocab.dim(), feats)?, Some(labels))
}

/// Mean distance from each hand sample to the nearest point labeled `region`.
pub fn success_metric(model: &EffectorModel, pose: &PoseVector, cloud: &FeaturedCloud, region: i32) -> Result<f64> {
    let labels = cloud.labels().ok_or_else(|| Error::Config("cloud has no region labels".into()))?;
    let idx: Vec<usize> = (0..cloud.len()).filter(|&i| labels[i] == region).collect();
    if idx.is_empty() {
        return Err(Error::EmptyRegion(region));
    }
    let pts: Vec<[f64; 3]> = idx.iter().map(|&i| cloud.point(i)).collect();
    let sub = FeaturedCloud::from_points(&pts, Tensor::zeros(pts.len(), 1), None)?;
    let q = model.sample_queries(pose)?;
    let mut total = 0.0;
    for k in 0..q.rows() {
        let p = q.row_slice(k);
        let j = knn(&sub, p, 1, Metric::Spatial)?[0];
        total += pts[j].iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    }
    Ok(total / q.rows() as f64)
}

/// A hand pose holding part `part` of `object` at `place` from above:
/// palm over the part, fingers straddling it and curled underneath.
pub fn grasp_pose(object: &SynthObject, part: usize, place: &Placement) -> Result<PoseVector> {
    let p = object.parts.get(part).ok_or_else(|| Error::Config(format!("object {} has no part {part}", object.name)))?;
    let above = [p.center[0], p.center[1], p.center[2] + p.radius + 0.012];
    // Fingers straddle the part across the object's long axis.
    let anchor = object.parts[0].center;
    let along = [p.center[0] - anchor[0], p.center[1] - anchor[1]];
    let yaw = if along[0].hypot(along[1]) > 1e-9 { along[1].atan2(along[0]) } else { 0.0 };
    let local = Placement::planar(yaw, [0.0; 3]);
    let world_rotation = place.rotation * local.rotation;
    let t = place.apply(above);
    let joints = vec![0.35, 0.6, 0.35, 0.6, 0.35, 0.6];
    Ok(PoseVector { translation: t, rotation6d: crate::effector::matrix_to_r6(&world_rotation), joints })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    /// Test scenes are the demonstration scene itself.
    #[serde(rename = "self")]
    SelfTransfer,
    /// The target in new poses with distractor objects nearby.
    Distractor,
    /// Re-proportioned targets with distractors nearby.
    CrossObject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Attention,
    #[serde(alias = "idw-baseline")]
    Idw,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Idw => "idw",
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Attention, Method::Idw]
}

/// A benchmark suite as written in a suite file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub kind: SuiteKind,
    #[serde(default = "SuiteSpec::default_scenes")]
    pub scenes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "SuiteSpec::default_noise")]
    pub noise: f64,
    #[serde(default = "SuiteSpec::default_pretrain")]
    pub pretrain_scenes: usize,
    #[serde(default = "SuiteSpec::default_distractors")]
    pub distractors: usize,
    /// Range of distractor center distances from the target center, meters.
    #[serde(default = "SuiteSpec::default_distance")]
    pub distractor_distance: [f64; 2],
    /// Probability that a distractor part takes a target label instead.
    #[serde(default)]
    pub confusable_fraction: f64,
    #[serde(default = "SuiteSpec::default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

impl SuiteSpec {
    fn default_scenes() -> usize {
        10
    }
    fn default_noise() -> f64 {
        0.05
    }
    fn default_pretrain() -> usize {
        4
    }
    fn default_distractors() -> usize {
        2
    }
    fn default_distance() -> [f64; 2] {
        [0.08, 0.11]
    }
    fn default_threshold() -> f64 {
        DEFAULT_THRESHOLD
    }

    pub fn new(name: &str, kind: SuiteKind) -> Self {
        Self {
            name: name.into(),
            kind,
            scenes: Self::default_scenes(),
            seed: 0,
            noise: Self::default_noise(),
            pretrain_scenes: Self::default_pretrain(),
            distractors: Self::default_distractors(),
            distractor_distance: Self::default_distance(),
            confusable_fraction: 0.0,
            threshold: Self::default_threshold(),
            methods: default_methods(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(format!("suite file: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.distractor_distance;
        if self.scenes == 0 || self.methods.is_empty() || !(self.noise >= 0.0) || !(self.threshold > 0.0) || !(0.0 < lo && lo <= hi) {
            return Err(Error::Config(format!("invalid suite {}", self.name)));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return Err(Error::Config("confusable_fraction must lie in [0, 1]".into()));
        }
        if self.kind != SuiteKind::SelfTransfer && self.pretrain_scenes < 2 {
            return Err(Error::Config("pretraining needs at least 2 scenes".into()));
        }
        Ok(())
    }
}

/// Index of the target object in [`catalog`] and of its target part.
pub const TARGET_OBJECT: usize = 0;
pub const TARGET_PART: usize = 1;

/// All scenes of a suite, derived from its seed.
#[derive(Clone, Debug)]
pub struct SuiteScenes {
    pub demo_scene: FeaturedCloud,
    pub demo_pose: PoseVector,
    pub region: i32,
    pub pretrain: Vec<FeaturedCloud>,
    pub tests: Vec<TestScene>,
}

#[derive(Clone, Debug)]
pub struct TestScene {
    pub seed: u64,
    pub cloud: FeaturedCloud,
    /// The demonstrated grasp carried onto this scene's target.
    pub reference: PoseVector,
}

fn distractor_objects<R: Rng>(
    rng: &mut R,
    spec: &SuiteSpec,
    center: [f64; 3],
    objects: &[SynthObject],
    target_labels: &[i32],
) -> Vec<(SynthObject, Placement)> {
    let base = rng.random_range(0.0..std::f64::consts::TAU);
    (0..spec.distractors)
        .map(|d| {
            let mut obj = objects[1 + rng.random_range(0..objects.len() - 1)].clone();
            for part in &mut obj.parts {
                if rng.random_bool(spec.confusable_fraction) {
                    part.label = target_labels[rng.random_range(0..target_labels.len())];
                }
            }
            let [lo, hi] = spec.distractor_distance;
            let r = if hi > lo { rng.random_range(lo..hi) } else { lo };
            // Spread the distractors around the target.
            let ang = base + std::f64::consts::TAU * d as f64 / spec.distractors as f64 + rng.random_range(-0.4..0.4);
            let at = [center[0] + r * ang.cos(), center[1] + r * ang.sin(), 0.0];
            let spin = rng.random_range(0.0..std::f64::consts::TAU);
            (obj, Placement::planar(spin, at))
        })
        .collect()
}

/// Builds the demonstration, pretraining and test scenes of `spec`.
pub fn suite_scenes(spec: &SuiteSpec, vocab: &Vocabulary) -> Result<SuiteScenes> {
    spec.validate()?;
    let objects = catalog();
    let target = objects[TARGET_OBJECT].clone();
    let region = target.parts[TARGET_PART].label;
    let target_labels: Vec<i32> = target.parts.iter().map(|p| p.label).collect();
    let demo_place = Placement::identity();
    let demo_spec = SynthSceneSpec {
        target: target.clone(),
        target_pose: demo_place,
        distractors: Vec::new(),
        noise: spec.noise,
        seed: spec.seed,
    };
    let demo_scene = generate_scene(&demo_spec, vocab)?;
    let demo_pose = grasp_pose(&target, TARGET_PART, &demo_place)?;

    // Scene `i` of stream `s` draws from its own generator.
    let scene_with = |stream: u64, i: u64| -> Result<TestScene> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream * 1_000_003 + i);
        let mut obj = target.clone();
        if spec.kind == SuiteKind::CrossObject {
            let scale: Vec<f64> = obj.parts.iter().map(|_| rng.random_range(0.8..1.25)).collect();
            obj = obj.reproportioned(&scale);
        }
        let center = [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0];
        let place = Placement::planar(rng.random_range(0.0..std::f64::consts::TAU), center);
        let distractors = distractor_objects(&mut rng, spec, center, &objects, &target_labels);
        let scene_seed = rng.random();
        let reference = grasp_pose(&obj, TARGET_PART, &place)?;
        let cloud = generate_scene(&SynthSceneSpec { target: obj, target_pose: place, distractors, noise: spec.noise, seed: scene_seed }, vocab)?;
        Ok(TestScene { seed: i, cloud, reference })
    };

    let (pretrain, tests) = match spec.kind {
        SuiteKind::SelfTransfer => (
            Vec::new(),
            (0..spec.scenes as u64)
                .map(|seed| TestScene { seed, cloud: demo_scene.clone(), reference: demo_pose.clone() })
                .collect(),
        ),
        _ => (
            (0..spec.pretrain_scenes as u64).map(|i| scene_with(1, i).map(|t| t.cloud)).collect::<Result<Vec<_>>>()?,
            (0..spec.scenes as u64).map(|i| scene_with(2, i)).collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(SuiteScenes { demo_scene, demo_pose, region, pretrain, tests })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub scene: usize,
    pub seed: u64,
    pub method: Method,
    pub metric: f64,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub suite: String,
    pub threshold: f64,
    pub rows: Vec<BenchmarkRow>,
    /// Decoder used by the attention method, if it ran.
    pub params: Option<DecoderParams>,
}

impl BenchmarkReport {
    pub fn successes(&self, method: Method) -> usize {
        self.rows.iter().filter(|r| r.method == method && r.success).count()
    }

    pub fn count(&self, method: Method) -> usize {
        self.rows.iter().filter(|r| r.method == method).count()
    }
}

/// Transfers the demonstration into every test scene with each method.
///
/// The attention method trains a decoder on the pretraining scenes (or on
/// two copies of the demonstration scene for the self suite); the
/// baseline uses the inverse-distance field as is.
pub fn benchmark(
    spec: &SuiteSpec,
    vocab: &Vocabulary,
    model: &EffectorModel,
    training: &TrainingConfig,
    energy: &EnergyConfig,
) -> Result<BenchmarkReport> {
    let scenes = suite_scenes(spec, vocab)?;
    let mut rows = Vec::new();
    let mut trained = None;
    for &method in &spec.methods {
        if method == Method::Attention && trained.is_none() {
            let pre = if scenes.pretrain.is_empty() { vec![scenes.demo_scene.clone(); 2] } else { scenes.pretrain.clone() };
            trained = Some(train(&pre, training)?.params);
        }
        let field_for = |cloud: &FeaturedCloud| -> Result<FeatureField> {
            match (&trained, method) {
                (Some(p), Method::Attention) => FeatureField::attention(p, cloud, energy.epsilon),
                _ => Ok(FeatureField::idw(cloud, energy.epsilon)),
            }
        };
        let demo = Demonstration::record(&field_for(&scenes.demo_scene)?, model.clone(), scenes.demo_pose.clone())?;
        for (i, TestScene { seed, cloud, .. }) in scenes.tests.iter().enumerate() {
            let field = field_for(cloud)?;
            let cfg = EnergyConfig { seed: energy.seed.wrapping_add(*seed), ..energy.clone() };
            let objective = Objective { field: &field, demo: &demo, target: cloud, config: &cfg };
            let inits = transfer_inits(model, &scenes.demo_pose, cloud, &cfg);
            let best = optimize_from(&objective, inits)?.best;
            let metric = success_metric(model, &best.pose, cloud, scenes.region)?;
            rows.push(BenchmarkRow { scene: i, seed: *seed, method, metric, success: metric <= spec.threshold });
        }
    }
    Ok(BenchmarkReport { suite: spec.name.clone(), threshold: spec.threshold, rows, params: trained })
}
