//! Articulated end-effectors: a tree of links joined by revolute joints,
//! a pose vector `β = (t, r6, θ)` and a fixed set of surface samples that
//! forward kinematics carries into the world.
//!
//! Forward kinematics exists twice. [`EffectorModel::sample_queries`] is a
//! plain evaluation on `nalgebra` types; [`EffectorModel::queries_on_tape`]
//! records the same computation on a [`Tape`] so energies can be
//! differentiated with respect to `β`. The tests hold the two together.

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

/// Below this norm a rotate6D column (or its Gram–Schmidt residual) is
/// treated as degenerate.
const DEGENERATE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Rotation axis in the link frame; normalized on load.
    pub axis: [f64; 3],
    /// `[lo, hi]` in radians.
    pub limits: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub name: String,
    /// Index of the parent link; absent for the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<usize>,
    /// Offset from the parent frame, applied before the joint rotation.
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default = "identity_r6")]
    pub rotation6d: [f64; 6],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<Joint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub link: usize,
    /// Coordinates in the link frame.
    pub position: [f64; 3],
    pub radius: f64,
}

fn identity_r6() -> [f64; 6] {
    [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    links: Vec<Link>,
    samples: Vec<Sample>,
}

/// A validated kinematic tree with its canonical surface samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectorModel {
    links: Vec<Link>,
    samples: Vec<Sample>,
    /// Link index of every joint, in pose-vector order.
    joint_links: Vec<usize>,
    /// Per link, its joint's position in the pose vector.
    joint_of: Vec<Option<usize>>,
    offsets: Vec<Matrix3<f64>>,
}

impl EffectorModel {
    pub fn new(mut links: Vec<Link>, samples: Vec<Sample>) -> Result<Self> {
        let roots: Vec<usize> = (0..links.len()).filter(|&i| links[i].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Effector(format!("expected exactly one root link, found {}", roots.len())));
        }
        for (i, l) in links.iter_mut().enumerate() {
            if let Some(p) = l.parent {
                if p >= i {
                    return Err(Error::Effector(format!("link {i} ({}) must come after its parent {p}", l.name)));
                }
            }
            if let Some(j) = &mut l.joint {
                let n = Vector3::from(j.axis).norm();
                if !(n > DEGENERATE) || !n.is_finite() {
                    return Err(Error::Effector(format!("link {i} ({}) has a zero joint axis", l.name)));
                }
                j.axis = j.axis.map(|a| a / n);
                if !(j.limits[0] <= j.limits[1]) {
                    return Err(Error::Effector(format!("link {i} ({}) has limits {:?} with lo > hi", l.name, j.limits)));
                }
            }
        }
        if samples.is_empty() {
            return Err(Error::Effector("model has no sample points".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.link >= links.len() || !(s.radius > 0.0)) {
            return Err(Error::Effector(format!("bad sample {s:?}")));
        }
        let offsets = links.iter().map(|l| rotate6d_to_matrix(&l.rotation6d)).collect::<Result<Vec<_>>>()?;
        let mut joint_of = vec![None; links.len()];
        let mut joint_links = Vec::new();
        for (i, l) in links.iter().enumerate() {
            if l.joint.is_some() {
                joint_of[i] = Some(joint_links.len());
                joint_links.push(i);
            }
        }
        Ok(Self { links, samples, joint_links, joint_of, offsets })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn joint_count(&self) -> usize {
        self.joint_links.len()
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.radius).collect()
    }

    pub fn sample_links(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.link).collect()
    }

    pub fn limits(&self) -> Vec<[f64; 2]> {
        self.joint_links.iter().map(|&l| self.links[l].joint.as_ref().expect("joint").limits).collect()
    }

    /// Whether two links are the same or parent and child.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        a == b || self.links[a].parent == Some(b) || self.links[b].parent == Some(a)
    }

    /// Row-major `Q×Q` mask of sample pairs that take part in
    /// self-penetration: distinct samples on non-adjacent links.
    pub fn collision_mask(&self) -> Vec<bool> {
        let q = self.samples.len();
        let mut mask = vec![false; q * q];
        for (i, a) in self.samples.iter().enumerate() {
            for (j, b) in self.samples.iter().enumerate() {
                mask[i * q + j] = i != j && !self.adjacent(a.link, b.link);
            }
        }
        mask
    }

    fn check_pose(&self, pose: &PoseVector) -> Result<()> {
        if pose.joints.len() != self.joint_count() {
            return Err(Error::Pose(format!("{} joint angles for a {}-joint model", pose.joints.len(), self.joint_count())));
        }
        Ok(())
    }

    /// World rotation and translation of every link.
    pub fn link_transforms(&self, pose: &PoseVector) -> Result<Vec<(Matrix3<f64>, Vector3<f64>)>> {
        self.check_pose(pose)?;
        let base_r = rotate6d_to_matrix(&pose.rotation6d)?;
        let base_t = Vector3::from(pose.translation);
        let mut out = vec![(Matrix3::identity(), Vector3::zeros()); self.links.len()];
        // Parents precede children, so index order is topological.
        for (i, l) in self.links.iter().enumerate() {
            let (pr, pt) = match l.parent {
                Some(p) => out[p],
                None => (base_r, base_t),
            };
            let mut local = self.offsets[i];
            if let (Some(j), Some(k)) = (&l.joint, self.joint_of[i]) {
                let axis = Unit::new_unchecked(Vector3::from(j.axis));
                local *= Rotation3::from_axis_angle(&axis, pose.joints[k]).into_inner();
            }
            out[i] = (pr * local, pr * Vector3::from(l.translation) + pt);
        }
        Ok(out)
    }

    /// World positions (`Q×3`) of every sample at pose `β`.
    pub fn sample_queries(&self, pose: &PoseVector) -> Result<Tensor> {
        let tf = self.link_transforms(pose)?;
        let mut out = Tensor::zeros(self.samples.len(), 3);
        for (k, s) in self.samples.iter().enumerate() {
            let (r, t) = tf[s.link];
            let w = r * Vector3::from(s.position) + t;
            out.row_slice_mut(k).copy_from_slice(w.as_slice());
        }
        Ok(out)
    }

    /// Records forward kinematics for a `1×(9+J)` pose variable and returns
    /// the `Q×3` sample positions.
    pub fn queries_on_tape(&self, tape: &mut Tape, beta: Var) -> Result<Var> {
        let want = [1, PoseVector::len_for(self.joint_count())];
        if tape.shape(beta) != want {
            return Err(Error::Pose(format!("pose variable is {:?}, expected {want:?}", tape.shape(beta))));
        }
        let t = tape.select_cols(beta, &[0, 1, 2])?;
        let c1 = tape.select_cols(beta, &[3, 4, 5])?;
        let c2 = tape.select_cols(beta, &[6, 7, 8])?;
        let base = rotate6d_rows_on_tape(tape, c1, c2)?;

        // Frames act on row vectors: p_world = p·M + t with M = Rᵀ.
        let mut frames: Vec<Option<(Var, Var)>> = vec![None; self.links.len()];
        for (i, l) in self.links.iter().enumerate() {
            let (pm, pt) = match l.parent {
                Some(p) => frames[p].expect("parent first"),
                None => (base, t),
            };
            let offset_m = tape.leaf(matrix_rows(&self.offsets[i].transpose()));
            let local_m = match (&l.joint, self.joint_of[i]) {
                (Some(j), Some(k)) => {
                    let theta = tape.select_cols(beta, &[9 + k])?;
                    let jm = axis_rotation_rows_on_tape(tape, j.axis, theta)?;
                    tape.matmul(jm, offset_m)?
                }
                _ => offset_m,
            };
            let m = tape.matmul(local_m, pm)?;
            let off = tape.leaf(Tensor::row(&l.translation));
            let moved = tape.matmul(off, pm)?;
            let tw = tape.add(moved, pt)?;
            frames[i] = Some((m, tw));
        }

        let mut parts = Vec::new();
        let mut order = Vec::new();
        for (i, frame) in frames.iter().enumerate() {
            let idx: Vec<usize> = (0..self.samples.len()).filter(|&k| self.samples[k].link == i).collect();
            if idx.is_empty() {
                continue;
            }
            let local: Vec<[f64; 3]> = idx.iter().map(|&k| self.samples[k].position).collect();
            let (m, tw) = frame.expect("every link has a frame");
            let p = tape.leaf(Tensor::from_rows(&local)?);
            let rotated = tape.matmul(p, m)?;
            parts.push(tape.add_row(rotated, tw)?);
            order.extend(idx);
        }
        let grouped = tape.concat_rows(&parts)?;
        let mut inverse = vec![0usize; order.len()];
        for (pos, &k) in order.iter().enumerate() {
            inverse[k] = pos;
        }
        Ok(tape.select_rows(grouped, &inverse)?)
    }

    /// Per-joint distance outside `[lo, hi]`.
    pub fn joint_limit_excess(&self, pose: &PoseVector) -> Result<Vec<f64>> {
        self.check_pose(pose)?;
        Ok(self.limits().iter().zip(&pose.joints).map(|(&[lo, hi], &th)| (lo - th).max(0.0) + (th - hi).max(0.0)).collect())
    }

    /// Tape version of [`Self::joint_limit_excess`] (`1×J`).
    pub fn joint_limit_excess_on_tape(&self, tape: &mut Tape, beta: Var) -> Result<Option<Var>> {
        let j = self.joint_count();
        if j == 0 {
            return Ok(None);
        }
        let idx: Vec<usize> = (9..9 + j).collect();
        let theta = tape.select_cols(beta, &idx)?;
        let limits = self.limits();
        let lo = tape.leaf(Tensor::row(&limits.iter().map(|l| l[0]).collect::<Vec<_>>()));
        let hi = tape.leaf(Tensor::row(&limits.iter().map(|l| l[1]).collect::<Vec<_>>()));
        let below = tape.sub(lo, theta)?;
        let below = tape.max_const(below, 0.0);
        let above = tape.sub(theta, hi)?;
        let above = tape.max_const(above, 0.0);
        Ok(Some(tape.add(below, above)?))
    }

    /// Random pose: translation uniform in `[lo, hi]`, a uniformly random
    /// rotation, joints uniform within their limits.
    pub fn random_pose<R: Rng>(&self, rng: &mut R, lo: [f64; 3], hi: [f64; 3]) -> PoseVector {
        let translation = std::array::from_fn(|k| if hi[k] > lo[k] { rng.random_range(lo[k]..hi[k]) } else { lo[k] });
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        let joints =
            self.limits().iter().map(|&[lo, hi]| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect();
        PoseVector { translation, rotation6d: matrix_to_r6(&quat.to_rotation_matrix().into_inner()), joints }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Format(format!("effector model: {e}")))?;
        if file.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported effector model version {}", file.version)));
        }
        Self::new(file.links, file.samples)
    }

    pub fn to_toml_string(&self) -> String {
        let file = ModelFile { version: MODEL_VERSION, links: self.links.clone(), samples: self.samples.clone() };
        toml::to_string(&file).expect("effector model serializes")
    }

    /// The default three-finger hand: a palm and three two-joint fingers.
    ///
    /// The palm lies in the `z = 0` plane of its frame and the fingers hang
    /// along `−z`; positive joint angles curl a finger under the palm.
    /// 24 palm samples and 32 per finger, all with an 8 mm radius.
    pub fn three_finger_hand() -> Self {
        const RADIUS: f64 = 0.008;
        const PROXIMAL: f64 = 0.045;
        const DISTAL: f64 = 0.035;
        let mut links = vec![Link {
            name: "palm".into(),
            parent: None,
            translation: [0.0; 3],
            rotation6d: identity_r6(),
            joint: None,
        }];
        let mut samples = Vec::new();
        for i in 0..6 {
            for j in 0..4 {
                let x = -0.035 + 0.014 * i as f64;
                let y = -0.027 + 0.018 * j as f64;
                samples.push(Sample { link: 0, position: [x, y, 0.0], radius: RADIUS });
            }
        }
        // (name, base, flex axis): fingers on +y curl toward −y and vice versa.
        let fingers = [("index", [-0.025, 0.03, 0.0], [-1.0, 0.0, 0.0]), ("middle", [0.025, 0.03, 0.0], [-1.0, 0.0, 0.0]), ("thumb", [0.0, -0.03, 0.0], [1.0, 0.0, 0.0])];
        for (name, base, axis) in fingers {
            let prox = links.len();
            links.push(Link {
                name: format!("{name}_proximal"),
                parent: Some(0),
                translation: base,
                rotation6d: identity_r6(),
                joint: Some(Joint { axis, limits: [-0.2, 1.4] }),
            });
            links.push(Link {
                name: format!("{name}_distal"),
                parent: Some(prox),
                translation: [0.0, 0.0, -PROXIMAL],
                rotation6d: identity_r6(),
                joint: Some(Joint { axis, limits: [0.0, 1.5] }),
            });
            for (link, len) in [(prox, PROXIMAL), (prox + 1, DISTAL)] {
                for s in 0..8 {
                    let z = -len * (s as f64 + 0.5) / 8.0;
                    for x in [-0.004, 0.004] {
                        samples.push(Sample { link, position: [x, 0.0, z], radius: RADIUS });
                    }
                }
            }
        }
        Self::new(links, samples).expect("built-in hand is valid")
    }
}

/// Pose vector `β`: base translation, rotate6D base rotation, joint angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseVector {
    pub translation: [f64; 3],
    /// First and second columns of the base rotation matrix.
    pub rotation6d: [f64; 6],
    pub joints: Vec<f64>,
}

impl PoseVector {
    pub fn identity(joints: usize) -> Self {
        Self { translation: [0.0; 3], rotation6d: identity_r6(), joints: vec![0.0; joints] }
    }

    pub fn len_for(joints: usize) -> usize {
        9 + joints
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(9 + self.joints.len());
        v.extend_from_slice(&self.translation);
        v.extend_from_slice(&self.rotation6d);
        v.extend_from_slice(&self.joints);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 9 {
            return Err(Error::Pose(format!("pose vector needs at least 9 entries, got {}", v.len())));
        }
        let pose = Self {
            translation: [v[0], v[1], v[2]],
            rotation6d: std::array::from_fn(|k| v[3 + k]),
            joints: v[9..].to_vec(),
        };
        pose.check()?;
        Ok(pose)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row(&self.to_vec())
    }

    pub fn check(&self) -> Result<()> {
        if !self.to_vec().iter().all(|x| x.is_finite()) {
            return Err(Error::Pose("pose has non-finite entries".into()));
        }
        rotate6d_to_matrix(&self.rotation6d).map(|_| ())
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        rotate6d_to_matrix(&self.rotation6d)
    }

    /// The pose after applying the world motion `x ↦ R·x + t`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: [f64; 3]) -> Result<Self> {
        let r = rotation * self.rotation()?;
        let t = rotation * Vector3::from(self.translation) + Vector3::from(translation);
        Ok(Self { translation: [t.x, t.y, t.z], rotation6d: matrix_to_r6(&r), joints: self.joints.clone() })
    }
}

/// First two columns of a rotation matrix.
pub fn matrix_to_r6(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Gram–Schmidt on the two columns stored in `r6`.
pub fn rotate6d_to_matrix(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let c1 = Vector3::new(r6[0], r6[1], r6[2]);
    let c2 = Vector3::new(r6[3], r6[4], r6[5]);
    let n1 = c1.norm();
    if !(n1 > DEGENERATE) {
        return Err(Error::Pose("rotate6D first column is zero".into()));
    }
    let b1 = c1 / n1;
    let resid = c2 - b1 * b1.dot(&c2);
    let n2 = resid.norm();
    if !(n2 > DEGENERATE * c2.norm().max(1.0)) {
        return Err(Error::Pose("rotate6D columns are parallel".into()));
    }
    let b2 = resid / n2;
    Ok(Matrix3::from_columns(&[b1, b2, b1.cross(&b2)]))
}

/// Rows `b1, b2, b3` stacked: the transpose of the rotation matrix.
fn rotate6d_rows_on_tape(tape: &mut Tape, c1: Var, c2: Var) -> Result<Var> {
    let n1 = tape.row_norm(c1);
    let b1 = tape.div_col(c1, n1)?;
    let prod = tape.mul(b1, c2)?;
    let proj = tape.row_sums(prod);
    let along = tape.mul_scalar(b1, proj)?;
    let resid = tape.sub(c2, along)?;
    let n2 = tape.row_norm(resid);
    let b2 = tape.div_col(resid, n2)?;
    let b3 = cross_on_tape(tape, b1, b2)?;
    Ok(tape.concat_rows(&[b1, b2, b3])?)
}

fn cross_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let a1 = tape.select_cols(a, &[1, 2, 0])?;
    let a2 = tape.select_cols(a, &[2, 0, 1])?;
    let b1 = tape.select_cols(b, &[1, 2, 0])?;
    let b2 = tape.select_cols(b, &[2, 0, 1])?;
    let l = tape.mul(a1, b2)?;
    let r = tape.mul(a2, b1)?;
    Ok(tape.sub(l, r)?)
}

/// `Rᵀ` of a rotation by `theta` (`1×1`) about a fixed unit `axis`:
/// `I − sin θ·K + (1 − cos θ)·K²` with `K` the cross-product matrix.
fn axis_rotation_rows_on_tape(tape: &mut Tape, axis: [f64; 3], theta: Var) -> Result<Var> {
    let k = Matrix3::new(0.0, -axis[2], axis[1], axis[2], 0.0, -axis[0], -axis[1], axis[0], 0.0);
    let eye = tape.leaf(Tensor::identity(3));
    let neg_k = tape.leaf(matrix_rows(&(-k)));
    let k2 = tape.leaf(matrix_rows(&(k * k)));
    let s = tape.sin(theta);
    let c = tape.cos(theta);
    let one_minus_c = tape.neg(c);
    let one_minus_c = tape.add_const(one_minus_c, 1.0);
    let a = tape.mul_scalar(neg_k, s)?;
    let b = tape.mul_scalar(k2, one_minus_c)?;
    let ab = tape.add(a, b)?;
    Ok(tape.add(eye, ab)?)
}

fn matrix_rows(m: &Matrix3<f64>) -> Tensor {
    Tensor::from_rows(&[[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]], [m[(2, 0)], m[(2, 1)], m[(2, 2)]]])
        .expect("3x3")
}
