//! On-disk formats.
//!
//! * Scene files: magic `NAFC`, `u32` version, `u64` point count `N`,
//!   `u32` feature dimension `C`, `u32` flags (bit 0: labels present),
//!   then `N×3` points and `N×C` features as little-endian `f32`, then `N`
//!   little-endian `i32` labels when flagged. Values widen exactly to
//!   `f64` on load, so load-then-save reproduces a file byte for byte.
//! * Demonstration files: TOML naming the effector model and source scene
//!   plus the demonstrated pose.
//! * Transfer results: TOML with the optimized pose and its energy terms.
//! * CSV tables for losses, trajectories, benchmark rows and energy slices.
//!
//! Every writer goes through [`write_atomic`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::effector::PoseVector;
use crate::energy::{EnergyReport, SliceCell, TrajectoryStep};
use crate::numerics::Tensor;
use crate::scene::FeaturedCloud;
use crate::synth::BenchmarkReport;
use crate::{Error, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"NAFC";
pub const SCENE_VERSION: u32 = 1;
pub const DEMO_VERSION: u32 = 1;
pub const RESULT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn encode_scene(cloud: &FeaturedCloud) -> Vec<u8> {
    let (n, c) = (cloud.len(), cloud.feature_dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (3 + c + 1));
    out.extend_from_slice(SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&u32::from(cloud.labels().is_some()).to_le_bytes());
    for v in cloud.points().data().iter().chain(cloud.features().data()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(labels) = cloud.labels() {
        labels.iter().for_each(|l| out.extend_from_slice(&l.to_le_bytes()));
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_scene(bytes: &[u8]) -> Result<FeaturedCloud> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("scene file of {} bytes is shorter than its header", bytes.len())));
    }
    if &bytes[..4] != SCENE_MAGIC {
        return Err(Error::Format("not a scene file (bad magic)".into()));
    }
    let version = u32_at(bytes, 4);
    if version != SCENE_VERSION {
        return Err(Error::Format(format!("unsupported scene file version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let c = u32_at(bytes, 16) as u64;
    let flags = u32_at(bytes, 20);
    if flags & !1 != 0 {
        return Err(Error::Format(format!("unknown scene flags {flags:#x}")));
    }
    let labeled = flags & 1 == 1;
    let per_point = 3 + c + u64::from(labeled);
    let expected = n.checked_mul(per_point).and_then(|v| v.checked_mul(4)).and_then(|v| v.checked_add(HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(Error::Format(format!("scene file is {} bytes, header implies {expected:?}", bytes.len())));
    }
    let (n, c) = (n as usize, c as usize);
    let floats = |start: usize, count: usize| -> Vec<f64> {
        bytes[start..start + 4 * count].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64).collect()
    };
    let points = Tensor::from_vec(n, 3, floats(HEADER_LEN, 3 * n))?;
    let features = Tensor::from_vec(n, c, floats(HEADER_LEN + 12 * n, c * n))?;
    let labels = labeled.then(|| {
        let start = HEADER_LEN + 4 * n * (3 + c);
        bytes[start..].chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().expect("4"))).collect()
    });
    FeaturedCloud::new(points, features, labels).map_err(|e| Error::Format(e.to_string()))
}

/// Rounds every value to `f32`, the precision the scene format stores.
pub fn quantize(cloud: &FeaturedCloud) -> Result<FeaturedCloud> {
    decode_scene(&encode_scene(cloud))
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save_scene(path: &Path, cloud: &FeaturedCloud) -> Result<()> {
    write_atomic(path, &encode_scene(cloud))
}

pub fn load_scene(path: &Path) -> Result<FeaturedCloud> {
    decode_scene(&std::fs::read(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoFile {
    pub version: u32,
    /// Effector model file; relative paths resolve against the demo file.
    pub model: PathBuf,
    /// Source scene file; relative paths resolve against the demo file.
    pub scene: PathBuf,
    pub pose: PoseVector,
}

impl DemoFile {
    pub fn new(model: PathBuf, scene: PathBuf, pose: PoseVector) -> Self {
        Self { version: DEMO_VERSION, model, scene, pose }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e| Error::Format(format!("demo file: {e}")))?;
        match raw.get("version").and_then(toml::Value::as_integer) {
            Some(v) if v == i64::from(DEMO_VERSION) => {}
            Some(v) => return Err(Error::Format(format!("unsupported demo file version {v}"))),
            None => return Err(Error::Format("demo file has no version".into())),
        }
        let demo: Self = toml::from_str(text).map_err(|e| Error::Format(format!("demo file: {e}")))?;
        demo.pose.check().map_err(|e| Error::Format(format!("demo file: {e}")))?;
        Ok(demo)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("demo file serializes")
    }

    pub fn resolve(&self, demo_path: &Path) -> (PathBuf, PathBuf) {
        let base = demo_path.parent().unwrap_or(Path::new(""));
        (base.join(&self.model), base.join(&self.scene))
    }
}

/// Energy terms as written to result files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub feature: f64,
    pub penetration: f64,
    pub self_penetration: f64,
    pub pose: f64,
    pub total: f64,
}

impl From<EnergyReport> for EnergyTerms {
    fn from(r: EnergyReport) -> Self {
        Self { feature: r.feature, penetration: r.penetration, self_penetration: r.self_penetration, pose: r.pose, total: r.total }
    }
}

/// Output of a transfer: the best pose and its energy breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferResult {
    pub version: u32,
    pub restart: usize,
    pub abandoned: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success_metric: Option<f64>,
    pub pose: PoseVector,
    pub energy: EnergyTerms,
}

impl TransferResult {
    pub fn parse(text: &str) -> Result<Self> {
        let r: Self = toml::from_str(text).map_err(|e| Error::Format(format!("result file: {e}")))?;
        if r.version != RESULT_VERSION {
            return Err(Error::Format(format!("unsupported result file version {}", r.version)));
        }
        Ok(r)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("result serializes")
    }
}

/// Reads a pose from either a demonstration or a transfer result file.
pub fn parse_pose_file(text: &str) -> Result<PoseVector> {
    DemoFile::parse(text).map(|d| d.pose).or_else(|_| TransferResult::parse(text).map(|r| r.pose))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    s
}

pub fn trajectory_csv(steps: &[TrajectoryStep]) -> String {
    let Some(first) = steps.first() else {
        return String::new();
    };
    let mut s = String::from("step,t_x,t_y,t_z,r6_0,r6_1,r6_2,r6_3,r6_4,r6_5");
    for j in 0..first.pose.joints.len() {
        let _ = write!(s, ",joint_{j}");
    }
    s.push_str(",e_feat,e_pen,e_spen,e_pose,total\n");
    for st in steps {
        let _ = write!(s, "{}", st.step);
        for v in st.pose.to_vec() {
            let _ = write!(s, ",{v}");
        }
        let r = st.report;
        let _ = writeln!(s, ",{},{},{},{},{}", r.feature, r.penetration, r.self_penetration, r.pose, r.total);
    }
    s
}

pub fn benchmark_csv(report: &BenchmarkReport) -> String {
    let mut s = String::from("scene,seed,method,metric,success\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.scene, r.seed, r.method.name(), r.metric, u8::from(r.success));
    }
    let mut methods: Vec<_> = report.rows.iter().map(|r| r.method).collect();
    methods.dedup();
    for m in methods {
        let _ = writeln!(s, "summary,{},{},{}/{},{}", report.threshold, m.name(), report.successes(m), report.count(m), report.suite);
    }
    s
}

pub fn slice_csv(plane_z: f64, n: usize, cells: &[SliceCell]) -> String {
    let mut s = format!("# plane z={plane_z} grid={n}x{n}\nrow,col,x,y,z,e_feat\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{},{},{},{}", c.row, c.col, c.x, c.y, plane_z, c.feature);
    }
    s
}
