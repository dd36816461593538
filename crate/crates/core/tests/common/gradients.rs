//! Finite-difference checks of every differentiable operation on small
//! seeded instances (N ≤ 32, C ≤ 8, Q ≤ 16).

use attnfield::attention::{decode_trainable, init_params, DecoderParams, DecoderShape, FrozenField, InitMode, ParamVars};
use attnfield::effector::{EffectorModel, Joint, Link, PoseVector, Sample};
use attnfield::energy::{Demonstration, EnergyConfig, FeatureField, Objective};
use attnfield::numerics::{finite_diff_check, FdReport, NumericsError, Program, Tape, Tensor, Var};
use attnfield::scene::{idw_field, FeaturedCloud};
use attnfield::training::{infonce_on_tape, DenominatorMode};
use rand::Rng;

use super::{random_cloud, random_tensor, rng};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn lift(e: attnfield::Error) -> NumericsError {
    match e {
        attnfield::Error::Numerics(n) => n,
        other => NumericsError::Shape { op: "library", detail: other.to_string() },
    }
}

/// `Σ w ⊙ v` with fixed pseudo-random weights, so every output entry
/// contributes to the checked scalar.
fn contract(tape: &mut Tape, v: Var, seed: u64) -> Result<Var, NumericsError> {
    let [r, c] = tape.shape(v);
    let w = tape.leaf(random_tensor(&mut rng(seed), r, c, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// A two-joint finger on a palm: 12 samples, radius 6 mm.
pub fn small_effector() -> EffectorModel {
    let link = |name: &str, parent: Option<usize>, x: f64, joint: Option<Joint>| Link {
        name: name.into(),
        parent,
        translation: [x, 0.0, 0.0],
        rotation6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        joint,
    };
    let links = vec![
        link("palm", None, 0.0, None),
        link("proximal", Some(0), 0.02, Some(Joint { axis: [0.0, 1.0, 0.0], limits: [-0.5, 0.5] })),
        link("distal", Some(1), 0.02, Some(Joint { axis: [0.3, 1.0, 0.0], limits: [0.0, 1.0] })),
    ];
    let samples = (0..3)
        .flat_map(|l| {
            (0..4).map(move |s| Sample { link: l, position: [0.005 * s as f64, 0.004 * (s % 2) as f64, -0.003], radius: 0.006 })
        })
        .collect();
    EffectorModel::new(links, samples).unwrap()
}

/// A pose with the distal joint past its limit, tilted and placed so that
/// several scene points fall inside sample spheres.
pub fn small_pose() -> PoseVector {
    PoseVector {
        translation: [0.01, -0.005, 0.002],
        rotation6d: [0.9, 0.1, -0.2, -0.1, 1.1, 0.15],
        joints: vec![0.3, 1.3],
    }
}

/// A 32-point cloud scattered around the small effector at [`small_pose`].
pub fn cloud_around_hand(seed: u64, c: usize) -> FeaturedCloud {
    let hand = small_effector();
    let q = hand.sample_queries(&small_pose()).unwrap();
    let mut r = rng(seed);
    let mut pts = Vec::new();
    for i in 0..32 {
        let s = q.row_slice(i % q.rows());
        pts.push([s[0] + r.random_range(-0.008..0.008), s[1] + r.random_range(-0.008..0.008), s[2] + r.random_range(-0.008..0.008)]);
    }
    FeaturedCloud::from_points(&pts, random_tensor(&mut r, 32, c, 1.0), None).unwrap()
}

fn small_decoder(c: usize, seed: u64) -> DecoderParams {
    init_params(DecoderShape { feature_dim: c, heads: 2, head_dim: 4, layers: 1 }, seed, InitMode::Random).unwrap()
}

fn check(name: impl Into<String>, program: Program<'_>, inputs: Vec<Tensor>) -> (String, FdReport) {
    (name.into(), finite_diff_check(&program, &inputs, STEP, TOLERANCE).unwrap())
}

fn queries(seed: u64, q: usize) -> Tensor {
    random_tensor(&mut rng(seed), q, 3, 0.06)
}

/// Runs the whole suite; each entry is `(operation, report)`.
pub fn gradient_suite() -> Vec<(String, FdReport)> {
    let c = 6;
    let cloud = random_cloud(11, 24, c);
    let mut out = Vec::new();

    out.push(check(
        "idw_feature wrt query",
        Program::new(vec![[8, 3]], |t, x| {
            let p = t.leaf(cloud.points().clone());
            let f = t.leaf(cloud.features().clone());
            let (feat, _) = idw_field(t, p, f, x[0], 1e-8).map_err(lift)?;
            Ok(vec![contract(t, feat, 1)?])
        }),
        vec![queries(2, 8)],
    ));

    let params = small_decoder(c, 3);
    let frozen = FrozenField::new(&params, &cloud, 1e-8).unwrap();
    out.push(check(
        "query_feature wrt query",
        Program::new(vec![[8, 3]], |t, x| {
            let dv = frozen.decode(t, x[0]).map_err(lift)?;
            Ok(vec![contract(t, dv.features, 4)?])
        }),
        vec![queries(5, 8)],
    ));

    let shapes = DecoderParams::matrix_shapes(params.shape());
    let mut sig = vec![[6, 3]];
    sig.extend(&shapes);
    let mut inputs = vec![queries(6, 6)];
    inputs.extend(params.matrices().into_iter().cloned());
    out.push(check(
        "query_feature wrt query and parameters",
        Program::new(sig, |t, x| {
            let vars = ParamVars(x[1..].to_vec());
            let dv = decode_trainable(t, &params, &vars, &cloud, x[0], 1e-8).map_err(lift)?;
            Ok(vec![contract(t, dv.features, 7)?])
        }),
        inputs,
    ));

    let hand = small_effector();
    let pose = small_pose();
    let beta = pose.to_tensor();
    let width = beta.cols();
    out.push(check(
        "forward kinematics",
        Program::new(vec![[1, width]], |t, x| {
            let q = hand.queries_on_tape(t, x[0]).map_err(lift)?;
            Ok(vec![contract(t, q, 8)?])
        }),
        vec![beta.clone()],
    ));

    let source = random_cloud(12, 20, c);
    let target = cloud_around_hand(13, c);
    let config = EnergyConfig { delta: 0.03, ..EnergyConfig::default() };
    for (kind, field_src, field_tgt) in [
        ("attention", FeatureField::attention(&params, &source, 1e-8).unwrap(), FeatureField::attention(&params, &target, 1e-8).unwrap()),
        ("idw", FeatureField::idw(&source, 1e-8), FeatureField::idw(&target, 1e-8)),
    ] {
        let demo = Demonstration::record(&field_src, hand.clone(), PoseVector::identity(2)).unwrap();
        let objective = Objective { field: &field_tgt, demo: &demo, target: &target, config: &config };
        let terms: [(&str, fn(&attnfield::energy::EnergyVars) -> Var); 5] = [
            ("E_feat", |v| v.feature),
            ("E_pen", |v| v.penetration),
            ("E_spen", |v| v.self_penetration),
            ("E_pose", |v| v.pose),
            ("total_energy", |v| v.total),
        ];
        for (term, pick) in terms {
            let objective = &objective;
            out.push(check(
                format!("{term} ({kind} field)"),
                Program::new(vec![[1, width]], move |t, x| {
                    let v = objective.record(t, x[0]).map_err(lift)?;
                    Ok(vec![pick(&v)])
                }),
                vec![beta.clone()],
            ));
        }
    }

    let mut r = rng(21);
    let sets: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, 5, 4, 1.0)).collect();
    for (mode, name) in [(DenominatorMode::Exclusive, "InfoNCE (exclusive)"), (DenominatorMode::Standard, "InfoNCE (standard)")] {
        out.push(check(
            name,
            Program::new(vec![[5, 4]; 3], move |t, x| Ok(vec![infonce_on_tape(t, x, 0.2, mode).map_err(lift)?])),
            sets.clone(),
        ));
    }
    out
}
