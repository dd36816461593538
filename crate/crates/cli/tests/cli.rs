use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use attnfield::energy::{Demonstration, EnergyConfig, FeatureField, Objective};
use attnfield::io::{load_scene, save_scene, DemoFile, TransferResult};
use attnfield::effector::EffectorModel;
use attnfield::numerics::Tensor;
use attnfield::scene::FeaturedCloud;
use attnfield::synth::success_metric;

const FAST: [&str; 4] = ["--set", "energy.steps=12", "--set", "energy.restarts=2"];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attnfield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A generated two-scene distractor suite with trained parameters, shared
/// by every test in this file.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let suite = root.join("suite.toml");
        std::fs::write(&suite, "name = \"tiny\"\nkind = \"distractor\"\nscenes = 2\npretrain_scenes = 2\nseed = 3\n").unwrap();
        let data = root.join("data");
        ok(&["synth", "gen", "--suite", s(&suite), "--out", s(&data)]);
        ok(&[
            "pretrain",
            "--scenes",
            s(&data.join("pretrain_00.nafc")),
            s(&data.join("pretrain_01.nafc")),
            "--out",
            s(&root.join("params.nafp")),
            "--set",
            "training.iterations=6",
        ]);
        Fixture { _dir: dir, root }
    })
}

fn transfer(f: &Fixture, method: &str, target: &str, out: &str, extra: &[&str]) -> String {
    let params = f.path("params.nafp");
    let demo = f.path("data/demo.toml");
    let mut args = vec![
        "transfer",
        "--method",
        method,
        "--params",
        s(&params),
        "--demo",
        s(&demo),
        "--target",
        target,
        "--out",
    ];
    let out = f.path(out);
    args.push(s(&out));
    args.extend(FAST);
    args.extend(extra);
    ok(&args)
}

#[test]
fn gen_writes_every_file() {
    let f = fixture();
    for name in ["hand.toml", "demo.nafc", "demo.toml", "pretrain_00.nafc", "pretrain_01.nafc"] {
        assert!(f.path("data").join(name).exists(), "{name}");
    }
    let tests = std::fs::read_dir(f.path("data")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("test_")).count();
    assert_eq!(tests, 2);
}

#[test]
fn pretrain_writes_one_loss_row_per_iteration() {
    let f = fixture();
    let loss = std::fs::read_to_string(f.path("params.nafp.loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("iteration,loss"));
    assert_eq!(loss.lines().count(), 1 + 6);
}

#[test]
fn transfer_output_shapes() {
    let f = fixture();
    let target = f.path("data/test_00.nafc");
    let stdout = transfer(f, "attention", s(&target), "shape.toml", &["--region", "1"]);
    assert!(stdout.contains("success metric"));
    let result = TransferResult::parse(&std::fs::read_to_string(f.path("shape.toml")).unwrap()).unwrap();
    assert!(result.success_metric.is_some());
    let traj = std::fs::read_to_string(f.path("shape.toml.trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 13);
    let header: Vec<&str> = traj.lines().next().unwrap().split(',').collect();
    let hand = EffectorModel::three_finger_hand();
    assert_eq!(header.len(), 1 + 3 + 6 + hand.joint_count() + 5);
    assert_eq!(header.last(), Some(&"total"));
}

#[test]
fn transfer_is_deterministic() {
    let f = fixture();
    let target = f.path("data/test_01.nafc");
    for method in ["attention", "idw"] {
        transfer(f, method, s(&target), &format!("{method}_a.toml"), &["--seed", "5"]);
        transfer(f, method, s(&target), &format!("{method}_b.toml"), &["--seed", "5"]);
        for suffix in ["", ".trajectory.csv"] {
            let a = std::fs::read(f.path(&format!("{method}_a.toml{suffix}"))).unwrap();
            let b = std::fs::read(f.path(&format!("{method}_b.toml{suffix}"))).unwrap();
            assert_eq!(a, b, "{method}{suffix}");
        }
    }
}

#[test]
fn transfer_onto_the_demo_scene_ends_at_or_below_the_demonstration() {
    let f = fixture();
    let demo_scene = f.path("data/demo.nafc");
    transfer(f, "idw", s(&demo_scene), "self.toml", &[]);
    let result = TransferResult::parse(&std::fs::read_to_string(f.path("self.toml")).unwrap()).unwrap();

    let demo = DemoFile::parse(&std::fs::read_to_string(f.path("data/demo.toml")).unwrap()).unwrap();
    let scene = load_scene(&demo_scene).unwrap();
    let config = EnergyConfig::default();
    let field = FeatureField::idw(&scene, config.epsilon);
    let recorded = Demonstration::record(&field, EffectorModel::three_finger_hand(), demo.pose.clone()).unwrap();
    let objective = Objective { field: &field, demo: &recorded, target: &scene, config: &config };
    let (at_demo, _) = objective.evaluate(&demo.pose).unwrap();
    assert!(at_demo.feature.abs() < 1e-12);
    assert!(result.energy.total <= at_demo.total + 1e-6, "{} vs {}", result.energy.total, at_demo.total);
}

#[test]
fn eval_agrees_with_the_library() {
    let f = fixture();
    let target = f.path("data/test_00.nafc");
    let demo = f.path("data/demo.toml");
    let hand = f.path("data/hand.toml");
    let out = ok(&["eval", "--pose", s(&demo), "--model", s(&hand), "--target", s(&target), "--region", "1"]);
    let printed: f64 = out.lines().next().unwrap().trim_start_matches("success metric ").parse().unwrap();
    let pose = DemoFile::parse(&std::fs::read_to_string(&demo).unwrap()).unwrap().pose;
    let want = success_metric(&EffectorModel::three_finger_hand(), &pose, &load_scene(&target).unwrap(), 1).unwrap();
    assert!((printed - want).abs() <= 1e-12 * want.max(1.0));
    assert_eq!(out.lines().nth(1), Some(format!("success {}", want <= 0.03).as_str()));
}

#[test]
fn energy_slice_grid_sizes() {
    let f = fixture();
    let target = f.path("data/test_00.nafc");
    let demo = f.path("data/demo.toml");
    for (n, cells) in [(2, 4), (5, 25)] {
        let out = f.path(&format!("slice{n}.csv"));
        ok(&["energy-slice", "--method", "idw", "--demo", s(&demo), "--target", s(&target), "--plane", "z=0.05", "--grid", &n.to_string(), "--out", s(&out)]);
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("# plane z=0.05"));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + cells);
    }
    let out = f.path("slice1.csv");
    assert_eq!(code(&["energy-slice", "--method", "idw", "--demo", s(&demo), "--target", s(&target), "--plane", "z=0", "--grid", "1", "--out", s(&out)]), 2);
    assert_eq!(code(&["energy-slice", "--method", "idw", "--demo", s(&demo), "--target", s(&target), "--plane", "y=0", "--out", s(&out)]), 2);
}

#[test]
fn bad_inputs_exit_with_two() {
    let f = fixture();
    let junk = f.path("junk.nafc");
    std::fs::write(&junk, b"JUNKJUNKJUNKJUNKJUNKJUNKJUNK").unwrap();
    let demo = f.path("data/demo.toml");
    let target = f.path("data/test_00.nafc");
    let out = f.path("never.toml");
    let missing = f.path("missing.nafc");
    assert_eq!(code(&["transfer", "--method", "idw", "--demo", s(&demo), "--target", s(&junk), "--out", s(&out)]), 2);
    assert_eq!(code(&["transfer", "--method", "idw", "--demo", s(&demo), "--target", s(&missing), "--out", s(&out)]), 2);
    // The attention field needs parameters.
    assert_eq!(code(&["transfer", "--demo", s(&demo), "--target", s(&target), "--out", s(&out)]), 2);
    assert_eq!(code(&["transfer", "--method", "idw", "--demo", s(&demo), "--target", s(&target), "--out", s(&out), "--set", "energy.nope=1"]), 2);
    assert_eq!(code(&["pretrain", "--scenes", s(&target), "--out", s(&out)]), 2);
    assert!(!out.exists());

    let other = f.path("c2.nafc");
    let pts: Vec<[f64; 3]> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
    save_scene(&other, &FeaturedCloud::from_points(&pts, Tensor::zeros(4, 2), None).unwrap()).unwrap();
    assert_eq!(code(&["pretrain", "--scenes", s(&target), s(&other), "--out", s(&out)]), 2);

    let hand = f.path("data/hand.toml");
    assert_eq!(code(&["demo", "--model", s(&hand), "--scene", s(&target), "--pose", "0,0,0", "--out", s(&out)]), 2);
}

#[test]
fn degenerate_training_exits_with_three() {
    let f = fixture();
    // One point per scene leaves a single keypoint, too few for a loss.
    let a = f.path("one_a.nafc");
    let b = f.path("one_b.nafc");
    for (p, v) in [(&a, 1.0), (&b, 2.0)] {
        save_scene(p, &FeaturedCloud::from_points(&[[0.0; 3]], Tensor::filled(1, 2, v), None).unwrap()).unwrap();
    }
    assert_eq!(code(&["pretrain", "--scenes", s(&a), s(&b), "--out", s(&f.path("deg.nafp"))]), 3);
}

#[test]
fn demo_round_trips_through_the_cli() {
    let f = fixture();
    let hand = f.path("data/hand.toml");
    let scene = f.path("data/demo.nafc");
    let out = f.path("manual_demo.toml");
    let joints = EffectorModel::three_finger_hand().joint_count();
    let mut pose = vec!["0.01", "-0.02", "0.1", "1", "0", "0", "0", "1", "0"];
    pose.extend(std::iter::repeat_n("0.2", joints));
    ok(&["demo", "--model", s(&hand), "--scene", s(&scene), "--pose", &pose.join(","), "--out", s(&out)]);
    let demo = DemoFile::parse(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(demo.pose.translation, [0.01, -0.02, 0.1]);
    assert_eq!(demo.pose.joints, vec![0.2; joints]);
}

#[test]
fn hand_command_writes_the_builtin_model() {
    let f = fixture();
    let out = f.path("hand_out.toml");
    ok(&["hand", "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), EffectorModel::three_finger_hand().to_toml_string());
}
