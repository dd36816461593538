//! `attnfield`: pretrain attention fields, transfer demonstrations, export
//! energy slices and run the synthetic benchmark.
//!
//! Exit codes: 0 success, 2 bad input or format, 3 degenerate training
//! (no usable keypoints), 4 every optimization restart failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnfield::attention::DecoderParams;
use attnfield::config::Settings;
use attnfield::effector::{EffectorModel, PoseVector};
use attnfield::energy::{feature_slice, optimize_from, transfer_inits, Demonstration, FeatureField, Objective};
use attnfield::io::{self, DemoFile, TransferResult, RESULT_VERSION};
use attnfield::scene::FeaturedCloud;
use attnfield::synth::{benchmark, success_metric, suite_scenes, SuiteSpec, Vocabulary};
use attnfield::training::train;
use attnfield::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnfield", version, about = "Attention feature fields over point clouds and grasp pose transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train decoder parameters on two or more scenes.
    Pretrain {
        /// Scene files (NAFC); at least two, with equal feature dimension.
        #[arg(long, num_args = 1.., required = true)]
        scenes: Vec<PathBuf>,
        /// Parameter file to write; the loss history goes to `<out>.loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Write the built-in three-finger hand model.
    Hand {
        #[arg(long)]
        out: PathBuf,
    },
    /// Record a demonstration file from a scene, a model and a pose.
    Demo {
        /// Effector model (TOML).
        #[arg(long)]
        model: PathBuf,
        /// Source scene (NAFC).
        #[arg(long)]
        scene: PathBuf,
        /// Pose as comma-separated numbers: translation, rotate6d, joints.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer a demonstration onto a target scene.
    Transfer {
        #[command(flatten)]
        field: FieldArgs,
        /// Demonstration file.
        #[arg(long)]
        demo: PathBuf,
        /// Target scene (NAFC).
        #[arg(long)]
        target: PathBuf,
        /// Result file (TOML); the best trajectory goes to `<out>.trajectory.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Report the success metric against this label of the target scene.
        #[arg(long)]
        region: Option<i32>,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Export E_feat over a grid of base translations on a horizontal plane.
    EnergySlice {
        #[command(flatten)]
        field: FieldArgs,
        #[arg(long)]
        demo: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Plane, written `z=<height>`.
        #[arg(long, allow_hyphen_values = true)]
        plane: String,
        /// Cells per side.
        #[arg(long, default_value_t = 21)]
        grid: usize,
        /// Take orientation and joints from this demo or result file instead
        /// of the demonstration.
        #[arg(long)]
        pose: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Procedural scenes and the transfer benchmark.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Success metric of a pose on a labeled scene.
    Eval {
        /// Demo or result file holding the pose.
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        region: i32,
        #[arg(long, default_value_t = attnfield::synth::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write every scene of a suite plus the hand model and demonstration.
    Gen {
        /// Suite file (TOML).
        #[arg(long)]
        suite: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the suite seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a suite and write per-scene metrics as CSV.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the trained decoder here.
        #[arg(long)]
        params_out: Option<PathBuf>,
        #[command(flatten)]
        settings: SettingsArgs,
    },
}

#[derive(Args)]
struct SettingsArgs {
    /// Config file with dotted keys such as `training.tau` or `energy.restarts`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for both training and optimization.
    #[arg(long)]
    seed: Option<u64>,
}

impl SettingsArgs {
    fn load(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::from_toml(&read_text(p)?)?,
            None => Settings::default(),
        };
        for kv in &self.set {
            s.set_str(kv)?;
        }
        if let Some(seed) = self.seed {
            s.training.seed = seed;
            s.energy.seed = seed;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FieldKind {
    Attention,
    Idw,
}

#[derive(Args)]
struct FieldArgs {
    /// Decoder parameters; required for the attention field.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FieldKind::Attention)]
    method: FieldKind,
}

impl FieldArgs {
    fn builder(&self, epsilon: f64) -> Result<impl Fn(&FeaturedCloud) -> Result<FeatureField>> {
        let params = match (self.method, &self.params) {
            (FieldKind::Attention, Some(p)) => Some(DecoderParams::from_bytes(&read_bytes(p)?)?),
            (FieldKind::Attention, None) => return Err(Error::Config("the attention field needs --params".into())),
            (FieldKind::Idw, _) => None,
        };
        Ok(move |cloud: &FeaturedCloud| match &params {
            Some(p) => FeatureField::attention(p, cloud, epsilon),
            None => Ok(FeatureField::idw(cloud, epsilon)),
        })
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<EffectorModel> {
    EffectorModel::from_toml_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `<out>` with `suffix` appended to its file name.
fn beside(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

struct LoadedDemo {
    model: EffectorModel,
    scene: FeaturedCloud,
    pose: PoseVector,
}

fn load_demo(path: &Path) -> Result<LoadedDemo> {
    let file = DemoFile::parse(&read_text(path)?)?;
    let (model_path, scene_path) = file.resolve(path);
    let model = load_model(&model_path)?;
    if file.pose.joints.len() != model.joint_count() {
        return Err(Error::Format(format!(
            "demo pose has {} joints, model {} has {}",
            file.pose.joints.len(),
            model_path.display(),
            model.joint_count()
        )));
    }
    Ok(LoadedDemo { model, scene: io::load_scene(&scene_path)?, pose: file.pose })
}

fn pretrain(scenes: &[PathBuf], out: &Path, settings: &SettingsArgs) -> Result<()> {
    let s = settings.load()?;
    let clouds = scenes.iter().map(|p| io::load_scene(p)).collect::<Result<Vec<_>>>()?;
    if clouds.len() < 2 {
        return Err(Error::Config("pretraining needs at least two scenes".into()));
    }
    if let Some(c) = clouds.iter().find(|c| c.feature_dim() != clouds[0].feature_dim()) {
        return Err(Error::Format(format!("scenes disagree on feature dimension: {} vs {}", clouds[0].feature_dim(), c.feature_dim())));
    }
    let outcome = train(&clouds, &s.training)?;
    io::write_atomic(out, &outcome.params.to_bytes())?;
    io::write_atomic(&beside(out, ".loss.csv"), io::loss_csv(&outcome.losses).as_bytes())?;
    eprintln!("{} keypoints, loss {} -> {}", outcome.keypoints.len(), outcome.losses[0], outcome.final_loss);
    Ok(())
}

fn demo(model: &Path, scene: &Path, pose: &str, out: &Path) -> Result<()> {
    let m = load_model(model)?;
    io::load_scene(scene)?;
    let values = pose
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("pose entry {v:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != PoseVector::len_for(m.joint_count()) {
        return Err(Error::Config(format!("pose needs {} numbers, got {}", PoseVector::len_for(m.joint_count()), values.len())));
    }
    let pose = PoseVector::from_slice(&values)?;
    io::write_atomic(out, DemoFile::new(model.to_path_buf(), scene.to_path_buf(), pose).to_toml().as_bytes())
}

fn transfer(field: &FieldArgs, demo_path: &Path, target: &Path, out: &Path, region: Option<i32>, settings: &SettingsArgs) -> Result<()> {
    let s = settings.load()?;
    let d = load_demo(demo_path)?;
    let target = io::load_scene(target)?;
    let build = field.builder(s.energy.epsilon)?;
    let demo = Demonstration::record(&build(&d.scene)?, d.model, d.pose)?;
    let field = build(&target)?;
    let objective = Objective { field: &field, demo: &demo, target: &target, config: &s.energy };
    let result = optimize_from(&objective, transfer_inits(&demo.model, &demo.pose, &target, &s.energy))?;
    let best = &result.best;
    let metric = region.map(|r| success_metric(&demo.model, &best.pose, &target, r)).transpose()?;
    let record = TransferResult {
        version: RESULT_VERSION,
        restart: best.restart,
        abandoned: result.abandoned.clone(),
        success_metric: metric,
        pose: best.pose.clone(),
        energy: best.report.into(),
    };
    io::write_atomic(out, record.to_toml().as_bytes())?;
    io::write_atomic(&beside(out, ".trajectory.csv"), io::trajectory_csv(&best.trajectory).as_bytes())?;
    let r = best.report;
    println!(
        "restart {} total {} (feature {} penetration {} self-penetration {} pose {})",
        best.restart, r.total, r.feature, r.penetration, r.self_penetration, r.pose
    );
    if let Some(m) = metric {
        println!("success metric {m}");
    }
    Ok(())
}

fn parse_plane(spec: &str) -> Result<f64> {
    spec.trim()
        .strip_prefix("z=")
        .and_then(|h| h.trim().parse::<f64>().ok())
        .filter(|h| h.is_finite())
        .ok_or_else(|| Error::Config(format!("plane must be written z=<height>, got {spec:?}")))
}

#[allow(clippy::too_many_arguments)]
fn energy_slice(
    field: &FieldArgs,
    demo_path: &Path,
    target: &Path,
    plane: &str,
    grid: usize,
    pose: Option<&Path>,
    out: &Path,
    settings: &SettingsArgs,
) -> Result<()> {
    let z = parse_plane(plane)?;
    if grid < 2 {
        return Err(Error::Config(format!("grid must be at least 2, got {grid}")));
    }
    let s = settings.load()?;
    let d = load_demo(demo_path)?;
    let target = io::load_scene(target)?;
    let template = match pose {
        Some(p) => io::parse_pose_file(&read_text(p)?)?,
        None => d.pose.clone(),
    };
    let build = field.builder(s.energy.epsilon)?;
    let demo = Demonstration::record(&build(&d.scene)?, d.model, d.pose)?;
    let field = build(&target)?;
    let (lo, hi) = target.bounds();
    let cells = feature_slice(&field, &demo, &template, z, grid, [lo[0], lo[1]], [hi[0], hi[1]])?;
    io::write_atomic(out, io::slice_csv(z, grid, &cells).as_bytes())
}

fn synth_gen(suite: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = SuiteSpec::from_toml(&read_text(suite)?)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let scenes = suite_scenes(&spec, &Vocabulary::standard())?;
    std::fs::create_dir_all(out)?;
    let hand = EffectorModel::three_finger_hand();
    io::write_atomic(&out.join("hand.toml"), hand.to_toml_string().as_bytes())?;
    io::save_scene(&out.join("demo.nafc"), &scenes.demo_scene)?;
    let demo = DemoFile::new("hand.toml".into(), "demo.nafc".into(), scenes.demo_pose.clone());
    io::write_atomic(&out.join("demo.toml"), demo.to_toml().as_bytes())?;
    for (i, c) in scenes.pretrain.iter().enumerate() {
        io::save_scene(&out.join(format!("pretrain_{i:02}.nafc")), c)?;
    }
    for t in &scenes.tests {
        io::save_scene(&out.join(format!("test_{:02}.nafc", t.seed)), &t.cloud)?;
    }
    println!("{} pretraining and {} test scenes in {}; target region label {}", scenes.pretrain.len(), scenes.tests.len(), out.display(), scenes.region);
    Ok(())
}

fn synth_bench(suite: &Path, out: &Path, params_out: Option<&Path>, settings: &SettingsArgs) -> Result<()> {
    let spec = SuiteSpec::from_toml(&read_text(suite)?)?;
    let s = settings.load()?;
    let report = benchmark(&spec, &Vocabulary::standard(), &EffectorModel::three_finger_hand(), &s.training, &s.energy)?;
    io::write_atomic(out, io::benchmark_csv(&report).as_bytes())?;
    if let (Some(path), Some(params)) = (params_out, &report.params) {
        io::write_atomic(path, &params.to_bytes())?;
    }
    for m in &spec.methods {
        println!("{}: {}/{} within {} m", m.name(), report.successes(*m), report.count(*m), report.threshold);
    }
    Ok(())
}

fn eval(pose: &Path, model: &Path, target: &Path, region: i32, threshold: f64) -> Result<()> {
    let pose = io::parse_pose_file(&read_text(pose)?)?;
    let model = load_model(model)?;
    let target = io::load_scene(target)?;
    let metric = success_metric(&model, &pose, &target, region)?;
    println!("success metric {metric}");
    println!("success {}", metric <= threshold);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { scenes, out, settings } => pretrain(&scenes, &out, &settings),
        Command::Hand { out } => io::write_atomic(&out, EffectorModel::three_finger_hand().to_toml_string().as_bytes()),
        Command::Demo { model, scene, pose, out } => demo(&model, &scene, &pose, &out),
        Command::Transfer { field, demo, target, out, region, settings } => transfer(&field, &demo, &target, &out, region, &settings),
        Command::EnergySlice { field, demo, target, plane, grid, pose, out, settings } => {
            energy_slice(&field, &demo, &target, &plane, grid, pose.as_deref(), &out, &settings)
        }
        Command::Synth { command: SynthCommand::Gen { suite, out, seed } } => synth_gen(&suite, &out, seed),
        Command::Synth { command: SynthCommand::Bench { suite, out, params_out, settings } } => {
            synth_bench(&suite, &out, params_out.as_deref(), &settings)
        }
        Command::Eval { pose, model, target, region, threshold } => eval(&pose, &model, &target, region, threshold),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NoKeypoints | Error::TooFewKeypoints { .. } | Error::ZeroNorm { .. } => 3,
        Error::AllRestartsFailed => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
