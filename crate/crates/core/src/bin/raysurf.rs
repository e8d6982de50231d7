//! Command-line driver: render datasets, fit them, evaluate and export.
//!
//! Failures print one JSON line `{"error":{"kind":..,"message":..}}` to
//! stderr and exit nonzero (2 for usage errors, 1 otherwise).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use raysurf::fit::{export_state, fit_scene_with, FitConfig, FitError, FitInit};
use raysurf::geometry::pose_to_euler;
use raysurf::gradcheck::{run_suite, GradCheckError};
use raysurf::io::{self, export_pointcloud, IoError, PlyFormat};
use raysurf::metrics::{ate_full, ate_snippets, depth_metrics, trajectory_extent, DepthEvalOptions, MetricsError, Report};
use raysurf::scene::{corner_trajectory, load_sequence, make_sequence, CameraKind, OracleCamera, Scene, SceneError};
use raysurf::{ImageGrid, RaySurface};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("{0}")]
    Input(String),
    #[error("{failed} gradient case(s) above tolerance")]
    GradientMismatch { failed: usize },
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Scene(_) => "scene",
            CliError::Fit(_) => "fit",
            CliError::Metrics(_) => "metrics",
            CliError::GradCheck(_) => "gradcheck",
            CliError::Input(_) => "input",
            CliError::GradientMismatch { .. } => "gradient_mismatch",
        }
    }

    fn exit_code(&self) -> u8 {
        if matches!(self, CliError::Usage(_)) {
            2
        } else {
            1
        }
    }
}

#[derive(Parser)]
#[command(name = "raysurf", version, about = "Generic ray-surface cameras: render, fit, evaluate")]
struct Cli {
    /// Seed for every random choice (scene texture, pose initialization).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence to a dataset directory.
    Render(RenderArgs),
    /// Fit depth, poses and a residual ray surface to a dataset.
    Fit(FitArgs),
    /// Depth metrics of a predicted depth map against ground truth.
    EvalDepth(EvalDepthArgs),
    /// Absolute trajectory error of predicted poses against ground truth.
    EvalOdom(EvalOdomArgs),
    /// Unproject a depth map through a ray surface into a coloured PLY.
    Pointcloud(PointcloudArgs),
    /// Compare every analytic gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CameraArg {
    Pinhole,
    Fisheye,
    Catadioptric,
}

impl From<CameraArg> for CameraKind {
    fn from(c: CameraArg) -> Self {
        match c {
            CameraArg::Pinhole => CameraKind::Pinhole,
            CameraArg::Fisheye => CameraKind::Fisheye,
            CameraArg::Catadioptric => CameraKind::Catadioptric,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SceneArg {
    /// Textured room viewed into a corner.
    CornerRoom,
    /// Three textured planes in front of a far wall.
    Layered,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pinhole")]
    camera: CameraArg,
    #[arg(long, value_enum, default_value = "corner-room")]
    scene: SceneArg,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Multiplier on the per-frame baseline.
    #[arg(long, default_value_t = 1.0)]
    translation_scale: f64,
    /// Multiplier on the per-frame rotation (0.01 rad at 1).
    #[arg(long, default_value_t = 1.0)]
    rotation_scale: f64,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory written by `render`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Key-value config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the dataset's ground-truth ray surface as the template.
    #[arg(long)]
    template_from_data: bool,
    /// Initialize pair poses from the dataset's ground-truth trajectory.
    #[arg(long)]
    poses_from_data: bool,
}

#[derive(Args)]
struct EvalDepthArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// 1-channel PFM; pixels at or below 0.5 are ignored.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    no_median_scaling: bool,
    #[arg(long, default_value_t = 1e-3)]
    min_depth: f64,
    #[arg(long, default_value_t = 80.0)]
    max_depth: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalOdomArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Also report mean and deviation over windows of this many poses.
    #[arg(long)]
    snippet: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PointcloudArgs {
    #[arg(long)]
    depth: PathBuf,
    /// 3-channel PFM of rays.
    #[arg(long)]
    surface: PathBuf,
    /// Colour source (PFM, values in [0, 1]).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    binary: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return fail(&CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
    eprintln!("{line}");
    ExitCode::from(e.exit_code())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Render(a) => render(a, cli.seed),
        Command::Fit(a) => fit(a, cli.seed),
        Command::EvalDepth(a) => eval_depth(a),
        Command::EvalOdom(a) => eval_odom(a),
        Command::Pointcloud(a) => pointcloud(a),
        Command::Gradcheck(a) => gradcheck(a, cli.seed),
    }
}

fn render(a: RenderArgs, seed: u64) -> Result<(), CliError> {
    if a.height < 2 || a.width < 2 {
        return Err(CliError::Usage("image must be at least 2x2".into()));
    }
    let camera = OracleCamera::preset(a.camera.into(), a.height, a.width);
    let scene = match a.scene {
        SceneArg::CornerRoom => Scene::corner_room(seed),
        SceneArg::Layered => Scene::layered(seed),
    };
    let trajectory = corner_trajectory(a.frames, a.translation_scale, a.rotation_scale);
    make_sequence(&scene, &camera, &trajectory, a.height, a.width, Some(&a.out))?;
    println!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn fit(a: FitArgs, seed: u64) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(path) => FitConfig::from_toml(&io::read_text(path)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
        None => FitConfig::default(),
    };
    cfg.seed = seed;
    let seq = load_sequence(&a.data)?;
    let n = seq.frames.len();
    let init = FitInit {
        template: a.template_from_data.then(|| seq.surface.clone()),
        pose_params: a.poses_from_data.then(|| {
            (1..n - 1)
                .flat_map(|t| [t - 1, t + 1].map(|c| pose_to_euler(&seq.relative_pose(t, c))))
                .collect()
        }),
        depths: None,
    };
    let result = fit_scene_with(&seq.frames, &cfg, &init)?;
    export_state(&result.state, &a.out)?;
    io::write_bytes(&a.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let report = serde_json::json!({
        "loss_curve": result.loss_curve,
        "diagnostics": result.diagnostics,
    });
    io::write_bytes(&a.out.join("fit_report.json"), report.to_string().as_bytes())?;
    println!(
        "final_loss={:.6e} epochs={} out={}",
        result.diagnostics.final_loss,
        result.loss_curve.len(),
        a.out.display()
    );
    Ok(())
}

fn read_mask(path: &Path, len: usize) -> Result<Vec<bool>, CliError> {
    let m = io::read_pfm(path)?;
    if m.channels() != 1 || m.data().len() != len {
        return Err(IoError::parse(path, "dimensions", "mask must be 1-channel and match the depth map").into());
    }
    Ok(m.data().iter().map(|&v| v > 0.5).collect())
}

fn print_report(report: &Report, json: bool) {
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
}

fn eval_depth(a: EvalDepthArgs) -> Result<(), CliError> {
    let pred = io::read_pfm(&a.pred)?;
    let gt = io::read_pfm(&a.gt)?;
    for (g, p) in [(&pred, &a.pred), (&gt, &a.gt)] {
        if g.channels() != 1 {
            return Err(IoError::parse(p, "channels", "depth maps must have one channel").into());
        }
    }
    if !pred.same_shape(&gt) {
        return Err(IoError::parse(&a.pred, "dimensions", "differs from the ground-truth depth").into());
    }
    let mask = a.mask.as_deref().map(|m| read_mask(m, gt.data().len())).transpose()?;
    let opts = DepthEvalOptions {
        min_depth: a.min_depth,
        max_depth: a.max_depth,
        median_scaling: !a.no_median_scaling,
    };
    let m = depth_metrics(&pred, &gt, mask.as_deref(), &opts)?;
    print_report(&Report::new("depth", m.to_map()), a.json);
    Ok(())
}

fn eval_odom(a: EvalOdomArgs) -> Result<(), CliError> {
    let pred = io::read_poses(&a.pred)?;
    let gt = io::read_poses(&a.gt)?;
    let ate = ate_full(&pred, &gt)?;
    let extent = trajectory_extent(&gt);
    let mut metrics = BTreeMap::from([
        ("ate".to_string(), ate),
        ("extent".to_string(), extent),
        ("ate_over_extent".to_string(), ate / extent),
        ("poses".to_string(), gt.len() as f64),
    ]);
    if let Some(k) = a.snippet {
        let (mean, std) = ate_snippets(&pred, &gt, k)?;
        metrics.insert("ate_snippet_mean".into(), mean);
        metrics.insert("ate_snippet_std".into(), std);
    }
    print_report(&Report::new("odometry", metrics), a.json);
    Ok(())
}

fn pointcloud(a: PointcloudArgs) -> Result<(), CliError> {
    let depth = io::read_pfm(&a.depth)?;
    let surface_grid = io::read_pfm(&a.surface)?;
    let surface = RaySurface::from_grid(&surface_grid)
        .map_err(|e| IoError::parse(&a.surface, "rays", e.to_string()))?;
    let image: ImageGrid = io::read_pfm(&a.image)?;
    if depth.channels() != 1 || depth.height() != surface.height() || depth.width() != surface.width() {
        return Err(IoError::parse(&a.depth, "dimensions", "depth must be 1-channel and match the surface").into());
    }
    let mask = a.mask.as_deref().map(|m| read_mask(m, depth.data().len())).transpose()?;
    let format = if a.binary {
        PlyFormat::BinaryLittleEndian
    } else {
        PlyFormat::Ascii
    };
    let n = export_pointcloud(&a.out, &depth, &surface, &image, mask.as_deref(), format)?;
    println!("vertices={n} out={}", a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs, seed: u64) -> Result<(), CliError> {
    let report = run_suite(seed)?;
    if a.json {
        let cases: Vec<_> = report
            .cases
            .iter()
            .map(|c| serde_json::json!({"name": c.name, "error": c.error, "tolerance": c.tolerance, "passed": c.passed()}))
            .collect();
        println!("{}", serde_json::json!({"passed": report.passed(), "cases": cases}));
    } else {
        print!("{}", report.to_text());
    }
    let failed = report.cases.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(CliError::GradientMismatch { failed });
    }
    Ok(())
}
