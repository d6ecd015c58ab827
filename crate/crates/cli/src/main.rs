//! `motion3d`: trajectories, scenes, rigs, manifests, metrics and the toy
//! sampler from the command line.
//!
//! All randomness flows from `--seed`. Every flag can also be set through an
//! environment variable named `MOTION3D_<FLAG>` (for example
//! `MOTION3D_SEED`).
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 invalid data, 5 numeric failure.
//! On failure the last stderr line is a JSON object with `error`, `code` and
//! `message`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand};

use motion3d::camera::{build_rig, project_tracks, tracks_to_csv, CameraRig, Intrinsics, RigDocument};
use motion3d::dataset::{
    default_assets, enumerate_manifest, parse_pose_sequence, serialize_pose_sequence, DEFAULT_LOCATIONS,
};
use motion3d::injector::{
    grad_check, grad_check_f32, latent_frames, read_checkpoint, DitBlockWeights, InjectorParams, ToyBatch, DOWNSAMPLE,
    EMBED_DIM,
};
use motion3d::metrics::{evaluate_scene, report_csv};
use motion3d::sampler::{
    annealed_sample, make_schedule, Denoiser, EntityTrajectory, LinearDenoiser, NegativeMode, SamplerConfig,
    ToyDitDenoiser, DEFAULT_ANNEAL_STEP, DEFAULT_GUIDANCE, DEFAULT_LORA_ALPHA, DEFAULT_STEPS,
};
use motion3d::traj::{
    compose_scene, default_library, ComposeOptions, EntityKind, EntitySpec, TrajectoryTemplate, DEFAULT_CLEARANCE,
    DEFAULT_FPS, DEFAULT_FRAMES, DEFAULT_MAX_RETRIES,
};
use motion3d::Vec3;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

/// Gradient checks above this relative error fail with the numeric exit code.
const GRAD_TOLERANCE: f64 = 1e-5;
const GRAD_TOLERANCE_F32: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "motion3d", version, about = "3D entity motion toolkit", max_term_width = 100)]
struct Cli {
    /// Seed for every random choice
    #[arg(long, global = true, env = "MOTION3D_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write trajectory templates as single-entity .poseq files
    GenTraj(GenTraj),
    /// Place one to three entities on the stage
    ComposeScene(ComposeScene),
    /// Export the twelve-camera rig
    BuildRig(BuildRig),
    /// Project a scene through the rig into per-camera CSV tracks
    #[command(name = "project-2d")]
    Project2d(Project2d),
    /// Enumerate a dataset manifest
    Manifest(ManifestCmd),
    /// Score an estimated .poseq against ground truth
    Eval(Eval),
    /// Run annealed guidance sampling with a toy denoiser
    SampleDemo(SampleDemo),
    /// Check the injector's analytic gradients by finite differences
    GradCheck(GradCheck),
}

#[derive(Debug, Clone, Args)]
struct Timing {
    /// Frames per sequence
    #[arg(long, env = "MOTION3D_FRAMES", default_value_t = DEFAULT_FRAMES,
          value_parser = clap::value_parser!(u64).range(1..=100_000).map(|v| v as usize))]
    frames: usize,
    /// Frame rate
    #[arg(long, env = "MOTION3D_FPS", default_value_t = DEFAULT_FPS)]
    fps: f64,
}

#[derive(Debug, Args)]
struct GenTraj {
    /// Directory for `<template-id>.poseq` files
    #[arg(long, env = "MOTION3D_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Only these template ids (repeatable); default is the whole library
    #[arg(long = "template")]
    templates: Vec<String>,
    /// Print the library as CSV instead of writing files
    #[arg(long)]
    list: bool,
    #[command(flatten)]
    timing: Timing,
}

#[derive(Debug, Args)]
struct Placement {
    /// Entity as `TEMPLATE[:KIND[:PROMPT]]`, KIND is human or animal (repeatable, 1 to 3)
    #[arg(long = "entity", required = true)]
    entities: Vec<String>,
    /// Minimum distance between entity centres, metres
    #[arg(long, env = "MOTION3D_CLEARANCE", default_value_t = DEFAULT_CLEARANCE)]
    clearance: f64,
    /// Placement attempts before giving up
    #[arg(long, env = "MOTION3D_MAX_RETRIES", default_value_t = DEFAULT_MAX_RETRIES)]
    max_retries: usize,
    /// Location tag written into the scene
    #[arg(long, env = "MOTION3D_LOCATION", default_value = "stage")]
    location: String,
}

#[derive(Debug, Args)]
struct ComposeScene {
    #[command(flatten)]
    placement: Placement,
    #[command(flatten)]
    timing: Timing,
    /// Output .poseq path
    #[arg(long, env = "MOTION3D_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildRig {
    /// Camera circle radius, metres
    #[arg(long, env = "MOTION3D_RADIUS", default_value_t = motion3d::camera::DEFAULT_RADIUS)]
    radius: f64,
    /// Camera height above the stage centre, metres
    #[arg(long, env = "MOTION3D_HEIGHT", default_value_t = motion3d::camera::DEFAULT_HEIGHT)]
    height: f64,
    /// Horizontal field of view, degrees
    #[arg(long, env = "MOTION3D_HFOV", default_value_t = motion3d::camera::DEFAULT_HFOV_DEG)]
    hfov: f64,
    /// Output rig JSON path
    #[arg(long, env = "MOTION3D_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Project2d {
    /// Scene to project
    #[arg(long)]
    scene: PathBuf,
    /// Rig JSON from build-rig; the default rig when omitted
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Only this camera index
    #[arg(long)]
    camera: Option<usize>,
    /// Directory for `camKK.csv` files
    #[arg(long, env = "MOTION3D_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ManifestCmd {
    /// Number of distinct compositions to draw
    #[arg(long, env = "MOTION3D_BUDGET", default_value_t = 4500,
          value_parser = clap::value_parser!(u64).range(1..).map(|v| v as usize))]
    budget: usize,
    /// Comma-separated location tags
    #[arg(long, env = "MOTION3D_LOCATIONS", value_delimiter = ',', default_values_t = DEFAULT_LOCATIONS.map(String::from))]
    locations: Vec<String>,
    /// Output .manifest path
    #[arg(long, env = "MOTION3D_OUT")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Eval {
    /// Estimated trajectories
    #[arg(long)]
    est: PathBuf,
    /// Ground-truth trajectories
    #[arg(long)]
    gt: PathBuf,
    /// Clip id written in the report
    #[arg(long, default_value = "clip")]
    clip_id: String,
    /// Report CSV path; stdout when omitted
    #[arg(long, env = "MOTION3D_OUT")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum DenoiserKind {
    /// One DiT block with the object injector
    ToyDit,
    /// `ε = k·x` with condition-dependent gain
    Linear,
}

#[derive(Debug, Args)]
struct SampleDemo {
    /// Respaced DDIM steps
    #[arg(long, env = "MOTION3D_STEPS", default_value_t = DEFAULT_STEPS,
          value_parser = clap::value_parser!(u64).range(1..=1000).map(|v| v as usize))]
    steps: usize,
    /// Guidance strength w
    #[arg(long, short = 'w', env = "MOTION3D_GUIDANCE", default_value_t = DEFAULT_GUIDANCE)]
    guidance: f64,
    /// Leading steps that see the trajectories (at most --steps)
    #[arg(long, env = "MOTION3D_TC", default_value_t = DEFAULT_ANNEAL_STEP)]
    tc: usize,
    /// Domain adaptor strength while trajectories are active
    #[arg(long, env = "MOTION3D_ALPHA_LORA", default_value_t = DEFAULT_LORA_ALPHA)]
    alpha_lora: f64,
    /// Ancestral noise, 0 is deterministic DDIM
    #[arg(long, env = "MOTION3D_ETA", default_value_t = 0.0)]
    eta: f64,
    /// Negative branch while trajectories are active: uncond, static_pose, positive_pose
    #[arg(long, env = "MOTION3D_NEGATIVE", default_value = "uncond")]
    negative: String,
    /// Caption for the whole clip
    #[arg(long, default_value = "a man walks through a plaza")]
    prompt: String,
    /// Entity as `TEMPLATE[:KIND[:PROMPT]]` (repeatable, up to 3)
    #[arg(long = "entity", default_values_t = ["line-03:human:a man".to_string()])]
    entities: Vec<String>,
    /// Video frames before temporal downsampling
    #[arg(long, env = "MOTION3D_FRAMES", default_value_t = 9,
          value_parser = clap::value_parser!(u64).range(2..=1000).map(|v| v as usize))]
    frames: usize,
    /// Latent grid height
    #[arg(long, default_value_t = 2)]
    latent_height: usize,
    /// Latent grid width
    #[arg(long, default_value_t = 2)]
    latent_width: usize,
    #[arg(long, value_enum, default_value_t = DenoiserKind::ToyDit)]
    denoiser: DenoiserKind,
    /// Injector checkpoint; otherwise fresh weights with gate --gate
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Gate parameter γ for fresh injector weights
    #[arg(long, default_value_t = 0.5)]
    gate: f64,
    /// Latent dump (JSON with shape and row-major data)
    #[arg(long, env = "MOTION3D_OUT")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Debug, Args)]
struct GradCheck {
    /// Latent frames F̃
    #[arg(long, default_value_t = 2)]
    latent_frames: usize,
    /// Video tokens per frame M
    #[arg(long, default_value_t = 4)]
    tokens: usize,
    /// Entities N
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..=3).map(|v| v as usize))]
    entities: usize,
    /// Embedding width D
    #[arg(long, default_value_t = EMBED_DIM)]
    dim: usize,
    /// Precision of the analytic gradients
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

/// A failure with its exit code and machine-readable class.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<motion3d::Error> for Failure {
    fn from(e: motion3d::Error) -> Self {
        let code = match e.kind() {
            "non_finite" => EXIT_NUMERIC,
            "range" => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        kind: "usage".into(),
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        kind: "io".into(),
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_failure(path, e))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn ensure_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn find_template<'a>(library: &'a [TrajectoryTemplate], id: &str) -> CliResult<&'a TrajectoryTemplate> {
    library
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| usage(format!("unknown template {id:?}; see `gen-traj --list`")))
}

fn parse_entity(library: &[TrajectoryTemplate], spec: &str) -> CliResult<EntitySpec> {
    let mut parts = spec.splitn(3, ':');
    let template = find_template(library, parts.next().unwrap_or_default())?;
    let kind = match parts.next() {
        None | Some("human") => EntityKind::Human,
        Some("animal") => EntityKind::Animal,
        Some(other) => return Err(usage(format!("unknown entity kind {other:?} in {spec:?}"))),
    };
    let mut e = EntitySpec::new(template.clone(), kind);
    if let Some(p) = parts.next() {
        e = e.with_prompt(p);
    }
    Ok(e)
}

fn check_fps(fps: f64) -> CliResult {
    if fps.is_finite() && fps > 0.0 {
        Ok(())
    } else {
        Err(usage(format!("--fps must be a positive number, got {fps}")))
    }
}

fn compose(placement: &Placement, timing: &Timing, seed: u64) -> CliResult<motion3d::traj::SceneComposition> {
    check_fps(timing.fps)?;
    let library = default_library();
    let specs = placement
        .entities
        .iter()
        .map(|s| parse_entity(&library, s))
        .collect::<CliResult<Vec<_>>>()?;
    let opts = ComposeOptions {
        frames: timing.frames,
        fps: timing.fps,
        seed,
        clearance: placement.clearance,
        max_retries: placement.max_retries,
        location_tag: placement.location.clone(),
        ..Default::default()
    };
    Ok(compose_scene(&specs, &opts)?)
}

fn gen_traj(cmd: &GenTraj, seed: u64) -> CliResult {
    check_fps(cmd.timing.fps)?;
    let library = default_library();
    let chosen: Vec<&TrajectoryTemplate> = if cmd.templates.is_empty() {
        library.iter().collect()
    } else {
        cmd.templates
            .iter()
            .map(|id| find_template(&library, id))
            .collect::<CliResult<_>>()?
    };
    if cmd.list {
        let mut text = String::from("id,family,duration_s,control_points\n");
        for t in chosen {
            text.push_str(&format!(
                "{},{},{},{}\n",
                t.id,
                t.family,
                t.duration,
                t.control_points.len()
            ));
        }
        emit(&text);
        return Ok(());
    }
    let dir = cmd
        .out_dir
        .as_ref()
        .ok_or_else(|| usage("--out-dir is required unless --list is given"))?;
    ensure_dir(dir)?;
    for t in &chosen {
        let opts = ComposeOptions {
            frames: cmd.timing.frames,
            fps: cmd.timing.fps,
            seed,
            ..Default::default()
        };
        let spec = EntitySpec::new((*t).clone(), EntityKind::Human).with_id(t.id.clone());
        let scene = compose_scene(&[spec], &opts)?;
        write(&dir.join(format!("{}.poseq", t.id)), &serialize_pose_sequence(&scene))?;
    }
    eprintln!("wrote {} templates to {}", chosen.len(), dir.display());
    Ok(())
}

fn load_rig(path: Option<&PathBuf>) -> CliResult<CameraRig> {
    let Some(path) = path else {
        return Ok(CameraRig::default_rig());
    };
    let doc: RigDocument = serde_json::from_str(&read(path)?).map_err(|e| Failure {
        code: EXIT_DATA,
        kind: "parse".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(CameraRig::from_document(&doc)?)
}

fn project_2d(cmd: &Project2d) -> CliResult {
    let scene = parse_pose_sequence(&read(&cmd.scene)?)?;
    let rig = load_rig(cmd.rig.as_ref())?;
    let indices: Vec<usize> = match cmd.camera {
        Some(k) => {
            rig.camera(k)?;
            vec![k]
        }
        None => (0..rig.cameras().len()).collect(),
    };
    ensure_dir(&cmd.out_dir)?;
    for k in indices {
        let tracks = project_tracks(rig.camera(k)?, &scene);
        write(&cmd.out_dir.join(format!("cam{k:02}.csv")), &tracks_to_csv(&tracks))?;
    }
    Ok(())
}

fn manifest(cmd: &ManifestCmd, seed: u64) -> CliResult {
    let m = enumerate_manifest(&default_assets(), &default_library(), &cmd.locations, cmd.budget, seed)?;
    write(&cmd.out, &m.to_json())?;
    println!(
        "compositions={} clips={} available={}",
        m.counts.compositions, m.counts.clips, m.counts.available_compositions
    );
    Ok(())
}

fn eval(cmd: &Eval) -> CliResult {
    let est = parse_pose_sequence(&read(&cmd.est)?)?;
    let gt = parse_pose_sequence(&read(&cmd.gt)?)?;
    let report = report_csv(&evaluate_scene(&cmd.clip_id, &est, &gt)?);
    match &cmd.out {
        Some(p) => write(p, &report),
        None => {
            emit(&report);
            Ok(())
        }
    }
}

fn sample_demo(cmd: &SampleDemo, seed: u64) -> CliResult {
    let negative: NegativeMode = cmd
        .negative
        .parse()
        .map_err(|e: motion3d::Error| usage(e.to_string()))?;
    let config = SamplerConfig {
        steps: cmd.steps,
        guidance: cmd.guidance,
        anneal_step: cmd.tc,
        alpha_lora: cmd.alpha_lora,
        eta: cmd.eta,
        ..Default::default()
    };
    let schedule = make_schedule(&config).map_err(|e| usage(e.to_string()))?;
    if cmd.latent_height == 0 || cmd.latent_width == 0 {
        return Err(usage("latent grid must be at least 1×1"));
    }
    let placement = Placement {
        entities: cmd.entities.clone(),
        clearance: DEFAULT_CLEARANCE,
        max_retries: DEFAULT_MAX_RETRIES,
        location: "stage".into(),
    };
    let timing = Timing {
        frames: cmd.frames,
        fps: DEFAULT_FPS,
    };
    let scene = compose(&placement, &timing, seed)?;
    let pairs: Vec<EntityTrajectory> = scene
        .entities()
        .iter()
        .map(|e| EntityTrajectory {
            prompt: e.prompt.clone(),
            trajectory: e.trajectory.clone(),
        })
        .collect();
    let shape = [
        latent_frames(cmd.frames, DOWNSAMPLE),
        cmd.latent_height,
        cmd.latent_width,
        EMBED_DIM,
    ];
    let mut denoiser: Box<dyn Denoiser> = match cmd.denoiser {
        DenoiserKind::Linear => Box::new(LinearDenoiser::default()),
        DenoiserKind::ToyDit => {
            let base = DitBlockWeights::random(EMBED_DIM, 4 * EMBED_DIM, seed);
            let params = match &cmd.checkpoint {
                Some(p) => read_checkpoint(&read(p)?)?,
                None => InjectorParams {
                    gate_gamma: cmd.gate,
                    ..InjectorParams::from_base(&base, seed.wrapping_add(1))
                },
            };
            if params.dim() != EMBED_DIM {
                return Err(usage(format!("checkpoint width {} is not {EMBED_DIM}", params.dim())));
            }
            Box::new(ToyDitDenoiser { base, params })
        }
    };
    let out = annealed_sample(
        denoiser.as_mut(),
        &schedule,
        &cmd.prompt,
        &pairs,
        negative,
        &shape,
        seed,
    )?;
    let mut dump = serde_json::to_string(&out.x0).expect("tensor serializes");
    dump.push('\n');
    write(&cmd.out, &dump)?;
    println!(
        "conditioned_steps={} base_steps={}",
        out.conditioned_steps, out.base_steps
    );
    Ok(())
}

fn run_grad_check(cmd: &GradCheck, seed: u64) -> CliResult {
    if cmd.latent_frames == 0 || cmd.tokens == 0 || cmd.dim == 0 {
        return Err(usage("latent frames, tokens and width must be >= 1"));
    }
    let (batch, params) = ToyBatch::random(cmd.latent_frames, cmd.tokens, cmd.entities, cmd.dim, seed);
    let (report, metric, tolerance) = match cmd.precision {
        Precision::F64 => {
            let r = grad_check(&batch, &params)?;
            let m = r.max_rel_error;
            (r, m, GRAD_TOLERANCE)
        }
        Precision::F32 => {
            let r = grad_check_f32(&batch, &params)?;
            let m = r.max_group_rel_error;
            (r, m, GRAD_TOLERANCE_F32)
        }
    };
    for (group, err) in &report.per_group {
        println!("group={group} max_rel_error={err:e}");
    }
    println!("params_checked={}", report.params_checked);
    println!("max_group_rel_error={:e}", report.max_group_rel_error);
    println!("max_rel_error={:e}", report.max_rel_error);
    if metric < tolerance {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            kind: "grad_check".into(),
            message: format!("relative error {metric:e} exceeds {tolerance:e}"),
        })
    }
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenTraj(c) => gen_traj(c, cli.seed),
        Command::ComposeScene(c) => {
            let scene = compose(&c.placement, &c.timing, cli.seed)?;
            write(&c.out, &serialize_pose_sequence(&scene))
        }
        Command::BuildRig(c) => {
            let k = Intrinsics::from_hfov(c.hfov, motion3d::camera::IMAGE_WIDTH, motion3d::camera::IMAGE_HEIGHT)?;
            let rig = build_rig(Vec3::zeros(), c.radius, c.height, k)?;
            let mut text = serde_json::to_string_pretty(&rig.to_document()).expect("rig serializes");
            text.push('\n');
            write(&c.out, &text)
        }
        Command::Project2d(c) => project_2d(c),
        Command::Manifest(c) => manifest(c, cli.seed),
        Command::Eval(c) => eval(c),
        Command::SampleDemo(c) => sample_demo(c, cli.seed),
        Command::GradCheck(c) => run_grad_check(c, cli.seed),
    }
}

fn report(f: &Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind, "code": f.code, "message": f.message });
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return report(&usage(e.kind().to_string()));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
