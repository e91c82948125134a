//! Command-line front end for the inside-out tracking toolkit.
//!
//! One binary, six subcommands mirroring the pipeline stages:
//! `simulate`, `track`, `calibrate {handeye,camera,us}`, `sync`, `compound`
//! and `evaluate`. All commands are deterministic for a fixed `--seed`:
//! running one twice produces byte-identical output files.

use clap::{Args, Parser, Subcommand, ValueEnum};
use insideout::bench::{self, FrameChainSpec, ReportConfig, SourceKind, SourceStream};
use insideout::io::{self, ExperimentConfig};
use insideout::optics::{self, StereoRig};
use insideout::orsim;
use insideout::register;
use insideout::usfuse::{self, TimedPoseStream, UsFrame, VolumeSpec};
use insideout::vostereo::{FeatureObservation, TrackSession};
use insideout::xform::RigidTransform;
use nalgebra::{Vector2, Vector3};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "insideout",
    about = "Markerless inside-out tracking toolkit: simulation, stereo odometry, \
             calibration, ultrasound compounding and trajectory evaluation",
    version
)]
struct Cli {
    /// Master random seed; overrides the seed in the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    output: PathBuf,
    /// Report format for `evaluate`.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic experiment: scene, ground truth, sensor streams,
    /// ultrasound frames and calibration problems.
    Simulate,
    /// Run stereo visual odometry on an observation stream.
    Track(TrackArgs),
    /// Solve calibration problems.
    Calibrate(CalibrateArgs),
    /// Estimate the clock offset between two pose streams.
    Sync(SyncArgs),
    /// Compound tracked ultrasound frames into a voxel volume.
    Compound(CompoundArgs),
    /// Evaluate tracking sources against robotic ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// Stereo camera model (TOML), as written by `simulate`.
    #[arg(long)]
    camera: PathBuf,
    /// Observation stream (CSV), as written by `simulate`.
    #[arg(long)]
    observations: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(subcommand)]
    problem: CalibrateProblem,
}

#[derive(Subcommand)]
enum CalibrateProblem {
    /// Tsai-Lenz AX = XB from a motion-pair file.
    Handeye(HandeyeArgs),
    /// Planar intrinsic calibration from a correspondence file.
    Camera(CameraArgs),
    /// Stylus-based ultrasound image-plane calibration.
    Us(UsArgs),
}

#[derive(Args)]
struct HandeyeArgs {
    /// Motion pairs (CSV, two pose records per line).
    #[arg(long)]
    pairs: PathBuf,
    /// Problem variant; the solver is shared, the label is recorded.
    #[arg(long, value_enum, default_value_t = HandeyeVariant::EyeOnHand)]
    variant: HandeyeVariant,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HandeyeVariant {
    EyeOnHand,
    EyeOnBase,
}

#[derive(Args)]
struct CameraArgs {
    /// Planar views (CSV, one correspondence per record).
    #[arg(long)]
    views: PathBuf,
    #[arg(long, default_value_t = 640)]
    width: u32,
    #[arg(long, default_value_t = 480)]
    height: u32,
}

#[derive(Args)]
struct UsArgs {
    /// Ultrasound calibration problem (TOML).
    #[arg(long)]
    problem: PathBuf,
}

#[derive(Args)]
struct SyncArgs {
    /// Reference pose stream (CSV).
    #[arg(long)]
    reference: PathBuf,
    /// Target pose stream (CSV); a positive offset means it runs late.
    #[arg(long)]
    target: PathBuf,
    /// Search window, seconds (overrides the configuration).
    #[arg(long)]
    window: Option<f64>,
}

#[derive(Args)]
struct CompoundArgs {
    /// Directory of `frame_*.raw` ultrasound frames with TOML sidecars.
    #[arg(long)]
    frames: PathBuf,
    /// Tracking stream (CSV) of the probe sensor in world coordinates.
    #[arg(long)]
    tracking: PathBuf,
    /// Image-plane calibration (TOML), as written by `calibrate us`.
    #[arg(long)]
    calibration: PathBuf,
    /// Fit a sphere to the compounded volume and report it.
    #[arg(long)]
    fit_sphere: bool,
    /// Iso threshold for the sphere fit; defaults to the phantom midpoint.
    #[arg(long)]
    iso: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Robot ground-truth stream (CSV of end-effector poses).
    #[arg(long)]
    robot: PathBuf,
    /// Frame-chain spec (TOML), as written by `simulate`.
    #[arg(long)]
    chain: PathBuf,
    /// Source to evaluate: `name=<n>,kind=<slam|ots>,path=<csv>[,seq=<tag>]`.
    /// Repeatable.
    #[arg(long = "source", required = true)]
    sources: Vec<String>,
}

/// Error with a stable category for the exit line.
struct AppError {
    category: String,
    message: String,
}

impl AppError {
    fn new(category: &str, message: impl fmt::Display) -> Self {
        Self {
            category: category.to_string(),
            message: message.to_string(),
        }
    }
}

macro_rules! from_error {
    ($ty:ty) => {
        impl From<$ty> for AppError {
            fn from(e: $ty) -> Self {
                AppError::new(e.category(), &e)
            }
        }
    };
}

from_error!(optics::OpticsError);
from_error!(register::RegisterError);
from_error!(insideout::vostereo::VoError);
from_error!(usfuse::UsfuseError);
from_error!(bench::BenchError);
from_error!(io::IoError);

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::new("io-error", e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category, e.message);
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let mut config = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    std::fs::create_dir_all(&cli.output)?;
    match &cli.command {
        Command::Simulate => simulate(&config, &cli.output),
        Command::Track(args) => track(&config, args, &cli.output),
        Command::Calibrate(args) => calibrate(&config, args, &cli.output),
        Command::Sync(args) => sync(&config, args, &cli.output),
        Command::Compound(args) => compound(&config, args, &cli.output),
        Command::Evaluate(args) => evaluate(&config, args, &cli.output, cli.format),
    }
}

/// Deterministic sub-seed derivation from the master seed.
fn sub_seed(master: u64, tag: u64) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag)
        .rotate_left(17)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
        .wrapping_add(tag)
}

fn simulate(config: &ExperimentConfig, out: &Path) -> Result<(), AppError> {
    let seed = config.seed;
    let scene = orsim::generate_scene(
        sub_seed(seed, 1),
        config.scene.bounds(),
        config.scene.n_landmarks,
    );
    let kind = config.trajectory.to_kind()?;
    let gt_ee = orsim::generate_trajectory(
        kind,
        config.trajectory.duration_s,
        config.trajectory.rate_hz,
        sub_seed(seed, 2),
    );
    if gt_ee.is_empty() {
        return Err(AppError::new("invalid-data", "trajectory has no samples"));
    }
    let rig = config.rig;
    let camera_gt = rig.camera_trajectory(&gt_ee);
    let rgb_gt = rig.rgb_trajectory(&gt_ee);
    let anchor = camera_gt.samples()[0].1;
    let chain = FrameChainSpec::from_rig(&rig, anchor);
    let ots = orsim::simulate_ots(&gt_ee, &rig, &config.noise, sub_seed(seed, 3));

    // Stereo observations at every ground-truth camera pose.
    let frames: Vec<(f64, Vec<FeatureObservation>)> = camera_gt
        .samples()
        .iter()
        .enumerate()
        .map(|(i, &(t, pose))| {
            let rendered = orsim::render_stereo_frame(
                &scene,
                &pose,
                &config.camera,
                config.frustum,
                &config.noise,
                sub_seed(seed, 1000 + i as u64),
            );
            (t, rendered.observations)
        })
        .collect();

    // Ultrasound frames along the trajectory.
    let mut phantom = config.phantom;
    if config.us.enabled {
        let us_dir = out.join("us");
        std::fs::create_dir_all(&us_dir)?;
        if config.us.auto_center_phantom {
            let t_mid = (rgb_gt.first_time().unwrap() + rgb_gt.last_time().unwrap()) / 2.0;
            let probe = usfuse::pose_at(&rgb_gt, t_mid)?;
            let center_px = Vector3::new(
                f64::from(config.us.image.width) / 2.0 * config.us.image.spacing_mm.0,
                f64::from(config.us.image.height) / 2.0 * config.us.image.spacing_mm.1,
                0.0,
            );
            phantom.center_mm = probe
                .compose(&rig.t_rgb_us)
                .transform_point(&center_px);
        }
        let dt = 1.0 / config.us.rate_hz;
        let mut index = 0usize;
        loop {
            let t = rgb_gt.first_time().unwrap() + index as f64 * dt;
            if t > rgb_gt.last_time().unwrap() {
                break;
            }
            let probe = usfuse::pose_at(&rgb_gt, t)?;
            let frame = orsim::render_us_frame(
                &phantom,
                &probe,
                &rig.t_rgb_us,
                &config.us.image,
                t,
                sub_seed(seed, 5000 + index as u64),
            );
            io::write_us_frame(&us_dir, index, &frame)?;
            index += 1;
        }
    }

    // Calibration problems derived from the same world.
    write_calibration_problems(config, out, &rgb_gt)?;

    io::save_toml(&out.join("config_resolved.toml"), config)?;
    io::save_toml(&out.join("scene.toml"), &scene)?;
    io::save_toml(&out.join("rig.toml"), &rig)?;
    io::save_toml(&out.join("camera.toml"), &config.camera)?;
    io::save_toml(&out.join("chain.toml"), &chain)?;
    io::save_toml(&out.join("phantom.toml"), &phantom)?;
    io::write_pose_stream(&out.join("gt_ee.csv"), &gt_ee)?;
    io::write_pose_stream(&out.join("gt_camera.csv"), &camera_gt)?;
    io::write_pose_stream(&out.join("gt_rgb.csv"), &rgb_gt)?;
    io::write_pose_stream(&out.join("ots.csv"), &ots)?;
    io::write_observations(&out.join("obs.csv"), &frames)?;
    println!(
        "simulated {} landmarks, {} poses, {} observation frames into {}",
        scene.landmarks.len(),
        gt_ee.len(),
        frames.len(),
        out.display()
    );
    Ok(())
}

/// Emit solvable calibration problems with known ground truth: planar views
/// of the left camera, eye-on-hand motion pairs, and a stylus ultrasound
/// problem.
fn write_calibration_problems(
    config: &ExperimentConfig,
    out: &Path,
    rgb_gt: &TimedPoseStream,
) -> Result<(), AppError> {
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 7));

    // Planar views: a 9x7 grid of 25 mm squares seen from five tilted poses.
    let cam = config.camera.left;
    let poses = [
        (0.30, 0.10, -10.0, 5.0, 600.0),
        (-0.25, 0.20, 20.0, -10.0, 650.0),
        (0.10, -0.35, 0.0, 15.0, 550.0),
        (-0.15, -0.20, -25.0, -5.0, 700.0),
        (0.35, 0.30, 15.0, 20.0, 620.0),
    ];
    let mut views = Vec::new();
    for &(rx, ry, tx, ty, tz) in &poses {
        let pose = RigidTransform::new(
            nalgebra::UnitQuaternion::from_axis_angle(&Vector3::x_axis(), rx)
                * nalgebra::UnitQuaternion::from_axis_angle(&Vector3::y_axis(), ry),
            Vector3::new(tx, ty, tz),
        );
        let mut view = optics::PlanarView::default();
        for gy in -3..=3 {
            for gx in -4..=4 {
                let g = Vector2::new(f64::from(gx) * 25.0, f64::from(gy) * 25.0);
                let p = pose.transform_point(&Vector3::new(g.x, g.y, 0.0));
                let mut px = cam.project(&p)?;
                if config.noise.pixel_sigma > 0.0 {
                    px.x += config.noise.pixel_sigma * standard_normal(&mut rng);
                    px.y += config.noise.pixel_sigma * standard_normal(&mut rng);
                }
                view.grid_points.push(g);
                view.image_points.push(px);
            }
        }
        views.push(view);
    }
    io::write_planar_views(&out.join("views.csv"), &views)?;

    // Eye-on-hand motion pairs from a dedicated calibration sequence: wide,
    // diverse motions keep the rotation system well-conditioned, unlike the
    // small steps of a clinical sweep. The solved X is the end-effector to
    // stereo-camera mount.
    let x_truth = config.rig.t_ee_rgb.compose(&config.rig.t_rgb_stereo);
    let pairs: Vec<register::MotionPair> = (0..10)
        .map(|_| {
            let axis = nalgebra::Unit::new_normalize(Vector3::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ));
            let angle = 0.3 + rng.random::<f64>() * 1.2;
            let b = RigidTransform::from_axis_angle(
                &axis,
                angle,
                Vector3::new(
                    rng.random::<f64>() * 200.0 - 100.0,
                    rng.random::<f64>() * 200.0 - 100.0,
                    rng.random::<f64>() * 200.0 - 100.0,
                ),
            );
            register::MotionPair {
                a: x_truth.compose(&b).compose(&x_truth.invert()),
                b,
            }
        })
        .collect();
    io::write_motion_pairs(&out.join("handeye_pairs.csv"), &pairs)?;

    // Stylus ultrasound problem: tips on the image plane of subsampled poses.
    let mut problem = register::UsCalibrationProblem {
        stylus_tips: Vec::new(),
        image_points: Vec::new(),
        pixel_spacing: config.us.image.spacing_mm,
        probe_poses: Vec::new(),
    };
    let step = (rgb_gt.len() / 12).max(1);
    for &(_, probe) in rgb_gt.samples().iter().step_by(step).take(12) {
        let px = Vector2::new(
            rng.random::<f64>() * f64::from(config.us.image.width - 1),
            rng.random::<f64>() * f64::from(config.us.image.height - 1),
        );
        let plane = Vector3::new(
            px.x * problem.pixel_spacing.0,
            px.y * problem.pixel_spacing.1,
            0.0,
        );
        let tip = probe
            .compose(&config.rig.t_rgb_us)
            .transform_point(&plane);
        problem.stylus_tips.push(tip);
        problem.image_points.push(px);
        problem.probe_poses.push(probe);
    }
    io::save_toml(&out.join("us_problem.toml"), &problem)?;
    Ok(())
}

fn standard_normal(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn track(config: &ExperimentConfig, args: &TrackArgs, out: &Path) -> Result<(), AppError> {
    let rig: StereoRig = io::load_toml(&args.camera)?;
    let frames = io::read_observations(&args.observations)?;
    if frames.is_empty() {
        return Err(AppError::new("invalid-data", "observation stream is empty"));
    }
    let vo_config = config.vo.to_config(config.seed);
    let (t0, first) = &frames[0];
    let mut session = TrackSession::init_map(rig, first, vo_config)?;

    // The world frame is the first camera frame, so the first reported pose
    // is the identity by definition.
    let mut trajectory = vec![(*t0, RigidTransform::identity())];
    for (t, frame) in &frames[1..] {
        let outcome = session.track_frame(frame, *t);
        if !outcome.lost {
            trajectory.push((*t, outcome.pose));
        }
    }
    let stream = TimedPoseStream::new("vo", trajectory)?;
    io::write_pose_stream(&out.join("vo.csv"), &stream)?;
    io::save_toml(&out.join("vo_stats.toml"), &session.stats())?;
    let stats = session.stats();
    println!(
        "tracked {} of {} frames ({} lost), map {} landmarks, {} keyframes",
        stats.frames_tracked,
        frames.len() - 1,
        stats.frames_lost,
        stats.map_size,
        stats.keyframes
    );
    Ok(())
}

fn calibrate(config: &ExperimentConfig, args: &CalibrateArgs, out: &Path) -> Result<(), AppError> {
    match &args.problem {
        CalibrateProblem::Handeye(h) => {
            let pairs = io::read_motion_pairs(&h.pairs)?;
            let he_config = config.handeye.to_config();
            let result = match h.variant {
                HandeyeVariant::EyeOnHand => register::hand_eye_tsai_lenz(&pairs, &he_config)?,
                HandeyeVariant::EyeOnBase => register::hand_eye_eye_on_base(&pairs, &he_config)?,
            };
            io::save_toml(
                &out.join("handeye.toml"),
                &io::HandEyeFile {
                    transform: result.x,
                    rotation_residual_deg: result.rotation_residual_deg,
                    translation_residual_mm: result.translation_residual_mm,
                    pairs_used: result.pairs_used,
                },
            )?;
            println!(
                "hand-eye solved from {} pairs: residuals {:.6}° / {:.6} mm",
                result.pairs_used, result.rotation_residual_deg, result.translation_residual_mm
            );
        }
        CalibrateProblem::Camera(c) => {
            let views = io::read_planar_views(&c.views)?;
            let result = optics::calibrate_intrinsics(&views, (c.width, c.height))?;
            let i = result.intrinsics;
            io::save_toml(
                &out.join("intrinsics.toml"),
                &io::IntrinsicsFile {
                    fx: i.fx,
                    fy: i.fy,
                    cx: i.cx,
                    cy: i.cy,
                    k1: i.k1,
                    k2: i.k2,
                    width: i.width,
                    height: i.height,
                    rms_px: result.rms_px,
                },
            )?;
            println!(
                "intrinsics from {} views: fx={:.3} fy={:.3} cx={:.3} cy={:.3} \
                 k1={:.5} k2={:.5}, rms {:.4} px",
                views.len(),
                i.fx,
                i.fy,
                i.cx,
                i.cy,
                i.k1,
                i.k2,
                result.rms_px
            );
        }
        CalibrateProblem::Us(u) => {
            let problem: register::UsCalibrationProblem = io::load_toml(&u.problem)?;
            let result = register::us_calibrate(&problem)?;
            io::save_toml(
                &out.join("uscal.toml"),
                &io::RegistrationFile {
                    transform: result.transform,
                    fre_mm: result.fre_mm,
                },
            )?;
            println!(
                "ultrasound calibration from {} points: FRE {:.6} mm",
                problem.stylus_tips.len(),
                result.fre_mm
            );
        }
    }
    Ok(())
}

fn sync(config: &ExperimentConfig, args: &SyncArgs, out: &Path) -> Result<(), AppError> {
    let reference = io::read_pose_stream(&args.reference, "reference")?;
    let target = io::read_pose_stream(&args.target, "target")?;
    let window = args.window.unwrap_or(config.sync.window_s);
    let offset = usfuse::estimate_latency(&reference, &target, window)?;

    #[derive(serde::Serialize)]
    struct SyncFile {
        offset_s: f64,
        window_s: f64,
    }
    io::save_toml(
        &out.join("sync.toml"),
        &SyncFile {
            offset_s: offset,
            window_s: window,
        },
    )?;
    println!("offset: {offset} s (positive: target runs late)");
    Ok(())
}

fn compound(config: &ExperimentConfig, args: &CompoundArgs, out: &Path) -> Result<(), AppError> {
    let frames = io::read_us_frames(&args.frames)?;
    let tracking = io::read_pose_stream(&args.tracking, "tracking")?;
    let calibration: io::RegistrationFile = io::load_toml(&args.calibration)?;
    let t_rgb_us = calibration.transform;

    let spec = volume_spec(config, &frames, &tracking, &t_rgb_us)?;
    let outcome = usfuse::compound(&frames, &tracking, &t_rgb_us, spec, &config.compound)?;
    io::write_volume(out, &outcome.volume)?;

    #[derive(serde::Serialize)]
    struct CompoundStats {
        frames_used: usize,
        frames_skipped: usize,
        holes_filled: usize,
        filled_voxels: usize,
    }
    io::save_toml(
        &out.join("compound_stats.toml"),
        &CompoundStats {
            frames_used: outcome.frames_used,
            frames_skipped: outcome.frames_skipped,
            holes_filled: outcome.holes_filled,
            filled_voxels: outcome.volume.filled_voxels(),
        },
    )?;
    println!(
        "compounded {} frames ({} skipped), {} voxels filled, {} holes filled",
        outcome.frames_used,
        outcome.frames_skipped,
        outcome.volume.filled_voxels(),
        outcome.holes_filled
    );

    if args.fit_sphere {
        let iso = args
            .iso
            .unwrap_or((config.phantom.inside + config.phantom.outside) / 2.0);
        let fit = usfuse::fit_sphere(&outcome.volume, iso)?;
        #[derive(serde::Serialize)]
        struct SphereFile {
            center_mm: [f64; 3],
            radius_mm: f64,
            rms_residual_mm: f64,
            boundary_voxels: usize,
            iso: f64,
        }
        io::save_toml(
            &out.join("sphere.toml"),
            &SphereFile {
                center_mm: [fit.center_mm.x, fit.center_mm.y, fit.center_mm.z],
                radius_mm: fit.radius_mm,
                rms_residual_mm: fit.rms_residual_mm,
                boundary_voxels: fit.boundary_voxels,
                iso,
            },
        )?;
        println!(
            "sphere fit: radius {:.3} mm, rms residual {:.3} mm over {} boundary voxels",
            fit.radius_mm, fit.rms_residual_mm, fit.boundary_voxels
        );
    }
    Ok(())
}

/// Volume geometry from the configuration, auto-fitted to the tracked frame
/// footprint when dims are not pinned.
fn volume_spec(
    config: &ExperimentConfig,
    frames: &[UsFrame],
    tracking: &TimedPoseStream,
    t_rgb_us: &RigidTransform,
) -> Result<VolumeSpec, AppError> {
    let section = &config.volume;
    let orientation = section
        .orientation
        .map(|r| RigidTransform::from_record(&r))
        .unwrap_or_else(RigidTransform::identity);
    if let (Some(dims), Some(origin)) = (section.dims, section.origin_mm) {
        return Ok(VolumeSpec {
            dims,
            spacing_mm: section.spacing_mm,
            origin_mm: Vector3::from(origin),
            orientation,
        });
    }
    // Fit: bounding box of all frame corners in the volume frame.
    let world_to_local = orientation.invert();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    let (first, last) = match (tracking.first_time(), tracking.last_time()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(AppError::new("empty-stream", "tracking stream is empty")),
    };
    for frame in frames {
        if frame.timestamp_s < first || frame.timestamp_s > last {
            continue;
        }
        let pose = usfuse::pose_at(tracking, frame.timestamp_s)?;
        let t_world_us = pose.compose(t_rgb_us);
        let (sx, sy) = frame.spacing_mm;
        let w = f64::from(frame.width - 1) * sx;
        let h = f64::from(frame.height - 1) * sy;
        for corner in [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(w, 0.0, 0.0),
            Vector3::new(0.0, h, 0.0),
            Vector3::new(w, h, 0.0),
        ] {
            let p = world_to_local.transform_point(&t_world_us.transform_point(&corner));
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
    }
    if !lo.x.is_finite() {
        return Err(AppError::new(
            "empty-volume",
            "no frame lies inside the tracking range",
        ));
    }
    let margin = section.margin_mm;
    let origin = lo - Vector3::repeat(margin);
    let extent = hi - origin + Vector3::repeat(margin);
    let dims = [
        (extent.x / section.spacing_mm).ceil() as usize + 1,
        (extent.y / section.spacing_mm).ceil() as usize + 1,
        (extent.z / section.spacing_mm).ceil() as usize + 1,
    ];
    Ok(VolumeSpec {
        dims,
        spacing_mm: section.spacing_mm,
        origin_mm: origin,
        orientation,
    })
}

fn parse_source(spec: &str, index: usize) -> Result<(String, SourceKind, PathBuf, Option<String>), AppError> {
    let mut name = None;
    let mut kind = None;
    let mut path = None;
    let mut seq = None;
    for part in spec.split(',') {
        let Some((key, value)) = part.split_once('=') else {
            return Err(AppError::new(
                "invalid-input",
                format!("source #{index}: expected key=value, got `{part}`"),
            ));
        };
        match key.trim() {
            "name" => name = Some(value.trim().to_string()),
            "kind" => {
                kind = Some(match value.trim() {
                    "slam" => SourceKind::StereoSlam,
                    "ots" => SourceKind::OtsMarker,
                    other => {
                        return Err(AppError::new(
                            "invalid-input",
                            format!("source #{index}: unknown kind `{other}` (slam or ots)"),
                        ))
                    }
                })
            }
            "path" => path = Some(PathBuf::from(value.trim())),
            "seq" => seq = Some(value.trim().to_string()),
            other => {
                return Err(AppError::new(
                    "invalid-input",
                    format!("source #{index}: unknown key `{other}`"),
                ))
            }
        }
    }
    let path = path.ok_or_else(|| {
        AppError::new("invalid-input", format!("source #{index}: missing path="))
    })?;
    let kind = kind.ok_or_else(|| {
        AppError::new("invalid-input", format!("source #{index}: missing kind="))
    })?;
    let name = name.unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("source{index}"))
    });
    Ok((name, kind, path, seq))
}

fn evaluate(
    config: &ExperimentConfig,
    args: &EvaluateArgs,
    out: &Path,
    format: Format,
) -> Result<(), AppError> {
    let chain: FrameChainSpec = io::load_toml(&args.chain)?;
    let robot = io::read_pose_stream(&args.robot, "robot")?;
    let mut sources = vec![SourceStream {
        name: "robot".to_string(),
        kind: SourceKind::Robot,
        sequence: None,
        stream: robot,
    }];
    for (i, spec) in args.sources.iter().enumerate() {
        let (name, kind, path, seq) = parse_source(spec, i)?;
        let stream = io::read_pose_stream(&path, &name)?;
        sources.push(SourceStream {
            name,
            kind,
            sequence: seq,
            stream,
        });
    }

    let report_config = ReportConfig {
        axis_floor_deg: config.report.axis_floor_deg,
        max_gap_factor: config.report.max_gap_factor,
    };
    // Persist the aligned streams so every report number is recomputable.
    let aligned = bench::to_common_frame(&sources, &chain, report_config.max_gap_factor)?;
    for a in &aligned {
        let mut text = String::from(
            "timestamp_s,est_tx_mm,est_ty_mm,est_tz_mm,est_qw,est_qx,est_qy,est_qz,\
             gt_tx_mm,gt_ty_mm,gt_tz_mm,gt_qw,gt_qx,gt_qy,gt_qz\n",
        );
        for ((t, est), gt) in a.times.iter().zip(&a.est).zip(&a.gt) {
            let e = est.to_record();
            let g = gt.to_record();
            text.push_str(&format!(
                "{t},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                e[0], e[1], e[2], e[3], e[4], e[5], e[6], g[0], g[1], g[2], g[3], g[4], g[5], g[6]
            ));
        }
        std::fs::write(out.join(format!("aligned_{}.csv", a.name)), text)?;
    }

    let report = bench::make_report(&sources, &chain, &report_config)?;
    let table = report.render_table();
    print!("{table}");
    match format {
        Format::Text => std::fs::write(out.join("report.txt"), table)?,
        Format::Csv => std::fs::write(out.join("report.csv"), report.to_csv())?,
    }
    Ok(())
}
