//! File formats shared between the library and the command-line tools.
//!
//! Everything is plain text except ultrasound frames and volumes, which are
//! raw arrays with structured-text sidecars:
//!
//! - pose streams: CSV with header
//!   `timestamp_s,tx_mm,ty_mm,tz_mm,qw,qx,qy,qz`;
//! - planar calibration views: CSV, one correspondence per record
//!   (`view_id,grid_x_mm,grid_y_mm,pixel_u,pixel_v`);
//! - hand-eye motion pairs: CSV, two pose records per line;
//! - point correspondences: CSV (`p_x_mm,...,q_z_mm`);
//! - solved transforms, rigs, scenes, configs, reports: TOML;
//! - ultrasound frames: 8-bit grayscale `.raw` plus a TOML sidecar;
//! - volumes: little-endian `f32` `.raw` (x fastest) plus a TOML sidecar.
//!
//! Floating-point values are written with the shortest representation that
//! parses back exactly, so text round-trips are lossless and byte-identical
//! across runs.

use crate::optics::PlanarView;
use crate::register::{MotionPair, PointCorrespondence};
use crate::usfuse::{TimedPoseStream, UsFrame, UsfuseError, VolumeSpec, VoxelVolume};
use crate::vostereo::FeatureObservation;
use crate::xform::RigidTransform;
use nalgebra::{Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("toml error in {path}: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Stream(#[from] UsfuseError),
}

impl IoError {
    pub fn category(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "io-error",
            IoError::Parse { .. } | IoError::Toml { .. } => "parse-error",
            IoError::Invalid(_) => "invalid-data",
            IoError::Stream(e) => e.category(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_fields(path: &Path, line_no: usize, line: &str, n: usize) -> Result<Vec<f64>, IoError> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != n {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {n} fields, got {}", fields.len()),
        ));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|e| parse_err(path, line_no, format!("`{f}`: {e}")))
        })
        .collect()
}

/// CSV header of pose-stream files.
pub const POSE_STREAM_HEADER: &str = "timestamp_s,tx_mm,ty_mm,tz_mm,qw,qx,qy,qz";

/// Write a pose stream as CSV.
pub fn write_pose_stream(path: &Path, stream: &TimedPoseStream) -> Result<(), IoError> {
    let mut out = String::with_capacity(stream.len() * 64 + 32);
    out.push_str(POSE_STREAM_HEADER);
    out.push('\n');
    for &(t, pose) in stream.samples() {
        let r = pose.to_record();
        writeln!(
            out,
            "{t},{},{},{},{},{},{},{}",
            r[0], r[1], r[2], r[3], r[4], r[5], r[6]
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Read a pose stream from CSV; `source` names the stream.
pub fn read_pose_stream(path: &Path, source: &str) -> Result<TimedPoseStream, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("timestamp_s") || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, i + 1, trimmed, 8)?;
        let quat_norm = (f[4] * f[4] + f[5] * f[5] + f[6] * f[6] + f[7] * f[7]).sqrt();
        if !quat_norm.is_finite() || quat_norm < 1e-6 {
            return Err(parse_err(path, i + 1, "quaternion norm must be nonzero"));
        }
        samples.push((
            f[0],
            RigidTransform::from_record(&[f[1], f[2], f[3], f[4], f[5], f[6], f[7]]),
        ));
    }
    Ok(TimedPoseStream::new(source, samples)?)
}

/// CSV header of planar-view files.
pub const PLANAR_VIEW_HEADER: &str = "view_id,grid_x_mm,grid_y_mm,pixel_u,pixel_v";

/// Write calibration views, one correspondence per record.
pub fn write_planar_views(path: &Path, views: &[PlanarView]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(PLANAR_VIEW_HEADER);
    out.push('\n');
    for (id, view) in views.iter().enumerate() {
        for (g, px) in view.grid_points.iter().zip(&view.image_points) {
            writeln!(out, "{id},{},{},{},{}", g.x, g.y, px.x, px.y).expect("string write");
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Read calibration views grouped by view id.
pub fn read_planar_views(path: &Path) -> Result<Vec<PlanarView>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut grouped: BTreeMap<u64, PlanarView> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("view_id") || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, i + 1, trimmed, 5)?;
        if f[0] < 0.0 || f[0].fract() != 0.0 {
            return Err(parse_err(path, i + 1, "view_id must be a non-negative integer"));
        }
        let view = grouped.entry(f[0] as u64).or_default();
        view.grid_points.push(Vector2::new(f[1], f[2]));
        view.image_points.push(Vector2::new(f[3], f[4]));
    }
    Ok(grouped.into_values().collect())
}

/// CSV header of motion-pair files: two pose records per line.
pub const MOTION_PAIR_HEADER: &str =
    "a_tx_mm,a_ty_mm,a_tz_mm,a_qw,a_qx,a_qy,a_qz,b_tx_mm,b_ty_mm,b_tz_mm,b_qw,b_qx,b_qy,b_qz";

pub fn write_motion_pairs(path: &Path, pairs: &[MotionPair]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(MOTION_PAIR_HEADER);
    out.push('\n');
    for pair in pairs {
        let a = pair.a.to_record();
        let b = pair.b.to_record();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a[0], a[1], a[2], a[3], a[4], a[5], a[6], b[0], b[1], b[2], b[3], b[4], b[5], b[6]
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_motion_pairs(path: &Path) -> Result<Vec<MotionPair>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("a_tx_mm") || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, i + 1, trimmed, 14)?;
        pairs.push(MotionPair {
            a: RigidTransform::from_record(&[f[0], f[1], f[2], f[3], f[4], f[5], f[6]]),
            b: RigidTransform::from_record(&[f[7], f[8], f[9], f[10], f[11], f[12], f[13]]),
        });
    }
    Ok(pairs)
}

/// CSV header of point-correspondence files.
pub const CORRESPONDENCE_HEADER: &str = "p_x_mm,p_y_mm,p_z_mm,q_x_mm,q_y_mm,q_z_mm";

pub fn write_correspondences(path: &Path, points: &[PointCorrespondence]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(CORRESPONDENCE_HEADER);
    out.push('\n');
    for c in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.p.x, c.p.y, c.p.z, c.q.x, c.q.y, c.q.z
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_correspondences(path: &Path) -> Result<Vec<PointCorrespondence>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("p_x_mm") || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, i + 1, trimmed, 6)?;
        points.push(PointCorrespondence {
            p: Vector3::new(f[0], f[1], f[2]),
            q: Vector3::new(f[3], f[4], f[5]),
        });
    }
    Ok(points)
}

/// CSV header of observation-stream files.
pub const OBSERVATION_HEADER: &str =
    "frame,timestamp_s,feature_id,u_left,v_left,has_right,u_right,v_right";

/// Write a per-frame feature observation stream.
pub fn write_observations(
    path: &Path,
    frames: &[(f64, Vec<FeatureObservation>)],
) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(OBSERVATION_HEADER);
    out.push('\n');
    for (frame_idx, (t, observations)) in frames.iter().enumerate() {
        for obs in observations {
            let (has_right, ur, vr) = match obs.px_right {
                Some(px) => (1, px.x, px.y),
                None => (0, 0.0, 0.0),
            };
            writeln!(
                out,
                "{frame_idx},{t},{},{},{},{has_right},{ur},{vr}",
                obs.feature_id, obs.px_left.x, obs.px_left.y
            )
            .expect("string write");
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Read an observation stream back into per-frame lists.
pub fn read_observations(path: &Path) -> Result<Vec<(f64, Vec<FeatureObservation>)>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut frames: BTreeMap<u64, (f64, Vec<FeatureObservation>)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("frame") || trimmed.starts_with('#') {
            continue;
        }
        let f = parse_fields(path, i + 1, trimmed, 8)?;
        let frame_idx = f[0] as u64;
        let entry = frames.entry(frame_idx).or_insert((f[1], Vec::new()));
        entry.1.push(FeatureObservation {
            feature_id: f[2] as u64,
            px_left: Vector2::new(f[3], f[4]),
            px_right: (f[5] != 0.0).then(|| Vector2::new(f[6], f[7])),
        });
    }
    Ok(frames.into_values().collect())
}

/// Serialize any TOML-compatible value to a file.
pub fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = toml::to_string_pretty(value).map_err(|e| IoError::Toml {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(io_err(path))
}

/// Load any TOML-compatible value from a file.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| IoError::Toml {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Sidecar metadata of one raw ultrasound frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsFrameMeta {
    pub timestamp_s: f64,
    pub width: u32,
    pub height: u32,
    pub spacing_mm: (f64, f64),
    /// Intensity encoding of the raw bytes.
    pub format: String,
}

/// Write one ultrasound frame: 8-bit grayscale raw plus TOML sidecar.
pub fn write_us_frame(dir: &Path, index: usize, frame: &UsFrame) -> Result<(), IoError> {
    let raw_path = dir.join(format!("frame_{index:05}.raw"));
    let bytes: Vec<u8> = frame
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    fs::write(&raw_path, bytes).map_err(io_err(&raw_path))?;
    let meta = UsFrameMeta {
        timestamp_s: frame.timestamp_s,
        width: frame.width,
        height: frame.height,
        spacing_mm: frame.spacing_mm,
        format: "u8".to_string(),
    };
    save_toml(&dir.join(format!("frame_{index:05}.toml")), &meta)
}

/// Read all `frame_*.raw` ultrasound frames from a directory, sorted by index.
pub fn read_us_frames(dir: &Path) -> Result<Vec<UsFrame>, IoError> {
    let mut indices = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".raw")) {
            if let Ok(idx) = stem.parse::<usize>() {
                indices.push(idx);
            }
        }
    }
    indices.sort_unstable();
    let mut frames = Vec::with_capacity(indices.len());
    for idx in indices {
        let meta: UsFrameMeta = load_toml(&dir.join(format!("frame_{idx:05}.toml")))?;
        let raw_path = dir.join(format!("frame_{idx:05}.raw"));
        let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
        let expected = (meta.width * meta.height) as usize;
        if bytes.len() != expected {
            return Err(IoError::Invalid(format!(
                "{}: expected {} bytes, got {}",
                raw_path.display(),
                expected,
                bytes.len()
            )));
        }
        frames.push(UsFrame {
            timestamp_s: meta.timestamp_s,
            width: meta.width,
            height: meta.height,
            spacing_mm: meta.spacing_mm,
            pixels: bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        });
    }
    Ok(frames)
}

/// Sidecar metadata of a raw volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub origin_mm: [f64; 3],
    /// Volume frame in world coordinates, `(tx, ty, tz, qw, qx, qy, qz)`.
    pub orientation: [f64; 7],
    /// Scalar encoding of the raw array.
    pub format: String,
    /// Storage order of the array.
    pub order: String,
}

/// Write a compounded volume: little-endian `f32` raw (x fastest, empty
/// voxels as 0) plus TOML metadata.
pub fn write_volume(dir: &Path, volume: &VoxelVolume) -> Result<(), IoError> {
    let raw_path = dir.join("volume.raw");
    let values = volume.mean_values();
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        let f = if v.is_nan() { 0.0f32 } else { v as f32 };
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(io_err(&raw_path))?;
    let spec = &volume.spec;
    let meta = VolumeMeta {
        dims: spec.dims,
        spacing_mm: spec.spacing_mm,
        origin_mm: [spec.origin_mm.x, spec.origin_mm.y, spec.origin_mm.z],
        orientation: spec.orientation.to_record(),
        format: "f32-le".to_string(),
        order: "x-fastest".to_string(),
    };
    save_toml(&dir.join("volume.toml"), &meta)
}

/// Read back a volume written by [`write_volume`]. Every voxel is restored
/// with weight 1 (deposit provenance is not persisted).
pub fn read_volume(dir: &Path) -> Result<(VolumeSpec, Vec<f32>), IoError> {
    let meta: VolumeMeta = load_toml(&dir.join("volume.toml"))?;
    let raw_path = dir.join("volume.raw");
    let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let count = meta.dims[0] * meta.dims[1] * meta.dims[2];
    if bytes.len() != count * 4 {
        return Err(IoError::Invalid(format!(
            "{}: expected {} bytes, got {}",
            raw_path.display(),
            count * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let spec = VolumeSpec {
        dims: meta.dims,
        spacing_mm: meta.spacing_mm,
        origin_mm: Vector3::new(meta.origin_mm[0], meta.origin_mm[1], meta.origin_mm[2]),
        orientation: RigidTransform::from_record(&meta.orientation),
    };
    Ok((spec, values))
}

/// Solved hand-eye calibration, as persisted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandEyeFile {
    pub transform: RigidTransform,
    pub rotation_residual_deg: f64,
    pub translation_residual_mm: f64,
    pub pairs_used: usize,
}

/// Solved point-based registration (ultrasound calibration), as persisted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationFile {
    pub transform: RigidTransform,
    pub fre_mm: f64,
}

/// Solved camera intrinsics, as persisted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrinsicsFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub width: u32,
    pub height: u32,
    pub rms_px: f64,
}


/// Scene generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSection {
    pub n_landmarks: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl Default for SceneSection {
    fn default() -> Self {
        let room = crate::orsim::default_room();
        Self {
            n_landmarks: 2000,
            bounds_min: [room.min.x, room.min.y, room.min.z],
            bounds_max: [room.max.x, room.max.y, room.max.z],
        }
    }
}

impl SceneSection {
    pub fn bounds(&self) -> crate::orsim::Aabb {
        crate::orsim::Aabb {
            min: Vector3::from(self.bounds_min),
            max: Vector3::from(self.bounds_max),
        }
    }
}

/// Trajectory settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySection {
    /// One of "sweep", "rotation-only", "freehand".
    pub kind: String,
    /// Lateral travel of the sweep, mm.
    pub extent_mm: f64,
    /// Pan amplitude of the rotation-only path, degrees.
    pub pan_deg: f64,
    pub duration_s: f64,
    pub rate_hz: f64,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        Self {
            kind: "sweep".to_string(),
            extent_mm: 1000.0,
            pan_deg: 40.0,
            duration_s: 60.0,
            rate_hz: 30.0,
        }
    }
}

impl TrajectorySection {
    pub fn to_kind(&self) -> Result<crate::orsim::TrajectoryKind, IoError> {
        match self.kind.as_str() {
            "sweep" => Ok(crate::orsim::TrajectoryKind::Sweep {
                extent_mm: self.extent_mm,
            }),
            "rotation-only" => Ok(crate::orsim::TrajectoryKind::RotationOnly {
                pan_deg: self.pan_deg,
            }),
            "freehand" => Ok(crate::orsim::TrajectoryKind::Freehand),
            other => Err(IoError::Invalid(format!(
                "unknown trajectory kind `{other}` (expected sweep, rotation-only or freehand)"
            ))),
        }
    }
}

/// Ultrasound acquisition settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UsSection {
    pub enabled: bool,
    pub rate_hz: f64,
    pub image: crate::orsim::UsImageSpec,
    /// Place the phantom on the ultrasound plane at mid-trajectory.
    pub auto_center_phantom: bool,
}

impl Default for UsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            rate_hz: 30.0,
            image: crate::orsim::UsImageSpec::default(),
            auto_center_phantom: true,
        }
    }
}

/// Volume geometry; dims/origin are fitted to the data when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeSection {
    pub spacing_mm: f64,
    /// Extra margin around the auto-fitted bounding box, mm.
    pub margin_mm: f64,
    pub dims: Option<[usize; 3]>,
    pub origin_mm: Option<[f64; 3]>,
    pub orientation: Option<[f64; 7]>,
}

impl Default for VolumeSection {
    fn default() -> Self {
        Self {
            spacing_mm: 1.0,
            margin_mm: 5.0,
            dims: None,
            origin_mm: None,
            orientation: None,
        }
    }
}

/// Visual-odometry settings (angles in degrees at this boundary).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VoSection {
    pub min_init_landmarks: usize,
    pub ransac_max_iterations: usize,
    pub ransac_inlier_threshold_px: f64,
    pub ransac_min_inliers: usize,
    pub ransac_confidence: f64,
    pub keyframe_tracked_fraction: f64,
    pub keyframe_translation_mm: f64,
    pub keyframe_rotation_deg: f64,
    pub cull_after_checks: u64,
    pub cull_min_observations: u32,
}

impl Default for VoSection {
    fn default() -> Self {
        let c = crate::vostereo::VoConfig::default();
        Self {
            min_init_landmarks: c.min_init_landmarks,
            ransac_max_iterations: c.ransac.max_iterations,
            ransac_inlier_threshold_px: c.ransac.inlier_threshold_px,
            ransac_min_inliers: c.ransac.min_inliers,
            ransac_confidence: c.ransac.confidence,
            keyframe_tracked_fraction: c.keyframe_tracked_fraction,
            keyframe_translation_mm: c.keyframe_translation_mm,
            keyframe_rotation_deg: c.keyframe_rotation_rad.to_degrees(),
            cull_after_checks: c.cull_after_checks,
            cull_min_observations: c.cull_min_observations,
        }
    }
}

impl VoSection {
    pub fn to_config(&self, seed: u64) -> crate::vostereo::VoConfig {
        crate::vostereo::VoConfig {
            min_init_landmarks: self.min_init_landmarks,
            ransac: crate::vostereo::RansacConfig {
                max_iterations: self.ransac_max_iterations,
                inlier_threshold_px: self.ransac_inlier_threshold_px,
                min_inliers: self.ransac_min_inliers,
                confidence: self.ransac_confidence,
            },
            keyframe_tracked_fraction: self.keyframe_tracked_fraction,
            keyframe_translation_mm: self.keyframe_translation_mm,
            keyframe_rotation_rad: self.keyframe_rotation_deg.to_radians(),
            cull_after_checks: self.cull_after_checks,
            cull_min_observations: self.cull_min_observations,
            seed,
        }
    }
}

/// Hand-eye solver settings (degrees at this boundary).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HandEyeSection {
    pub min_pair_angle_deg: f64,
    pub max_angle_gap_deg: f64,
}

impl Default for HandEyeSection {
    fn default() -> Self {
        let c = crate::register::HandEyeConfig::default();
        Self {
            min_pair_angle_deg: c.min_pair_angle_rad.to_degrees(),
            max_angle_gap_deg: c.max_angle_gap_rad.to_degrees(),
        }
    }
}

impl HandEyeSection {
    pub fn to_config(&self) -> crate::register::HandEyeConfig {
        crate::register::HandEyeConfig {
            min_pair_angle_rad: self.min_pair_angle_deg.to_radians(),
            max_angle_gap_rad: self.max_angle_gap_deg.to_radians(),
        }
    }
}

/// Latency-estimation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncSection {
    pub window_s: f64,
}

impl Default for SyncSection {
    fn default() -> Self {
        Self { window_s: 0.5 }
    }
}

/// Single experiment configuration covering every stage; all fields carry
/// defaults, so an empty file (or no file) is valid.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene: SceneSection,
    pub trajectory: TrajectorySection,
    pub noise: crate::orsim::NoiseModel,
    pub frustum: crate::orsim::Frustum,
    pub rig: crate::orsim::RigSetup,
    pub camera: crate::optics::StereoRig,
    pub phantom: crate::orsim::SpherePhantom,
    pub us: UsSection,
    pub volume: VolumeSection,
    pub vo: VoSection,
    pub handeye: HandEyeSection,
    pub compound: crate::usfuse::CompoundConfig,
    pub report: crate::bench::ReportConfig,
    pub sync: SyncSection,
}

impl ExperimentConfig {
    /// Load from a TOML file, or the built-in defaults when `path` is None.
    pub fn load(path: Option<&Path>) -> Result<Self, IoError> {
        match path {
            Some(p) => load_toml(p),
            None => Ok(Self::default()),
        }
    }
}
