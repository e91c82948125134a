//! Evaluation protocol: express every tracker's output in a common frame and
//! report translation RMS and rotation-axis deviation against the robotic
//! ground truth.
//!
//! Each source measures the pose of some rigidly mounted frame (the robot
//! end effector, the stereo camera, the optical marker) relative to its own
//! reference. The frame-chain spec holds the static mount transforms that
//! map every measurement to the same physical quantity: the pose of the RGB
//! camera body in the robot-base frame. After chaining, a perfect tracker
//! reproduces the ground-truth RGB trajectory exactly, so any residual is
//! tracker error; residuals are expressed in the RGB frame itself.

use crate::orsim::RigSetup;
use crate::usfuse::{pose_at, TimedPoseStream, UsfuseError};
use crate::xform::{self, RigidTransform};
use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("incomplete chain: missing static transform `{missing}` for source `{name}`")]
    IncompleteChain {
        missing: &'static str,
        name: String,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("no valid pairs: all {excluded} rotation pair(s) fall below the angle floor")]
    NoValidPairs { excluded: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Stream(#[from] UsfuseError),
}

impl BenchError {
    pub fn category(&self) -> &'static str {
        match self {
            BenchError::IncompleteChain { .. } => "incomplete-chain",
            BenchError::EmptyInput(_) => "empty-input",
            BenchError::NoValidPairs { .. } => "no-valid-pairs",
            BenchError::InvalidInput(_) => "invalid-input",
            BenchError::Stream(e) => e.category(),
        }
    }
}

/// Static transforms needed to resolve every evaluation chain, plus the
/// anchor tying the visual-odometry world (the first camera frame) to the
/// robot base.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct FrameChainSpec {
    /// RGB camera body in the end-effector frame.
    pub t_ee_rgb: Option<RigidTransform>,
    /// Stereo left camera in the RGB frame.
    pub t_rgb_stereo: Option<RigidTransform>,
    /// Outside-in tracker base in the robot-base frame.
    pub t_rb_ots: Option<RigidTransform>,
    /// Optical marker in the end-effector frame.
    pub t_ee_marker: Option<RigidTransform>,
    /// First stereo-camera pose in the robot base (odometry anchor).
    pub t_rb_cam0: Option<RigidTransform>,
}

impl FrameChainSpec {
    /// Populate from the simulated mount geometry plus the odometry anchor.
    pub fn from_rig(rig: &RigSetup, t_rb_cam0: RigidTransform) -> Self {
        Self {
            t_ee_rgb: Some(rig.t_ee_rgb),
            t_rgb_stereo: Some(rig.t_rgb_stereo),
            t_rb_ots: Some(rig.t_rb_ots),
            t_ee_marker: Some(rig.t_ee_marker),
            t_rb_cam0: Some(t_rb_cam0),
        }
    }
}

/// What a source's pose samples measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Robot forward kinematics: end effector in the robot base (ground truth).
    Robot,
    /// Visual odometry: current stereo camera in the first camera frame.
    StereoSlam,
    /// Outside-in tracker: optical marker in the tracker frame.
    OtsMarker,
}

/// One tracking source to evaluate.
#[derive(Debug, Clone)]
pub struct SourceStream {
    pub name: String,
    pub kind: SourceKind,
    /// Sequence tag for multi-sequence reports.
    pub sequence: Option<String>,
    pub stream: TimedPoseStream,
}

/// A source mapped into the common frame and resampled at the ground-truth
/// timestamps.
#[derive(Debug, Clone)]
pub struct AlignedSource {
    pub name: String,
    pub sequence: Option<String>,
    pub times: Vec<f64>,
    /// RGB-in-robot-base pose as estimated by this source.
    pub est: Vec<RigidTransform>,
    /// Ground-truth RGB-in-robot-base pose at the same timestamps.
    pub gt: Vec<RigidTransform>,
    /// Ground-truth timestamps without usable source coverage.
    pub uncovered: usize,
}

impl AlignedSource {
    /// Per-timestamp residual transforms `gt⁻¹ ∘ est`, expressed in the RGB
    /// frame (the joint comparison frame).
    pub fn residuals(&self) -> Vec<RigidTransform> {
        self.gt
            .iter()
            .zip(&self.est)
            .map(|(g, e)| g.invert().compose(e))
            .collect()
    }

    pub fn translation_residuals(&self) -> Vec<Vector3<f64>> {
        self.residuals().iter().map(|r| r.translation).collect()
    }
}

fn require(
    t: Option<RigidTransform>,
    missing: &'static str,
    source: &str,
) -> Result<RigidTransform, BenchError> {
    t.ok_or(BenchError::IncompleteChain {
        missing,
        name: source.to_string(),
    })
}

/// Map every source into the common frame (RGB camera in robot base) and
/// resample it at the ground-truth timestamps.
///
/// Exactly one source of kind [`SourceKind::Robot`] must be present; it
/// defines the ground truth and the timestamp grid, and is not returned as
/// an evaluated source. Ground-truth timestamps not covered by a source
/// (outside its span, or inside a sampling gap wider than `max_gap_factor`
/// times the source's median period) are skipped and counted.
pub fn to_common_frame(
    sources: &[SourceStream],
    spec: &FrameChainSpec,
    max_gap_factor: f64,
) -> Result<Vec<AlignedSource>, BenchError> {
    let robots: Vec<&SourceStream> = sources
        .iter()
        .filter(|s| s.kind == SourceKind::Robot)
        .collect();
    if robots.len() != 1 {
        return Err(BenchError::InvalidInput(format!(
            "need exactly one robot ground-truth source, got {}",
            robots.len()
        )));
    }
    let robot = robots[0];
    if robot.stream.is_empty() {
        return Err(BenchError::EmptyInput("ground-truth stream".into()));
    }
    let t_ee_rgb = require(spec.t_ee_rgb, "t_ee_rgb", &robot.name)?;

    // Ground-truth RGB trajectory at robot timestamps.
    let gt: Vec<(f64, RigidTransform)> = robot
        .stream
        .samples()
        .iter()
        .map(|&(t, ee)| (t, ee.compose(&t_ee_rgb)))
        .collect();

    let mut aligned = Vec::new();
    for source in sources {
        if source.kind == SourceKind::Robot {
            continue;
        }
        if source.stream.is_empty() {
            return Err(BenchError::EmptyInput(format!("source `{}`", source.name)));
        }
        // Chain factors: est(t) = pre ∘ pose(t) ∘ post.
        let (pre, post) = match source.kind {
            SourceKind::Robot => unreachable!(),
            SourceKind::StereoSlam => {
                let anchor = require(spec.t_rb_cam0, "t_rb_cam0", &source.name)?;
                let t_rgb_stereo = require(spec.t_rgb_stereo, "t_rgb_stereo", &source.name)?;
                (anchor, t_rgb_stereo.invert())
            }
            SourceKind::OtsMarker => {
                let t_rb_ots = require(spec.t_rb_ots, "t_rb_ots", &source.name)?;
                let t_ee_marker = require(spec.t_ee_marker, "t_ee_marker", &source.name)?;
                (t_rb_ots, t_ee_marker.invert().compose(&t_ee_rgb))
            }
        };

        let samples = source.stream.samples();
        let mut dts: Vec<f64> = samples.windows(2).map(|w| w[1].0 - w[0].0).collect();
        let max_gap = if dts.is_empty() {
            f64::INFINITY
        } else {
            dts.sort_by(f64::total_cmp);
            dts[dts.len() / 2] * max_gap_factor
        };
        let first = source.stream.first_time().expect("non-empty");
        let last = source.stream.last_time().expect("non-empty");

        let mut times = Vec::new();
        let mut est = Vec::new();
        let mut gt_at = Vec::new();
        let mut uncovered = 0usize;
        for &(t, ref gt_pose) in &gt {
            if t < first || t > last {
                uncovered += 1;
                continue;
            }
            let idx = samples.partition_point(|&(ts, _)| ts < t);
            let bracket_ok = if samples[idx.min(samples.len() - 1)].0 == t {
                true
            } else {
                samples[idx].0 - samples[idx - 1].0 <= max_gap
            };
            if !bracket_ok {
                uncovered += 1;
                continue;
            }
            let pose = pose_at(&source.stream, t)?;
            times.push(t);
            est.push(pre.compose(&pose).compose(&post));
            gt_at.push(*gt_pose);
        }
        aligned.push(AlignedSource {
            name: source.name.clone(),
            sequence: source.sequence.clone(),
            times,
            est,
            gt: gt_at,
            uncovered,
        });
    }
    Ok(aligned)
}

/// RMS and population standard deviation of residual norms, mm.
pub fn translation_rms(residuals: &[Vector3<f64>]) -> Result<(f64, f64), BenchError> {
    if residuals.is_empty() {
        return Err(BenchError::EmptyInput("translation residual series".into()));
    }
    let n = residuals.len() as f64;
    let mut sum_sq = 0.0;
    let mut sum = 0.0;
    for r in residuals {
        let norm = r.norm();
        sum_sq += norm * norm;
        sum += norm;
    }
    let rms = (sum_sq / n).sqrt();
    let mean = sum / n;
    let std = (sum_sq / n - mean * mean).max(0.0).sqrt();
    Ok((rms, std))
}

/// Rotation-axis deviation series.
#[derive(Debug, Clone)]
pub struct AxisDeviationResult {
    /// Angle between corresponding rotation axes, degrees.
    pub series_deg: Vec<f64>,
    /// Pairs excluded because either rotation fell below the angle floor.
    pub excluded: usize,
}

/// Angle between the rotation axes of corresponding relative rotations.
///
/// For every index `i > 0`, both series are expressed relative to their
/// first element; pairs where either relative rotation angle is below
/// `floor_deg` are excluded as axis-undefined.
pub fn axis_deviation(
    gt: &[UnitQuaternion<f64>],
    est: &[UnitQuaternion<f64>],
    floor_deg: f64,
) -> Result<AxisDeviationResult, BenchError> {
    if gt.len() != est.len() {
        return Err(BenchError::InvalidInput(format!(
            "series lengths differ: {} vs {}",
            gt.len(),
            est.len()
        )));
    }
    if gt.len() < 2 {
        return Err(BenchError::EmptyInput(
            "axis deviation needs at least 2 poses".into(),
        ));
    }
    let floor = floor_deg.to_radians();
    let gt0 = gt[0].inverse();
    let est0 = est[0].inverse();
    let mut series = Vec::new();
    let mut excluded = 0usize;
    for i in 1..gt.len() {
        let rel_gt = xform::to_axis_angle(&(gt0 * gt[i]));
        let rel_est = xform::to_axis_angle(&(est0 * est[i]));
        if rel_gt.angle < floor || rel_est.angle < floor {
            excluded += 1;
            continue;
        }
        // atan2 form: acos(dot) cannot resolve axis angles below ~1e-8 rad.
        let cross = rel_gt.axis.cross(&rel_est.axis).norm();
        let dot = rel_gt.axis.dot(&rel_est.axis);
        series.push(cross.atan2(dot).to_degrees());
    }
    if series.is_empty() {
        return Err(BenchError::NoValidPairs { excluded });
    }
    Ok(AxisDeviationResult {
        series_deg: series,
        excluded,
    })
}

fn mean_std(series: &[f64]) -> (f64, f64) {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Report configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Angle floor for the axis-deviation metric, degrees.
    pub axis_floor_deg: f64,
    /// Coverage gap threshold as a multiple of a source's median period.
    pub max_gap_factor: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            axis_floor_deg: 2.0,
            max_gap_factor: 3.0,
        }
    }
}

/// Per-source (or per-source-per-sequence) error summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub name: String,
    /// Sequence tag; "all" rows aggregate every sequence of a source.
    pub sequence: String,
    pub pose_count: usize,
    pub lost_count: usize,
    pub translation_rms_mm: f64,
    pub translation_std_mm: f64,
    pub axis_dev_mean_deg: f64,
    pub axis_dev_std_deg: f64,
    pub axis_pairs_excluded: usize,
    /// Supplementary rotation metric: geodesic angle of the pose residual.
    pub geodesic_mean_deg: f64,
    pub geodesic_std_deg: f64,
}

/// Full evaluation report: one row per evaluated source and sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub axis_floor_deg: f64,
    pub rows: Vec<SourceReport>,
}

fn evaluate_aligned(
    aligned: &AlignedSource,
    sequence_label: String,
    floor_deg: f64,
) -> Result<SourceReport, BenchError> {
    let translations = aligned.translation_residuals();
    let (rms, std) = translation_rms(&translations)?;
    let gt_rot: Vec<UnitQuaternion<f64>> = aligned.gt.iter().map(|p| p.rotation).collect();
    let est_rot: Vec<UnitQuaternion<f64>> = aligned.est.iter().map(|p| p.rotation).collect();
    let axis = axis_deviation(&gt_rot, &est_rot, floor_deg)?;
    let (axis_mean, axis_std) = mean_std(&axis.series_deg);
    let geodesic: Vec<f64> = aligned
        .residuals()
        .iter()
        .map(|r| r.rotation_angle().to_degrees())
        .collect();
    let (geo_mean, geo_std) = mean_std(&geodesic);
    Ok(SourceReport {
        name: aligned.name.clone(),
        sequence: sequence_label,
        pose_count: aligned.times.len(),
        lost_count: aligned.uncovered,
        translation_rms_mm: rms,
        translation_std_mm: std,
        axis_dev_mean_deg: axis_mean,
        axis_dev_std_deg: axis_std,
        axis_pairs_excluded: axis.excluded,
        geodesic_mean_deg: geo_mean,
        geodesic_std_deg: geo_std,
    })
}

/// Run the full protocol: chain every source into the common frame, compute
/// the metrics, and emit one row per source and sequence. Sources appearing
/// with several sequence tags additionally get an aggregated "all" row.
pub fn make_report(
    sources: &[SourceStream],
    spec: &FrameChainSpec,
    config: &ReportConfig,
) -> Result<ErrorReport, BenchError> {
    let aligned = to_common_frame(sources, spec, config.max_gap_factor)?;
    let mut rows = Vec::new();
    for a in &aligned {
        let label = a.sequence.clone().unwrap_or_else(|| "-".to_string());
        rows.push(evaluate_aligned(a, label, config.axis_floor_deg)?);
    }

    // Aggregate rows for sources split across sequences.
    let mut names: Vec<String> = aligned.iter().map(|a| a.name.clone()).collect();
    names.dedup();
    let mut seen = std::collections::BTreeSet::new();
    for name in names {
        if !seen.insert(name.clone()) {
            continue;
        }
        let parts: Vec<&AlignedSource> = aligned.iter().filter(|a| a.name == name).collect();
        if parts.len() < 2 {
            continue;
        }
        let mut merged = AlignedSource {
            name: name.clone(),
            sequence: None,
            times: Vec::new(),
            est: Vec::new(),
            gt: Vec::new(),
            uncovered: 0,
        };
        for p in parts {
            merged.times.extend_from_slice(&p.times);
            merged.est.extend_from_slice(&p.est);
            merged.gt.extend_from_slice(&p.gt);
            merged.uncovered += p.uncovered;
        }
        rows.push(evaluate_aligned(&merged, "all".to_string(), config.axis_floor_deg)?);
    }

    Ok(ErrorReport {
        axis_floor_deg: config.axis_floor_deg,
        rows,
    })
}

impl ErrorReport {
    /// Human-readable table, one row per source/sequence.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:<10} {:>7} {:>6}  {:>22}  {:>22}  {:>22}  {:>9}\n",
            "source",
            "sequence",
            "poses",
            "lost",
            "trans RMS ± std (mm)",
            "axis dev ± std (deg)",
            "geodesic ± std (deg)",
            "excluded"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:<10} {:>7} {:>6}  {:>10.4} ± {:>8.4}  {:>10.4} ± {:>8.4}  {:>10.4} ± {:>8.4}  {:>9}\n",
                r.name,
                r.sequence,
                r.pose_count,
                r.lost_count,
                r.translation_rms_mm,
                r.translation_std_mm,
                r.axis_dev_mean_deg,
                r.axis_dev_std_deg,
                r.geodesic_mean_deg,
                r.geodesic_std_deg,
                r.axis_pairs_excluded,
            ));
        }
        out
    }

    /// Lossless CSV serialization (floats round-trip exactly).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,sequence,pose_count,lost_count,axis_pairs_excluded,axis_floor_deg,\
             translation_rms_mm,translation_std_mm,axis_dev_mean_deg,axis_dev_std_deg,\
             geodesic_mean_deg,geodesic_std_deg\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.name.replace(',', ";"),
                r.sequence.replace(',', ";"),
                r.pose_count,
                r.lost_count,
                r.axis_pairs_excluded,
                self.axis_floor_deg,
                r.translation_rms_mm,
                r.translation_std_mm,
                r.axis_dev_mean_deg,
                r.axis_dev_std_deg,
                r.geodesic_mean_deg,
                r.geodesic_std_deg,
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, BenchError> {
        let mut rows = Vec::new();
        let mut axis_floor_deg = ReportConfig::default().axis_floor_deg;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 12 {
                return Err(BenchError::InvalidInput(format!(
                    "line {}: expected 12 fields, got {}",
                    i + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64, BenchError> {
                s.parse()
                    .map_err(|e| BenchError::InvalidInput(format!("line {}: {e}", i + 1)))
            };
            let parse_n = |s: &str| -> Result<usize, BenchError> {
                s.parse()
                    .map_err(|e| BenchError::InvalidInput(format!("line {}: {e}", i + 1)))
            };
            axis_floor_deg = parse(fields[5])?;
            rows.push(SourceReport {
                name: fields[0].to_string(),
                sequence: fields[1].to_string(),
                pose_count: parse_n(fields[2])?,
                lost_count: parse_n(fields[3])?,
                axis_pairs_excluded: parse_n(fields[4])?,
                translation_rms_mm: parse(fields[6])?,
                translation_std_mm: parse(fields[7])?,
                axis_dev_mean_deg: parse(fields[8])?,
                axis_dev_std_deg: parse(fields[9])?,
                geodesic_mean_deg: parse(fields[10])?,
                geodesic_std_deg: parse(fields[11])?,
            });
        }
        Ok(ErrorReport {
            axis_floor_deg,
            rows,
        })
    }
}
