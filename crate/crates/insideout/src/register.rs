//! Offline calibration solvers: Tsai–Lenz hand-eye calibration (eye-on-hand
//! and eye-on-base) and point-based rigid registration, including the
//! stylus-based ultrasound image-plane calibration built on top of it.
//!
//! The hand-eye problem is `AᵢX = XBᵢ`: `Aᵢ` are relative motions of the
//! robot hand, `Bᵢ` relative motions of the mounted sensor, and `X` the fixed
//! hand-to-sensor transform. Rotation is solved first from the classic
//! modified-Rodrigues linear system, then translation from a second linear
//! system. The eye-on-base variant recovers the transform between a room-fixed
//! sensor and the robot base from the same solver; only the construction of
//! the motion pairs differs (left-relative instead of right-relative motions).

use crate::xform::{self, RigidTransform};
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("insufficient motions: {got} usable pair(s), need at least {need}")]
    InsufficientMotions { got: usize, need: usize },
    #[error("unobservable axis: rotation axes of all motion pairs are parallel")]
    UnobservableAxis,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("insufficient correspondences: got {got}, need at least {need}")]
    InsufficientCorrespondences { got: usize, need: usize },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

impl RegisterError {
    pub fn category(&self) -> &'static str {
        match self {
            RegisterError::InsufficientMotions { .. } => "insufficient-motions",
            RegisterError::UnobservableAxis => "unobservable-axis",
            RegisterError::DegenerateConfiguration(_) => "degenerate-configuration",
            RegisterError::InsufficientCorrespondences { .. } => "insufficient-correspondences",
            RegisterError::InvalidProblem(_) => "invalid-problem",
        }
    }
}

/// One `AX = XB` motion pair: `a` is the hand/robot relative motion, `b` the
/// sensor/camera relative motion over the same interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MotionPair {
    pub a: RigidTransform,
    pub b: RigidTransform,
}

impl MotionPair {
    /// `AX = XB` forces equal rotation angles of `a` and `b`; the gap between
    /// them measures how badly a pair violates that consistency.
    pub fn rotation_angle_gap(&self) -> f64 {
        (self.a.rotation_angle() - self.b.rotation_angle()).abs()
    }
}

/// Pair filtering thresholds for the hand-eye solver.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HandEyeConfig {
    /// Pairs with rotations below this (radians) are discarded; tiny motions
    /// leave the rotation system ill-conditioned.
    pub min_pair_angle_rad: f64,
    /// Pairs whose rotation angles disagree by more than this are discarded
    /// as inconsistent measurements.
    pub max_angle_gap_rad: f64,
}

impl Default for HandEyeConfig {
    fn default() -> Self {
        Self {
            min_pair_angle_rad: 5f64.to_radians(),
            max_angle_gap_rad: 0.05,
        }
    }
}

/// Solved hand-eye transform plus consistency residuals over the used pairs.
#[derive(Debug, Clone)]
pub struct HandEyeResult {
    pub x: RigidTransform,
    /// RMS of the rotation consistency residual `angle(AᵢX, XBᵢ)`, degrees.
    pub rotation_residual_deg: f64,
    /// RMS of the translation consistency residual, millimetres.
    pub translation_residual_mm: f64,
    pub pairs_used: usize,
}

/// Modified Rodrigues vector `2 sin(θ/2) · axis` of a rotation.
fn modified_rodrigues(t: &RigidTransform) -> Vector3<f64> {
    let aa = xform::to_axis_angle(&t.rotation);
    aa.axis.into_inner() * (2.0 * (aa.angle / 2.0).sin())
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Solve `AᵢX = XBᵢ` for the rigid transform `X` with the Tsai–Lenz
/// two-step linear method.
///
/// Pairs failing the [`HandEyeConfig`] gates are skipped. Needs at least two
/// usable pairs with non-parallel rotation axes.
pub fn hand_eye_tsai_lenz(
    pairs: &[MotionPair],
    config: &HandEyeConfig,
) -> Result<HandEyeResult, RegisterError> {
    let usable: Vec<&MotionPair> = pairs
        .iter()
        .filter(|p| {
            p.a.rotation_angle() >= config.min_pair_angle_rad
                && p.b.rotation_angle() >= config.min_pair_angle_rad
                && p.rotation_angle_gap() <= config.max_angle_gap_rad
        })
        .collect();
    if usable.len() < 2 {
        return Err(RegisterError::InsufficientMotions {
            got: usable.len(),
            need: 2,
        });
    }

    // Rotation: skew(Pa + Pb) · g = Pb − Pa, where g is the Gibbs vector of X.
    let n = usable.len();
    let mut lhs = DMatrix::<f64>::zeros(3 * n, 3);
    let mut rhs = DVector::<f64>::zeros(3 * n);
    for (i, pair) in usable.iter().enumerate() {
        let pa = modified_rodrigues(&pair.a);
        let pb = modified_rodrigues(&pair.b);
        lhs.view_mut((3 * i, 0), (3, 3)).copy_from(&skew(&(pa + pb)));
        rhs.rows_mut(3 * i, 3).copy_from(&(pb - pa));
    }
    let svd = lhs.svd(true, true);
    let sv = &svd.singular_values;
    if sv[2] < 1e-10 * sv[0].max(1e-300) {
        return Err(RegisterError::UnobservableAxis);
    }
    let gibbs = svd
        .solve(&rhs, 0.0)
        .map_err(|e| RegisterError::DegenerateConfiguration(e.to_string()))?;
    // The Gibbs vector tan(θ/2)·axis corresponds to the quaternion (1, g)/‖·‖.
    let rotation =
        RigidTransform::from_quaternion(1.0, gibbs[0], gibbs[1], gibbs[2], Vector3::zeros())
            .rotation;

    // Translation: (Ra − I) t = Rx tb − ta.
    let mut lhs_t = DMatrix::<f64>::zeros(3 * n, 3);
    let mut rhs_t = DVector::<f64>::zeros(3 * n);
    for (i, pair) in usable.iter().enumerate() {
        let block = pair.a.rotation_matrix() - Matrix3::identity();
        lhs_t.view_mut((3 * i, 0), (3, 3)).copy_from(&block);
        rhs_t
            .rows_mut(3 * i, 3)
            .copy_from(&(rotation * pair.b.translation - pair.a.translation));
    }
    let svd_t = lhs_t.svd(true, true);
    if svd_t.singular_values[2] < 1e-10 * svd_t.singular_values[0].max(1e-300) {
        return Err(RegisterError::UnobservableAxis);
    }
    let t = svd_t
        .solve(&rhs_t, 0.0)
        .map_err(|e| RegisterError::DegenerateConfiguration(e.to_string()))?;
    let x = RigidTransform::new(rotation, Vector3::new(t[0], t[1], t[2]));

    // Consistency residuals of AᵢX vs XBᵢ over the used pairs.
    let mut rot_sq = 0.0;
    let mut trans_sq = 0.0;
    for pair in &usable {
        let ax = pair.a.compose(&x);
        let xb = x.compose(&pair.b);
        rot_sq += xform::geodesic_angle(&ax.rotation, &xb.rotation).powi(2);
        trans_sq += (ax.translation - xb.translation).norm_squared();
    }
    Ok(HandEyeResult {
        x,
        rotation_residual_deg: (rot_sq / n as f64).sqrt().to_degrees(),
        translation_residual_mm: (trans_sq / n as f64).sqrt(),
        pairs_used: n,
    })
}

/// Eye-on-base hand-eye calibration.
///
/// The solver is shared with [`hand_eye_tsai_lenz`]; the variant differs only
/// in how motion pairs are built from absolute poses (see
/// [`motion_pairs_eye_on_base`]).
pub fn hand_eye_eye_on_base(
    pairs: &[MotionPair],
    config: &HandEyeConfig,
) -> Result<HandEyeResult, RegisterError> {
    hand_eye_tsai_lenz(pairs, config)
}

/// Motion pairs for the eye-on-hand problem from consecutive absolute poses:
/// right-relative differences `pose_i⁻¹ ∘ pose_{i+1}` for both streams.
///
/// `hand_poses` are hand-in-base poses, `sensor_poses` sensor-in-anchor poses
/// (for a camera, camera-in-world). The solved `X` maps sensor to hand.
pub fn motion_pairs_eye_on_hand(
    hand_poses: &[RigidTransform],
    sensor_poses: &[RigidTransform],
) -> Vec<MotionPair> {
    hand_poses
        .windows(2)
        .zip(sensor_poses.windows(2))
        .map(|(h, s)| MotionPair {
            a: h[0].invert().compose(&h[1]),
            b: s[0].invert().compose(&s[1]),
        })
        .collect()
}

/// Motion pairs for the eye-on-base problem: left-relative differences
/// `pose_{i+1} ∘ pose_i⁻¹`.
///
/// `hand_poses` are hand-in-base poses and `marker_poses` the poses of a
/// hand-mounted target measured by the base-mounted sensor. The solved `X`
/// maps the sensor frame to the robot base.
pub fn motion_pairs_eye_on_base(
    hand_poses: &[RigidTransform],
    marker_poses: &[RigidTransform],
) -> Vec<MotionPair> {
    hand_poses
        .windows(2)
        .zip(marker_poses.windows(2))
        .map(|(h, m)| MotionPair {
            a: h[1].compose(&h[0].invert()),
            b: m[1].compose(&m[0].invert()),
        })
        .collect()
}

/// A pair of corresponding points in two frames.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PointCorrespondence {
    pub p: Vector3<f64>,
    pub q: Vector3<f64>,
}

/// Result of a point-based rigid registration: the transform mapping `p`
/// points onto `q` points and the fiducial registration error (RMS, mm).
#[derive(Debug, Clone, Copy)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub fre_mm: f64,
}

/// Least-squares rigid registration (SVD of the cross-covariance with
/// determinant correction), minimizing `Σ ‖T·pᵢ − qᵢ‖²`.
///
/// Needs at least 3 non-collinear points. The returned rotation always has
/// determinant +1; a reflection is never produced.
pub fn rigid_register(points: &[PointCorrespondence]) -> Result<RegistrationResult, RegisterError> {
    if points.len() < 3 {
        return Err(RegisterError::InsufficientCorrespondences {
            got: points.len(),
            need: 3,
        });
    }
    let n = points.len() as f64;
    let p_bar: Vector3<f64> = points.iter().map(|c| c.p).sum::<Vector3<f64>>() / n;
    let q_bar: Vector3<f64> = points.iter().map(|c| c.q).sum::<Vector3<f64>>() / n;

    let mut cross = Matrix3::zeros();
    for c in points {
        cross += (c.p - p_bar) * (c.q - q_bar).transpose();
    }
    let svd = cross.svd(true, true);
    let sv = &svd.singular_values;
    // Collinear point sets leave the cross-covariance rank ≤ 1: the rotation
    // about the line is unobservable.
    if sv[1] < 1e-9 * sv[0].max(1e-300) {
        return Err(RegisterError::DegenerateConfiguration(
            "points are collinear".into(),
        ));
    }
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let r = v * d * u.transpose();
    let t = q_bar - r * p_bar;
    let transform = RigidTransform::from_matrix(&r, t);

    let fre_sq: f64 = points
        .iter()
        .map(|c| (transform.transform_point(&c.p) - c.q).norm_squared())
        .sum::<f64>()
        / n;
    Ok(RegistrationResult {
        transform,
        fre_mm: fre_sq.sqrt(),
    })
}

/// Stylus-based ultrasound calibration problem.
///
/// Each record pairs a stylus tip position in the tracker frame with the
/// pixel where the tip appears in the ultrasound image, plus the probe-sensor
/// pose (sensor-in-tracker) at acquisition time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsCalibrationProblem {
    /// Stylus tip positions in the tracker frame, mm.
    pub stylus_tips: Vec<Vector3<f64>>,
    /// Detected tip pixels in the ultrasound image.
    pub image_points: Vec<Vector2<f64>>,
    /// Pixel spacing (sx, sy) in mm/px; image scale is known, not estimated.
    pub pixel_spacing: (f64, f64),
    /// Probe-sensor pose in the tracker frame, one per correspondence.
    pub probe_poses: Vec<RigidTransform>,
}

/// Solve for the static image-plane-to-probe-sensor transform.
///
/// Image points are lifted to the plane `(u·sx, v·sy, 0)` in millimetres,
/// stylus tips are moved into the probe-sensor frame through the paired probe
/// pose, and the two point sets are rigidly registered.
pub fn us_calibrate(problem: &UsCalibrationProblem) -> Result<RegistrationResult, RegisterError> {
    let n = problem.stylus_tips.len();
    if problem.image_points.len() != n || problem.probe_poses.len() != n {
        return Err(RegisterError::InvalidProblem(format!(
            "mismatched correspondence counts: {} tips, {} pixels, {} poses",
            n,
            problem.image_points.len(),
            problem.probe_poses.len()
        )));
    }
    let (sx, sy) = problem.pixel_spacing;
    if sx <= 0.0 || sy <= 0.0 {
        return Err(RegisterError::InvalidProblem(format!(
            "pixel spacing must be positive, got ({sx}, {sy})"
        )));
    }
    let points: Vec<PointCorrespondence> = (0..n)
        .map(|i| PointCorrespondence {
            p: Vector3::new(
                problem.image_points[i].x * sx,
                problem.image_points[i].y * sy,
                0.0,
            ),
            q: problem.probe_poses[i]
                .invert()
                .transform_point(&problem.stylus_tips[i]),
        })
        .collect();
    rigid_register(&points)
}
