//! Pinhole cameras with radial distortion, stereo geometry and planar
//! intrinsic calibration.
//!
//! The camera model is the standard pinhole with two radial distortion
//! coefficients: a camera-frame point `(X, Y, Z)` is normalized to
//! `(x, y) = (X/Z, Y/Z)`, scaled by `1 + k1 r² + k2 r⁴`, then mapped through
//! focal lengths and principal point. Calibration follows the planar-target
//! method: per-view homographies, a closed-form intrinsics estimate from the
//! absolute-conic constraints (skew fixed to zero), and joint nonlinear
//! refinement of intrinsics, distortion and per-view poses.

use crate::xform::RigidTransform;
use nalgebra::{DMatrix, DVector, Matrix3, RowDVector, Unit, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depth below which a point counts as behind the camera plane.
pub const MIN_DEPTH_MM: f64 = 1e-9;

/// Maximum iterations for distortion inversion.
pub const MAX_UNDISTORT_ITERATIONS: usize = 20;

/// Convergence tolerance for distortion inversion, in normalized coordinates.
/// Tighter than strictly needed for pixel round-trips: far-field stereo
/// depth amplifies ray errors by z²/(f·b), so the inversion runs close to
/// machine precision.
pub const UNDISTORT_TOLERANCE: f64 = 1e-14;

/// Minimum triangulation angle in radians; rays closer to parallel are
/// rejected as degenerate.
pub const MIN_TRIANGULATION_ANGLE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum OpticsError {
    #[error("point at or behind the camera plane (z = {z} mm)")]
    BehindCamera { z: f64 },
    #[error("distortion inversion did not converge: {0}")]
    NoConvergence(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("insufficient views: got {got}, need at least {need}")]
    InsufficientViews { got: usize, need: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

impl OpticsError {
    /// Stable machine-readable category for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            OpticsError::BehindCamera { .. } => "behind-camera",
            OpticsError::NoConvergence(_) => "no-convergence",
            OpticsError::DegenerateGeometry(_) => "degenerate-geometry",
            OpticsError::DegenerateConfiguration(_) => "degenerate-configuration",
            OpticsError::InsufficientViews { .. } => "insufficient-views",
            OpticsError::InvalidIntrinsics(_) => "invalid-intrinsics",
        }
    }
}

/// Pinhole camera with two radial distortion coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal lengths in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Radial distortion coefficients (dimensionless).
    pub k1: f64,
    pub k2: f64,
    /// Sensor size in pixels.
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k1: f64,
        k2: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, OpticsError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(OpticsError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0..f64::from(width)).contains(&cx) || !(0.0..f64::from(height)).contains(&cy) {
            return Err(OpticsError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside sensor {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            k1,
            k2,
            width,
            height,
        })
    }

    /// Radial distortion factor `1 + k1 r² + k2 r⁴` at squared radius `r2`.
    fn distortion(&self, r2: f64) -> f64 {
        1.0 + self.k1 * r2 + self.k2 * r2 * r2
    }

    /// Project a camera-frame point (mm) to pixel coordinates.
    pub fn project(&self, point_cam: &Vector3<f64>) -> Result<Vector2<f64>, OpticsError> {
        if point_cam.z <= MIN_DEPTH_MM {
            return Err(OpticsError::BehindCamera { z: point_cam.z });
        }
        let x = point_cam.x / point_cam.z;
        let y = point_cam.y / point_cam.z;
        let d = self.distortion(x * x + y * y);
        Ok(Vector2::new(
            self.fx * x * d + self.cx,
            self.fy * y * d + self.cy,
        ))
    }

    /// Invert projection: pixel to a unit ray in the camera frame.
    ///
    /// Radial distortion is inverted iteratively (Newton on the radial
    /// profile `r (1 + k1 r² + k2 r⁴)`), at most [`MAX_UNDISTORT_ITERATIONS`]
    /// steps to [`UNDISTORT_TOLERANCE`] in normalized coordinates.
    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Unit<Vector3<f64>>, OpticsError> {
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        let rd = (xd * xd + yd * yd).sqrt();
        let scale = if rd < UNDISTORT_TOLERANCE {
            1.0
        } else {
            self.undistort_radius(rd)? / rd
        };
        Ok(Unit::new_normalize(Vector3::new(xd * scale, yd * scale, 1.0)))
    }

    /// Solve `r (1 + k1 r² + k2 r⁴) = rd` for the undistorted radius.
    fn undistort_radius(&self, rd: f64) -> Result<f64, OpticsError> {
        let mut r = rd;
        for _ in 0..MAX_UNDISTORT_ITERATIONS {
            let r2 = r * r;
            let f = r * self.distortion(r2) - rd;
            if f.abs() < UNDISTORT_TOLERANCE {
                return Ok(r);
            }
            let df = 1.0 + 3.0 * self.k1 * r2 + 5.0 * self.k2 * r2 * r2;
            if df <= 0.0 || !df.is_finite() {
                return Err(OpticsError::NoConvergence(format!(
                    "distortion profile not invertible at radius {r:.4}"
                )));
            }
            r -= f / df;
            if r < 0.0 {
                r = 0.0;
            }
        }
        Err(OpticsError::NoConvergence(format!(
            "radius {rd:.4} not inverted after {MAX_UNDISTORT_ITERATIONS} iterations"
        )))
    }

    /// True when a pixel lies on the sensor.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.x < f64::from(self.width)
            && pixel.y >= 0.0
            && pixel.y < f64::from(self.height)
    }
}

/// Two pinhole cameras with a fixed extrinsic baseline.
///
/// `t_left_right` is the pose of the right camera in the left camera frame;
/// the metric baseline is what gives stereo its absolute scale. The default
/// mirrors the simulated sensor class: 640×480, mild radial distortion,
/// exactly rectified 50 mm baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoRig {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub t_left_right: RigidTransform,
}

impl Default for StereoRig {
    fn default() -> Self {
        let cam = CameraIntrinsics::new(615.0, 615.0, 320.0, 240.0, -0.02, 0.005, 640, 480)
            .expect("default intrinsics are valid");
        Self {
            left: cam,
            right: cam,
            t_left_right: RigidTransform::from_translation(Vector3::new(50.0, 0.0, 0.0)),
        }
    }
}

impl StereoRig {
    pub fn new(
        left: CameraIntrinsics,
        right: CameraIntrinsics,
        t_left_right: RigidTransform,
    ) -> Result<Self, OpticsError> {
        if t_left_right.translation.norm() <= 0.0 {
            return Err(OpticsError::DegenerateGeometry(
                "stereo baseline must be positive".into(),
            ));
        }
        Ok(Self {
            left,
            right,
            t_left_right,
        })
    }

    /// Baseline length in millimetres.
    pub fn baseline_mm(&self) -> f64 {
        self.t_left_right.translation.norm()
    }

    /// Project a left-camera-frame point into the left image.
    pub fn project_left(&self, p_left: &Vector3<f64>) -> Result<Vector2<f64>, OpticsError> {
        self.left.project(p_left)
    }

    /// Project a left-camera-frame point into the right image.
    pub fn project_right(&self, p_left: &Vector3<f64>) -> Result<Vector2<f64>, OpticsError> {
        let p_right = self.t_left_right.invert().transform_point(p_left);
        self.right.project(&p_right)
    }

    /// Triangulate a pair of pixel observations into the left camera frame.
    ///
    /// Returns the midpoint of the common perpendicular of the two
    /// undistorted rays. Rays within [`MIN_TRIANGULATION_ANGLE`] of parallel
    /// are rejected, as are intersections behind either camera.
    pub fn triangulate(
        &self,
        px_left: &Vector2<f64>,
        px_right: &Vector2<f64>,
    ) -> Result<Vector3<f64>, OpticsError> {
        let d1 = self.left.unproject(px_left)?.into_inner();
        let d2 = self
            .t_left_right
            .transform_vector(&self.right.unproject(px_right)?.into_inner());
        let origin2 = self.t_left_right.translation;

        let b = d1.dot(&d2);
        let denom = 1.0 - b * b;
        // denom is sin²θ of the triangulation angle.
        if denom < MIN_TRIANGULATION_ANGLE * MIN_TRIANGULATION_ANGLE {
            return Err(OpticsError::DegenerateGeometry(
                "rays are parallel within the triangulation angle limit".into(),
            ));
        }
        let wd1 = origin2.dot(&d1);
        let wd2 = origin2.dot(&d2);
        let s = (wd1 - b * wd2) / denom;
        let t = (b * wd1 - wd2) / denom;
        if s <= MIN_DEPTH_MM || t <= MIN_DEPTH_MM {
            return Err(OpticsError::BehindCamera { z: s.min(t) });
        }
        Ok((d1 * s + origin2 + d2 * t) / 2.0)
    }
}

/// One calibration view: planar grid coordinates (mm, z = 0) paired with
/// detected pixels.
#[derive(Debug, Clone, Default)]
pub struct PlanarView {
    pub grid_points: Vec<Vector2<f64>>,
    pub image_points: Vec<Vector2<f64>>,
}

impl PlanarView {
    pub fn len(&self) -> usize {
        self.grid_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_points.is_empty()
    }
}

/// Hartley normalization: translate the centroid to the origin, scale the
/// mean distance to √2. Returns the similarity as a 3×3 matrix.
fn normalization_transform(points: &[Vector2<f64>]) -> Result<Matrix3<f64>, OpticsError> {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(OpticsError::DegenerateConfiguration(
            "all points coincide".into(),
        ));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(v.x / v.z, v.y / v.z)
}

/// Eigenvector of the smallest eigenvalue of a symmetric PSD matrix, plus a
/// flag set when the second-smallest eigenvalue also (nearly) vanishes,
/// i.e. the null space is not one-dimensional.
fn smallest_eigenvector(m: &DMatrix<f64>) -> (DVector<f64>, bool) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let smallest = order[0];
    let second = eig.eigenvalues[order[1]].abs();
    let largest = eig.eigenvalues[order[order.len() - 1]].abs();
    let degenerate = second < 1e-12 * largest.max(1e-300);
    (eig.eigenvectors.column(smallest).into_owned(), degenerate)
}

/// Estimate the homography mapping grid points to image points with the
/// normalized DLT. The result has unit Frobenius norm and a deterministic
/// sign (largest-magnitude entry positive).
pub fn estimate_homography(view: &PlanarView) -> Result<Matrix3<f64>, OpticsError> {
    let n = view.len();
    if n < 4 || view.image_points.len() != n {
        return Err(OpticsError::DegenerateConfiguration(format!(
            "need at least 4 matched correspondences, got {n}"
        )));
    }
    let t_grid = normalization_transform(&view.grid_points)?;
    let t_img = normalization_transform(&view.image_points)?;

    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let g = apply_h(&t_grid, &view.grid_points[i]);
        let m = apply_h(&t_img, &view.image_points[i]);
        let (gx, gy) = (g.x, g.y);
        let (u, v) = (m.x, m.y);
        a.row_mut(2 * i).copy_from(&RowDVector::from_row_slice(&[
            -gx,
            -gy,
            -1.0,
            0.0,
            0.0,
            0.0,
            u * gx,
            u * gy,
            u,
        ]));
        a.row_mut(2 * i + 1)
            .copy_from(&RowDVector::from_row_slice(&[
                0.0,
                0.0,
                0.0,
                -gx,
                -gy,
                -1.0,
                v * gx,
                v * gy,
                v,
            ]));
    }

    // Null vector of A via the eigendecomposition of AᵀA; unlike a thin SVD
    // this always exposes all 9 right-singular directions.
    let (h, gap) = smallest_eigenvector(&(a.transpose() * &a));
    // A collinear grid leaves a null space of dimension ≥ 2.
    if gap {
        return Err(OpticsError::DegenerateConfiguration(
            "rank-deficient design matrix (collinear points?)".into(),
        ));
    }
    let h_norm = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    let mut hm = t_img
        .try_inverse()
        .expect("normalization transform is invertible")
        * h_norm
        * t_grid;
    hm /= hm.norm();
    // Deterministic sign: largest-magnitude entry positive.
    let mut max_abs = 0.0;
    let mut sign = 1.0;
    for v in hm.iter() {
        if v.abs() > max_abs {
            max_abs = v.abs();
            sign = v.signum();
        }
    }
    Ok(hm * sign)
}

/// Outcome of intrinsic calibration: the refined camera model, the final RMS
/// reprojection error, and the refined plane-in-camera pose of every view.
#[derive(Debug, Clone)]
pub struct CalibrationResult {
    pub intrinsics: CameraIntrinsics,
    pub rms_px: f64,
    pub view_poses: Vec<RigidTransform>,
}

/// Absolute-conic constraint row for columns `i`, `j` of `h`, with skew fixed
/// to zero: unknowns ordered (B11, B22, B13, B23, B33).
fn conic_row(h: &Matrix3<f64>, i: usize, j: usize) -> RowDVector<f64> {
    let (h1i, h2i, h3i) = (h[(0, i)], h[(1, i)], h[(2, i)]);
    let (h1j, h2j, h3j) = (h[(0, j)], h[(1, j)], h[(2, j)]);
    RowDVector::from_row_slice(&[
        h1i * h1j,
        h2i * h2j,
        h3i * h1j + h1i * h3j,
        h3i * h2j + h2i * h3j,
        h3i * h3j,
    ])
}

/// Closed-form intrinsics from homography constraints (zero skew).
fn closed_form_intrinsics(
    homographies: &[Matrix3<f64>],
    width: u32,
    height: u32,
) -> Result<CameraIntrinsics, OpticsError> {
    let n = homographies.len();
    let mut v = DMatrix::<f64>::zeros(2 * n, 5);
    for (i, h) in homographies.iter().enumerate() {
        v.row_mut(2 * i).copy_from(&conic_row(h, 0, 1));
        let diff = conic_row(h, 0, 0) - conic_row(h, 1, 1);
        v.row_mut(2 * i + 1).copy_from(&diff);
    }
    // The solution itself is the null vector; a second vanishing singular
    // value means the plane orientations do not constrain the conic.
    let (b, degenerate) = smallest_eigenvector(&(v.transpose() * &v));
    if degenerate {
        return Err(OpticsError::DegenerateConfiguration(
            "plane orientations are degenerate (all views parallel?)".into(),
        ));
    }
    let (mut b11, mut b22, mut b13, mut b23, mut b33) = (b[0], b[1], b[2], b[3], b[4]);
    if b11 < 0.0 {
        b11 = -b11;
        b22 = -b22;
        b13 = -b13;
        b23 = -b23;
        b33 = -b33;
    }
    if b11 <= 0.0 || b22 <= 0.0 {
        return Err(OpticsError::DegenerateConfiguration(
            "conic estimate is not positive definite".into(),
        ));
    }
    let cx = -b13 / b11;
    let cy = -b23 / b22;
    let lambda = b33 - (b13 * b13 / b11 + b23 * b23 / b22);
    if lambda <= 0.0 {
        return Err(OpticsError::DegenerateConfiguration(
            "conic scale is non-positive".into(),
        ));
    }
    let fx = (lambda / b11).sqrt();
    let fy = (lambda / b22).sqrt();
    CameraIntrinsics::new(fx, fy, cx, cy, 0.0, 0.0, width, height)
}

fn intrinsic_matrix(cam: &CameraIntrinsics) -> Matrix3<f64> {
    Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0)
}

/// Plane-in-camera pose from a homography and intrinsics.
fn pose_from_homography(k: &Matrix3<f64>, h: &Matrix3<f64>) -> Result<RigidTransform, OpticsError> {
    let k_inv = k
        .try_inverse()
        .ok_or_else(|| OpticsError::DegenerateConfiguration("singular intrinsics".into()))?;
    let mut r1 = k_inv * h.column(0).into_owned();
    let mut r2 = k_inv * h.column(1).into_owned();
    let mut t = k_inv * h.column(2).into_owned();
    let scale = 1.0 / r1.norm();
    r1 *= scale;
    r2 *= scale;
    t *= scale;
    if t.z < 0.0 {
        // Plane must sit in front of the camera; the homography sign is free.
        r1 = -r1;
        r2 = -r2;
        t = -t;
    }
    let r3 = r1.cross(&r2);
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    // Nearest rotation in Frobenius norm.
    let svd = approx.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * v_t;
    }
    Ok(RigidTransform::from_matrix(&r, t))
}

/// Axis-angle vector to quaternion for the refinement parameterization.
fn rotation_from_params(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let angle = w.norm();
    if angle < 1e-300 {
        UnitQuaternion::identity()
    } else {
        UnitQuaternion::from_axis_angle(&Unit::new_normalize(*w), angle)
    }
}

fn params_from_rotation(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let aa = crate::xform::to_axis_angle(q);
    aa.axis.into_inner() * aa.angle
}

/// Residual vector of the full calibration problem. Parameter layout:
/// `theta = [fx, fy, cx, cy, k1, k2, (w1, t1), (w2, t2), ...]`.
fn calibration_residuals(theta: &DVector<f64>, views: &[PlanarView]) -> DVector<f64> {
    let total: usize = views.iter().map(|v| 2 * v.len()).sum();
    let mut r = DVector::zeros(total);
    let (fx, fy, cx, cy, k1, k2) = (theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]);
    let mut row = 0;
    for (vi, view) in views.iter().enumerate() {
        let base = 6 + 6 * vi;
        let w = Vector3::new(theta[base], theta[base + 1], theta[base + 2]);
        let t = Vector3::new(theta[base + 3], theta[base + 4], theta[base + 5]);
        let q = rotation_from_params(&w);
        for (g, obs) in view.grid_points.iter().zip(&view.image_points) {
            let p = q * Vector3::new(g.x, g.y, 0.0) + t;
            if p.z <= MIN_DEPTH_MM {
                // Penalize parameter sets that push the plane behind the camera.
                r[row] = 1e6;
                r[row + 1] = 1e6;
            } else {
                let x = p.x / p.z;
                let y = p.y / p.z;
                let r2 = x * x + y * y;
                let d = 1.0 + k1 * r2 + k2 * r2 * r2;
                r[row] = fx * x * d + cx - obs.x;
                r[row + 1] = fy * y * d + cy - obs.y;
            }
            row += 2;
        }
    }
    r
}

/// Central-difference Jacobian of [`calibration_residuals`].
fn calibration_jacobian(theta: &DVector<f64>, views: &[PlanarView]) -> DMatrix<f64> {
    let total: usize = views.iter().map(|v| 2 * v.len()).sum();
    let mut jac = DMatrix::zeros(total, theta.len());
    let mut probe = theta.clone();
    for p in 0..theta.len() {
        let h = 1e-6 * theta[p].abs().max(1e-3);
        probe[p] = theta[p] + h;
        let plus = calibration_residuals(&probe, views);
        probe[p] = theta[p] - h;
        let minus = calibration_residuals(&probe, views);
        probe[p] = theta[p];
        jac.column_mut(p).copy_from(&((plus - minus) / (2.0 * h)));
    }
    jac
}

/// Calibrate intrinsics from planar views: closed-form initialization, then
/// Levenberg-Marquardt over `fx, fy, cx, cy, k1, k2` and all view poses.
///
/// Needs at least 3 views with distinct plane orientations. The returned
/// [`CalibrationResult`] carries the final RMS reprojection error in pixels.
pub fn calibrate_intrinsics(
    views: &[PlanarView],
    image_size: (u32, u32),
) -> Result<CalibrationResult, OpticsError> {
    if views.len() < 3 {
        return Err(OpticsError::InsufficientViews {
            got: views.len(),
            need: 3,
        });
    }
    let homographies: Vec<Matrix3<f64>> = views
        .iter()
        .map(estimate_homography)
        .collect::<Result<_, _>>()?;
    let init = closed_form_intrinsics(&homographies, image_size.0, image_size.1)?;
    let k = intrinsic_matrix(&init);
    let poses: Vec<RigidTransform> = homographies
        .iter()
        .map(|h| pose_from_homography(&k, h))
        .collect::<Result<_, _>>()?;

    let mut theta = DVector::zeros(6 + 6 * views.len());
    theta[0] = init.fx;
    theta[1] = init.fy;
    theta[2] = init.cx;
    theta[3] = init.cy;
    // k1, k2 start at zero.
    for (vi, pose) in poses.iter().enumerate() {
        let base = 6 + 6 * vi;
        let w = params_from_rotation(&pose.rotation);
        theta[base] = w.x;
        theta[base + 1] = w.y;
        theta[base + 2] = w.z;
        theta[base + 3] = pose.translation.x;
        theta[base + 4] = pose.translation.y;
        theta[base + 5] = pose.translation.z;
    }

    let mut cost = calibration_residuals(&theta, views).norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..100 {
        let jac = calibration_jacobian(&theta, views);
        let res = calibration_residuals(&theta, views);
        let grad = jac.transpose() * &res;
        if grad.amax() < 1e-14 {
            break;
        }
        let hess = jac.transpose() * &jac;
        let mut improved = false;
        for _ in 0..25 {
            let mut damped = hess.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * hess[(i, i)].max(1e-12);
            }
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&grad)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let candidate = &theta + &step;
            let new_cost = calibration_residuals(&candidate, views).norm_squared();
            if new_cost < cost {
                theta = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || cost < 1e-20 {
            break;
        }
    }

    // RMS over residual coordinates (u and v counted separately), so a
    // detection noise of σ px yields an RMS near σ.
    let total_points: usize = views.iter().map(PlanarView::len).sum();
    let rms_px = (cost / (2 * total_points) as f64).sqrt();
    let intrinsics = CameraIntrinsics::new(
        theta[0],
        theta[1],
        theta[2],
        theta[3],
        theta[4],
        theta[5],
        image_size.0,
        image_size.1,
    )?;
    let view_poses = (0..views.len())
        .map(|vi| {
            let base = 6 + 6 * vi;
            let w = Vector3::new(theta[base], theta[base + 1], theta[base + 2]);
            let t = Vector3::new(theta[base + 3], theta[base + 4], theta[base + 5]);
            RigidTransform::new(rotation_from_params(&w), t)
        })
        .collect();
    Ok(CalibrationResult {
        intrinsics,
        rms_px,
        view_poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xform;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn test_camera(k1: f64, k2: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(615.0, 615.0, 320.0, 240.0, k1, k2, 640, 480).unwrap()
    }

    fn rectified_rig(baseline: f64) -> StereoRig {
        StereoRig::new(
            test_camera(0.0, 0.0),
            test_camera(0.0, 0.0),
            RigidTransform::from_translation(Vector3::new(baseline, 0.0, 0.0)),
        )
        .unwrap()
    }

    #[test]
    fn project_principal_ray() {
        let cam = test_camera(-0.05, 0.01);
        let px = cam.project(&Vector3::new(0.0, 0.0, 100.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(320.0, 240.0), epsilon = 1e-12);
    }

    #[test]
    fn project_pinhole_arithmetic() {
        let cam = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 0.0, 0.0, 640, 480).unwrap();
        let px = cam.project(&Vector3::new(10.0, 0.0, 100.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(370.0, 240.0), epsilon = 1e-12);
    }

    #[test]
    fn project_distortion_polynomial_by_hand() {
        // x = 0.1, r² = 0.01, factor = 1 + 0.1·0.01 → u = 320 + 500·0.1·1.001 = 370.05.
        let cam = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 0.1, 0.0, 640, 480).unwrap();
        let px = cam.project(&Vector3::new(10.0, 0.0, 100.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(370.05, 240.0), epsilon = 1e-9);
    }

    #[test]
    fn project_rejects_points_behind_camera() {
        let cam = test_camera(0.0, 0.0);
        assert!(matches!(
            cam.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(OpticsError::BehindCamera { .. })
        ));
        assert!(matches!(
            cam.project(&Vector3::new(1.0, 1.0, -5.0)),
            Err(OpticsError::BehindCamera { .. })
        ));
    }

    #[test]
    fn unproject_center_and_closed_form() {
        let cam = test_camera(-0.05, 0.01);
        let ray = cam.unproject(&Vector2::new(320.0, 240.0)).unwrap();
        assert_relative_eq!(ray.into_inner(), Vector3::z(), epsilon = 1e-12);

        // Zero distortion: closed form ((u−cx)/fx, (v−cy)/fy, 1) normalized.
        let cam0 = test_camera(0.0, 0.0);
        let ray = cam0.unproject(&Vector2::new(420.0, 300.0)).unwrap();
        let expect = Vector3::new(100.0 / 615.0, 60.0 / 615.0, 1.0).normalize();
        assert_relative_eq!(ray.into_inner(), expect, epsilon = 1e-12);
    }

    #[test]
    fn project_unproject_round_trip_over_distorted_frustum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (k1, k2) in [
            (0.0, 0.0),
            (0.3, 0.1),
            (-0.3, -0.1),
            (-0.3, 0.1),
            (0.3, -0.1),
            (-0.05, 0.01),
        ] {
            let cam = test_camera(k1, k2);
            let mut checked = 0;
            while checked < 1000 {
                let p = Vector3::new(
                    rng.random::<f64>() * 2000.0 - 1000.0,
                    rng.random::<f64>() * 1500.0 - 750.0,
                    rng.random::<f64>() * 2500.0 + 300.0,
                );
                // Stay inside the invertible part of the distortion profile;
                // physical in-image geometry at this focal length never
                // exceeds a normalized radius of ~0.65.
                if (p.x * p.x + p.y * p.y).sqrt() / p.z > 0.7 {
                    continue;
                }
                let Ok(px) = cam.project(&p) else { continue };
                if !cam.contains(&px) {
                    continue;
                }
                checked += 1;
                let ray = cam.unproject(&px).unwrap().into_inner();
                let reproj = cam.project(&(ray * 1000.0)).unwrap();
                assert!(
                    (reproj - px).norm() < 1e-6,
                    "round trip error {} px at k1={k1}, k2={k2}",
                    (reproj - px).norm()
                );
                // The ray direction also reproduces the 3D point.
                let recon = ray * (p.z / ray.z);
                assert!((recon - p).norm() < 1e-6 * p.norm().max(1.0));
            }
        }
    }

    #[test]
    fn triangulate_recovers_noiseless_point() {
        let rig = StereoRig::new(
            test_camera(-0.05, 0.01),
            test_camera(-0.03, 0.005),
            RigidTransform::from_translation(Vector3::new(50.0, 0.0, 0.0)),
        )
        .unwrap();
        let p = Vector3::new(50.0, -20.0, 800.0);
        let pl = rig.project_left(&p).unwrap();
        let pr = rig.project_right(&p).unwrap();
        let rec = rig.triangulate(&pl, &pr).unwrap();
        assert!((rec - p).norm() < 1e-6, "error {}", (rec - p).norm());
    }

    #[test]
    fn triangulate_rejects_rays_along_baseline() {
        let rig = rectified_rig(50.0);
        // Rays through both epipoles are collinear with the baseline.
        let epi = Vector2::new(320.0 + 615.0 * 1e9, 240.0);
        assert!(matches!(
            rig.triangulate(&epi, &epi),
            Err(OpticsError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn triangulate_disparity_depth_identity() {
        // Rectified zero-distortion rig: z = f·b/d exactly.
        let rig = rectified_rig(50.0);
        for (u, z) in [(400.0, 700.0), (250.0, 1500.0), (320.0, 480.0)] {
            let x = (u - 320.0) / 615.0 * z;
            let p = Vector3::new(x, 30.0, z);
            let pl = rig.project_left(&p).unwrap();
            let pr = rig.project_right(&p).unwrap();
            let d = pl.x - pr.x;
            let z_formula = 615.0 * 50.0 / d;
            let rec = rig.triangulate(&pl, &pr).unwrap();
            assert_relative_eq!(rec.z, z_formula, epsilon = 1e-9);
            assert_relative_eq!(rec.z, z, epsilon = 1e-9);
        }
    }

    #[test]
    fn triangulation_error_grows_with_pixel_noise() {
        let rig = rectified_rig(50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut previous = 0.0;
        for sigma in [0.1, 0.5, 1.0] {
            let normal = Normal::new(0.0, sigma).unwrap();
            let mut sum_sq = 0.0;
            let mut count = 0u32;
            while count < 1000 {
                let p = Vector3::new(
                    rng.random::<f64>() * 1200.0 - 600.0,
                    rng.random::<f64>() * 900.0 - 450.0,
                    rng.random::<f64>() * 1500.0 + 500.0,
                );
                let (Ok(pl), Ok(pr)) = (rig.project_left(&p), rig.project_right(&p)) else {
                    continue;
                };
                if !rig.left.contains(&pl) || !rig.right.contains(&pr) {
                    continue;
                }
                let noisy_l = pl + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                let noisy_r = pr + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                if let Ok(rec) = rig.triangulate(&noisy_l, &noisy_r) {
                    sum_sq += (rec - p).norm_squared();
                    count += 1;
                }
            }
            let rms = (sum_sq / f64::from(count)).sqrt();
            assert!(rms > previous, "rms {rms} did not grow from {previous}");
            previous = rms;
        }
    }

    /// Render a synthetic view of a 9×7 planar grid from a known pose.
    fn render_view(cam: &CameraIntrinsics, pose: &RigidTransform) -> PlanarView {
        let mut view = PlanarView::default();
        for gy in -3..=3 {
            for gx in -4..=4 {
                let g = Vector2::new(f64::from(gx) * 25.0, f64::from(gy) * 25.0);
                let p = pose.transform_point(&Vector3::new(g.x, g.y, 0.0));
                let px = cam.project(&p).unwrap();
                view.grid_points.push(g);
                view.image_points.push(px);
            }
        }
        view
    }

    fn tilted_pose(rx: f64, ry: f64, t: Vector3<f64>) -> RigidTransform {
        let q = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), rx)
            * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), ry);
        RigidTransform::new(q, t)
    }

    fn calibration_poses() -> Vec<RigidTransform> {
        vec![
            tilted_pose(0.3, 0.1, Vector3::new(-10.0, 5.0, 600.0)),
            tilted_pose(-0.25, 0.2, Vector3::new(20.0, -10.0, 650.0)),
            tilted_pose(0.1, -0.35, Vector3::new(0.0, 15.0, 550.0)),
            tilted_pose(-0.15, -0.2, Vector3::new(-25.0, -5.0, 700.0)),
            tilted_pose(0.35, 0.3, Vector3::new(15.0, 20.0, 620.0)),
        ]
    }

    #[test]
    fn homography_recovered_from_construction() {
        let h_true = Matrix3::new(1.2, 0.1, 30.0, -0.05, 0.9, 20.0, 1e-4, -2e-4, 1.0);
        let mut view = PlanarView::default();
        for gy in 0..5 {
            for gx in 0..6 {
                let g = Vector2::new(f64::from(gx) * 30.0, f64::from(gy) * 30.0);
                view.grid_points.push(g);
                view.image_points.push(apply_h(&h_true, &g));
            }
        }
        let h = estimate_homography(&view).unwrap();
        let h_ref = h_true / h_true.norm();
        let diff = (h - h_ref).norm().min((h + h_ref).norm());
        assert!(diff < 1e-9, "homography error {diff}");
    }

    #[test]
    fn homography_exact_similarity_from_four_points() {
        let ang = 0.4_f64;
        let (s, c) = (ang.sin(), ang.cos());
        let sim = Matrix3::new(2.0 * c, -2.0 * s, 50.0, 2.0 * s, 2.0 * c, -20.0, 0.0, 0.0, 1.0);
        let mut view = PlanarView::default();
        for g in [
            Vector2::new(0.0, 0.0),
            Vector2::new(100.0, 0.0),
            Vector2::new(100.0, 80.0),
            Vector2::new(0.0, 80.0),
        ] {
            view.grid_points.push(g);
            view.image_points.push(apply_h(&sim, &g));
        }
        let h = estimate_homography(&view).unwrap();
        for g in &view.grid_points {
            assert_relative_eq!(apply_h(&h, g), apply_h(&sim, g), epsilon = 1e-8);
        }
    }

    #[test]
    fn homography_rejects_collinear_points() {
        let mut view = PlanarView::default();
        for i in 0..8 {
            let g = Vector2::new(f64::from(i) * 10.0, f64::from(i) * 5.0);
            view.grid_points.push(g);
            view.image_points.push(g * 2.0);
        }
        assert!(matches!(
            estimate_homography(&view),
            Err(OpticsError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn calibration_recovers_exact_model_from_noiseless_views() {
        let cam = test_camera(-0.05, 0.01);
        let views: Vec<PlanarView> = calibration_poses()
            .iter()
            .map(|p| render_view(&cam, p))
            .collect();
        let result = calibrate_intrinsics(&views, (640, 480)).unwrap();
        let got = result.intrinsics;
        assert_relative_eq!(got.fx, cam.fx, max_relative = 1e-6);
        assert_relative_eq!(got.fy, cam.fy, max_relative = 1e-6);
        assert_relative_eq!(got.cx, cam.cx, max_relative = 1e-6);
        assert_relative_eq!(got.cy, cam.cy, max_relative = 1e-6);
        assert_relative_eq!(got.k1, cam.k1, max_relative = 1e-6);
        assert_relative_eq!(got.k2, cam.k2, max_relative = 1e-6);
        assert!(result.rms_px < 1e-8, "rms {}", result.rms_px);

        // Refined poses match the generating poses.
        for (est, truth) in result.view_poses.iter().zip(calibration_poses()) {
            assert!(xform::geodesic_angle(&est.rotation, &truth.rotation) < 1e-7);
            assert!((est.translation - truth.translation).norm() < 1e-5);
        }
    }

    #[test]
    fn calibration_with_noise_stays_within_bounds() {
        let cam = test_camera(-0.05, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let mut views: Vec<PlanarView> = calibration_poses()
            .iter()
            .map(|p| render_view(&cam, p))
            .collect();
        for v in &mut views {
            for px in &mut v.image_points {
                px.x += noise.sample(&mut rng);
                px.y += noise.sample(&mut rng);
            }
        }
        let result = calibrate_intrinsics(&views, (640, 480)).unwrap();
        assert!((result.intrinsics.fx - cam.fx).abs() / cam.fx < 0.005);
        assert!((result.intrinsics.fy - cam.fy).abs() / cam.fy < 0.005);
        // RMS should track the injected noise level.
        assert!(result.rms_px <= 0.2 * 1.1, "rms {}", result.rms_px);
    }

    #[test]
    fn calibration_rejects_parallel_planes() {
        let cam = test_camera(0.0, 0.0);
        let pose0 = tilted_pose(0.0, 0.0, Vector3::new(0.0, 0.0, 600.0));
        let views: Vec<PlanarView> = (0..5)
            .map(|i| {
                let mut p = pose0;
                p.translation.x += f64::from(i) * 30.0;
                render_view(&cam, &p)
            })
            .collect();
        assert!(matches!(
            calibrate_intrinsics(&views, (640, 480)),
            Err(OpticsError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn calibration_requires_three_views() {
        let cam = test_camera(0.0, 0.0);
        let views: Vec<PlanarView> = calibration_poses()
            .iter()
            .take(2)
            .map(|p| render_view(&cam, p))
            .collect();
        assert!(matches!(
            calibrate_intrinsics(&views, (640, 480)),
            Err(OpticsError::InsufficientViews { got: 2, need: 3 })
        ));
    }
}

