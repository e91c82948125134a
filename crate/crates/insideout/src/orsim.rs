//! Synthetic operating room: landmark scenes, ground-truth trajectories,
//! stereo observation rendering with noise and outlier models, a simulated
//! outside-in optical tracker, and ultrasound frames of a ball phantom.
//!
//! The robot-base frame doubles as the world frame of the room (z up, the
//! manipulator near the origin). Everything is deterministic per seed:
//! the same inputs always produce bit-identical outputs.

use crate::optics::StereoRig;
use crate::usfuse::{pose_at, TimedPoseStream, UsFrame};
use crate::vostereo::FeatureObservation;
use crate::xform::RigidTransform;
use nalgebra::{Unit, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Axis-aligned box, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    fn clamp(&self, p: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }
}

/// Default room: 5 × 5 × 3 m centered over the robot base.
pub fn default_room() -> Aabb {
    Aabb {
        min: Vector3::new(-2500.0, -2500.0, 0.0),
        max: Vector3::new(2500.0, 2500.0, 3000.0),
    }
}

/// A landmark scene: identified 3D points inside a room box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub landmarks: Vec<(u64, Vector3<f64>)>,
    pub bounds: Aabb,
    pub seed: u64,
}

/// Sample a landmark scene: most points on the room walls, the rest on
/// clutter clusters in the interior (equipment, tools, furniture).
pub fn generate_scene(seed: u64, bounds: Aabb, n_landmarks: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = bounds.max - bounds.min;
    // Face areas for area-weighted wall sampling: ±x, ±y, ±z pairs.
    let areas = [
        extent.y * extent.z,
        extent.y * extent.z,
        extent.x * extent.z,
        extent.x * extent.z,
        extent.x * extent.y,
        extent.x * extent.y,
    ];
    let total_area: f64 = areas.iter().sum();

    // Clutter clusters sit around the working area in the middle of the
    // room (equipment and tools near the bed), not spread along the walls.
    let n_clusters = 8.min(n_landmarks.max(1));
    let center = (bounds.min + bounds.max) / 2.0;
    let cluster_centers: Vec<Vector3<f64>> = (0..n_clusters)
        .map(|_| {
            Vector3::new(
                center.x + (rng.random::<f64>() - 0.5) * extent.x * 0.5,
                center.y + (rng.random::<f64>() - 0.5) * extent.y * 0.5,
                center.z + (rng.random::<f64>() - 0.5) * extent.z * 0.5,
            )
        })
        .collect();

    let mut landmarks = Vec::with_capacity(n_landmarks);
    for id in 0..n_landmarks as u64 {
        let p = if rng.random::<f64>() < 0.6 {
            // Wall point: pick a face by area, then a uniform point on it.
            let mut pick = rng.random::<f64>() * total_area;
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.random::<f64>();
            let v = rng.random::<f64>();
            match face {
                0 => Vector3::new(bounds.min.x, bounds.min.y + u * extent.y, bounds.min.z + v * extent.z),
                1 => Vector3::new(bounds.max.x, bounds.min.y + u * extent.y, bounds.min.z + v * extent.z),
                2 => Vector3::new(bounds.min.x + u * extent.x, bounds.min.y, bounds.min.z + v * extent.z),
                3 => Vector3::new(bounds.min.x + u * extent.x, bounds.max.y, bounds.min.z + v * extent.z),
                4 => Vector3::new(bounds.min.x + u * extent.x, bounds.min.y + v * extent.y, bounds.min.z),
                _ => Vector3::new(bounds.min.x + u * extent.x, bounds.min.y + v * extent.y, bounds.max.z),
            }
        } else {
            // Clutter point around a cluster center.
            let center = cluster_centers[rng.random_range(0..n_clusters)];
            let offset = Vector3::new(
                gaussian(&mut rng, 150.0),
                gaussian(&mut rng, 150.0),
                gaussian(&mut rng, 150.0),
            );
            bounds.clamp(center + offset)
        };
        landmarks.push((id, p));
    }
    Scene {
        landmarks,
        bounds,
        seed,
    }
}

/// Box-Muller sample; keeps the RNG draw count fixed at two per call.
fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_axis(rng: &mut ChaCha8Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

/// Ground-truth trajectory families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    /// Translation-dominant lateral fan motion, like a freehand transducer
    /// sweep. `extent_mm` is the lateral travel.
    Sweep { extent_mm: f64 },
    /// Fixed position, panning rotation of ± `pan_deg`.
    RotationOnly { pan_deg: f64 },
    /// Unconstrained smooth wandering, for synchronization experiments.
    Freehand,
}

/// Number of spline waypoints per trajectory.
const TRAJECTORY_WAYPOINTS: usize = 9;

/// Catmull-Rom value at parameter `u ∈ [0, 1]` between `p1` and `p2`.
fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, u: f64) -> f64 {
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u * u * u)
}

/// Evaluate a clamped Catmull-Rom spline through `waypoints` at `s ∈ [0, K−1]`.
fn spline_eval(waypoints: &[f64], s: f64) -> f64 {
    let k = waypoints.len();
    let j = (s.floor() as usize).min(k - 2);
    let u = s - j as f64;
    let at = |i: i64| -> f64 { waypoints[i.clamp(0, k as i64 - 1) as usize] };
    catmull_rom(at(j as i64 - 1), at(j as i64), at(j as i64 + 1), at(j as i64 + 2), u)
}

/// Generate a smooth C¹ ground-truth trajectory of the robot end effector in
/// the robot-base frame, sampled at `rate_hz` for `duration_s` seconds.
///
/// The pose path is a Catmull-Rom spline through seeded waypoints; positions
/// and yaw/pitch/roll angles are splined independently, so the path is smooth
/// in both translation and rotation. The nominal orientation points the
/// mounted camera horizontally into the room.
pub fn generate_trajectory(
    kind: TrajectoryKind,
    duration_s: f64,
    rate_hz: f64,
    seed: u64,
) -> TimedPoseStream {
    assert!(rate_hz > 0.0, "rate must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = TRAJECTORY_WAYPOINTS;
    let mut px = vec![0.0; k];
    let mut py = vec![0.0; k];
    let mut pz = vec![0.0; k];
    let mut yaw = vec![0.0; k];
    let mut pitch = vec![0.0; k];
    let mut roll = vec![0.0; k];

    match kind {
        TrajectoryKind::Sweep { extent_mm } => {
            for i in 0..k {
                let f = i as f64 / (k - 1) as f64;
                px[i] = -extent_mm / 2.0 + extent_mm * f + gaussian(&mut rng, extent_mm * 0.01);
                py[i] = 120.0 * (std::f64::consts::PI * f).sin() + gaussian(&mut rng, 15.0);
                pz[i] = 1100.0 + gaussian(&mut rng, 15.0);
                yaw[i] = (-18.0 + 36.0 * f).to_radians() + gaussian(&mut rng, 0.03);
                pitch[i] = gaussian(&mut rng, 0.04);
                roll[i] = gaussian(&mut rng, 0.03);
            }
        }
        TrajectoryKind::RotationOnly { pan_deg } => {
            let pivot = Vector3::new(0.0, 0.0, 1100.0);
            for i in 0..k {
                let f = i as f64 / (k - 1) as f64;
                px[i] = pivot.x;
                py[i] = pivot.y;
                pz[i] = pivot.z;
                // One full pan cycle reaching ±pan_deg.
                yaw[i] = pan_deg.to_radians() * (std::f64::consts::TAU * f).sin();
                pitch[i] = gaussian(&mut rng, 0.02);
                roll[i] = gaussian(&mut rng, 0.015);
            }
        }
        TrajectoryKind::Freehand => {
            for i in 0..k {
                px[i] = gaussian(&mut rng, 250.0);
                py[i] = gaussian(&mut rng, 250.0);
                pz[i] = 1100.0 + gaussian(&mut rng, 180.0);
                yaw[i] = gaussian(&mut rng, 0.35);
                pitch[i] = gaussian(&mut rng, 0.25);
                roll[i] = gaussian(&mut rng, 0.2);
            }
        }
    }

    // Nominal orientation: camera axis horizontal, looking along +x.
    let base = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2);
    let count = (duration_s * rate_hz).round() as usize;
    let samples: Vec<(f64, RigidTransform)> = (0..count)
        .map(|i| {
            let t = i as f64 / rate_hz;
            let s = if count > 1 {
                t / ((count - 1) as f64 / rate_hz) * (k - 1) as f64
            } else {
                0.0
            };
            let position = Vector3::new(
                spline_eval(&px, s),
                spline_eval(&py, s),
                spline_eval(&pz, s),
            );
            let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), spline_eval(&yaw, s))
                * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), spline_eval(&pitch, s))
                * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), spline_eval(&roll, s))
                * base;
            (t, RigidTransform::new(q, position))
        })
        .collect();
    TimedPoseStream::new("robot-gt", samples).expect("trajectory timestamps are increasing")
}

/// Sensor noise and timing model for the simulated trackers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Gaussian pixel noise on feature detections, px.
    pub pixel_sigma: f64,
    /// Probability that a visible landmark is actually detected.
    pub detection_prob: f64,
    /// Probability that a detection reports a wrong feature identity.
    pub id_corruption_prob: f64,
    /// Outside-in tracker translation noise, mm.
    pub ots_trans_sigma_mm: f64,
    /// Outside-in tracker rotation noise, degrees.
    pub ots_rot_sigma_deg: f64,
    /// Outside-in tracker latency, seconds.
    pub ots_latency_s: f64,
    /// Outside-in tracker sampling rate, Hz.
    pub ots_rate_hz: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.3,
            detection_prob: 0.98,
            id_corruption_prob: 0.0,
            ots_trans_sigma_mm: 0.15,
            ots_rot_sigma_deg: 0.08,
            ots_latency_s: 0.030,
            ots_rate_hz: 20.0,
        }
    }
}

impl NoiseModel {
    /// All noise off: exact measurements, no dropout, no latency.
    pub fn noiseless() -> Self {
        Self {
            pixel_sigma: 0.0,
            detection_prob: 1.0,
            id_corruption_prob: 0.0,
            ots_trans_sigma_mm: 0.0,
            ots_rot_sigma_deg: 0.0,
            ots_latency_s: 0.0,
            ots_rate_hz: 20.0,
        }
    }
}

/// Visibility range of the stereo sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frustum {
    pub near_mm: f64,
    pub far_mm: f64,
}

impl Default for Frustum {
    fn default() -> Self {
        Self {
            near_mm: 100.0,
            far_mm: 8000.0,
        }
    }
}

/// Maximum vertical disparity (undistorted, px) accepted as a stereo match.
pub const STEREO_MATCH_THRESHOLD_PX: f64 = 3.0;

/// One rendered stereo frame plus ground-truth corruption labels.
///
/// `corrupted[i]` marks observations whose identity was deliberately
/// falsified; the label exists for evaluation only and is never visible to
/// the tracker.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub observations: Vec<FeatureObservation>,
    pub corrupted: Vec<bool>,
}

/// Render the landmarks visible from `camera_pose_world` (left-camera pose in
/// the room frame) into stereo feature observations.
///
/// Landmarks inside the frustum of the left camera are projected into both
/// images, pixel noise is added, detections drop out with
/// `1 − detection_prob`, and identities are corrupted with
/// `id_corruption_prob`. A right-image match is present only when the
/// landmark is visible in the right camera and the (undistorted) vertical
/// disparity stays under [`STEREO_MATCH_THRESHOLD_PX`].
pub fn render_stereo_frame(
    scene: &Scene,
    camera_pose_world: &RigidTransform,
    rig: &StereoRig,
    frustum: Frustum,
    noise: &NoiseModel,
    seed: u64,
) -> RenderedFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world_to_cam = camera_pose_world.invert();
    let mut observations = Vec::new();
    let mut corrupted = Vec::new();
    for &(id, p_world) in &scene.landmarks {
        let p_cam = world_to_cam.transform_point(&p_world);
        if p_cam.z < frustum.near_mm || p_cam.z > frustum.far_mm {
            continue;
        }
        let Ok(px_left) = rig.project_left(&p_cam) else {
            continue;
        };
        if !rig.left.contains(&px_left) {
            continue;
        }
        if rng.random::<f64>() >= noise.detection_prob {
            continue;
        }
        let mut left = px_left;
        if noise.pixel_sigma > 0.0 {
            left.x += gaussian(&mut rng, noise.pixel_sigma);
            left.y += gaussian(&mut rng, noise.pixel_sigma);
        }
        let px_right = rig
            .project_right(&p_cam)
            .ok()
            .filter(|px| rig.right.contains(px))
            .map(|mut px| {
                if noise.pixel_sigma > 0.0 {
                    px.x += gaussian(&mut rng, noise.pixel_sigma);
                    px.y += gaussian(&mut rng, noise.pixel_sigma);
                }
                px
            })
            .filter(|px| stereo_match_consistent(rig, &left, px));

        let mut feature_id = id;
        let mut is_corrupted = false;
        if noise.id_corruption_prob > 0.0 && rng.random::<f64>() < noise.id_corruption_prob {
            let n = scene.landmarks.len() as u64;
            if n > 1 {
                loop {
                    let candidate = rng.random_range(0..n);
                    if candidate != id {
                        feature_id = candidate;
                        break;
                    }
                }
                is_corrupted = true;
            }
        }
        observations.push(FeatureObservation {
            feature_id,
            px_left: left,
            px_right,
        });
        corrupted.push(is_corrupted);
    }
    RenderedFrame {
        observations,
        corrupted,
    }
}

/// Matcher gate: vertical disparity in undistorted pixel coordinates.
fn stereo_match_consistent(rig: &StereoRig, left: &Vector2<f64>, right: &Vector2<f64>) -> bool {
    let (Ok(ray_l), Ok(ray_r)) = (rig.left.unproject(left), rig.right.unproject(right)) else {
        return false;
    };
    let yl = ray_l.y / ray_l.z * rig.left.fy;
    let yr = ray_r.y / ray_r.z * rig.right.fy;
    (yl - yr).abs() <= STEREO_MATCH_THRESHOLD_PX
}

/// Static mounting geometry of the combined rig: camera on the end effector,
/// stereo pair and ultrasound plane on the camera body, optical marker on the
/// mount, outside-in tracker across the room.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigSetup {
    /// Camera body (RGB frame) in the end-effector frame.
    pub t_ee_rgb: RigidTransform,
    /// Stereo left camera in the RGB frame.
    pub t_rgb_stereo: RigidTransform,
    /// Outside-in tracker base in the robot-base frame.
    pub t_rb_ots: RigidTransform,
    /// Optical marker in the end-effector frame.
    pub t_ee_marker: RigidTransform,
    /// Ultrasound image plane in the RGB frame.
    pub t_rgb_us: RigidTransform,
}

impl Default for RigSetup {
    fn default() -> Self {
        Self {
            t_ee_rgb: RigidTransform::from_axis_angle(
                &Unit::new_normalize(Vector3::new(0.1, 0.9, 0.2)),
                6f64.to_radians(),
                Vector3::new(25.0, -10.0, 40.0),
            ),
            t_rgb_stereo: RigidTransform::from_axis_angle(
                &Vector3::z_axis(),
                0.3f64.to_radians(),
                Vector3::new(-12.0, 3.0, 2.0),
            ),
            t_rb_ots: RigidTransform::from_axis_angle(
                &Unit::new_normalize(Vector3::new(0.15, 0.2, 0.95)),
                160f64.to_radians(),
                Vector3::new(2200.0, -1900.0, 1600.0),
            ),
            t_ee_marker: RigidTransform::from_axis_angle(
                &Unit::new_normalize(Vector3::new(1.0, 0.2, 0.0)),
                12f64.to_radians(),
                Vector3::new(0.0, -30.0, 55.0),
            ),
            t_rgb_us: RigidTransform::from_axis_angle(
                &Unit::new_normalize(Vector3::new(0.95, 0.1, 0.3)),
                95f64.to_radians(),
                Vector3::new(5.0, 70.0, -15.0),
            ),
        }
    }
}

impl RigSetup {
    /// Stereo-left-camera trajectory in the room frame:
    /// `T_rb_cam = T_rb_ee ∘ t_ee_rgb ∘ t_rgb_stereo`.
    pub fn camera_trajectory(&self, ee_stream: &TimedPoseStream) -> TimedPoseStream {
        let chain = self.t_ee_rgb.compose(&self.t_rgb_stereo);
        let samples = ee_stream
            .samples()
            .iter()
            .map(|&(t, ee)| (t, ee.compose(&chain)))
            .collect();
        TimedPoseStream::new("camera-gt", samples).expect("timestamps preserved")
    }

    /// RGB camera-body trajectory in the room frame.
    pub fn rgb_trajectory(&self, ee_stream: &TimedPoseStream) -> TimedPoseStream {
        let samples = ee_stream
            .samples()
            .iter()
            .map(|&(t, ee)| (t, ee.compose(&self.t_ee_rgb)))
            .collect();
        TimedPoseStream::new("rgb-gt", samples).expect("timestamps preserved")
    }
}

/// Simulate the outside-in optical tracker watching the marker on the mount.
///
/// The marker pose in the tracker frame is `t_rb_ots⁻¹ ∘ T_rb_ee ∘
/// t_ee_marker`, resampled at the tracker rate, perturbed by the tracker
/// noise, and delayed: every output timestamp is shifted by `ots_latency_s`.
pub fn simulate_ots(
    trajectory: &TimedPoseStream,
    rig_setup: &RigSetup,
    noise: &NoiseModel,
    seed: u64,
) -> TimedPoseStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (Some(first), Some(last)) = (trajectory.first_time(), trajectory.last_time()) else {
        return TimedPoseStream::new("ots", Vec::new()).expect("empty stream is valid");
    };
    let ots_inv = rig_setup.t_rb_ots.invert();
    let dt = 1.0 / noise.ots_rate_hz;
    let mut samples = Vec::new();
    let mut k = 0usize;
    loop {
        let t = first + k as f64 * dt;
        if t > last {
            break;
        }
        let ee = pose_at(trajectory, t).expect("t inside trajectory range");
        let mut marker = ots_inv.compose(&ee).compose(&rig_setup.t_ee_marker);
        if noise.ots_rot_sigma_deg > 0.0 {
            let axis = random_axis(&mut rng);
            let angle = gaussian(&mut rng, noise.ots_rot_sigma_deg.to_radians());
            marker.rotation = UnitQuaternion::from_axis_angle(&axis, angle) * marker.rotation;
        }
        if noise.ots_trans_sigma_mm > 0.0 {
            marker.translation += Vector3::new(
                gaussian(&mut rng, noise.ots_trans_sigma_mm),
                gaussian(&mut rng, noise.ots_trans_sigma_mm),
                gaussian(&mut rng, noise.ots_trans_sigma_mm),
            );
        }
        samples.push((t + noise.ots_latency_s, marker));
        k += 1;
    }
    TimedPoseStream::new("ots", samples).expect("grid timestamps are increasing")
}

/// Ball phantom for the ultrasound simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpherePhantom {
    pub center_mm: Vector3<f64>,
    pub radius_mm: f64,
    /// Intensity inside the ball, in [0, 1].
    pub inside: f64,
    /// Background intensity, in [0, 1].
    pub outside: f64,
}

impl Default for SpherePhantom {
    fn default() -> Self {
        Self {
            center_mm: Vector3::zeros(),
            radius_mm: 20.0,
            inside: 0.85,
            outside: 0.08,
        }
    }
}

/// Ultrasound image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsImageSpec {
    pub width: u32,
    pub height: u32,
    /// Pixel spacing (sx, sy), mm/px.
    pub spacing_mm: (f64, f64),
    /// Multiplicative speckle noise amplitude.
    pub speckle_sigma: f64,
}

impl Default for UsImageSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            spacing_mm: (0.5, 0.5),
            speckle_sigma: 0.02,
        }
    }
}

/// Width of the smooth intensity transition at the phantom boundary, mm.
pub const US_BOUNDARY_BAND_MM: f64 = 1.0;

/// Render one ultrasound frame of the sphere phantom.
///
/// Every pixel is mapped to world coordinates through
/// `T_world_us = probe_pose_world ∘ t_rgb_us`; intensity is the inside value
/// within the sphere and the background outside, blended linearly across a
/// 1 mm boundary band, with seeded multiplicative speckle.
pub fn render_us_frame(
    phantom: &SpherePhantom,
    probe_pose_world: &RigidTransform,
    t_rgb_us: &RigidTransform,
    spec: &UsImageSpec,
    timestamp_s: f64,
    seed: u64,
) -> UsFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_world_us = probe_pose_world.compose(t_rgb_us);
    let (sx, sy) = spec.spacing_mm;
    let half_band = US_BOUNDARY_BAND_MM / 2.0;
    let mut pixels = Vec::with_capacity((spec.width * spec.height) as usize);
    for v in 0..spec.height {
        for u in 0..spec.width {
            let p_us = Vector3::new(f64::from(u) * sx, f64::from(v) * sy, 0.0);
            let p_world = t_world_us.transform_point(&p_us);
            let d = (p_world - phantom.center_mm).norm();
            let base = if d <= phantom.radius_mm - half_band {
                phantom.inside
            } else if d >= phantom.radius_mm + half_band {
                phantom.outside
            } else {
                // Linear blend across the boundary band.
                let f = (d - (phantom.radius_mm - half_band)) / US_BOUNDARY_BAND_MM;
                phantom.inside + f * (phantom.outside - phantom.inside)
            };
            let speckled = if spec.speckle_sigma > 0.0 {
                base * (1.0 + gaussian(&mut rng, spec.speckle_sigma))
            } else {
                base
            };
            pixels.push(speckled.clamp(0.0, 1.0) as f32);
        }
    }
    UsFrame {
        timestamp_s,
        width: spec.width,
        height: spec.height,
        spacing_mm: spec.spacing_mm,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xform;
    use approx::assert_relative_eq;

    #[test]
    fn scene_is_seeded_and_bounded() {
        let bounds = default_room();
        let scene = generate_scene(7, bounds, 2000);
        assert_eq!(scene.landmarks.len(), 2000);
        for (i, &(id, p)) in scene.landmarks.iter().enumerate() {
            assert_eq!(id, i as u64);
            assert!(bounds.contains(&p), "landmark {id} at {p} out of bounds");
        }
        let again = generate_scene(7, bounds, 2000);
        assert_eq!(scene.landmarks, again.landmarks);
        let other = generate_scene(8, bounds, 2000);
        assert_ne!(scene.landmarks, other.landmarks);

        let single = generate_scene(1, bounds, 1);
        assert_eq!(single.landmarks.len(), 1);
        assert!(bounds.contains(&single.landmarks[0].1));
    }

    #[test]
    fn trajectory_sample_count_and_monotonicity() {
        let stream = generate_trajectory(TrajectoryKind::Freehand, 60.0, 30.0, 3);
        assert_eq!(stream.len(), 1800);
        for w in stream.samples().windows(2) {
            assert!(w[1].0 > w[0].0);
        }
    }

    #[test]
    fn rotation_only_pivots_exactly() {
        let stream = generate_trajectory(TrajectoryKind::RotationOnly { pan_deg: 40.0 }, 20.0, 30.0, 4);
        let pivot = stream.samples()[0].1.translation;
        let mut max_pan: f64 = 0.0;
        for &(_, pose) in stream.samples() {
            assert!((pose.translation - pivot).norm() < 1e-9);
            max_pan = max_pan.max(pose.rotation_angle());
        }
        // The pan actually reaches a substantial angle.
        assert!(max_pan > 30f64.to_radians(), "max pan {max_pan}");
    }

    #[test]
    fn five_sequences_reproduce_paper_scale_pose_count() {
        // 5 sequences, 8698 poses total at 30 Hz.
        let durations = [60.0, 60.0, 60.0, 60.0, 1498.0 / 30.0];
        let total: usize = durations
            .iter()
            .enumerate()
            .map(|(i, &d)| generate_trajectory(TrajectoryKind::Freehand, d, 30.0, i as u64).len())
            .sum();
        assert_eq!(total, 8698);
    }

    #[test]
    fn render_projects_exactly_without_noise() {
        let rig = StereoRig::default();
        let scene = generate_scene(11, default_room(), 500);
        let camera = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1000.0));
        let frame = render_stereo_frame(
            &scene,
            &camera,
            &rig,
            Frustum::default(),
            &NoiseModel::noiseless(),
            1,
        );
        assert!(!frame.observations.is_empty());
        let world_to_cam = camera.invert();
        for obs in &frame.observations {
            let p_world = scene.landmarks[obs.feature_id as usize].1;
            let p_cam = world_to_cam.transform_point(&p_world);
            let expect = rig.project_left(&p_cam).unwrap();
            assert_relative_eq!(obs.px_left, expect, epsilon = 1e-12);
            if let Some(px_right) = obs.px_right {
                let expect_r = rig.project_right(&p_cam).unwrap();
                assert_relative_eq!(px_right, expect_r, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn render_respects_detection_probability() {
        let rig = StereoRig::default();
        let scene = generate_scene(12, default_room(), 500);
        let camera = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1000.0));
        let mut noise = NoiseModel::noiseless();
        noise.detection_prob = 0.0;
        let frame = render_stereo_frame(&scene, &camera, &rig, Frustum::default(), &noise, 2);
        assert!(frame.observations.is_empty());
    }

    #[test]
    fn render_corruption_rate_matches_binomial() {
        let rig = StereoRig::default();
        let scene = generate_scene(13, default_room(), 3000);
        let camera = RigidTransform::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), std::f64::consts::FRAC_PI_2),
            Vector3::new(0.0, 0.0, 1500.0),
        );
        let mut noise = NoiseModel::noiseless();
        noise.id_corruption_prob = 0.3;
        let mut total = 0usize;
        let mut corrupted = 0usize;
        let mut seed = 0u64;
        while total < 10_000 {
            let frame = render_stereo_frame(&scene, &camera, &rig, Frustum::default(), &noise, seed);
            total += frame.observations.len();
            corrupted += frame.corrupted.iter().filter(|&&c| c).count();
            seed += 1;
        }
        let rate = corrupted as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.03, "corruption rate {rate}");
    }

    #[test]
    fn render_visibility_is_rigidly_invariant() {
        let rig = StereoRig::default();
        let scene = generate_scene(14, default_room(), 800);
        let camera = RigidTransform::from_translation(Vector3::new(100.0, -50.0, 1200.0));
        let g = RigidTransform::from_axis_angle(
            &Unit::new_normalize(Vector3::new(0.2, 0.5, 0.8)),
            0.9,
            Vector3::new(400.0, -150.0, 250.0),
        );
        let moved = Scene {
            landmarks: scene
                .landmarks
                .iter()
                .map(|&(id, p)| (id, g.transform_point(&p)))
                .collect(),
            bounds: scene.bounds,
            seed: scene.seed,
        };
        let a = render_stereo_frame(
            &scene,
            &camera,
            &rig,
            Frustum::default(),
            &NoiseModel::noiseless(),
            3,
        );
        let b = render_stereo_frame(
            &moved,
            &g.compose(&camera),
            &rig,
            Frustum::default(),
            &NoiseModel::noiseless(),
            3,
        );
        let ids_a: Vec<u64> = a.observations.iter().map(|o| o.feature_id).collect();
        let ids_b: Vec<u64> = b.observations.iter().map(|o| o.feature_id).collect();
        assert_eq!(ids_a, ids_b);
    }

    #[test]
    fn ots_chain_is_exact_without_noise() {
        let rig_setup = RigSetup::default();
        let trajectory = generate_trajectory(TrajectoryKind::Freehand, 10.0, 30.0, 5);
        let ots = simulate_ots(&trajectory, &rig_setup, &NoiseModel::noiseless(), 6);
        assert!(!ots.is_empty());
        for &(t, marker) in ots.samples() {
            let ee = pose_at(&trajectory, t).unwrap();
            let expect = rig_setup
                .t_rb_ots
                .invert()
                .compose(&ee)
                .compose(&rig_setup.t_ee_marker);
            assert!((marker.translation - expect.translation).norm() < 1e-9);
            assert!(xform::geodesic_angle(&marker.rotation, &expect.rotation) < 1e-9);
        }
    }

    #[test]
    fn ots_latency_shifts_every_timestamp() {
        let rig_setup = RigSetup::default();
        let trajectory = generate_trajectory(TrajectoryKind::Freehand, 10.0, 30.0, 7);
        let mut noise = NoiseModel::noiseless();
        noise.ots_latency_s = 0.040;
        let delayed = simulate_ots(&trajectory, &rig_setup, &noise, 8);
        let reference = simulate_ots(&trajectory, &rig_setup, &NoiseModel::noiseless(), 8);
        assert_eq!(delayed.len(), reference.len());
        for (d, r) in delayed.samples().iter().zip(reference.samples()) {
            assert_relative_eq!(d.0, r.0 + 0.040, epsilon = 1e-12);
        }
    }

    #[test]
    fn ots_rotation_noise_statistic() {
        let rig_setup = RigSetup::default();
        let trajectory = generate_trajectory(TrajectoryKind::Freehand, 60.0, 30.0, 9);
        let mut noise = NoiseModel::noiseless();
        noise.ots_rot_sigma_deg = 0.1;
        noise.ots_rate_hz = 200.0;
        let noisy = simulate_ots(&trajectory, &rig_setup, &noise, 10);
        let clean = {
            let mut n = NoiseModel::noiseless();
            n.ots_rate_hz = 200.0;
            simulate_ots(&trajectory, &rig_setup, &n, 10)
        };
        assert!(noisy.len() >= 10_000);
        let mean_dev: f64 = noisy
            .samples()
            .iter()
            .zip(clean.samples())
            .map(|(n, c)| xform::geodesic_angle(&n.1.rotation, &c.1.rotation).to_degrees())
            .sum::<f64>()
            / noisy.len() as f64;
        // |N(0, σ)| has mean σ·√(2/π) ≈ 0.0798 σ.
        let expect = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_dev - expect).abs() < 0.01,
            "mean deviation {mean_dev}, expected {expect}"
        );
    }

    #[test]
    fn us_slice_through_center_shows_full_disc() {
        let phantom = SpherePhantom::default();
        let mut spec = UsImageSpec::default();
        spec.speckle_sigma = 0.0;
        // Image plane z = 0 through the phantom center, centered pixel grid.
        let center_px = Vector3::new(
            -f64::from(spec.width / 2) * spec.spacing_mm.0,
            -f64::from(spec.height / 2) * spec.spacing_mm.1,
            0.0,
        );
        let pose = RigidTransform::from_translation(center_px);
        let frame = render_us_frame(
            &phantom,
            &pose,
            &RigidTransform::identity(),
            &spec,
            0.0,
            1,
        );
        // Maximum in-disc distance from the center approximates the radius.
        let iso = ((phantom.inside + phantom.outside) / 2.0) as f32;
        let mut max_r: f64 = 0.0;
        for v in 0..spec.height {
            for u in 0..spec.width {
                if frame.pixel(u, v) > iso {
                    let p = pose.transform_point(&Vector3::new(
                        f64::from(u) * spec.spacing_mm.0,
                        f64::from(v) * spec.spacing_mm.1,
                        0.0,
                    ));
                    max_r = max_r.max((p - phantom.center_mm).norm());
                }
            }
        }
        assert!(
            (max_r - phantom.radius_mm).abs() <= spec.spacing_mm.0 * 2.0_f64.sqrt(),
            "disc radius {max_r}"
        );
    }

    #[test]
    fn us_slice_beyond_radius_is_background() {
        let phantom = SpherePhantom::default();
        let mut spec = UsImageSpec::default();
        spec.speckle_sigma = 0.0;
        let pose = RigidTransform::from_translation(Vector3::new(-30.0, -30.0, 25.0));
        let frame = render_us_frame(&phantom, &pose, &RigidTransform::identity(), &spec, 0.0, 2);
        for &p in &frame.pixels {
            assert_eq!(p, phantom.outside as f32);
        }
    }

    #[test]
    fn us_offset_slice_obeys_chord_formula() {
        let phantom = SpherePhantom::default();
        let mut spec = UsImageSpec::default();
        spec.speckle_sigma = 0.0;
        let offset = 12.0;
        let pose = RigidTransform::from_translation(Vector3::new(
            -f64::from(spec.width / 2) * spec.spacing_mm.0,
            -f64::from(spec.height / 2) * spec.spacing_mm.1,
            offset,
        ));
        let frame = render_us_frame(&phantom, &pose, &RigidTransform::identity(), &spec, 0.0, 3);
        let expect = (phantom.radius_mm.powi(2) - offset * offset).sqrt();
        let iso = ((phantom.inside + phantom.outside) / 2.0) as f32;
        let mut max_r: f64 = 0.0;
        for v in 0..spec.height {
            for u in 0..spec.width {
                if frame.pixel(u, v) > iso {
                    let p = pose.transform_point(&Vector3::new(
                        f64::from(u) * spec.spacing_mm.0,
                        f64::from(v) * spec.spacing_mm.1,
                        0.0,
                    ));
                    let in_plane =
                        (p - phantom.center_mm - Vector3::new(0.0, 0.0, offset)).norm();
                    max_r = max_r.max(in_plane);
                }
            }
        }
        assert!(
            (max_r - expect).abs() <= spec.spacing_mm.0 * 2.0_f64.sqrt(),
            "chord radius {max_r}, expected {expect}"
        );
    }

    #[test]
    fn per_frame_seeds_are_deterministic() {
        let rig = StereoRig::default();
        let scene = generate_scene(15, default_room(), 400);
        let camera = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1000.0));
        let a = render_stereo_frame(&scene, &camera, &rig, Frustum::default(), &NoiseModel::default(), 9);
        let b = render_stereo_frame(&scene, &camera, &rig, Frustum::default(), &NoiseModel::default(), 9);
        assert_eq!(a.observations.len(), b.observations.len());
        for (x, y) in a.observations.iter().zip(&b.observations) {
            assert_eq!(x.feature_id, y.feature_id);
            assert_eq!(x.px_left, y.px_left);
            assert_eq!(x.px_right, y.px_right);
        }
    }
}
