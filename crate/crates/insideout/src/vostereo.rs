//! Feature-based stereo visual odometry with a persistent landmark map.
//!
//! The tracker consumes per-frame [`FeatureObservation`]s whose identities
//! play the role of matched descriptors. One stereo frame initializes a
//! metric map (the fixed baseline provides absolute scale), every following
//! frame is localized against the map by RANSAC over 3D-2D correspondences
//! plus Gauss-Newton refinement, and a keyframe policy grows the map as the
//! camera leaves explored territory. Pure rotations are fine: each frame can
//! triangulate its own stereo matches, so no translation is ever required.
//!
//! Pose convention: all public poses are camera-in-world, with the world
//! frame fixed to the first camera frame (the first reported pose is the
//! identity). Everything is deterministic given the observation stream and
//! the configured seed.

use crate::optics::StereoRig;
use crate::xform::RigidTransform;
use nalgebra::{Matrix2x3, Matrix3, Matrix6, Unit, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoError {
    #[error("map initialization failed: {matched} stereo match(es), need {need}")]
    InitFailure { matched: usize, need: usize },
    #[error("no consensus: best support {best} inlier(s), need {need}")]
    NoConsensus { best: usize, need: usize },
    #[error("insufficient correspondences: got {got}, need at least {need}")]
    InsufficientCorrespondences { got: usize, need: usize },
}

impl VoError {
    pub fn category(&self) -> &'static str {
        match self {
            VoError::InitFailure { .. } => "init-failure",
            VoError::NoConsensus { .. } => "no-consensus",
            VoError::InsufficientCorrespondences { .. } => "insufficient-correspondences",
        }
    }
}

/// One detected feature: an opaque identity standing in for a matched
/// descriptor, the left-image pixel, and the right-image pixel when the
/// feature was matched across the stereo pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation {
    pub feature_id: u64,
    pub px_left: Vector2<f64>,
    pub px_right: Option<Vector2<f64>>,
}

/// A mapped 3D point.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub id: u64,
    pub position_world: Vector3<f64>,
    pub observation_count: u32,
    /// Value of the session check counter when last associated.
    last_seen_check: u64,
    /// Stereo triangulations folded into the position (running mean).
    triangulations: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingStatus {
    Tracking,
    Lost,
}

/// RANSAC settings for the 3D-2D pose search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Stereo reprojection inlier threshold, pixels.
    pub inlier_threshold_px: f64,
    pub min_inliers: usize,
    /// Early-exit confidence for the adaptive iteration bound.
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            inlier_threshold_px: 2.0,
            min_inliers: 10,
            confidence: 0.99,
        }
    }
}

/// Tracker configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VoConfig {
    /// Minimum stereo-matched landmarks to accept map initialization.
    pub min_init_landmarks: usize,
    pub ransac: RansacConfig,
    /// Keyframe trigger: fraction of the last keyframe's landmarks still
    /// tracked falls below this.
    pub keyframe_tracked_fraction: f64,
    /// Keyframe trigger: translation since the last keyframe, mm.
    pub keyframe_translation_mm: f64,
    /// Keyframe trigger: rotation since the last keyframe, radians.
    pub keyframe_rotation_rad: f64,
    /// Landmarks unseen for this many tracked frames are culling candidates.
    pub cull_after_checks: u64,
    /// Only landmarks observed fewer times than this are ever culled.
    pub cull_min_observations: u32,
    pub seed: u64,
}

impl Default for VoConfig {
    fn default() -> Self {
        Self {
            min_init_landmarks: 50,
            ransac: RansacConfig::default(),
            keyframe_tracked_fraction: 0.6,
            keyframe_translation_mm: 100.0,
            keyframe_rotation_rad: 10f64.to_radians(),
            cull_after_checks: 50,
            cull_min_observations: 3,
            seed: 0,
        }
    }
}

/// Per-frame tracking outcome.
#[derive(Debug, Clone, Copy)]
pub struct TrackOutcome {
    /// Camera-in-world pose; on a lost frame this is the last tracked pose.
    pub pose: RigidTransform,
    pub lost: bool,
    /// Map associations found for the frame.
    pub associations: usize,
    pub inliers: usize,
    pub keyframe_inserted: bool,
    pub new_landmarks: usize,
}

/// Summary counters for reporting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SessionStats {
    pub map_size: usize,
    pub keyframes: usize,
    pub frames_tracked: u64,
    pub frames_lost: u64,
    pub landmarks_culled: u64,
    pub mean_inlier_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub pose: RigidTransform,
    pub observed_ids: Vec<u64>,
}

/// Stereo visual odometry session.
#[derive(Debug, Clone)]
pub struct TrackSession {
    rig: StereoRig,
    config: VoConfig,
    map: BTreeMap<u64, Landmark>,
    keyframes: Vec<Keyframe>,
    current_pose: RigidTransform,
    status: TrackingStatus,
    trajectory: Vec<(f64, RigidTransform)>,
    rng: ChaCha8Rng,
    check_counter: u64,
    frames_tracked: u64,
    frames_lost: u64,
    landmarks_culled: u64,
    inlier_ratio_sum: f64,
}

impl TrackSession {
    /// Initialize the map from the first stereo frame.
    ///
    /// Every stereo-matched observation is triangulated into the map; the
    /// world frame is this first camera frame, so the current pose starts at
    /// the identity. Observations with degenerate stereo geometry are
    /// skipped, not fatal.
    pub fn init_map(
        rig: StereoRig,
        frame: &[FeatureObservation],
        config: VoConfig,
    ) -> Result<TrackSession, VoError> {
        let mut map = BTreeMap::new();
        for obs in frame {
            let Some(px_right) = obs.px_right else {
                continue;
            };
            if let Ok(p) = rig.triangulate(&obs.px_left, &px_right) {
                map.insert(
                    obs.feature_id,
                    Landmark {
                        id: obs.feature_id,
                        position_world: p,
                        observation_count: 1,
                        last_seen_check: 0,
                        triangulations: 1,
                    },
                );
            }
        }
        if map.len() < config.min_init_landmarks {
            return Err(VoError::InitFailure {
                matched: map.len(),
                need: config.min_init_landmarks,
            });
        }
        let observed_ids: Vec<u64> = map.keys().copied().collect();
        let seed = config.seed;
        Ok(TrackSession {
            rig,
            config,
            map,
            keyframes: vec![Keyframe {
                pose: RigidTransform::identity(),
                observed_ids,
            }],
            current_pose: RigidTransform::identity(),
            status: TrackingStatus::Tracking,
            trajectory: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            check_counter: 0,
            frames_tracked: 0,
            frames_lost: 0,
            landmarks_culled: 0,
            inlier_ratio_sum: 0.0,
        })
    }

    pub fn current_pose(&self) -> RigidTransform {
        self.current_pose
    }

    pub fn status(&self) -> TrackingStatus {
        self.status
    }

    pub fn map_len(&self) -> usize {
        self.map.len()
    }

    pub fn landmark(&self, id: u64) -> Option<&Landmark> {
        self.map.get(&id)
    }

    pub fn landmarks(&self) -> impl Iterator<Item = &Landmark> {
        self.map.values()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    /// Tracked poses only; lost frames are not appended.
    pub fn trajectory(&self) -> &[(f64, RigidTransform)] {
        &self.trajectory
    }

    pub fn stats(&self) -> SessionStats {
        SessionStats {
            map_size: self.map.len(),
            keyframes: self.keyframes.len(),
            frames_tracked: self.frames_tracked,
            frames_lost: self.frames_lost,
            landmarks_culled: self.landmarks_culled,
            mean_inlier_ratio: if self.frames_tracked > 0 {
                self.inlier_ratio_sum / self.frames_tracked as f64
            } else {
                0.0
            },
        }
    }

    /// Track one frame against the map.
    ///
    /// Associates observations by feature identity, estimates the pose with
    /// RANSAC plus Gauss-Newton refinement, and runs the keyframe policy. A
    /// frame that cannot be localized puts the session into `Lost`; the
    /// session keeps re-associating against the full map on later frames, so
    /// it relocalizes as soon as enough known identities reappear.
    pub fn track_frame(&mut self, frame: &[FeatureObservation], timestamp_s: f64) -> TrackOutcome {
        self.check_counter += 1;
        let correspondences: Vec<(Vector3<f64>, FeatureObservation)> = frame
            .iter()
            .filter_map(|obs| {
                self.map
                    .get(&obs.feature_id)
                    .map(|lm| (lm.position_world, *obs))
            })
            .collect();
        let associations = correspondences.len();
        if associations < 4 {
            return self.lost_outcome(associations);
        }

        let ransac = match ransac_pnp(
            &correspondences,
            &self.rig,
            &self.current_pose,
            &self.config.ransac,
            &mut self.rng,
        ) {
            Ok(r) => r,
            Err(_) => return self.lost_outcome(associations),
        };
        let (coarse_pose, inlier_mask) = ransac;
        let inliers: Vec<(Vector3<f64>, FeatureObservation)> = correspondences
            .iter()
            .zip(&inlier_mask)
            .filter(|(_, &keep)| keep)
            .map(|(c, _)| *c)
            .collect();
        let refined = match refine_pose(&coarse_pose, &inliers, &self.rig) {
            Ok(r) => r,
            Err(_) => return self.lost_outcome(associations),
        };

        self.current_pose = refined.pose;
        self.status = TrackingStatus::Tracking;
        self.frames_tracked += 1;
        self.inlier_ratio_sum += inliers.len() as f64 / associations as f64;
        self.trajectory.push((timestamp_s, self.current_pose));

        let mut inlier_ids: Vec<u64> = Vec::with_capacity(inliers.len());
        for ((_, obs), &keep) in correspondences.iter().zip(&inlier_mask) {
            if keep {
                inlier_ids.push(obs.feature_id);
                if let Some(lm) = self.map.get_mut(&obs.feature_id) {
                    lm.observation_count += 1;
                    lm.last_seen_check = self.check_counter;
                }
            }
        }

        let (keyframe_inserted, new_landmarks) = self.keyframe_policy(frame, &inlier_ids);
        let culled = self.cull_landmarks();
        self.landmarks_culled += culled;

        TrackOutcome {
            pose: self.current_pose,
            lost: false,
            associations,
            inliers: inliers.len(),
            keyframe_inserted,
            new_landmarks,
        }
    }

    fn lost_outcome(&mut self, associations: usize) -> TrackOutcome {
        self.status = TrackingStatus::Lost;
        self.frames_lost += 1;
        TrackOutcome {
            pose: self.current_pose,
            lost: true,
            associations,
            inliers: 0,
            keyframe_inserted: false,
            new_landmarks: 0,
        }
    }

    /// Decide whether the tracked frame becomes a keyframe and, if so, insert
    /// newly triangulated landmarks.
    ///
    /// Triggers: tracked fraction of the last keyframe's landmarks below the
    /// configured threshold, or translation/rotation since the last keyframe
    /// beyond their limits.
    fn keyframe_policy(&mut self, frame: &[FeatureObservation], inlier_ids: &[u64]) -> (bool, usize) {
        let last = self.keyframes.last().expect("session always has a keyframe");
        let tracked = {
            let inlier_set: std::collections::BTreeSet<u64> = inlier_ids.iter().copied().collect();
            let hits = last
                .observed_ids
                .iter()
                .filter(|id| inlier_set.contains(id))
                .count();
            hits as f64 / last.observed_ids.len().max(1) as f64
        };
        let rel = last.pose.invert().compose(&self.current_pose);
        let need_keyframe = tracked < self.config.keyframe_tracked_fraction
            || rel.translation.norm() > self.config.keyframe_translation_mm
            || rel.rotation_angle() > self.config.keyframe_rotation_rad;
        if !need_keyframe {
            return (false, 0);
        }

        let mut new_landmarks = 0;
        let mut observed: Vec<u64> = inlier_ids.to_vec();
        let inlier_set: std::collections::BTreeSet<u64> = inlier_ids.iter().copied().collect();
        for obs in frame {
            let Some(px_right) = obs.px_right else {
                continue;
            };
            if let Some(lm) = self.map.get_mut(&obs.feature_id) {
                // Fold this keyframe's stereo measurement into the landmark:
                // a running mean over triangulations beats any single noisy
                // depth estimate. Only consensus observations may refine.
                if inlier_set.contains(&obs.feature_id) {
                    if let Ok(p_cam) = self.rig.triangulate(&obs.px_left, &px_right) {
                        let p_world = self.current_pose.transform_point(&p_cam);
                        lm.triangulations += 1;
                        let w = 1.0 / f64::from(lm.triangulations);
                        lm.position_world = lm.position_world * (1.0 - w) + p_world * w;
                    }
                }
                continue;
            }
            if let Ok(p_cam) = self.rig.triangulate(&obs.px_left, &px_right) {
                let p_world = self.current_pose.transform_point(&p_cam);
                self.map.insert(
                    obs.feature_id,
                    Landmark {
                        id: obs.feature_id,
                        position_world: p_world,
                        observation_count: 1,
                        last_seen_check: self.check_counter,
                        triangulations: 1,
                    },
                );
                observed.push(obs.feature_id);
                new_landmarks += 1;
            }
        }
        self.keyframes.push(Keyframe {
            pose: self.current_pose,
            observed_ids: observed,
        });
        (true, new_landmarks)
    }

    /// Drop rarely-observed landmarks that have not been seen for a while;
    /// keeps the map adaptive instead of growing without bound.
    fn cull_landmarks(&mut self) -> u64 {
        let horizon = self.config.cull_after_checks;
        let min_obs = self.config.cull_min_observations;
        let counter = self.check_counter;
        let before = self.map.len();
        self.map.retain(|_, lm| {
            lm.observation_count >= min_obs || counter - lm.last_seen_check <= horizon
        });
        (before - self.map.len()) as u64
    }
}

/// Stereo reprojection error of a correspondence under a camera-from-world
/// pose: the larger of the left and right pixel errors (right only when the
/// observation has a stereo match). `None` if the point falls behind a camera.
fn reprojection_error(
    t_cam_world: &RigidTransform,
    landmark: &Vector3<f64>,
    obs: &FeatureObservation,
    rig: &StereoRig,
) -> Option<f64> {
    let p_cam = t_cam_world.transform_point(landmark);
    let left = rig.left.project(&p_cam).ok()?;
    let mut err = (left - obs.px_left).norm();
    if let Some(px_right) = obs.px_right {
        let right = rig.project_right(&p_cam).ok()?;
        err = err.max((right - px_right).norm());
    }
    Some(err)
}

/// Robust 3D-2D pose estimation.
///
/// Samples minimal sets of 4 correspondences, solves each with a short
/// Gauss-Newton descent seeded at `prior` (the previous pose acts as motion
/// prior), scores candidates by stereo reprojection error and returns the
/// best consensus pose with its inlier mask. Deterministic for a given RNG
/// state. The returned pose is camera-in-world.
pub fn ransac_pnp(
    correspondences: &[(Vector3<f64>, FeatureObservation)],
    rig: &StereoRig,
    prior: &RigidTransform,
    config: &RansacConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RigidTransform, Vec<bool>), VoError> {
    let n = correspondences.len();
    if n < 4 {
        return Err(VoError::InsufficientCorrespondences { got: n, need: 4 });
    }

    let mut best_pose: Option<RigidTransform> = None;
    let mut best_mask = vec![false; n];
    let mut best_count = 0usize;
    let mut required = config.max_iterations;
    let mut iteration = 0usize;
    while iteration < required.min(config.max_iterations) {
        iteration += 1;
        // Draw 4 distinct indices.
        let mut sample = [0usize; 4];
        let mut filled = 0;
        while filled < 4 {
            let idx = rng.random_range(0..n);
            if !sample[..filled].contains(&idx) {
                sample[filled] = idx;
                filled += 1;
            }
        }
        let minimal: Vec<(Vector3<f64>, FeatureObservation)> =
            sample.iter().map(|&i| correspondences[i]).collect();
        let candidate = match refine_pose_with_iterations(prior, &minimal, rig, 10) {
            Ok(r) => r.pose,
            Err(_) => continue,
        };
        let t_cam_world = candidate.invert();
        let mut mask = vec![false; n];
        let mut count = 0;
        for (i, (lm, obs)) in correspondences.iter().enumerate() {
            if let Some(err) = reprojection_error(&t_cam_world, lm, obs, rig) {
                if err < config.inlier_threshold_px {
                    mask[i] = true;
                    count += 1;
                }
            }
        }
        if count > best_count {
            best_count = count;
            best_mask = mask;
            best_pose = Some(candidate);
            // Adaptive bound: stop once the consensus makes more samples
            // statistically pointless.
            let w = count as f64 / n as f64;
            let p_good = w.powi(4);
            required = if p_good > 1.0 - 1e-12 {
                iteration
            } else {
                let denom = (1.0 - p_good).ln();
                ((1.0 - config.confidence).ln() / denom).ceil().max(1.0) as usize
            };
        }
    }

    match best_pose {
        Some(pose) if best_count >= config.min_inliers => Ok((pose, best_mask)),
        _ => Err(VoError::NoConsensus {
            best: best_count,
            need: config.min_inliers,
        }),
    }
}

/// Result of nonlinear pose refinement.
#[derive(Debug, Clone, Copy)]
pub struct RefineResult {
    /// Camera-in-world pose.
    pub pose: RigidTransform,
    pub converged: bool,
    pub iterations: usize,
    /// RMS stereo reprojection error (per residual coordinate), pixels.
    pub initial_rms_px: f64,
    pub final_rms_px: f64,
}

/// Gauss-Newton refinement of a 6-DoF camera pose on stereo reprojection
/// residuals (left pixels always, right pixels where observed).
///
/// Converges when the update norm drops below 1e-12 (comfortably inside the
/// 1e-10 contract) or after 20 iterations.
/// If the cost rises three consecutive times, the initial pose is returned
/// with `converged = false`; the final RMS never exceeds the initial RMS.
pub fn refine_pose(
    pose0: &RigidTransform,
    inliers: &[(Vector3<f64>, FeatureObservation)],
    rig: &StereoRig,
) -> Result<RefineResult, VoError> {
    refine_pose_with_iterations(pose0, inliers, rig, 20)
}

fn refine_pose_with_iterations(
    pose0: &RigidTransform,
    inliers: &[(Vector3<f64>, FeatureObservation)],
    rig: &StereoRig,
    max_iterations: usize,
) -> Result<RefineResult, VoError> {
    if inliers.len() < 4 {
        return Err(VoError::InsufficientCorrespondences {
            got: inliers.len(),
            need: 4,
        });
    }
    // Optimize the camera-from-world transform with left-multiplied updates.
    let mut t_cw = pose0.invert();
    let initial = match evaluate_cost(&t_cw, inliers, rig) {
        Some(c) => c,
        None => {
            // A point already sits behind the camera: nothing to refine from.
            return Ok(RefineResult {
                pose: *pose0,
                converged: false,
                iterations: 0,
                initial_rms_px: f64::INFINITY,
                final_rms_px: f64::INFINITY,
            });
        }
    };
    let mut best_cost = initial.0;
    let mut best_t = t_cw;
    let mut last_cost = initial.0;
    let mut rising = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for _ in 0..max_iterations {
        iterations += 1;
        let Some((mut jtj, jtr)) = normal_equations(&t_cw, inliers, rig) else {
            break;
        };
        // Tiny Tikhonov floor keeps the solve well-posed for minimal sets.
        for d in 0..6 {
            jtj[(d, d)] += 1e-12;
        }
        let Some(step) = jtj.cholesky().map(|c| c.solve(&(-jtr))) else {
            break;
        };
        t_cw = apply_update(&t_cw, &step);
        let Some((cost, _)) = evaluate_cost(&t_cw, inliers, rig) else {
            break;
        };
        if cost < best_cost {
            best_cost = cost;
            best_t = t_cw;
        }
        if cost > last_cost {
            rising += 1;
            if rising >= 3 {
                // Diverging: hand back the starting pose, flagged.
                return Ok(RefineResult {
                    pose: *pose0,
                    converged: false,
                    iterations,
                    initial_rms_px: rms_from_cost(initial.0, initial.1),
                    final_rms_px: rms_from_cost(initial.0, initial.1),
                });
            }
        } else {
            rising = 0;
        }
        last_cost = cost;
        if step.norm() < 1e-12 {
            converged = true;
            break;
        }
    }

    let residual_count = evaluate_cost(&best_t, inliers, rig)
        .map(|(_, n)| n)
        .unwrap_or(1);
    Ok(RefineResult {
        pose: best_t.invert(),
        converged,
        iterations,
        initial_rms_px: rms_from_cost(initial.0, initial.1),
        final_rms_px: rms_from_cost(best_cost, residual_count),
    })
}

fn rms_from_cost(cost: f64, residuals: usize) -> f64 {
    (cost / residuals.max(1) as f64).sqrt()
}

/// Left-multiplied update `T ← (exp(φ), ρ) ∘ T` with `step = [ρ; φ]`.
fn apply_update(t_cw: &RigidTransform, step: &Vector6<f64>) -> RigidTransform {
    let rho = Vector3::new(step[0], step[1], step[2]);
    let phi = Vector3::new(step[3], step[4], step[5]);
    let angle = phi.norm();
    let dq = if angle < 1e-300 {
        UnitQuaternion::identity()
    } else {
        UnitQuaternion::from_axis_angle(&Unit::new_normalize(phi), angle)
    };
    RigidTransform::new(dq, rho).compose(t_cw)
}

/// Squared-residual sum and residual count; `None` if a point is behind a camera.
fn evaluate_cost(
    t_cw: &RigidTransform,
    inliers: &[(Vector3<f64>, FeatureObservation)],
    rig: &StereoRig,
) -> Option<(f64, usize)> {
    let mut cost = 0.0;
    let mut count = 0usize;
    for (lm, obs) in inliers {
        let p_cam = t_cw.transform_point(lm);
        let left = rig.left.project(&p_cam).ok()?;
        cost += (left - obs.px_left).norm_squared();
        count += 2;
        if let Some(px_right) = obs.px_right {
            let right = rig.project_right(&p_cam).ok()?;
            cost += (right - px_right).norm_squared();
            count += 2;
        }
    }
    Some((cost, count))
}

/// Pixel-versus-camera-point Jacobian of the distorted pinhole projection.
fn projection_jacobian(
    cam: &crate::optics::CameraIntrinsics,
    p_cam: &Vector3<f64>,
) -> Matrix2x3<f64> {
    let (x_, y_, z) = (p_cam.x, p_cam.y, p_cam.z);
    let x = x_ / z;
    let y = y_ / z;
    let r2 = x * x + y * y;
    let d = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2;
    let dd = cam.k1 + 2.0 * cam.k2 * r2; // ∂d/∂r² scale
    // ∂(x·d)/∂x etc.
    let dxd_dx = d + 2.0 * x * x * dd;
    let dxd_dy = 2.0 * x * y * dd;
    let dyd_dx = 2.0 * x * y * dd;
    let dyd_dy = d + 2.0 * y * y * dd;
    // ∂(x, y)/∂p_cam.
    let dx_dp = Vector3::new(1.0 / z, 0.0, -x_ / (z * z));
    let dy_dp = Vector3::new(0.0, 1.0 / z, -y_ / (z * z));
    let du = (dx_dp * dxd_dx + dy_dp * dxd_dy) * cam.fx;
    let dv = (dx_dp * dyd_dx + dy_dp * dyd_dy) * cam.fy;
    Matrix2x3::from_rows(&[du.transpose(), dv.transpose()])
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Accumulate JᵀJ and Jᵀr for the current camera-from-world estimate.
/// Residual order per correspondence: left (du, dv), then right (du, dv)
/// when present; update parameterization matches [`apply_update`].
fn normal_equations(
    t_cw: &RigidTransform,
    inliers: &[(Vector3<f64>, FeatureObservation)],
    rig: &StereoRig,
) -> Option<(Matrix6<f64>, Vector6<f64>)> {
    let mut jtj = Matrix6::<f64>::zeros();
    let mut jtr = Vector6::<f64>::zeros();
    let t_right_left = rig.t_left_right.invert();
    for (lm, obs) in inliers {
        let p_cam = t_cw.transform_point(lm);
        // ∂p_cam/∂[ρ, φ] = [I | −skew(p_cam)].
        let mut dp = nalgebra::Matrix3x6::<f64>::zeros();
        dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p_cam)));

        let left_px = rig.left.project(&p_cam).ok()?;
        let j_left = projection_jacobian(&rig.left, &p_cam) * dp;
        let r_left = left_px - obs.px_left;
        jtj += j_left.transpose() * j_left;
        jtr += j_left.transpose() * r_left;

        if let Some(px_right) = obs.px_right {
            let p_right = t_right_left.transform_point(&p_cam);
            let right_px = rig.right.project(&p_right).ok()?;
            let j_right =
                projection_jacobian(&rig.right, &p_right) * t_right_left.rotation_matrix() * dp;
            let r_right = right_px - px_right;
            jtj += j_right.transpose() * j_right;
            jtr += j_right.transpose() * r_right;
        }
    }
    Some((jtj, jtr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::CameraIntrinsics;
    use crate::xform;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn test_rig() -> StereoRig {
        let cam = CameraIntrinsics::new(615.0, 615.0, 320.0, 240.0, -0.02, 0.005, 640, 480).unwrap();
        StereoRig::new(
            cam,
            cam,
            RigidTransform::from_translation(Vector3::new(50.0, 0.0, 0.0)),
        )
        .unwrap()
    }

    /// Points filling a box in front of the initial camera.
    fn world_points(n: usize, seed: u64) -> Vec<(u64, Vector3<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u64)
            .map(|id| {
                (
                    id,
                    Vector3::new(
                        rng.random::<f64>() * 3000.0 - 1500.0,
                        rng.random::<f64>() * 2000.0 - 1000.0,
                        rng.random::<f64>() * 2500.0 + 1200.0,
                    ),
                )
            })
            .collect()
    }

    /// Project world points into both cameras; the test-side oracle that
    /// stands in for the scene renderer.
    fn render(
        points: &[(u64, Vector3<f64>)],
        rig: &StereoRig,
        cam_in_world: &RigidTransform,
        noise_sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<FeatureObservation> {
        let world_to_cam = cam_in_world.invert();
        let normal = Normal::new(0.0, noise_sigma.max(1e-300)).unwrap();
        let mut out = Vec::new();
        for &(id, p) in points {
            let p_cam = world_to_cam.transform_point(&p);
            let Ok(mut pl) = rig.project_left(&p_cam) else {
                continue;
            };
            if !rig.left.contains(&pl) {
                continue;
            }
            let pr = rig.project_right(&p_cam).ok().filter(|px| rig.right.contains(px));
            if noise_sigma > 0.0 {
                pl += Vector2::new(normal.sample(rng), normal.sample(rng));
            }
            let pr = pr.map(|mut px| {
                if noise_sigma > 0.0 {
                    px += Vector2::new(normal.sample(rng), normal.sample(rng));
                }
                px
            });
            out.push(FeatureObservation {
                feature_id: id,
                px_left: pl,
                px_right: pr,
            });
        }
        out
    }

    #[test]
    fn init_map_triangulates_noiseless_frame() {
        let rig = test_rig();
        let points = world_points(100, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let frame = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        assert!(frame.len() >= 60, "only {} visible", frame.len());
        let session = TrackSession::init_map(rig, &frame, VoConfig::default()).unwrap();
        assert_eq!(session.current_pose(), RigidTransform::identity());
        assert_eq!(session.keyframes().len(), 1);
        for lm in session.landmarks() {
            let truth = points[lm.id as usize].1;
            assert!(
                (lm.position_world - truth).norm() < 1e-6,
                "landmark {} error {}",
                lm.id,
                (lm.position_world - truth).norm()
            );
        }
    }

    #[test]
    fn init_map_needs_enough_matches() {
        let rig = test_rig();
        let points = world_points(10, 62);
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let frame = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        assert!(matches!(
            TrackSession::init_map(rig, &frame, VoConfig::default()),
            Err(VoError::InitFailure { .. })
        ));
    }

    #[test]
    fn init_map_skips_degenerate_matches() {
        let rig = test_rig();
        let points = world_points(200, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let mut frame = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        // Same pixel in both images of a rectified rig: parallel rays.
        frame.push(FeatureObservation {
            feature_id: 9_999,
            px_left: Vector2::new(300.0, 200.0),
            px_right: Some(Vector2::new(300.0, 200.0)),
        });
        let session = TrackSession::init_map(rig, &frame, VoConfig::default()).unwrap();
        assert!(session.landmark(9_999).is_none());
    }

    #[test]
    fn tracking_noiseless_sweep_is_exact() {
        let rig = test_rig();
        let points = world_points(400, 66);
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let init = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        let mut session = TrackSession::init_map(rig, &init, VoConfig::default()).unwrap();

        for i in 1..=300 {
            let t = f64::from(i) / 30.0;
            let truth = RigidTransform::from_axis_angle(
                &Vector3::y_axis(),
                0.002 * f64::from(i),
                Vector3::new(2.0 * f64::from(i), 0.5 * f64::from(i), 0.3 * f64::from(i)),
            );
            let frame = render(&points, &rig, &truth, 0.0, &mut rng);
            let outcome = session.track_frame(&frame, t);
            assert!(!outcome.lost, "lost at frame {i}");
            let err_t = (outcome.pose.translation - truth.translation).norm();
            let err_r = xform::geodesic_angle(&outcome.pose.rotation, &truth.rotation);
            assert!(err_t < 1e-6, "frame {i}: translation error {err_t}");
            assert!(err_r < 1e-7, "frame {i}: rotation error {err_r}");
        }
    }

    #[test]
    fn unknown_ids_set_lost_and_recovery_works() {
        let rig = test_rig();
        let points = world_points(200, 68);
        let mut rng = ChaCha8Rng::seed_from_u64(69);
        let init = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        let mut session = TrackSession::init_map(rig, &init, VoConfig::default()).unwrap();

        let strangers: Vec<FeatureObservation> = (0..100u64)
            .map(|i| FeatureObservation {
                feature_id: 1_000_000 + i,
                px_left: Vector2::new(100.0 + i as f64, 200.0),
                px_right: None,
            })
            .collect();
        let outcome = session.track_frame(&strangers, 0.1);
        assert!(outcome.lost);
        assert_eq!(session.status(), TrackingStatus::Lost);
        // Pose is reported but flagged; it is the last good pose.
        assert_eq!(outcome.pose, RigidTransform::identity());

        // Known identities reappear: relocalization by re-association.
        let frame = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        let outcome = session.track_frame(&frame, 0.2);
        assert!(!outcome.lost);
        assert_eq!(session.status(), TrackingStatus::Tracking);
    }

    fn correspondences_for_pose(
        points: &[(u64, Vector3<f64>)],
        rig: &StereoRig,
        pose: &RigidTransform,
        rng: &mut ChaCha8Rng,
        noise: f64,
    ) -> Vec<(Vector3<f64>, FeatureObservation)> {
        render(points, rig, pose, noise, rng)
            .into_iter()
            .map(|obs| (points[obs.feature_id as usize].1, obs))
            .collect()
    }

    #[test]
    fn ransac_all_inliers_exact_pose() {
        let rig = test_rig();
        let points = world_points(100, 70);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let truth = RigidTransform::from_axis_angle(
            &Vector3::z_axis(),
            0.05,
            Vector3::new(30.0, -10.0, 20.0),
        );
        let cs = correspondences_for_pose(&points, &rig, &truth, &mut rng, 0.0);
        assert!(cs.len() >= 50);
        let (pose, mask) = ransac_pnp(
            &cs,
            &rig,
            &RigidTransform::identity(),
            &RansacConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(mask.iter().all(|&b| b), "not all inliers");
        assert!((pose.translation - truth.translation).norm() < 1e-9);
        assert!(xform::geodesic_angle(&pose.rotation, &truth.rotation) < 1e-9);
    }

    #[test]
    fn ransac_rejects_corrupted_ids() {
        let rig = test_rig();
        let points = world_points(300, 72);
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let truth = RigidTransform::from_axis_angle(
            &Vector3::x_axis(),
            -0.03,
            Vector3::new(-20.0, 15.0, 10.0),
        );
        let mut cs = correspondences_for_pose(&points, &rig, &truth, &mut rng, 0.3);
        // Corrupt 30% of the identities: the observation now claims to be a
        // different landmark.
        let n = cs.len();
        let mut corrupted = vec![false; n];
        for i in 0..n {
            if rng.random::<f64>() < 0.3 {
                let victim = rng.random_range(0..points.len());
                if points[victim].1 != cs[i].0 {
                    cs[i].0 = points[victim].1;
                    corrupted[i] = true;
                }
            }
        }
        let (pose, mask) = ransac_pnp(
            &cs,
            &rig,
            &RigidTransform::identity(),
            &RansacConfig::default(),
            &mut rng,
        )
        .unwrap();
        for (i, &inlier) in mask.iter().enumerate() {
            assert!(
                !(inlier && corrupted[i]),
                "true outlier {i} admitted to the consensus"
            );
        }
        // The raw minimal-sample pose is noise-limited; refining on the
        // consensus set gives the noise-consistent estimate.
        assert!((pose.translation - truth.translation).norm() < 50.0);
        let inliers: Vec<(Vector3<f64>, FeatureObservation)> = cs
            .iter()
            .zip(&mask)
            .filter(|(_, &keep)| keep)
            .map(|(c, _)| *c)
            .collect();
        let refined = refine_pose(&pose, &inliers, &rig).unwrap();
        assert!(
            (refined.pose.translation - truth.translation).norm() < 1.0,
            "refined error {}",
            (refined.pose.translation - truth.translation).norm()
        );
    }

    #[test]
    fn ransac_requires_four_points() {
        let rig = test_rig();
        let points = world_points(3, 74);
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let cs = correspondences_for_pose(
            &points,
            &rig,
            &RigidTransform::identity(),
            &mut rng,
            0.0,
        );
        assert!(matches!(
            ransac_pnp(
                &cs,
                &rig,
                &RigidTransform::identity(),
                &RansacConfig::default(),
                &mut rng,
            ),
            Err(VoError::InsufficientCorrespondences { .. })
        ));
    }

    #[test]
    fn refine_is_fixed_point_at_ground_truth() {
        let rig = test_rig();
        let points = world_points(60, 76);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let truth = RigidTransform::from_axis_angle(
            &Vector3::y_axis(),
            0.1,
            Vector3::new(10.0, 5.0, -8.0),
        );
        let cs = correspondences_for_pose(&points, &rig, &truth, &mut rng, 0.0);
        let result = refine_pose(&truth, &cs, &rig).unwrap();
        assert!(result.converged);
        assert!((result.pose.translation - truth.translation).norm() < 1e-10);
        assert!(xform::geodesic_angle(&result.pose.rotation, &truth.rotation) < 1e-12);
        assert!(result.final_rms_px <= result.initial_rms_px);
    }

    #[test]
    fn refine_converges_from_perturbed_start() {
        let rig = test_rig();
        let points = world_points(80, 78);
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let truth = RigidTransform::from_axis_angle(
            &Vector3::z_axis(),
            -0.07,
            Vector3::new(25.0, -12.0, 40.0),
        );
        let cs = correspondences_for_pose(&points, &rig, &truth, &mut rng, 0.0);
        // 5 mm / 2° off the truth.
        let start = truth.compose(&RigidTransform::from_axis_angle(
            &Unit::new_normalize(Vector3::new(1.0, -2.0, 0.5)),
            2f64.to_radians(),
            Vector3::new(3.0, -2.0, 4.0) / (29f64).sqrt() * 5.0,
        ));
        let result = refine_pose(&start, &cs, &rig).unwrap();
        assert!(result.converged);
        assert!(
            (result.pose.translation - truth.translation).norm() < 1e-8,
            "translation error {}",
            (result.pose.translation - truth.translation).norm()
        );
        assert!(xform::geodesic_angle(&result.pose.rotation, &truth.rotation) < 1e-8);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let rig = test_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..100 {
            let p_world = Vector3::new(
                rng.random::<f64>() * 1000.0 - 500.0,
                rng.random::<f64>() * 800.0 - 400.0,
                rng.random::<f64>() * 2000.0 + 800.0,
            );
            let t_cw = RigidTransform::from_axis_angle(
                &Unit::new_normalize(Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                )),
                rng.random::<f64>() * 0.2,
                Vector3::new(
                    rng.random::<f64>() * 40.0 - 20.0,
                    rng.random::<f64>() * 40.0 - 20.0,
                    rng.random::<f64>() * 40.0 - 20.0,
                ),
            );
            let p_cam = t_cw.transform_point(&p_world);
            if p_cam.z < 100.0 {
                continue;
            }
            let Ok(px) = rig.left.project(&p_cam) else {
                continue;
            };
            let obs = FeatureObservation {
                feature_id: 0,
                px_left: px,
                px_right: None,
            };
            // Analytic residual Jacobian at this configuration.
            let mut dp = nalgebra::Matrix3x6::<f64>::zeros();
            dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&p_cam)));
            let j_analytic = projection_jacobian(&rig.left, &p_cam) * dp;

            // Central differences through the same update rule.
            let h = 1e-6;
            for col in 0..6 {
                let mut step = Vector6::zeros();
                step[col] = h;
                let plus = rig
                    .left
                    .project(&apply_update(&t_cw, &step).transform_point(&p_world))
                    .unwrap();
                step[col] = -h;
                let minus = rig
                    .left
                    .project(&apply_update(&t_cw, &step).transform_point(&p_world))
                    .unwrap();
                let numeric = (plus - minus) / (2.0 * h);
                for row in 0..2 {
                    let a = j_analytic[(row, col)];
                    let n = numeric[row];
                    let scale = a.abs().max(1.0);
                    assert!(
                        (a - n).abs() / scale < 1e-5,
                        "J[{row},{col}]: analytic {a}, numeric {n}, obs {obs:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn keyframes_only_when_needed() {
        let rig = test_rig();
        let points = world_points(300, 81);
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let init = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        let mut session = TrackSession::init_map(rig, &init, VoConfig::default()).unwrap();

        // Static camera: everything stays tracked, no new keyframes.
        for i in 1..=30 {
            let frame = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
            let outcome = session.track_frame(&frame, f64::from(i) / 30.0);
            assert!(!outcome.lost);
            assert!(!outcome.keyframe_inserted, "keyframe at static frame {i}");
        }
        assert_eq!(session.keyframes().len(), 1);
    }

    #[test]
    fn sweep_beyond_first_frustum_grows_map_and_survives() {
        let rig = test_rig();
        // A wide band of points so a long lateral sweep always sees structure.
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let points: Vec<(u64, Vector3<f64>)> = (0..3000u64)
            .map(|id| {
                (
                    id,
                    Vector3::new(
                        rng.random::<f64>() * 12_000.0 - 2_000.0,
                        rng.random::<f64>() * 2_000.0 - 1_000.0,
                        rng.random::<f64>() * 2_000.0 + 1_500.0,
                    ),
                )
            })
            .collect();
        let init = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        let mut session = TrackSession::init_map(rig, &init, VoConfig::default()).unwrap();
        let map0 = session.map_len();

        let mut keyframes = 0;
        for i in 1..=200 {
            // 4 m lateral sweep: far beyond the initial frustum.
            let truth =
                RigidTransform::from_translation(Vector3::new(20.0 * f64::from(i), 0.0, 0.0));
            let frame = render(&points, &rig, &truth, 0.0, &mut rng);
            let outcome = session.track_frame(&frame, f64::from(i) / 30.0);
            assert!(!outcome.lost, "lost at frame {i}");
            let err = (outcome.pose.translation - truth.translation).norm();
            assert!(err < 1e-4, "frame {i}: drift {err}");
            if outcome.keyframe_inserted {
                keyframes += 1;
            }
        }
        assert!(keyframes > 3, "only {keyframes} keyframes inserted");
        assert!(session.map_len() > map0, "map did not grow");

        // New landmarks sit at their true positions (noiseless rendering).
        for lm in session.landmarks() {
            let truth = points[lm.id as usize].1;
            assert!((lm.position_world - truth).norm() < 1e-4);
        }
    }

    #[test]
    fn trajectories_are_bit_identical_for_same_seed() {
        let rig = test_rig();
        let points = world_points(300, 84);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(85);
            let init = render(&points, &rig, &RigidTransform::identity(), 0.3, &mut rng);
            let mut session = TrackSession::init_map(rig, &init, VoConfig::default()).unwrap();
            for i in 1..=50 {
                let truth = RigidTransform::from_axis_angle(
                    &Vector3::y_axis(),
                    0.003 * f64::from(i),
                    Vector3::new(3.0 * f64::from(i), 0.0, 0.0),
                );
                let frame = render(&points, &rig, &truth, 0.3, &mut rng);
                session.track_frame(&frame, f64::from(i) / 30.0);
            }
            session.trajectory().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1.translation, y.1.translation);
            assert_eq!(
                x.1.rotation.quaternion().coords,
                y.1.rotation.quaternion().coords
            );
        }
    }

    #[test]
    fn pure_rotation_keeps_tracking() {
        let rig = test_rig();
        // Points all around the camera so a wide pan always sees structure.
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        let points: Vec<(u64, Vector3<f64>)> = (0..4000u64)
            .map(|id| {
                let azimuth = rng.random::<f64>() * std::f64::consts::TAU;
                let height = rng.random::<f64>() * 2000.0 - 1000.0;
                let radius = 2000.0 + rng.random::<f64>() * 1500.0;
                (
                    id,
                    Vector3::new(radius * azimuth.sin(), height, radius * azimuth.cos()),
                )
            })
            .collect();
        let init = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        let mut session = TrackSession::init_map(rig, &init, VoConfig::default()).unwrap();

        for i in 1..=240 {
            let pan = 40f64.to_radians() * (f64::from(i) / 60.0 * std::f64::consts::PI).sin();
            let truth =
                RigidTransform::from_axis_angle(&Vector3::y_axis(), pan, Vector3::zeros());
            let frame = render(&points, &rig, &truth, 0.0, &mut rng);
            let outcome = session.track_frame(&frame, f64::from(i) / 30.0);
            assert!(!outcome.lost, "lost at pan frame {i}");
            assert!(outcome.pose.translation.norm() < 1e-6);
            assert!(xform::geodesic_angle(&outcome.pose.rotation, &truth.rotation) < 1e-7);
        }
    }

    #[test]
    fn metric_scale_has_no_drift() {
        let rig = test_rig();
        let points = world_points(600, 87);
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let init = render(&points, &rig, &RigidTransform::identity(), 0.0, &mut rng);
        let mut session = TrackSession::init_map(rig, &init, VoConfig::default()).unwrap();

        let mut gt_length = 0.0;
        let mut previous = Vector3::zeros();
        for i in 1..=150 {
            let t = Vector3::new(6.0 * f64::from(i), 1.5 * f64::from(i), 0.0);
            let truth = RigidTransform::from_translation(t);
            gt_length += (t - previous).norm();
            previous = t;
            let frame = render(&points, &rig, &truth, 0.0, &mut rng);
            let outcome = session.track_frame(&frame, f64::from(i) / 30.0);
            assert!(!outcome.lost);
        }
        let mut vo_length = 0.0;
        let mut prev = Vector3::zeros();
        for (_, pose) in session.trajectory() {
            vo_length += (pose.translation - prev).norm();
            prev = pose.translation;
        }
        assert!(
            (vo_length - gt_length).abs() / gt_length < 1e-6,
            "length {vo_length} vs {gt_length}"
        );
    }
}
