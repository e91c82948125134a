//! Temporal pose-stream synchronization and freehand 3D ultrasound
//! compounding.
//!
//! Tracking sources run on their own clocks; [`estimate_latency`] recovers
//! the offset between two streams by cross-correlating their angular-speed
//! signals, which are invariant to the coordinate frames involved.
//! [`compound`] then maps every ultrasound pixel through the probe pose at
//! its frame timestamp into a voxel volume (forward compounding with mean
//! accumulation), and [`fit_sphere`] quantifies reconstruction quality on a
//! ball phantom.

use crate::xform::{self, RigidTransform};
use nalgebra::{Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UsfuseError {
    #[error("timestamps must be strictly increasing (violated at index {index})")]
    NonMonotonicTimestamps { index: usize },
    #[error("time {t} s outside stream range [{first}, {last}] s")]
    OutOfRange { t: f64, first: f64, last: f64 },
    #[error("streams overlap {got:.3} s, need at least {need:.3} s")]
    InsufficientOverlap { got: f64, need: f64 },
    #[error("latency unobservable: angular speed is too static")]
    UnobservableLatency,
    #[error("no ultrasound pixel intersected the volume")]
    EmptyVolume,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid volume spec: {0}")]
    InvalidSpec(String),
    #[error("empty stream")]
    EmptyStream,
}

impl UsfuseError {
    pub fn category(&self) -> &'static str {
        match self {
            UsfuseError::NonMonotonicTimestamps { .. } => "non-monotonic-timestamps",
            UsfuseError::OutOfRange { .. } => "out-of-range",
            UsfuseError::InsufficientOverlap { .. } => "insufficient-overlap",
            UsfuseError::UnobservableLatency => "unobservable-latency",
            UsfuseError::EmptyVolume => "empty-volume",
            UsfuseError::InsufficientData(_) => "insufficient-data",
            UsfuseError::InvalidSpec(_) => "invalid-spec",
            UsfuseError::EmptyStream => "empty-stream",
        }
    }
}

/// A timestamped pose sequence from one tracking source.
///
/// Timestamps are seconds and strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPoseStream {
    pub source: String,
    samples: Vec<(f64, RigidTransform)>,
}

impl TimedPoseStream {
    pub fn new(
        source: impl Into<String>,
        samples: Vec<(f64, RigidTransform)>,
    ) -> Result<Self, UsfuseError> {
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(UsfuseError::NonMonotonicTimestamps { index: i + 1 });
            }
        }
        Ok(Self {
            source: source.into(),
            samples,
        })
    }

    pub fn samples(&self) -> &[(f64, RigidTransform)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_time(&self) -> Option<f64> {
        self.samples.first().map(|s| s.0)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.0)
    }

    /// A copy with all timestamps shifted by `dt` seconds.
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            source: self.source.clone(),
            samples: self.samples.iter().map(|&(t, p)| (t + dt, p)).collect(),
        }
    }

    /// Total path length of the translation trajectory, mm.
    pub fn path_length_mm(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| (w[1].1.translation - w[0].1.translation).norm())
            .sum()
    }
}

/// Interpolate the stream pose at time `t` (no extrapolation).
pub fn pose_at(stream: &TimedPoseStream, t: f64) -> Result<RigidTransform, UsfuseError> {
    let samples = stream.samples();
    let (first, last) = match (stream.first_time(), stream.last_time()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(UsfuseError::EmptyStream),
    };
    if t < first || t > last {
        return Err(UsfuseError::OutOfRange { t, first, last });
    }
    // Index of the first sample with timestamp >= t.
    let idx = samples.partition_point(|&(ts, _)| ts < t);
    if samples[idx].0 == t {
        return Ok(samples[idx].1);
    }
    let (t0, p0) = samples[idx - 1];
    let (t1, p1) = samples[idx];
    let alpha = (t - t0) / (t1 - t0);
    Ok(xform::interpolate(&p0, &p1, alpha))
}

/// Angular-speed signal of a stream: geodesic angle between consecutive
/// rotations divided by the time step, located at interval midpoints.
fn angular_speed_signal(stream: &TimedPoseStream) -> Vec<(f64, f64)> {
    stream
        .samples()
        .windows(2)
        .map(|w| {
            let dt = w[1].0 - w[0].0;
            let speed = xform::geodesic_angle(&w[0].1.rotation, &w[1].1.rotation) / dt;
            ((w[0].0 + w[1].0) / 2.0, speed)
        })
        .collect()
}

fn interp_signal(signal: &[(f64, f64)], t: f64) -> f64 {
    let idx = signal.partition_point(|&(ts, _)| ts < t);
    if idx == 0 {
        return signal[0].1;
    }
    if idx >= signal.len() {
        return signal[signal.len() - 1].1;
    }
    let (t0, v0) = signal[idx - 1];
    let (t1, v1) = signal[idx];
    v0 + (v1 - v0) * (t - t0) / (t1 - t0)
}

fn median_dt(signal: &[(f64, f64)]) -> f64 {
    let mut dts: Vec<f64> = signal.windows(2).map(|w| w[1].0 - w[0].0).collect();
    dts.sort_by(f64::total_cmp);
    dts[dts.len() / 2]
}

/// Minimum stream overlap required for latency estimation, seconds.
pub const MIN_LATENCY_OVERLAP_S: f64 = 2.0;

/// Estimate the clock offset of `target` relative to `reference`.
///
/// A positive result means `target` timestamps run late by that amount;
/// subtracting it from the target timestamps aligns the streams. The offset
/// is found by maximizing the normalized cross-correlation of the two
/// angular-speed signals over `± search_window_s`, with quadratic
/// interpolation of the correlation peak.
pub fn estimate_latency(
    reference: &TimedPoseStream,
    target: &TimedPoseStream,
    search_window_s: f64,
) -> Result<f64, UsfuseError> {
    if reference.len() < 3 || target.len() < 3 {
        return Err(UsfuseError::InsufficientData(
            "latency estimation needs at least 3 samples per stream".into(),
        ));
    }
    let sig_ref = angular_speed_signal(reference);
    let sig_tgt = angular_speed_signal(target);
    let lo = sig_ref[0].0.max(sig_tgt[0].0);
    let hi = sig_ref[sig_ref.len() - 1].0.min(sig_tgt[sig_tgt.len() - 1].0);
    let overlap = hi - lo;
    if overlap < MIN_LATENCY_OVERLAP_S {
        return Err(UsfuseError::InsufficientOverlap {
            got: overlap.max(0.0),
            need: MIN_LATENCY_OVERLAP_S,
        });
    }
    let usable = overlap - 2.0 * search_window_s;
    if usable < 0.5 {
        return Err(UsfuseError::InsufficientOverlap {
            got: overlap,
            need: 2.0 * search_window_s + 0.5,
        });
    }

    let grid_dt = (median_dt(&sig_ref).min(median_dt(&sig_tgt)) / 8.0).clamp(1e-4, 0.02);
    let start = lo + search_window_s;
    let count = (usable / grid_dt).floor() as usize;
    let ref_grid: Vec<f64> = (0..count)
        .map(|i| interp_signal(&sig_ref, start + i as f64 * grid_dt))
        .collect();

    let mean_ref = ref_grid.iter().sum::<f64>() / count as f64;
    let var_ref = ref_grid.iter().map(|v| (v - mean_ref).powi(2)).sum::<f64>() / count as f64;
    if var_ref.sqrt() < 1e-6 {
        return Err(UsfuseError::UnobservableLatency);
    }

    let max_shift = (search_window_s / grid_dt).floor() as i64;
    let mut best_k = 0i64;
    let mut best_corr = f64::NEG_INFINITY;
    let mut correlations = Vec::with_capacity((2 * max_shift + 1) as usize);
    for k in -max_shift..=max_shift {
        let delta = k as f64 * grid_dt;
        let tgt_grid: Vec<f64> = (0..count)
            .map(|i| interp_signal(&sig_tgt, start + i as f64 * grid_dt + delta))
            .collect();
        let mean_tgt = tgt_grid.iter().sum::<f64>() / count as f64;
        let var_tgt = tgt_grid.iter().map(|v| (v - mean_tgt).powi(2)).sum::<f64>() / count as f64;
        if var_tgt.sqrt() < 1e-6 {
            correlations.push(f64::NEG_INFINITY);
            continue;
        }
        let cov = ref_grid
            .iter()
            .zip(&tgt_grid)
            .map(|(r, t)| (r - mean_ref) * (t - mean_tgt))
            .sum::<f64>()
            / count as f64;
        let corr = cov / (var_ref.sqrt() * var_tgt.sqrt());
        correlations.push(corr);
        if corr > best_corr {
            best_corr = corr;
            best_k = k;
        }
    }
    if !best_corr.is_finite() {
        return Err(UsfuseError::UnobservableLatency);
    }

    // Quadratic interpolation of the correlation peak for sub-grid accuracy.
    let idx = (best_k + max_shift) as usize;
    let mut offset = best_k as f64 * grid_dt;
    if idx > 0 && idx + 1 < correlations.len() {
        let (cm, c0, cp) = (correlations[idx - 1], correlations[idx], correlations[idx + 1]);
        let denom = cm - 2.0 * c0 + cp;
        if denom.abs() > 1e-15 && cm.is_finite() && cp.is_finite() {
            offset += 0.5 * (cm - cp) / denom * grid_dt;
        }
    }
    // The target leads the reference by `offset` on the correlation grid,
    // which means its timestamps run late by the same amount.
    Ok(offset)
}

/// Geometry and storage layout of a voxel volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    /// Voxel counts (nx, ny, nz); x is the fastest-varying storage axis.
    pub dims: [usize; 3],
    /// Isotropic voxel spacing, mm.
    pub spacing_mm: f64,
    /// Center of voxel (0, 0, 0) in the volume frame, mm.
    pub origin_mm: Vector3<f64>,
    /// Volume frame in world coordinates.
    pub orientation: RigidTransform,
}

impl VolumeSpec {
    fn validate(&self) -> Result<(), UsfuseError> {
        if self.spacing_mm <= 0.0 {
            return Err(UsfuseError::InvalidSpec(format!(
                "spacing must be positive, got {}",
                self.spacing_mm
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(UsfuseError::InvalidSpec(format!(
                "all dims must be nonzero, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Axis-aligned voxel grid accumulating compounded intensities.
///
/// Each cell holds a scalar sum and a weight; the cell value is the weighted
/// mean and is defined only where the weight is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub spec: VolumeSpec,
    // Cached inverse of spec.orientation for the per-pixel deposit path.
    world_to_local: RigidTransform,
    sums: Vec<f64>,
    weights: Vec<f64>,
}

impl VoxelVolume {
    pub fn new(spec: VolumeSpec) -> Result<Self, UsfuseError> {
        spec.validate()?;
        let n = spec.voxel_count();
        Ok(Self {
            world_to_local: spec.orientation.invert(),
            spec,
            sums: vec![0.0; n],
            weights: vec![0.0; n],
        })
    }

    fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.spec.dims[0] * (j + self.spec.dims[1] * k)
    }

    /// Mean intensity of a voxel, or `None` where nothing was deposited.
    pub fn value(&self, i: usize, j: usize, k: usize) -> Option<f64> {
        let f = self.flat(i, j, k);
        (self.weights[f] > 0.0).then(|| self.sums[f] / self.weights[f])
    }

    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weights[self.flat(i, j, k)]
    }

    /// Voxel index containing a world point, if inside the grid.
    pub fn world_to_index(&self, p_world: &Vector3<f64>) -> Option<[usize; 3]> {
        let local = self.world_to_local.transform_point(p_world);
        let rel = (local - self.spec.origin_mm) / self.spec.spacing_mm;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = rel[a].round();
            if r < 0.0 || r >= self.spec.dims[a] as f64 {
                return None;
            }
            idx[a] = r as usize;
        }
        Some(idx)
    }

    /// World position of a voxel center.
    pub fn voxel_center_world(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let local = self.spec.origin_mm
            + Vector3::new(i as f64, j as f64, k as f64) * self.spec.spacing_mm;
        self.spec.orientation.transform_point(&local)
    }

    /// Deposit an intensity at a world position; returns false if outside.
    pub fn deposit(&mut self, p_world: &Vector3<f64>, value: f64) -> bool {
        match self.world_to_index(p_world) {
            Some([i, j, k]) => {
                let f = self.flat(i, j, k);
                self.sums[f] += value;
                self.weights[f] += 1.0;
                true
            }
            None => false,
        }
    }

    pub fn filled_voxels(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Mean-value array in storage order (NaN where the weight is zero);
    /// used by the raw-volume writer.
    pub fn mean_values(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(&self.weights)
            .map(|(&s, &w)| if w > 0.0 { s / w } else { f64::NAN })
            .collect()
    }
}

/// A single 2D ultrasound frame: row-major intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UsFrame {
    pub timestamp_s: f64,
    pub width: u32,
    pub height: u32,
    /// Pixel spacing (sx, sy) in mm/px.
    pub spacing_mm: (f64, f64),
    /// Row-major, `width * height` values.
    pub pixels: Vec<f32>,
}

impl UsFrame {
    pub fn pixel(&self, u: u32, v: u32) -> f32 {
        self.pixels[(v * self.width + u) as usize]
    }
}

/// Compounding options.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompoundConfig {
    /// Run the 6-neighbor hole-filling pass after accumulation.
    pub hole_fill: bool,
    /// A hole is filled only when at least this many of its 6 neighbors hold
    /// data.
    pub hole_fill_min_neighbors: usize,
}

impl Default for CompoundConfig {
    fn default() -> Self {
        Self {
            hole_fill: true,
            hole_fill_min_neighbors: 4,
        }
    }
}

/// Result of compounding: the volume plus frame bookkeeping.
#[derive(Debug, Clone)]
pub struct CompoundOutcome {
    pub volume: VoxelVolume,
    pub frames_used: usize,
    /// Frames whose timestamps fell outside the tracking range.
    pub frames_skipped: usize,
    pub holes_filled: usize,
}

/// Forward-compound tracked ultrasound frames into a voxel volume.
///
/// Every pixel of every frame is mapped to world coordinates through the
/// interpolated probe pose at the frame timestamp (`T_world_us = pose ∘
/// t_rgb_us`) and deposited into its nearest voxel with weight 1; the voxel
/// value is the mean of its deposits. Frames outside the tracked interval are
/// skipped and counted, never extrapolated.
pub fn compound(
    frames: &[UsFrame],
    tracking: &TimedPoseStream,
    t_rgb_us: &RigidTransform,
    spec: VolumeSpec,
    config: &CompoundConfig,
) -> Result<CompoundOutcome, UsfuseError> {
    let mut volume = VoxelVolume::new(spec)?;
    let (first, last) = match (tracking.first_time(), tracking.last_time()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(UsfuseError::EmptyStream),
    };
    let mut used = 0;
    let mut skipped = 0;
    let mut deposited = 0usize;
    for frame in frames {
        if frame.timestamp_s < first || frame.timestamp_s > last {
            skipped += 1;
            continue;
        }
        let t_world_rgb = pose_at(tracking, frame.timestamp_s)?;
        let t_world_us = t_world_rgb.compose(t_rgb_us);
        let (sx, sy) = frame.spacing_mm;
        for v in 0..frame.height {
            for u in 0..frame.width {
                let p_us = Vector3::new(f64::from(u) * sx, f64::from(v) * sy, 0.0);
                let p_world = t_world_us.transform_point(&p_us);
                if volume.deposit(&p_world, f64::from(frame.pixel(u, v))) {
                    deposited += 1;
                }
            }
        }
        used += 1;
    }
    if deposited == 0 {
        return Err(UsfuseError::EmptyVolume);
    }

    let mut holes_filled = 0;
    if config.hole_fill {
        holes_filled = fill_holes(&mut volume, config.hole_fill_min_neighbors);
    }
    Ok(CompoundOutcome {
        volume,
        frames_used: used,
        frames_skipped: skipped,
        holes_filled,
    })
}

/// One hole-filling pass: zero-weight voxels with enough filled 6-neighbors
/// (computed from the pre-pass state) receive the mean of those neighbors.
fn fill_holes(volume: &mut VoxelVolume, min_neighbors: usize) -> usize {
    let [nx, ny, nz] = volume.spec.dims;
    let mut fills: Vec<(usize, f64)> = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if volume.weight(i, j, k) > 0.0 {
                    continue;
                }
                let mut neighbor_sum = 0.0;
                let mut neighbor_count = 0usize;
                let candidates = [
                    (i.wrapping_sub(1), j, k),
                    (i + 1, j, k),
                    (i, j.wrapping_sub(1), k),
                    (i, j + 1, k),
                    (i, j, k.wrapping_sub(1)),
                    (i, j, k + 1),
                ];
                for (ci, cj, ck) in candidates {
                    if ci < nx && cj < ny && ck < nz {
                        if let Some(v) = volume.value(ci, cj, ck) {
                            neighbor_sum += v;
                            neighbor_count += 1;
                        }
                    }
                }
                if neighbor_count >= min_neighbors {
                    fills.push((volume.flat(i, j, k), neighbor_sum / neighbor_count as f64));
                }
            }
        }
    }
    for &(f, v) in &fills {
        volume.sums[f] = v;
        volume.weights[f] = 1.0;
    }
    fills.len()
}

/// Least-squares sphere fit to iso-surface voxels.
#[derive(Debug, Clone, Copy)]
pub struct SphereFit {
    pub center_mm: Vector3<f64>,
    pub radius_mm: f64,
    /// RMS of the radial surface residuals, mm.
    pub rms_residual_mm: f64,
    pub boundary_voxels: usize,
}

/// Fit a sphere to the boundary of the thresholded volume.
///
/// Boundary voxels (value ≥ `iso_threshold` with at least one 6-neighbor
/// below it or empty) seed an algebraic least-squares sphere, refined by
/// Gauss-Newton on the radial residuals. Needs at least 10 boundary voxels.
pub fn fit_sphere(volume: &VoxelVolume, iso_threshold: f64) -> Result<SphereFit, UsfuseError> {
    let [nx, ny, nz] = volume.spec.dims;
    let filled = |i: usize, j: usize, k: usize| -> bool {
        i < nx && j < ny && k < nz && volume.value(i, j, k).is_some_and(|v| v >= iso_threshold)
    };
    let mut boundary: Vec<Vector3<f64>> = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !filled(i, j, k) {
                    continue;
                }
                let at_edge = i == 0 || j == 0 || k == 0 || i == nx - 1 || j == ny - 1 || k == nz - 1;
                let exposed = at_edge
                    || !(filled(i - 1, j, k)
                        && filled(i + 1, j, k)
                        && filled(i, j - 1, k)
                        && filled(i, j + 1, k)
                        && filled(i, j, k - 1)
                        && filled(i, j, k + 1));
                if exposed {
                    boundary.push(volume.voxel_center_world(i, j, k));
                }
            }
        }
    }
    if boundary.len() < 10 {
        return Err(UsfuseError::InsufficientData(format!(
            "only {} boundary voxel(s) at iso threshold {iso_threshold}",
            boundary.len()
        )));
    }

    // Algebraic fit around the centroid: ‖x‖² = 2c·x + (r² − ‖c‖²).
    let centroid: Vector3<f64> = boundary.iter().sum::<Vector3<f64>>() / boundary.len() as f64;
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for p in &boundary {
        let x = p - centroid;
        let row = Vector4::new(2.0 * x.x, 2.0 * x.y, 2.0 * x.z, 1.0);
        ata += row * row.transpose();
        atb += row * x.norm_squared();
    }
    let sol = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| UsfuseError::InsufficientData("degenerate sphere system".into()))?;
    let mut center = centroid + Vector3::new(sol.x, sol.y, sol.z);
    let d = sol.w + Vector3::new(sol.x, sol.y, sol.z).norm_squared();
    if d <= 0.0 {
        return Err(UsfuseError::InsufficientData(
            "algebraic sphere fit collapsed".into(),
        ));
    }
    let mut radius = d.sqrt();

    // Geometric refinement on f = ‖x − c‖ − r.
    for _ in 0..20 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        let mut cost = 0.0;
        for p in &boundary {
            let diff = p - center;
            let dist = diff.norm();
            if dist < 1e-12 {
                continue;
            }
            let f = dist - radius;
            let jrow = Vector4::new(-diff.x / dist, -diff.y / dist, -diff.z / dist, -1.0);
            jtj += jrow * jrow.transpose();
            jtr += jrow * f;
            cost += f * f;
        }
        let step = match jtj.lu().solve(&(-jtr)) {
            Some(s) => s,
            None => break,
        };
        center += Vector3::new(step.x, step.y, step.z);
        radius += step.w;
        let _ = cost;
        if step.norm() < 1e-12 {
            break;
        }
    }

    let rms = (boundary
        .iter()
        .map(|p| ((p - center).norm() - radius).powi(2))
        .sum::<f64>()
        / boundary.len() as f64)
        .sqrt();
    Ok(SphereFit {
        center_mm: center,
        radius_mm: radius,
        rms_residual_mm: rms,
        boundary_voxels: boundary.len(),
    })
}
