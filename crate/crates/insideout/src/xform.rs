//! SE(3) rigid transforms and rotation utilities.
//!
//! [`RigidTransform`] is the universal currency of the crate: every frame
//! chain, tracker output and calibration result is one of these. Rotation is
//! stored as a unit quaternion and renormalized after every composition so
//! that long chains (thousands of poses) do not drift away from SO(3).
//!
//! Conventions:
//!
//! - a transform maps points *from* its source frame *to* its target frame:
//!   `p_target = R * p_source + t`;
//! - `compose(a, b)` applies `b` first, then `a` (matrix order `a * b`);
//! - translations are in millimetres, angles in radians;
//! - slerp takes the shortest arc (one quaternion is negated when the dot
//!   product is negative);
//! - a rotation with angle below [`DEGENERATE_ANGLE`] reports the
//!   conventional axis `(1, 0, 0)`.

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::Mul;

/// Rotation angles at or below this are treated as axis-degenerate.
pub const DEGENERATE_ANGLE: f64 = 1e-9;

/// A rigid-body transform: rotation (unit quaternion) plus translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    /// Unit quaternion, `(w, x, y, z)` storage order at I/O boundaries.
    pub rotation: UnitQuaternion<f64>,
    /// Translation in millimetres.
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    /// The identity transform.
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Build from raw quaternion components in `(w, x, y, z)` order; the
    /// quaternion is normalized. The norm must be nonzero and finite.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        let q = Quaternion::new(w, x, y, z);
        assert!(
            q.norm() > 1e-12 && q.norm().is_finite(),
            "quaternion norm must be finite and nonzero"
        );
        Self {
            rotation: UnitQuaternion::from_quaternion(q),
            translation,
        }
    }

    /// Build from an orthonormal rotation matrix and a translation.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation,
        }
    }

    /// Rotation about `axis` by `angle` radians plus a translation.
    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_axis_angle(axis, angle),
            translation,
        }
    }

    /// Pure translation.
    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// Composition `self ∘ other`: `other` is applied first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        // Renormalize so chains of arbitrary length stay on SO(3).
        let q = self.rotation.into_inner() * other.rotation.into_inner();
        RigidTransform {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// The inverse transform: `t.compose(&t.invert())` is the identity.
    pub fn invert(&self) -> RigidTransform {
        let inv_rot = self.rotation.inverse();
        RigidTransform {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// Map a point from the source frame into the target frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotate a direction vector (no translation).
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        to_axis_angle(&self.rotation).angle
    }

    /// Rotation as a 3×3 matrix.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Components in I/O order `(tx, ty, tz, qw, qx, qy, qz)`.
    pub fn to_record(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q.w,
            q.i,
            q.j,
            q.k,
        ]
    }

    /// Inverse of [`RigidTransform::to_record`].
    ///
    /// A quaternion already unit within 1e-9 is taken as-is so that
    /// write-read cycles are bit-exact; anything else is normalized.
    pub fn from_record(r: &[f64; 7]) -> Self {
        let q = Quaternion::new(r[3], r[4], r[5], r[6]);
        let norm = q.norm();
        assert!(norm > 1e-12 && norm.is_finite(), "quaternion norm must be finite and nonzero");
        let rotation = if (norm - 1.0).abs() <= 1e-9 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Self {
            rotation,
            translation: Vector3::new(r[0], r[1], r[2]),
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_record().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = <[f64; 7]>::deserialize(deserializer)?;
        let norm = (r[3] * r[3] + r[4] * r[4] + r[5] * r[5] + r[6] * r[6]).sqrt();
        if !norm.is_finite() || norm < 1e-6 {
            return Err(D::Error::custom("quaternion norm must be finite and nonzero"));
        }
        Ok(Self::from_record(&r))
    }
}

/// Rotation expressed as a unit axis and an angle in `[0, π]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Unit<Vector3<f64>>,
    /// Radians, in `[0, π]`.
    pub angle: f64,
}

impl AxisAngle {
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&self.axis, self.angle)
    }
}

/// Geodesic distance on SO(3): the angle of `r1⁻¹ r2`, in `[0, π]`.
///
/// Symmetric in its arguments and insensitive to the quaternion double cover.
pub fn geodesic_angle(r1: &UnitQuaternion<f64>, r2: &UnitQuaternion<f64>) -> f64 {
    // atan2 form: well-conditioned near 0 and π, unlike 2·acos(dot).
    let rel = r1.inverse().into_inner() * r2.into_inner();
    2.0 * rel.imag().norm().atan2(rel.w.abs())
}

/// Convert a unit quaternion to axis-angle form with angle in `[0, π]`.
///
/// Rotations with angle ≤ [`DEGENERATE_ANGLE`] report the conventional axis
/// `(1, 0, 0)`; downstream metrics exclude such rotations anyway.
pub fn to_axis_angle(r: &UnitQuaternion<f64>) -> AxisAngle {
    // Map to the w ≥ 0 hemisphere so the angle lands in [0, π].
    let q = if r.w < 0.0 {
        -r.into_inner()
    } else {
        r.into_inner()
    };
    let v = q.imag();
    let norm = v.norm();
    let angle = 2.0 * norm.atan2(q.w);
    if angle <= DEGENERATE_ANGLE {
        AxisAngle {
            axis: Vector3::x_axis(),
            angle,
        }
    } else {
        AxisAngle {
            axis: Unit::new_normalize(v),
            angle,
        }
    }
}

/// Interpolate between two transforms: shortest-arc slerp on rotation,
/// linear interpolation on translation. `alpha = 0` gives `a`, `alpha = 1`
/// gives `b`.
pub fn interpolate(a: &RigidTransform, b: &RigidTransform, alpha: f64) -> RigidTransform {
    debug_assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
    let qa = a.rotation.into_inner();
    let mut qb = b.rotation.into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let q = if dot >= 1.0 - 1e-12 {
        // Nearly identical rotations: normalized lerp avoids 0/0 in slerp.
        qa.lerp(&qb, alpha)
    } else {
        let omega = dot.min(1.0).acos();
        let sin_omega = omega.sin();
        qa * (((1.0 - alpha) * omega).sin() / sin_omega)
            + qb * ((alpha * omega).sin() / sin_omega)
    };
    RigidTransform {
        rotation: UnitQuaternion::from_quaternion(q),
        translation: a.translation.lerp(&b.translation, alpha),
    }
}
