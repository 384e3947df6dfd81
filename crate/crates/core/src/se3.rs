//! Rigid transforms stored as a unit quaternion plus a translation.
//!
//! Quaternions are kept in canonical sign (scalar part `w >= 0`) so that
//! sequences of rotations stay continuous when fed to the forecaster.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Quat = Quaternion<f64>;

/// Flip the sign of `q` so that its scalar part is nonnegative.
pub fn canonical(q: Quat) -> Quat {
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Normalize and canonicalize. Returns `None` for a (near) zero quaternion.
pub fn normalize_quat(q: Quat) -> Option<Quat> {
    let n = q.norm();
    if !(n > 1e-300) || !n.is_finite() {
        return None;
    }
    // already-unit inputs pass through bit-exact, so re-normalizing is idempotent
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Some(canonical(q));
    }
    Some(canonical(q / n))
}

/// Quaternion from `[w, x, y, z]`.
pub fn quat_from_wxyz(v: [f64; 4]) -> Quat {
    Quaternion::new(v[0], v[1], v[2], v[3])
}

pub fn quat_to_wxyz(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Unit quaternion for the rotation vector `v` (axis times angle in radians).
pub fn quat_exp(v: &Vec3) -> Quat {
    let angle = v.norm();
    if angle < 1e-12 {
        // second-order expansion keeps the map smooth at the origin
        let q = Quaternion::new(1.0 - angle * angle / 8.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
        return q / q.norm();
    }
    let half = 0.5 * angle;
    let s = half.sin() / angle;
    Quaternion::new(half.cos(), s * v.x, s * v.y, s * v.z)
}

pub fn quat_from_axis_angle(axis: &Vec3, angle: f64) -> Quat {
    canonical(quat_exp(&(axis.normalize() * angle)))
}

/// Rotate `v` by the unit quaternion `q` (q v q*).
pub fn rotate(q: &Quat, v: &Vec3) -> Vec3 {
    let u = q.imag();
    let uv = u.cross(v);
    v + 2.0 * q.w * uv + 2.0 * u.cross(&uv)
}

pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    UnitQuaternion::new_unchecked(*q).to_rotation_matrix().into_inner()
}

pub fn quat_from_matrix(m: &Matrix3<f64>) -> Quat {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
    canonical(*UnitQuaternion::from_rotation_matrix(&rot).quaternion())
}

/// Angle (radians) of the relative rotation between two unit quaternions,
/// ignoring the double cover.
pub fn quat_angle_between(a: &Quat, b: &Quat) -> f64 {
    let d = a.dot(b).abs().min(1.0);
    2.0 * d.acos()
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Se3Repr", into = "Se3Repr")]
pub struct Se3 {
    rotation: Quat,
    pub translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct Se3Repr {
    q: [f64; 4],
    t: [f64; 3],
}

impl From<Se3Repr> for Se3 {
    fn from(r: Se3Repr) -> Self {
        Se3::new(quat_from_wxyz(r.q), Vec3::from(r.t))
    }
}

impl From<Se3> for Se3Repr {
    fn from(s: Se3) -> Self {
        Se3Repr {
            q: quat_to_wxyz(&s.rotation),
            t: [s.translation.x, s.translation.y, s.translation.z],
        }
    }
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, normalizing and canonicalizing the rotation.
    /// A zero quaternion is replaced by the identity rotation.
    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation: normalize_quat(rotation).unwrap_or_else(Quaternion::identity),
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Quaternion::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        Self::new(quat_from_axis_angle(axis, angle), translation)
    }

    pub fn from_matrix(r: &Matrix3<f64>, t: Vec3) -> Self {
        Self::new(quat_from_matrix(r), t)
    }

    pub fn rotation(&self) -> &Quat {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        rotate(&self.rotation, p) + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3::new(
            self.rotation * other.rotation,
            rotate(&self.rotation, &other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> Se3 {
        let qi = self.rotation.conjugate();
        Se3::new(qi, -rotate(&qi, &self.translation))
    }

    /// Right-multiplies the rotation by `exp(delta)` (a local increment).
    pub fn with_local_rotation(&self, delta: &Vec3) -> Se3 {
        Se3::new(self.rotation * quat_exp(delta), self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
    }
}
