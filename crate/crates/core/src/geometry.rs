//! Rigid-body math: unit quaternions, poses, SE(3) transforms, axis-angle
//! extraction and the continuous 6D rotation representation.
//!
//! All types are plain `Copy` values; every function is pure.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rotation angles below this are reported as near-zero; their axis is unreliable.
pub const ANGLE_NEAR_ZERO: f64 = 1e-6;

/// A unit quaternion `w + xi + yj + zk`.
///
/// Serialized as `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quat {
    fn from(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a quaternion from raw components and normalizes it.
    ///
    /// A zero input yields the identity.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-300 || !n.is_finite() {
            return Quat::IDENTITY;
        }
        Quat {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n < 1e-300 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Converts a rotation matrix to a quaternion (Shepperd's method).
    pub fn from_matrix(r: &Mat3) -> Self {
        let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let (w, x, y, z);
        if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Quat::new(w, x, y, z)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn vector(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn conjugate(&self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn negated(&self) -> Quat {
        Quat {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Rotates a vector by the sandwich product `q v q*`.
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let p = Quat {
            w: 0.0,
            x: v.x,
            y: v.y,
            z: v.z,
        };
        let r = self.hamilton(&p).hamilton(&self.conjugate());
        Vec3::new(r.x, r.y, r.z)
    }

    /// Hamilton product without renormalization.
    fn hamilton(&self, o: &Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    pub fn to_matrix(&self) -> Mat3 {
        quat_components_to_matrix(self.w, self.x, self.y, self.z)
    }
}

impl Mul for Quat {
    type Output = Quat;

    fn mul(self, rhs: Quat) -> Quat {
        let h = self.hamilton(&rhs);
        Quat::new(h.w, h.x, h.y, h.z)
    }
}

/// Standard quaternion-to-matrix map; exact for unit inputs.
pub(crate) fn quat_components_to_matrix(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Geodesic angle between two orientations, in `[0, pi]`.
///
/// Uses `|<q1, q2>|` so that `q` and `-q` are the same rotation.
pub fn quat_geodesic(q1: &Quat, q2: &Quat) -> f64 {
    // Equal to 2·acos(|<q1,q2>|) but well conditioned near zero.
    let s = if q1.dot(q2) < 0.0 { -1.0 } else { 1.0 };
    let a = [q1.w, q1.x, q1.y, q1.z];
    let b = [s * q2.w, s * q2.x, s * q2.y, s * q2.z];
    let mut diff = 0.0;
    let mut sum = 0.0;
    for i in 0..4 {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        sum += (a[i] + b[i]) * (a[i] + b[i]);
    }
    4.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Position plus orientation. Serialized as `[x, y, z, qw, qx, qy, qz]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 7]", into = "[f64; 7]")]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

impl From<[f64; 7]> for Pose {
    fn from(a: [f64; 7]) -> Self {
        Pose {
            position: Vec3::new(a[0], a[1], a[2]),
            orientation: Quat::new(a[3], a[4], a[5], a[6]),
        }
    }
}

impl From<Pose> for [f64; 7] {
    fn from(p: Pose) -> Self {
        let q = p.orientation;
        [
            p.position.x,
            p.position.y,
            p.position.z,
            q.w,
            q.x,
            q.y,
            q.z,
        ]
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: Vector3::new(0.0, 0.0, 0.0),
        orientation: Quat::IDENTITY,
    };

    pub fn new(position: Vec3, orientation: Quat) -> Self {
        Pose {
            position,
            orientation,
        }
    }

    pub fn from_translation(position: Vec3) -> Self {
        Pose::new(position, Quat::IDENTITY)
    }

    pub fn to_transform(&self) -> Transform3D {
        pose_to_transform(self)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.orientation.rotate(p) + self.position
    }
}

/// A rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform3D {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Transform3D {
    fn default() -> Self {
        Transform3D::IDENTITY
    }
}

impl Transform3D {
    pub const IDENTITY: Transform3D = Transform3D {
        rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        translation: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Transform3D {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Transform3D::new(Mat3::identity(), t)
    }

    /// Rotation by `angle` about the line through `point` along `axis`.
    pub fn about_axis(axis: &Vec3, point: &Vec3, angle: f64) -> Self {
        let r = rotation_from_axis_angle(axis, angle);
        Transform3D::new(r, point - r * point)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Transform3D) -> Transform3D {
        Transform3D {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform3D {
        let rt = self.rotation.transpose();
        Transform3D {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(self.translation, Quat::from_matrix(&self.rotation))
    }
}

impl Mul for Transform3D {
    type Output = Transform3D;

    fn mul(self, rhs: Transform3D) -> Transform3D {
        self.compose(&rhs)
    }
}

pub fn pose_to_transform(p: &Pose) -> Transform3D {
    Transform3D::new(p.orientation.to_matrix(), p.position)
}

pub fn transform_compose(a: &Transform3D, b: &Transform3D) -> Transform3D {
    a.compose(b)
}

pub fn transform_inverse(a: &Transform3D) -> Transform3D {
    a.inverse()
}

/// Rodrigues' formula.
pub fn rotation_from_axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let n = axis.norm();
    if n < 1e-300 {
        return Mat3::identity();
    }
    let k = axis / n;
    let kx = k.cross_matrix();
    Mat3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle {
    pub axis: Vec3,
    pub angle: f64,
    /// Set when `angle < ANGLE_NEAR_ZERO`; the axis is then a canonical placeholder.
    pub near_zero: bool,
}

impl AxisAngle {
    pub fn to_matrix(&self) -> Mat3 {
        rotation_from_axis_angle(&self.axis, self.angle)
    }
}

/// Flips `v` so its first non-negligible component is positive.
fn canonical_sign(v: Vec3) -> Vec3 {
    for i in 0..3 {
        if v[i].abs() > 1e-12 {
            return if v[i] < 0.0 { -v } else { v };
        }
    }
    v
}

/// Extracts `(axis, angle)` with `angle ∈ [0, pi]`.
pub fn axis_angle_from_rotation(r: &Mat3) -> AxisAngle {
    let mut q = Quat::from_matrix(r);
    if q.w < 0.0 {
        q = q.negated();
    }
    let v = q.vector();
    let s = v.norm();
    let angle = 2.0 * s.atan2(q.w);
    if angle < ANGLE_NEAR_ZERO || s < 1e-300 {
        return AxisAngle {
            axis: Vec3::x(),
            angle,
            near_zero: true,
        };
    }
    let mut axis = v / s;
    if (PI - angle) < 1e-12 {
        axis = canonical_sign(axis);
    }
    AxisAngle {
        axis,
        angle,
        near_zero: false,
    }
}

/// Two raw (un-normalized) columns of a rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl Rot6D {
    pub fn from_matrix(r: &Mat3) -> Self {
        Rot6D {
            a1: r.column(0).into_owned(),
            a2: r.column(1).into_owned(),
        }
    }

    /// Gram–Schmidt on `(a1, a2)`; the third column is `b1 × b2`.
    pub fn to_matrix(&self) -> Result<Mat3> {
        let n1 = self.a1.norm();
        if n1 < 1e-9 {
            return Err(Error::DegenerateRotation6D);
        }
        let b1 = self.a1 / n1;
        let u2 = self.a2 - b1 * b1.dot(&self.a2);
        let n2 = u2.norm();
        if n2 < 1e-9 * self.a2.norm().max(1.0) {
            return Err(Error::DegenerateRotation6D);
        }
        let b2 = u2 / n2;
        let b3 = b1.cross(&b2);
        Ok(Mat3::from_columns(&[b1, b2, b3]))
    }
}

pub fn rot6d_to_quat(r: &Rot6D) -> Result<Quat> {
    Ok(Quat::from_matrix(&r.to_matrix()?))
}
