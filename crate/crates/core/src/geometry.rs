//! Rigid transforms and the six-parameter Euler pose used by every optimizer
//! in the crate.
//!
//! Rotations follow the 3-2-1 convention `R = Rz(rz) · Ry(ry) · Rx(rx)`.
//! A transform `T^{b:a}` maps coordinates expressed in frame `a` into frame
//! `b`: `p_b = R · p_a + t`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pitch values closer than this to ±π/2 cannot be converted to Euler angles.
pub const GIMBAL_LOCK_TOLERANCE: f64 = 1e-6;

/// Wraps an angle into `[-π, π)`.
pub fn canonical_angle(angle: f64) -> f64 {
    let wrapped = angle - TAU * ((angle + PI) / TAU).floor();
    if wrapped >= PI {
        wrapped - TAU
    } else if wrapped < -PI {
        wrapped + TAU
    } else {
        wrapped
    }
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Six-parameter rigid transform `[rx, ry, rz, tx, ty, tz]` (radians, meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct Pose6 {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Pose6 {
    pub const IDENTITY: Pose6 = Pose6 {
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
    };

    pub fn new(rx: f64, ry: f64, rz: f64, tx: f64, ty: f64, tz: f64) -> Self {
        Pose6 {
            rx,
            ry,
            rz,
            tx,
            ty,
            tz,
        }
    }

    pub fn from_translation(tx: f64, ty: f64, tz: f64) -> Self {
        Pose6::new(0.0, 0.0, 0.0, tx, ty, tz)
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.rx, self.ry, self.rz, self.tx, self.ty, self.tz]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [rx, ry, rz, tx, ty, tz] => Ok(Pose6::new(*rx, *ry, *rz, *tx, *ty, *tz)),
            _ => Err(Error::ParameterLength {
                expected: 6,
                found: v.len(),
            }),
        }
    }

    /// Same pose with every angle wrapped into `[-π, π)`.
    pub fn canonical(self) -> Self {
        Pose6 {
            rx: canonical_angle(self.rx),
            ry: canonical_angle(self.ry),
            rz: canonical_angle(self.rz),
            ..self
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot_z(self.rz) * rot_y(self.ry) * rot_x(self.rx)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation(),
            translation: self.translation(),
        }
    }
}

impl From<[f64; 6]> for Pose6 {
    fn from(v: [f64; 6]) -> Self {
        Pose6::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }
}

impl From<Pose6> for [f64; 6] {
    fn from(p: Pose6) -> Self {
        p.to_array()
    }
}

/// Element of SE(3) stored as a rotation matrix and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        RigidTransform::new(rotation, Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform::new(Matrix3::identity(), translation)
    }

    /// `R · p + t`
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction; translation is ignored.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Returns the transform mapping `p ↦ self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Recovers canonical Euler parameters.
    ///
    /// Fails when the pitch lies within [`GIMBAL_LOCK_TOLERANCE`] of ±π/2,
    /// where roll and yaw are no longer separable.
    pub fn to_pose(&self) -> Result<Pose6> {
        let r = &self.rotation;
        let cos_pitch = r[(0, 0)].hypot(r[(1, 0)]);
        let ry = (-r[(2, 0)]).atan2(cos_pitch);
        if FRAC_PI_2 - ry.abs() < GIMBAL_LOCK_TOLERANCE {
            return Err(Error::GimbalLock { pitch: ry });
        }
        let rx = r[(2, 1)].atan2(r[(2, 2)]);
        let rz = r[(1, 0)].atan2(r[(0, 0)]);
        let t = self.translation;
        Ok(Pose6::new(rx, ry, rz, t.x, t.y, t.z).canonical())
    }

    /// Largest elementwise deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    /// Rotation angle (radians) and translation distance (meters) separating
    /// two transforms.
    pub fn distance(&self, other: &RigidTransform) -> (f64, f64) {
        let delta = self.rotation * other.rotation.transpose();
        let cos = ((delta.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos is ill-conditioned near zero; use the skew part there.
        let skew = Vector3::new(
            delta[(2, 1)] - delta[(1, 2)],
            delta[(0, 2)] - delta[(2, 0)],
            delta[(1, 0)] - delta[(0, 1)],
        );
        let angle = (0.5 * skew.norm()).atan2(cos);
        (angle, (self.translation - other.translation).norm())
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

impl Mul<Vector3<f64>> for &RigidTransform {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.apply(&rhs)
    }
}

/// Rotation vector (axis · angle) of `R`, used for small rotation differences.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    if c < 0.0 {
        // Near π the skew part vanishes; recover the axis from the symmetric part.
        return nalgebra::Rotation3::from_matrix_unchecked(*r).scaled_axis();
    }
    let s = w.norm();
    if s < 1e-300 {
        return w;
    }
    w * (s.atan2(c) / s)
}
