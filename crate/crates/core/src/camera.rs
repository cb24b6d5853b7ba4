//! Pinhole intrinsics and rigid camera poses.
//!
//! Camera frame: x right, y down, z along the optical axis. Pixel `(m, n)`
//! is column `m`, row `n`, with its center at integer image coordinates.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Field-of-view based constructor with the principal point at the image center.
    pub fn from_fov(width: usize, height: usize, horizontal_fov_deg: f64) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * horizontal_fov_deg.to_radians()).tan();
        Self::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be non-zero"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `Q^-1 (m, n, 1)^T`: the camera-frame ray through a pixel, scaled to z = 1.
    #[inline]
    pub fn ray(&self, m: f64, n: f64) -> Vector3<f64> {
        Vector3::new((m - self.cx) / self.fx, (n - self.cy) / self.fy, 1.0)
    }

    /// Continuous image coordinates of a camera-frame point, `None` behind the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Nearest pixel to a camera-frame point if it falls inside the image.
    #[inline]
    pub fn project_to_pixel(&self, p: &Vector3<f64>) -> Option<(usize, usize)> {
        let (u, v) = self.project(p)?;
        let (m, n) = (u.round(), v.round());
        if m < 0.0 || n < 0.0 || m >= self.width as f64 || n >= self.height as f64 {
            return None;
        }
        Some((m as usize, n as usize))
    }
}

/// Camera-to-world rigid transform `x_world = R x_cam + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation3::identity(), t)
    }

    /// Builds a pose from an arbitrary 3x3 matrix, rejecting anything that is
    /// not a proper rotation within 1e-9.
    pub fn from_matrix(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "not a rotation: |R^T R - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(Pose::new(Rotation3::from_matrix_unchecked(r), t))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Pose::new(q.to_rotation_matrix(), t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    /// Camera at `eye` looking at `target`; image "up" follows `up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("up vector parallel to viewing direction"))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_columns(&[right, down, forward]);
        Ok(Pose::new(Rotation3::from_matrix_unchecked(r), eye))
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World point into the camera frame: `R^T (x - t)`.
    #[inline]
    pub fn inverse_transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Left-multiplies by `exp(xi)`, `xi = (omega, v)`, using the rotation
    /// exponential and a plain translation increment.
    pub fn left_perturb(&self, xi: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(xi[0], xi[1], xi[2]);
        let v = Vector3::new(xi[3], xi[4], xi[5]);
        let dr = Rotation3::new(omega);
        Pose::new(dr * self.rotation, dr * self.translation + v)
    }

    /// Angle of the relative rotation, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        (self.rotation.inverse() * other.rotation).angle()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}
