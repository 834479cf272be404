//! Pose parameterisation, weak-perspective camera and rotation metrics.
//!
//! Conventions used throughout the crate:
//!
//! * world up is `+y`; the camera looks along `-z`, `+x` is image right;
//! * `R = R_z(inplane) · R_x(elevation) · R_y(azimuth)`, so azimuth spins the
//!   object about its up axis, elevation tilts it towards the camera and the
//!   in-plane angle rolls the result about the viewing axis;
//! * a camera-space point `p = R·x` lands at pixel `(cx + s·p.x, cy - s·p.y)`
//!   with depth `p.z`; larger depth is closer to the viewer.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Object pose as (azimuth, elevation, in-plane rotation) in radians.
///
/// Construction normalises the angles: azimuth into `[0, 2π)`, in-plane
/// into `(-π, π]`, and elevation is clamped to `[-π/2, π/2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    azimuth: f64,
    elevation: f64,
    inplane: f64,
}

impl Pose {
    pub fn new(azimuth: f64, elevation: f64, inplane: f64) -> Result<Self> {
        if !(azimuth.is_finite() && elevation.is_finite() && inplane.is_finite()) {
            return Err(Error::invalid(format!(
                "pose angles must be finite, got ({azimuth}, {elevation}, {inplane})"
            )));
        }
        Ok(Self {
            azimuth: wrap_azimuth(azimuth),
            elevation: elevation.clamp(-PI / 2.0, PI / 2.0),
            inplane: wrap_inplane(inplane),
        })
    }

    pub fn from_degrees(azimuth: f64, elevation: f64, inplane: f64) -> Result<Self> {
        Self::new(
            azimuth.to_radians(),
            elevation.to_radians(),
            inplane.to_radians(),
        )
    }

    pub fn identity() -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            inplane: 0.0,
        }
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn inplane(&self) -> f64 {
        self.inplane
    }

    /// Adds angle offsets and renormalises. Offsets must be finite.
    pub fn offset(&self, d_azimuth: f64, d_elevation: f64, d_inplane: f64) -> Self {
        Self {
            azimuth: wrap_azimuth(self.azimuth + d_azimuth),
            elevation: (self.elevation + d_elevation).clamp(-PI / 2.0, PI / 2.0),
            inplane: wrap_inplane(self.inplane + d_inplane),
        }
    }

    pub fn to_degrees(&self) -> [f64; 3] {
        [
            self.azimuth.to_degrees(),
            self.elevation.to_degrees(),
            self.inplane.to_degrees(),
        ]
    }

    pub fn rotation(&self) -> Rotation {
        rotation_from_pose(self)
    }
}

fn wrap_azimuth(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

fn wrap_inplane(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

    /// Validates that `m` is orthonormal with determinant one.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let deviation = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if deviation > Self::ORTHONORMAL_TOLERANCE || (det - 1.0).abs() > Self::ORTHONORMAL_TOLERANCE {
            return Err(Error::invalid(format!(
                "matrix is not a rotation (|MᵀM - I|max = {deviation:e}, det = {det})"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Rotation by `angle` about the (not necessarily unit) `axis`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let k = axis.normalize();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        Self(Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.0 * x
    }
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn rotation_from_pose(pose: &Pose) -> Rotation {
    Rotation(rot_z(pose.inplane) * rot_x(pose.elevation) * rot_y(pose.azimuth))
}

/// Angle of the relative rotation `r1ᵀ r2`, in `[0, π]`.
///
/// Equal to `arccos((tr(r1ᵀr2) - 1) / 2)`; evaluated through `atan2` of the
/// skew and symmetric parts so that it stays accurate near 0 and π.
pub fn geodesic_error(r1: &Rotation, r2: &Rotation) -> f64 {
    let rel = r1.0.transpose() * r2.0;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).min(1.0);
    sin.atan2(cos)
}

/// Geodesic rotation error between two poses.
pub fn pose_error(a: &Pose, b: &Pose) -> f64 {
    geodesic_error(&a.rotation(), &b.rotation())
}

/// Weak-perspective camera with a feature grid obtained by downsampling the
/// image by `feature_stride`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub scale: f64,
    pub principal: (f64, f64),
    pub image_size: (usize, usize),
    pub feature_stride: usize,
}

impl Camera {
    pub fn new(
        scale: f64,
        principal: (f64, f64),
        image_size: (usize, usize),
        feature_stride: usize,
    ) -> Result<Self> {
        let camera = Self {
            scale,
            principal,
            image_size,
            feature_stride,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        let (cx, cy) = self.principal;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid("camera scale must be positive"));
        }
        if self.feature_stride == 0 {
            return Err(Error::invalid("feature stride must be at least 1"));
        }
        if w == 0 || h == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        if !(cx >= 0.0 && cx <= w as f64 && cy >= 0.0 && cy <= h as f64) {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }

    /// Feature grid size `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_size.1 / self.feature_stride,
            self.image_size.0 / self.feature_stride,
        )
    }

    /// Same optics, rendering at full pixel resolution.
    pub fn pixel_camera(&self) -> Camera {
        Camera {
            feature_stride: 1,
            ..*self
        }
    }

    /// Continuous cell coordinates `(x, y)` of a pixel position; cell centres
    /// sit on integer coordinates.
    pub fn pixel_to_cell(&self, u: f64, v: f64) -> (f64, f64) {
        let s = self.feature_stride as f64;
        (u / s - 0.5, v / s - 0.5)
    }

    pub fn projector(&self, pose: &Pose) -> Projector {
        Projector {
            rotation: rotation_from_pose(pose),
            camera: *self,
        }
    }
}

/// A projected point: pixel coordinates and depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pose and camera fused into a single point mapping.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    rotation: Rotation,
    camera: Camera,
}

impl Projector {
    pub fn project(&self, x: &Vector3<f64>) -> Projection {
        let p = self.rotation.apply(x);
        Projection {
            u: self.camera.principal.0 + self.camera.scale * p.x,
            v: self.camera.principal.1 - self.camera.scale * p.y,
            depth: p.z,
        }
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }
}

pub fn project(pose: &Pose, camera: &Camera, x: &Vector3<f64>) -> Projection {
    camera.projector(pose).project(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn identity_pose_gives_identity() {
        let r = rotation_from_pose(&Pose::identity());
        assert!(close(r.matrix(), &Matrix3::identity(), 1e-15));
    }

    #[test]
    fn half_turn_negates_horizontal_axes() {
        let r = rotation_from_pose(&Pose::new(PI, 0.0, 0.0).unwrap());
        let expected = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, -1.0));
        assert!(close(r.matrix(), &expected, 1e-12));
    }

    #[test]
    fn composed_rotation_matches_hand_product() {
        // Elementary matrices written out element by element.
        let (az, el, ip) = (0.3f64, 0.1f64, -0.2f64);
        let ry = Matrix3::new(az.cos(), 0.0, az.sin(), 0.0, 1.0, 0.0, -az.sin(), 0.0, az.cos());
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, el.cos(), -el.sin(), 0.0, el.sin(), el.cos());
        let rz = Matrix3::new(ip.cos(), -ip.sin(), 0.0, ip.sin(), ip.cos(), 0.0, 0.0, 0.0, 1.0);
        let r = rotation_from_pose(&Pose::new(az, el, ip).unwrap());
        assert!(close(r.matrix(), &(rz * rx * ry), 1e-15));
    }

    #[test]
    fn non_finite_pose_is_rejected() {
        assert!(Pose::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(Pose::new(0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn pose_normalisation() {
        let p = Pose::new(-0.5, 2.0, 3.5).unwrap();
        assert!((p.azimuth() - (TAU - 0.5)).abs() < 1e-12);
        assert_eq!(p.elevation(), PI / 2.0);
        assert!((p.inplane() - (3.5 - TAU)).abs() < 1e-12);
        assert_eq!(Pose::new(0.0, 0.0, -PI).unwrap().inplane(), PI);
    }

    #[test]
    fn projection_examples() {
        let cam = Camera::new(10.0, (64.0, 64.0), (128, 128), 4).unwrap();
        let p = project(&Pose::new(0.7, 0.2, 0.1).unwrap(), &cam, &Vector3::zeros());
        assert_eq!((p.u, p.v, p.depth), (64.0, 64.0, 0.0));
        let p = project(&Pose::identity(), &cam, &Vector3::new(1.0, 0.0, 0.0));
        assert_eq!((p.u, p.v, p.depth), (74.0, 64.0, 0.0));

        let pose = Pose::new(0.3, 0.1, -0.2).unwrap();
        let (az, el, ip) = (0.3f64, 0.1f64, -0.2f64);
        let m = rot_z(ip) * rot_x(el) * rot_y(az);
        let q = m * Vector3::new(1.0, 2.0, 3.0);
        let p = project(&pose, &cam, &Vector3::new(1.0, 2.0, 3.0));
        assert!((p.u - (64.0 + 10.0 * q.x)).abs() < 1e-12);
        assert!((p.v - (64.0 - 10.0 * q.y)).abs() < 1e-12);
        assert!((p.depth - q.z).abs() < 1e-12);
    }

    #[test]
    fn geodesic_examples() {
        let r = rotation_from_pose(&Pose::new(1.0, 0.3, -0.4).unwrap());
        assert!(geodesic_error(&r, &r) < 1e-12);
        let q = Rotation::from_axis_angle(Vector3::new(0.3, -1.0, 2.0), PI / 6.0);
        assert!((geodesic_error(&Rotation::identity(), &q) - PI / 6.0).abs() < 1e-12);
        let half = Rotation::from_axis_angle(Vector3::new(1.0, 1.0, 0.0), PI);
        assert!((geodesic_error(&Rotation::identity(), &half) - PI).abs() < 1e-9);
    }

    #[test]
    fn non_orthonormal_matrix_rejected() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-3;
        assert!(Rotation::from_matrix(m).is_err());
        assert!(Rotation::from_matrix(-Matrix3::<f64>::identity()).is_err());
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::new(0.0, (1.0, 1.0), (4, 4), 1).is_err());
        assert!(Camera::new(1.0, (1.0, 1.0), (4, 4), 0).is_err());
        assert!(Camera::new(1.0, (5.0, 1.0), (4, 4), 1).is_err());
        let cam = Camera::new(1.0, (2.0, 2.0), (8, 4), 2).unwrap();
        assert_eq!(cam.grid(), (2, 4));
        assert_eq!(cam.pixel_to_cell(1.0, 1.0), (0.0, 0.0));
    }
}
