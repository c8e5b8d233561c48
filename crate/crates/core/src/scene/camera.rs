use nalgebra::{IsometryMatrix3, Matrix3, Matrix4, Point3, Rotation3, Translation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rigid world-from-camera transform, stored as an explicit rotation matrix so
/// that file round-trips are bit-exact.
pub type Pose = IsometryMatrix3<f64>;

/// Orthonormality tolerance for pose rotation blocks.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Pinhole intrinsics with image size and clip range.
///
/// Camera frame follows the usual vision convention: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    /// Symmetric camera with the given horizontal field of view in degrees.
    pub fn with_fov(width: usize, height: usize, hfov_deg: f64, near: f64, far: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            near,
            far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image must be non-empty");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad("need 0 < near < far");
        }
        Ok(())
    }

    /// `K⁻¹ [u, v, 1]`: camera-frame ray with unit z component, so that a point
    /// at z-depth `l` along pixel (u, v) is `l` times this vector.
    pub fn unproject(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new(
            (u as f64 - self.cx) / self.fx,
            (v as f64 - self.cy) / self.fy,
            1.0,
        )
    }
}

/// One posed depth observation. Invalid pixels are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub depth: Vec<Option<f64>>,
    pub pose: Pose,
    pub camera: CameraModel,
    pub index: usize,
}

impl DepthFrame {
    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    #[inline]
    pub fn depth_at(&self, u: usize, v: usize) -> Option<f64> {
        self.depth[v * self.camera.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_some()).count()
    }

    /// World-frame ray `T_wc K⁻¹ [u, v, 1]` (rotation only, not normalized).
    pub fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        self.pose.rotation * self.camera.unproject(u, v)
    }

    pub fn origin(&self) -> Point3<f64> {
        Point3::from(self.pose.translation.vector)
    }

    /// World point of pixel (u, v) at z-depth `depth`.
    pub fn point_at(&self, u: usize, v: usize, depth: f64) -> Point3<f64> {
        self.origin() + self.ray(u, v) * depth
    }

    /// Back-projected world point for a valid pixel.
    pub fn back_project(&self, u: usize, v: usize) -> Option<Point3<f64>> {
        self.depth_at(u, v).map(|d| self.point_at(u, v, d))
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.depth.len() != self.camera.width * self.camera.height {
            return Err(Error::Shape(format!(
                "depth has {} pixels, camera expects {}x{}",
                self.depth.len(),
                self.camera.width,
                self.camera.height
            )));
        }
        let (near, far) = (self.camera.near, self.camera.far);
        if let Some(d) = self.depth.iter().flatten().find(|d| !(**d > near && **d < far)) {
            return Err(Error::Frame {
                frame: self.index.to_string(),
                reason: format!("depth {d} outside ({near}, {far})"),
            });
        }
        validate_rotation(self.pose.rotation.matrix())
    }

    /// Depth as it reads back after storing with `depth_scale` meters per unit
    /// in a 16-bit image. Depths that quantize to zero become invalid.
    pub fn quantized(&self, depth_scale: f64) -> DepthFrame {
        let depth = self
            .depth
            .iter()
            .map(|d| {
                let units = quantize_depth(*d, depth_scale);
                (units != 0).then(|| units as f64 * depth_scale)
            })
            .collect();
        DepthFrame {
            depth,
            ..self.clone()
        }
    }
}

pub(crate) fn quantize_depth(depth: Option<f64>, depth_scale: f64) -> u16 {
    match depth {
        Some(d) => (d / depth_scale).round().clamp(0.0, u16::MAX as f64) as u16,
        None => 0,
    }
}

/// Checks that `r` is a proper rotation within [`ROTATION_TOLERANCE`].
pub fn validate_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ROTATION_TOLERANCE {
        return Err(Error::InvalidPose(format!(
            "rotation is not orthonormal (max deviation {err:.3e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::InvalidPose(format!("rotation determinant {det}")));
    }
    Ok(())
}

/// Builds a pose from a row-major homogeneous matrix, validating the rotation.
pub fn pose_from_matrix(m: &Matrix4<f64>) -> Result<Pose> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    validate_rotation(&r)?;
    let bottom = m.fixed_view::<1, 4>(3, 0);
    if (bottom[0], bottom[1], bottom[2], bottom[3]) != (0.0, 0.0, 0.0, 1.0) {
        return Err(Error::InvalidPose("last row must be [0 0 0 1]".into()));
    }
    let rot = Rotation3::from_matrix_unchecked(r);
    let t = Translation3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    Ok(IsometryMatrix3::from_parts(t, rot))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camera_validation() {
        let cam = CameraModel::with_fov(64, 48, 60.0, 0.05, 8.0);
        assert!(cam.validate().is_ok());
        let mut bad = cam;
        bad.fx = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = cam;
        bad.near = 9.0;
        assert!(bad.validate().is_err());
        let mut bad = cam;
        bad.cx = 64.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rotation_checks() {
        assert!(validate_rotation(&Matrix3::identity()).is_ok());
        let mut skew = Matrix3::identity();
        skew[(0, 1)] = 1e-3;
        assert!(validate_rotation(&skew).is_err());
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(validate_rotation(&flip).is_err());
    }

    #[test]
    fn center_pixel_ray_is_optical_axis() {
        let cam = CameraModel::with_fov(65, 49, 60.0, 0.05, 8.0);
        assert_eq!(cam.unproject(32, 24), Vector3::new(0.0, 0.0, 1.0));
    }
}
