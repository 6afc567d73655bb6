//! Pinhole cameras, rays and the scene-to-object coordinate mapping.
//!
//! World frame is right-handed with +z up. Camera frames follow the
//! x-right, y-down, z-forward convention; pixel (0, 0) is the center of the
//! top-left pixel.

use nalgebra::{Matrix3, RowVector3};

use crate::error::{Error, Result};
use crate::field::Vec3;

pub type Mat3 = Matrix3<f64>;

pub const WORLD_UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

const ORTHO_TOL: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-9;

fn check_rotation(r: &Mat3) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGeometry("rotation has non-finite entries".into()));
    }
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    if err > ORTHO_TOL {
        return Err(Error::InvalidGeometry(format!(
            "rotation is not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    if (r.determinant() - 1.0).abs() > ORTHO_TOL {
        return Err(Error::InvalidGeometry("rotation determinant is not +1".into()));
    }
    Ok(())
}

fn check_unit(v: &Vec3) -> Result<()> {
    if !v.iter().all(|c| c.is_finite()) || (v.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidGeometry(format!(
            "expected a unit vector, got {:?} (norm {})",
            v.as_slice(),
            v.norm()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        check_unit(&direction)?;
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidGeometry("ray origin must be finite".into()));
        }
        if !(near >= 0.0 && near < far && far.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "ray range must satisfy 0 <= near < far, got [{near}, {far}]"
            )));
        }
        Ok(Self {
            origin,
            direction,
            near,
            far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole camera. `rotation` maps world vectors into the camera frame, so
/// its rows are the camera's right, down and forward axes in world
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    focal: f64,
    principal: [f64; 2],
    width: usize,
    height: usize,
    rotation: Mat3,
    center: Vec3,
    near: f64,
    far: f64,
}

impl CameraModel {
    pub const DEFAULT_NEAR: f64 = 0.05;
    pub const DEFAULT_FAR: f64 = 20.0;

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        focal: f64,
        principal: [f64; 2],
        width: usize,
        height: usize,
        rotation: Mat3,
        center: Vec3,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "focal length must be positive, got {focal}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidGeometry("image size must be nonzero".into()));
        }
        let [cx, cy] = principal;
        if !(cx >= -0.5 && cx <= width as f64 - 0.5 && cy >= -0.5 && cy <= height as f64 - 0.5) {
            return Err(Error::InvalidGeometry(format!(
                "principal point {principal:?} outside a {width}x{height} image"
            )));
        }
        check_rotation(&rotation)?;
        if !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidGeometry("camera center must be finite".into()));
        }
        if !(near >= 0.0 && near < far && far.is_finite()) {
            return Err(Error::InvalidGeometry(format!("invalid clip range [{near}, {far}]")));
        }
        Ok(Self {
            focal,
            principal,
            width,
            height,
            rotation,
            center,
            near,
            far,
        })
    }

    /// Camera at `eye` looking at `target` with world +z as up, principal
    /// point at the image center.
    pub fn look_at(eye: Vec3, target: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidGeometry("eye and target coincide".into()))?;
        let right = forward
            .cross(&WORLD_UP)
            .try_normalize(1e-9)
            .ok_or(Error::DegenerateFrame([forward.x, forward.y, forward.z]))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::new(
            focal,
            centered_principal(width, height),
            width,
            height,
            rotation,
            eye,
            Self::DEFAULT_NEAR,
            Self::DEFAULT_FAR,
        )
    }

    pub fn with_clip(mut self, near: f64, far: f64) -> Result<Self> {
        if !(near >= 0.0 && near < far && far.is_finite()) {
            return Err(Error::InvalidGeometry(format!("invalid clip range [{near}, {far}]")));
        }
        self.near = near;
        self.far = far;
        Ok(self)
    }

    /// Row-major rotation followed by the center.
    pub fn pose_array(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[3 * r + c] = self.rotation[(r, c)];
            }
            out[9 + r] = self.center[r];
        }
        out
    }

    pub fn rotation_from_pose_array(pose: &[f64; 12]) -> (Mat3, Vec3) {
        (Mat3::from_row_slice(&pose[..9]), Vec3::new(pose[9], pose[10], pose[11]))
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }
    pub fn principal(&self) -> [f64; 2] {
        self.principal
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }
    pub fn center(&self) -> Vec3 {
        self.center
    }
    pub fn near(&self) -> f64 {
        self.near
    }
    pub fn far(&self) -> f64 {
        self.far
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.center)
    }

    /// Pixel coordinates of `p`, or `None` if it is not in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let q = self.world_to_camera(p);
        if q.z <= 0.0 {
            return None;
        }
        Some([
            self.focal * q.x / q.z + self.principal[0],
            self.focal * q.y / q.z + self.principal[1],
        ])
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && u <= self.width as f64 - 0.5 && v >= -0.5 && v <= self.height as f64 - 0.5
    }

    /// Unit ray through pixel `[u, v]` (column, row).
    pub fn generate_ray(&self, pixel: [f64; 2]) -> Result<Ray> {
        let [u, v] = pixel;
        if !self.contains_pixel(u, v) {
            return Err(Error::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let local = Vec3::new(
            (u - self.principal[0]) / self.focal,
            (v - self.principal[1]) / self.focal,
            1.0,
        );
        let direction = (self.rotation.transpose() * local).normalize();
        Ok(Ray {
            origin: self.center,
            direction,
            near: self.near,
            far: self.far,
        })
    }

    /// Ray through the center of pixel (`row`, `col`).
    pub fn pixel_ray(&self, row: usize, col: usize) -> Result<Ray> {
        self.generate_ray([col as f64, row as f64])
    }
}

pub fn centered_principal(width: usize, height: usize) -> [f64; 2] {
    [(width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0]
}

/// `origin + distance * direction`.
pub fn compute_object_center(origin: Vec3, distance: f64, direction: Vec3) -> Result<Vec3> {
    check_unit(&direction)?;
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(Error::InvalidGeometry(format!(
            "distance must be positive, got {distance}"
        )));
    }
    Ok(origin + direction * distance)
}

/// Object axes for a camera-to-object direction `v`: +x points back at the
/// camera, +y is horizontal, +z completes the right-handed frame. Returns the
/// rotation whose rows are those axes.
pub fn build_object_frame(v: &Vec3) -> Result<Mat3> {
    check_unit(v)?;
    let x = -v;
    let y = WORLD_UP
        .cross(&x)
        .try_normalize(1e-9)
        .ok_or(Error::DegenerateFrame([v.x, v.y, v.z]))?;
    let z = x.cross(&y).normalize();
    Ok(Mat3::from_rows(&[
        RowVector3::new(x.x, x.y, x.z),
        RowVector3::new(y.x, y.y, y.z),
        RowVector3::new(z.x, z.y, z.z),
    ]))
}

/// Rigid placement plus uniform scale taking scene points to object points:
/// `p' = (R p + t) / s` with `t = -R p_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectPlacement {
    rotation: Mat3,
    translation: Vec3,
    scale: f64,
    center: Vec3,
    distance: f64,
}

impl ObjectPlacement {
    pub fn new(rotation: Mat3, center: Vec3, scale: f64, distance: f64) -> Result<Self> {
        check_rotation(&rotation)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidGeometry(format!("scale must be positive, got {scale}")));
        }
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "distance must be positive, got {distance}"
            )));
        }
        if !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidGeometry("object center must be finite".into()));
        }
        Ok(Self {
            rotation,
            translation: -(rotation * center),
            scale,
            center,
            distance,
        })
    }

    /// Axis-aligned placement at `center`, mostly for tests and configs that
    /// place objects directly.
    pub fn axis_aligned(center: Vec3, scale: f64) -> Result<Self> {
        Self::new(Mat3::identity(), center, scale, 1.0)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }
    pub fn translation(&self) -> Vec3 {
        self.translation
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn center(&self) -> Vec3 {
        self.center
    }
    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn world_to_object(&self, p: &Vec3) -> Vec3 {
        (self.rotation * p + self.translation) / self.scale
    }

    pub fn object_to_world(&self, q: &Vec3) -> Vec3 {
        self.rotation.transpose() * (q * self.scale - self.translation)
    }

    /// Object-space ray plus the factor converting world interval lengths to
    /// object interval lengths (`1 / s`). Ray parameter `u` in the world maps
    /// to `u / s` on the returned ray.
    pub fn transform_ray(&self, ray: &Ray) -> (Ray, f64) {
        let k = 1.0 / self.scale;
        let origin = self.world_to_object(&ray.origin);
        // R is orthonormal so R d stays unit length up to rounding
        let direction = (self.rotation * ray.direction).normalize();
        (
            Ray {
                origin,
                direction,
                near: ray.near * k,
                far: ray.far * k,
            },
            k,
        )
    }
}
