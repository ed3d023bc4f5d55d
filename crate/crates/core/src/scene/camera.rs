use serde::{Deserialize, Serialize};

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`,
/// so its center sits at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square image with the principal point at the image center.
    pub fn square(size: usize, focal: f64) -> Self {
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        }
    }

    /// The same view sampled `factor` times more densely along each axis.
    pub fn scaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Intrinsics {
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            width: self.width * factor,
            height: self.height * factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Bounds(format!(
                "image size {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::validation(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Same field of view at a different resolution.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// World-to-camera extrinsics `p_cam = R p_world + T` with the camera looking
/// along +z, x to the right and y down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub intrinsics: Intrinsics,
    rotation: Mat3,
    translation: Vec3,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    intrinsics: Intrinsics,
    /// Row-major world-to-camera rotation.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        let rotation = Mat3::from_fn(|i, j| r.rotation[i][j]);
        Camera::new(r.intrinsics, rotation, Vec3::from(r.translation))
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = c.rotation[(i, j)];
            }
        }
        CameraRecord {
            intrinsics: c.intrinsics,
            rotation,
            translation: c.translation.into(),
        }
    }
}

const ORTHO_TOL: f64 = 1e-6;

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Mat3, translation: Vec3) -> Result<Self> {
        intrinsics.validate()?;
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(Error::validation(format!(
                "camera rotation is not orthonormal (max |R^T R - I| = {err:e})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("camera translation must be finite"));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// Camera on a sphere around `target`. Azimuth 0 / elevation 0 is the
    /// capture direction: the camera sits on the -z side looking along +z.
    /// Positive elevation moves the camera up (+y), positive azimuth towards +x.
    pub fn look_at(
        azimuth_deg: f64,
        elevation_deg: f64,
        radius: f64,
        target: Vec3,
        intrinsics: Intrinsics,
    ) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::validation(format!("radius must be positive, got {radius}")));
        }
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let offset = Vec3::new(az.sin() * el.cos(), el.sin(), -az.cos() * el.cos());
        let center = target + offset * radius;
        let forward = (target - center).normalize();
        let mut up = Vec3::new(0.0, 1.0, 0.0);
        if forward.cross(&up).norm() < 1e-9 {
            // looking straight up or down
            up = Vec3::new(0.0, 0.0, 1.0);
        }
        let down = (-up + forward * up.dot(&forward)).normalize();
        let right = down.cross(&forward);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * center);
        Camera::new(intrinsics, rotation, translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera center in world coordinates, `-R^T T`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Pinhole projection to continuous pixel coordinates; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let c = self.to_camera(p);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some([k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy])
    }

    /// World-space ray through continuous pixel coordinates `px`.
    pub fn ray(&self, px: [f64; 2]) -> Result<Ray> {
        let k = &self.intrinsics;
        if !(px[0] >= 0.0 && px[1] >= 0.0 && px[0] < k.width as f64 && px[1] < k.height as f64) {
            return Err(Error::Bounds(format!(
                "pixel ({}, {}) outside {}x{} image",
                px[0], px[1], k.width, k.height
            )));
        }
        let dir_cam = Vec3::new((px[0] - k.cx) / k.fx, (px[1] - k.cy) / k.fy, 1.0);
        Ok(Ray {
            origin: self.center(),
            direction: (self.rotation.transpose() * dir_cam).normalize(),
        })
    }

    /// Ray through the center of integer pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Result<Ray> {
        self.ray([x as f64 + 0.5, y as f64 + 0.5])
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Result<Self> {
        Camera::new(intrinsics, self.rotation, self.translation)
    }
}
