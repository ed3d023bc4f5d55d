use nalgebra::{Matrix2, Matrix2x3};

use crate::scene::{Camera, Mat3, Vec3};

/// Minimum camera-space depth for a splat to be rasterized.
pub const NEAR_PLANE: f64 = 0.01;

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Symmetric covariance `[a, b, c]` of `[[a, b], [b, c]]`, blur included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d` in the same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    pub gaussian_index: usize,
    /// Three-sigma radius along the major axis, in pixels.
    pub radius: f64,
}

pub fn quat_to_mat(q: &[f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// World-space covariance `R diag(s^2) R^T`.
pub fn covariance3d(scale: &Vec3, q: &[f64; 4]) -> Mat3 {
    let r = quat_to_mat(q);
    let s2 = Mat3::from_diagonal(&scale.component_mul(scale));
    r * s2 * r.transpose()
}

fn jacobian(t: &Vec3, camera: &Camera) -> Matrix2x3<f64> {
    let k = &camera.intrinsics;
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * t.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * t.y * iz * iz,
    )
}

/// EWA projection: `cov2d = J W Sigma W^T J^T + blur I`. Returns `None` when the
/// center is closer than the near plane (culled).
pub fn project_gaussian(
    center: &Vec3,
    scale: &Vec3,
    rotation: &[f64; 4],
    camera: &Camera,
    blur: f64,
) -> Option<Splat2D> {
    let t = camera.to_camera(center);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let k = &camera.intrinsics;
    let w = camera.rotation();
    let j = jacobian(&t, camera);
    let m = w * covariance3d(scale, rotation) * w.transpose();
    let c: Matrix2<f64> = j * m * j.transpose() + Matrix2::identity() * blur;
    let (a, b, cc) = (c[(0, 0)], 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)]);
    let det = a * cc - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + cc);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    Some(Splat2D {
        mean2d: [k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy],
        cov2d: [a, b, cc],
        conic: [cc / det, -b / det, a / det],
        depth: t.z,
        gaussian_index: 0,
        radius: 3.0 * lambda_max.sqrt(),
    })
}

/// Chain from screen-space gradients (`d_mean2d`, `d_conic` in the packing
/// `power = -0.5 (a dx^2 + 2 b dx dy + c dy^2)`) back to the world-space
/// center and the per-axis scales.
pub fn project_backward(
    center: &Vec3,
    scale: &Vec3,
    rotation: &[f64; 4],
    camera: &Camera,
    splat: &Splat2D,
    d_mean2d: [f64; 2],
    d_conic: [f64; 3],
) -> (Vec3, Vec3) {
    let k = &camera.intrinsics;
    let w = camera.rotation();
    let t = camera.to_camera(center);
    let (x, y, z) = (t.x, t.y, t.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;

    let q = Matrix2::new(splat.conic[0], splat.conic[1], splat.conic[1], splat.conic[2]);
    let dq = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let dc = -(q * dq * q);

    let j = jacobian(&t, camera);
    let rot = quat_to_mat(rotation);
    let sigma = rot * Mat3::from_diagonal(&scale.component_mul(scale)) * rot.transpose();
    let m = w * sigma * w.transpose();

    let dm: Mat3 = j.transpose() * dc * j;
    let dj: Matrix2x3<f64> = 2.0 * dc * j * m;
    let dsigma = w.transpose() * dm * w;
    let rs = rot.transpose() * dsigma * rot;
    let d_scale = Vec3::new(
        2.0 * scale.x * rs[(0, 0)],
        2.0 * scale.y * rs[(1, 1)],
        2.0 * scale.z * rs[(2, 2)],
    );

    let mut dt = Vec3::zeros();
    dt.x += dj[(0, 2)] * (-k.fx * iz2);
    dt.y += dj[(1, 2)] * (-k.fy * iz2);
    dt.z += dj[(0, 0)] * (-k.fx * iz2)
        + dj[(0, 2)] * (2.0 * k.fx * x * iz2 * iz)
        + dj[(1, 1)] * (-k.fy * iz2)
        + dj[(1, 2)] * (2.0 * k.fy * y * iz2 * iz);
    dt.x += d_mean2d[0] * k.fx * iz;
    dt.z += d_mean2d[0] * (-k.fx * x * iz2);
    dt.y += d_mean2d[1] * k.fy * iz;
    dt.z += d_mean2d[1] * (-k.fy * y * iz2);

    (w.transpose() * dt, d_scale)
}
