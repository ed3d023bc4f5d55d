#![allow(dead_code)]

use avatar_core::raster::GaussianSet;
use avatar_core::scene::{Camera, ImageBuffer, Intrinsics, Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn random_rotation(r: &mut impl Rng) -> Mat3 {
    let q = nalgebra::UnitQuaternion::from_euler_angles(
        r.gen_range(-3.0..3.0),
        r.gen_range(-1.5..1.5),
        r.gen_range(-3.0..3.0),
    );
    *q.to_rotation_matrix().matrix()
}

/// Camera looking at the origin from a random direction at distance `dist`.
pub fn random_camera(r: &mut impl Rng, size: usize, dist: f64) -> Camera {
    let az = r.gen_range(0.0..360.0);
    let el = r.gen_range(-40.0..40.0);
    Camera::look_at(az, el, dist, Vec3::zeros(), Intrinsics::square(size, size as f64 * 1.2)).unwrap()
}

/// `count` Gaussians scattered near the origin with random rotations.
pub fn random_scene(r: &mut impl Rng, count: usize, opacity_max: f64) -> GaussianSet {
    let mut set = GaussianSet::empty(1);
    for _ in 0..count {
        let c = Vec3::new(r.gen_range(-0.6..0.6), r.gen_range(-0.6..0.6), r.gen_range(-0.6..0.6));
        let col = Vec3::new(r.gen(), r.gen(), r.gen());
        let s = Vec3::new(r.gen_range(0.05..0.3), r.gen_range(0.05..0.3), r.gen_range(0.05..0.3));
        set.push_simple(c, col, r.gen_range(0.2..opacity_max), s);
        let q = nalgebra::UnitQuaternion::from_euler_angles(r.gen(), r.gen(), r.gen());
        let last = set.len() - 1;
        set.rotations[last] = [q.w, q.i, q.j, q.k];
        let n = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)).normalize();
        set.normals[last] = n;
        set.visibility[last] = r.gen_bool(0.5);
    }
    set
}

fn quat_matrix(q: [f64; 4]) -> Mat3 {
    let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    *uq.to_rotation_matrix().matrix()
}

/// Independent per-pixel compositing: every Gaussian is evaluated at every
/// pixel, sorted by camera depth (ties by index), with only the opacity clamp
/// and screen-space blur retained.
pub fn brute_force_render(
    set: &GaussianSet,
    values: &[Vec<f64>],
    camera: &Camera,
    background: &[f64],
    alpha_max: f64,
    blur: f64,
) -> (ImageBuffer, ImageBuffer) {
    let k = &camera.intrinsics;
    let ch = background.len();
    struct P {
        depth: f64,
        idx: usize,
        mx: f64,
        my: f64,
        inv: [f64; 3],
    }
    let mut ps = Vec::new();
    for i in 0..set.len() {
        let t = camera.rotation() * set.centers[i] + camera.translation();
        if t.z <= 0.01 {
            continue;
        }
        let rq = quat_matrix(set.rotations[i]);
        let s = set.scales[i];
        let sigma = rq * Mat3::from_diagonal(&Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z)) * rq.transpose();
        let m = camera.rotation() * sigma * camera.rotation().transpose();
        // Rows of the perspective Jacobian.
        let j0 = Vec3::new(k.fx / t.z, 0.0, -k.fx * t.x / (t.z * t.z));
        let j1 = Vec3::new(0.0, k.fy / t.z, -k.fy * t.y / (t.z * t.z));
        let a = j0.dot(&(m * j0)) + blur;
        let b = j0.dot(&(m * j1));
        let c = j1.dot(&(m * j1)) + blur;
        let det = a * c - b * b;
        ps.push(P {
            depth: t.z,
            idx: i,
            mx: k.fx * t.x / t.z + k.cx,
            my: k.fy * t.y / t.z + k.cy,
            inv: [c / det, -b / det, a / det],
        });
    }
    ps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.idx.cmp(&b.idx)));
    let mut img = ImageBuffer::new(k.width, k.height, ch);
    let mut alpha = ImageBuffer::new(k.width, k.height, 1);
    for y in 0..k.height {
        for x in 0..k.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut acc = vec![0.0; ch];
            for p in &ps {
                let (dx, dy) = (px - p.mx, py - p.my);
                let q = p.inv[0] * dx * dx + 2.0 * p.inv[1] * dx * dy + p.inv[2] * dy * dy;
                let a = (set.opacities[p.idx] * (-0.5 * q).exp()).min(alpha_max);
                for c in 0..ch {
                    acc[c] += values[p.idx][c] * a * t;
                }
                t *= 1.0 - a;
            }
            for c in 0..ch {
                img.set(x, y, c, acc[c] + t * background[c]);
            }
            alpha.set(x, y, 0, 1.0 - t);
        }
    }
    (img, alpha)
}

pub fn random_image(r: &mut impl Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> ImageBuffer {
    let data = (0..w * h * c).map(|_| r.gen_range(lo..hi)).collect();
    ImageBuffer::from_vec(w, h, c, data).unwrap()
}
