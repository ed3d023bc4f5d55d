use std::f64::consts::PI;

use crate::raster::GaussianSet;
use crate::scene::{Pose, SkinnedTemplate, Vec3, WeightMatrix};

pub const JOINT_NAMES: [&str; 11] = [
    "root",
    "spine",
    "head",
    "left_shoulder",
    "left_elbow",
    "right_shoulder",
    "right_elbow",
    "left_hip",
    "left_knee",
    "right_hip",
    "right_knee",
];

const ROOT: usize = 0;
const SPINE: usize = 1;
const HEAD: usize = 2;
const L_SHOULDER: usize = 3;
const L_ELBOW: usize = 4;
const R_SHOULDER: usize = 5;
const R_ELBOW: usize = 6;
const L_HIP: usize = 7;
const L_KNEE: usize = 8;
const R_HIP: usize = 9;
const R_KNEE: usize = 10;

/// Gap between UV charts, in UV units.
pub const CHART_GUTTER: f64 = 1.5 / 64.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chart {
    pub u0: f64,
    pub v0: f64,
    pub du: f64,
    pub dv: f64,
}

impl Chart {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u <= self.u0 + self.du && v >= self.v0 && v <= self.v0 + self.dv
    }
}

/// One limb segment: a capsule from `a` to `b` with skinning keyframes along its axis.
#[derive(Clone, Debug)]
pub struct Capsule {
    pub name: &'static str,
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    /// `(axial fraction, [(joint, weight)])`, increasing in fraction.
    pub weight_keys: Vec<(f64, Vec<(usize, f64)>)>,
    pub front: Vec3,
    pub back: Vec3,
    pub chart: Chart,
}

impl Capsule {
    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }

    fn meridian(&self) -> f64 {
        self.length() + PI * self.radius
    }

    fn frame(&self) -> (Vec3, Vec3, Vec3) {
        let d = (self.b - self.a) / self.length();
        let hint = if d.z.abs() > 0.9 { Vec3::x() } else { Vec3::z() };
        let e1 = (hint - d * d.dot(&hint)).normalize();
        let e2 = d.cross(&e1);
        (d, e1, e2)
    }

    /// Rest position, outward normal and axial fraction for surface parameters in `[0, 1]^2`.
    pub fn surface(&self, u: f64, v: f64) -> (Vec3, Vec3, f64) {
        let (d, e1, e2) = self.frame();
        let (r, l) = (self.radius, self.length());
        let m = v.clamp(0.0, 1.0) * self.meridian();
        let cap = 0.5 * PI * r;
        let (axial, radial, normal_axial) = if m < cap {
            let th = m / r;
            (-r * th.cos(), r * th.sin(), -th.cos())
        } else if m <= cap + l {
            (m - cap, r, 0.0)
        } else {
            let th = (m - cap - l) / r;
            (l + r * th.sin(), r * th.cos(), th.sin())
        };
        let ang = 2.0 * PI * u;
        let radial_dir = e1 * ang.cos() + e2 * ang.sin();
        let p = self.a + d * axial + radial_dir * radial;
        let n_rad = (1.0 - normal_axial * normal_axial).max(0.0).sqrt();
        let n = (d * normal_axial + radial_dir * n_rad).normalize();
        (p, n, (axial / l).clamp(0.0, 1.0))
    }

    pub fn weights(&self, s: f64, joints: usize) -> Vec<f64> {
        let keys = &self.weight_keys;
        let mut out = vec![0.0; joints];
        let k = keys.iter().rposition(|(f, _)| *f <= s).unwrap_or(0);
        let (f0, w0) = &keys[k];
        if k + 1 < keys.len() {
            let (f1, w1) = &keys[k + 1];
            let t = ((s - f0) / (f1 - f0)).clamp(0.0, 1.0);
            for &(j, w) in w0 {
                out[j] += (1.0 - t) * w;
            }
            for &(j, w) in w1 {
                out[j] += t * w;
            }
        } else {
            for &(j, w) in w0 {
                out[j] += w;
            }
        }
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|w| *w /= sum);
        out
    }

    /// Albedo at a surface point: front/back base colours blended by the rest
    /// normal's depth component, modulated by a checker on the surface parameters.
    pub fn albedo(&self, u: f64, v: f64, normal: &Vec3, checker: f64) -> Vec3 {
        let t = smoothstep(-0.35, 0.35, normal.z);
        let base = self.front * (1.0 - t) + self.back * t;
        let cells_u = (2.0 * PI * self.radius / 0.09).round().max(2.0);
        let cells_v = (self.meridian() / 0.09).round().max(2.0);
        let parity = ((u * cells_u).floor() as i64 + (v * cells_v).floor() as i64).rem_euclid(2);
        let f = if parity == 0 { 1.0 + checker } else { 1.0 - checker };
        (base * f).map(|c| c.clamp(0.0, 1.0))
    }

    /// Nearest ray parameter `t > 1e-9` hitting the capsule.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let r = self.radius;
        let ba = self.b - self.a;
        let oa = origin - self.a;
        let baba = ba.dot(&ba);
        let bard = ba.dot(dir);
        let baoa = ba.dot(&oa);
        let rdoa = dir.dot(&oa);
        let oaoa = oa.dot(&oa);
        let a = baba - bard * bard;
        let b = baba * rdoa - baoa * bard;
        let c = baba * oaoa - baoa * baoa - r * r * baba;
        let h = b * b - a * c;
        if h < 0.0 {
            return None;
        }
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > 1e-9 && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        };
        if a.abs() > 1e-15 {
            let t = (-b - h.sqrt()) / a;
            let y = baoa + t * bard;
            if y > 0.0 && y < baba {
                consider(t);
            }
        }
        for centre in [self.a, self.b] {
            let oc = origin - centre;
            let bb = oc.dot(dir);
            let cc = oc.dot(&oc) - r * r;
            let hh = bb * bb - cc;
            if hh >= 0.0 {
                let t = -bb - hh.sqrt();
                if t > 1e-9 {
                    consider(t);
                } else {
                    consider(-bb + hh.sqrt());
                }
            }
        }
        best
    }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Capsule-limb humanoid with 11 joints, standing with arms slightly
/// lowered, facing the -z direction.
#[derive(Clone, Debug)]
pub struct Humanoid {
    pub joint_parents: Vec<i32>,
    pub rest_joints: Vec<Vec3>,
    pub capsules: Vec<Capsule>,
}

fn v3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z)
}

impl Humanoid {
    pub fn standard() -> Self {
        let rest_joints = vec![
            v3(0.0, 0.0, 0.0),
            v3(0.0, 0.2, 0.0),
            v3(0.0, 0.56, 0.0),
            v3(0.21, 0.45, 0.0),
            v3(0.33, 0.21, 0.0),
            v3(-0.21, 0.45, 0.0),
            v3(-0.33, 0.21, 0.0),
            v3(0.1, -0.08, 0.0),
            v3(0.11, -0.45, 0.0),
            v3(-0.1, -0.08, 0.0),
            v3(-0.11, -0.45, 0.0),
        ];
        let joint_parents = vec![-1, 0, 1, 1, 3, 1, 5, 0, 7, 0, 9];
        let shirt = (v3(0.85, 0.3, 0.22), v3(0.2, 0.35, 0.8));
        let skin = (v3(0.92, 0.76, 0.62), v3(0.32, 0.2, 0.12));
        let sleeve = (v3(0.9, 0.62, 0.3), v3(0.3, 0.6, 0.45));
        let trousers = (v3(0.2, 0.25, 0.5), v3(0.62, 0.58, 0.22));
        let boots = (v3(0.35, 0.3, 0.28), v3(0.72, 0.72, 0.72));
        let cap = |name, a: Vec3, b: Vec3, radius, keys: Vec<(f64, Vec<(usize, f64)>)>, col: (Vec3, Vec3)| Capsule {
            name,
            a,
            b,
            radius,
            weight_keys: keys,
            front: col.0,
            back: col.1,
            chart: Chart { u0: 0.0, v0: 0.0, du: 0.0, dv: 0.0 },
        };
        let limb = |parent: usize, joint: usize, child: Option<usize>| {
            let mut k = vec![(0.0, vec![(parent, 0.35), (joint, 0.65)]), (0.2, vec![(joint, 1.0)])];
            match child {
                Some(c) => {
                    k.push((0.8, vec![(joint, 1.0)]));
                    k.push((1.0, vec![(joint, 0.5), (c, 0.5)]));
                }
                None => k.push((1.0, vec![(joint, 1.0)])),
            }
            k
        };
        let mut capsules = vec![
            cap(
                "torso",
                v3(0.0, -0.06, 0.0),
                v3(0.0, 0.47, 0.0),
                0.15,
                vec![(0.0, vec![(ROOT, 1.0)]), (0.3, vec![(ROOT, 1.0)]), (0.6, vec![(SPINE, 1.0)])],
                shirt,
            ),
            cap("head", v3(0.0, 0.62, 0.0), v3(0.0, 0.74, 0.0), 0.1, vec![(0.0, vec![(HEAD, 1.0)])], skin),
            cap("left_upper_arm", v3(0.21, 0.45, 0.0), v3(0.33, 0.21, 0.0), 0.05, limb(SPINE, L_SHOULDER, Some(L_ELBOW)), sleeve),
            cap("left_forearm", v3(0.33, 0.21, 0.0), v3(0.42, -0.04, 0.0), 0.042, limb(L_SHOULDER, L_ELBOW, None), skin),
            cap("right_upper_arm", v3(-0.21, 0.45, 0.0), v3(-0.33, 0.21, 0.0), 0.05, limb(SPINE, R_SHOULDER, Some(R_ELBOW)), sleeve),
            cap("right_forearm", v3(-0.33, 0.21, 0.0), v3(-0.42, -0.04, 0.0), 0.042, limb(R_SHOULDER, R_ELBOW, None), skin),
            cap("left_thigh", v3(0.1, -0.08, 0.0), v3(0.11, -0.45, 0.0), 0.068, limb(ROOT, L_HIP, Some(L_KNEE)), trousers),
            cap("left_shin", v3(0.11, -0.45, 0.0), v3(0.12, -0.84, 0.0), 0.052, limb(L_HIP, L_KNEE, None), boots),
            cap("right_thigh", v3(-0.1, -0.08, 0.0), v3(-0.11, -0.45, 0.0), 0.068, limb(ROOT, R_HIP, Some(R_KNEE)), trousers),
            cap("right_shin", v3(-0.11, -0.45, 0.0), v3(-0.12, -0.84, 0.0), 0.052, limb(R_HIP, R_KNEE, None), boots),
        ];
        pack_charts(&mut capsules);
        Humanoid {
            joint_parents,
            rest_joints,
            capsules,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_parents.len()
    }

    /// Capsule and surface parameters under a UV coordinate, if any chart covers it.
    pub fn chart_lookup(&self, uv: [f64; 2]) -> Option<(usize, f64, f64)> {
        self.capsules.iter().position(|c| c.chart.contains(uv[0], uv[1])).map(|k| {
            let ch = &self.capsules[k].chart;
            (k, (uv[0] - ch.u0) / ch.du, (uv[1] - ch.v0) / ch.dv)
        })
    }

    /// Triangulated grid over every capsule's `(u, v)` square, with UVs in its chart.
    pub fn template(&self, segments_u: usize, segments_v: usize) -> SkinnedTemplate {
        let j = self.joint_count();
        let mut t = SkinnedTemplate {
            vertices: Vec::new(),
            faces: Vec::new(),
            uv: Vec::new(),
            joint_parents: self.joint_parents.clone(),
            rest_joints: self.rest_joints.clone(),
            blend_weights: WeightMatrix::zeros(0, j),
        };
        for c in &self.capsules {
            let base = t.vertices.len() as u32;
            for iv in 0..=segments_v {
                for iu in 0..=segments_u {
                    let (u, v) = (iu as f64 / segments_u as f64, iv as f64 / segments_v as f64);
                    let (p, _, s) = c.surface(u, v);
                    t.vertices.push(p);
                    t.uv.push([c.chart.u0 + u * c.chart.du, c.chart.v0 + v * c.chart.dv]);
                    t.blend_weights.push_row(&c.weights(s, j));
                }
            }
            let row = segments_u as u32 + 1;
            for iv in 0..segments_v as u32 {
                for iu in 0..segments_u as u32 {
                    let a = base + iv * row + iu;
                    let (b, c2, d) = (a + 1, a + row, a + row + 1);
                    t.faces.push([a, b, d]);
                    t.faces.push([a, d, c2]);
                }
            }
        }
        t
    }

    /// Ground-truth splats sampled on the analytic surface at the texel
    /// centres of a `resolution^2` grid over the charts, pulled inwards by
    /// `inset` world units.
    pub fn ground_truth(&self, resolution: usize, scale_factor: f64, inset: f64, checker: f64) -> GaussianSet {
        let j = self.joint_count();
        let mut set = GaussianSet::empty(j);
        set.blend_weights = WeightMatrix::zeros(0, j);
        let step = 1.0 / resolution as f64;
        for jj in 0..resolution {
            for ii in 0..resolution {
                let uv = [(ii as f64 + 0.5) * step, (jj as f64 + 0.5) * step];
                let Some((k, u, v)) = self.chart_lookup(uv) else { continue };
                let c = &self.capsules[k];
                let (p, n, s) = c.surface(u, v);
                let (m, _, _) = c.surface(u, v + step / c.chart.dv);
                let (q, _, _) = c.surface(u + step / c.chart.du, v);
                let spacing = (m - p).norm().max((q - p).norm()).max(1e-4);
                let scale = scale_factor * spacing;
                set.centers.push(p - n * inset);
                set.colors.push(c.albedo(u, v, &n, checker));
                set.opacities.push(1.0);
                set.rotations.push([1.0, 0.0, 0.0, 0.0]);
                set.scales.push(Vec3::new(scale, scale, scale));
                set.normals.push(n);
                set.blend_weights.push_row(&c.weights(s, j));
                set.visibility.push(false);
                set.uv_texel.push([ii as u32, jj as u32]);
            }
        }
        set
    }

    /// First rest-pose surface hit along a ray: `(t, capsule)`.
    pub fn ray_cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        self.capsules
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.intersect(origin, dir).map(|t| (t, k)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Shelf-packs capsule charts (circumference x meridian, one common scale)
/// into the unit square with [`CHART_GUTTER`] between them.
fn pack_charts(capsules: &mut [Capsule]) {
    let sizes: Vec<(f64, f64)> = capsules.iter().map(|c| (2.0 * PI * c.radius, c.meridian())).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].1.total_cmp(&sizes[a].1).then(a.cmp(&b)));
    let layout = |k: f64| -> Option<Vec<Chart>> {
        let g = CHART_GUTTER;
        let mut charts = vec![Chart { u0: 0.0, v0: 0.0, du: 0.0, dv: 0.0 }; sizes.len()];
        let (mut x, mut y, mut shelf) = (g, g, 0.0f64);
        for &i in &order {
            let (w, h) = (sizes[i].0 * k, sizes[i].1 * k);
            if x + w + g > 1.0 {
                x = g;
                y += shelf + g;
                shelf = 0.0;
            }
            if x + w + g > 1.0 || y + h + g > 1.0 {
                return None;
            }
            charts[i] = Chart { u0: x, v0: y, du: w, dv: h };
            x += w + g;
            shelf = shelf.max(h);
        }
        Some(charts)
    };
    let (mut lo, mut hi) = (0.01, 10.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if layout(mid).is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for (c, ch) in capsules.iter_mut().zip(layout(lo).expect("feasible packing")) {
        c.chart = ch;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Motion {
    /// Walk cycles over the whole sequence.
    pub cycles: f64,
    pub arm_swing: f64,
    pub leg_swing: f64,
    pub knee_bend: f64,
    pub elbow_bend: f64,
    pub torso_yaw: f64,
}

impl Default for Motion {
    fn default() -> Self {
        Motion {
            cycles: 2.0,
            arm_swing: 0.35,
            leg_swing: 0.35,
            knee_bend: 0.45,
            elbow_bend: 0.25,
            torso_yaw: 0.12,
        }
    }
}

impl Motion {
    /// Walk-in-place pose; frame 0 is the rest pose.
    pub fn pose(&self, frame: usize, frames: usize) -> Pose {
        let ph = 2.0 * PI * self.cycles * frame as f64 / frames.max(1) as f64;
        let (s, c) = (ph.sin(), ph.cos());
        let mut p = Pose::identity(JOINT_NAMES.len());
        p.joint_rotations[ROOT] = [0.0, self.torso_yaw * s, 0.0];
        p.joint_rotations[L_HIP] = [self.leg_swing * s, 0.0, 0.0];
        p.joint_rotations[R_HIP] = [-self.leg_swing * s, 0.0, 0.0];
        p.joint_rotations[L_KNEE] = [-self.knee_bend * 0.5 * (1.0 - c) * (s > 0.0) as u8 as f64, 0.0, 0.0];
        p.joint_rotations[R_KNEE] = [-self.knee_bend * 0.5 * (1.0 - c) * (s < 0.0) as u8 as f64, 0.0, 0.0];
        p.joint_rotations[L_SHOULDER] = [-self.arm_swing * s, 0.0, 0.0];
        p.joint_rotations[R_SHOULDER] = [self.arm_swing * s, 0.0, 0.0];
        p.joint_rotations[L_ELBOW] = [self.elbow_bend * 0.5 * (1.0 - c), 0.0, 0.0];
        p.joint_rotations[R_ELBOW] = [self.elbow_bend * 0.5 * (1.0 - c), 0.0, 0.0];
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_disjoint_and_inside() {
        let h = Humanoid::standard();
        for (i, a) in h.capsules.iter().enumerate() {
            let c = a.chart;
            assert!(c.u0 > 0.0 && c.v0 > 0.0 && c.u0 + c.du < 1.0 && c.v0 + c.dv < 1.0);
            for b in &h.capsules[i + 1..] {
                let d = b.chart;
                let sep_u = c.u0 + c.du + CHART_GUTTER <= d.u0 + 1e-12 || d.u0 + d.du + CHART_GUTTER <= c.u0 + 1e-12;
                let sep_v = c.v0 + c.dv + CHART_GUTTER <= d.v0 + 1e-12 || d.v0 + d.dv + CHART_GUTTER <= c.v0 + 1e-12;
                assert!(sep_u || sep_v, "{} overlaps {}", a.name, b.name);
            }
        }
    }

    #[test]
    fn surface_points_lie_on_the_capsule() {
        let h = Humanoid::standard();
        for c in &h.capsules {
            for (u, v) in [(0.0, 0.0), (0.3, 0.1), (0.7, 0.5), (0.1, 0.95), (0.5, 1.0)] {
                let (p, n, _) = c.surface(u, v);
                let d = (c.b - c.a).normalize();
                let s = (p - c.a).dot(&d).clamp(0.0, c.length());
                let q = c.a + d * s;
                assert!(((p - q).norm() - c.radius).abs() < 1e-9);
                assert!((n - (p - q) / c.radius).norm() < 1e-9);
                let w = c.weights(0.5, 11);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ray_hits_capsule_surface() {
        let h = Humanoid::standard();
        let torso = &h.capsules[0];
        let t = torso.intersect(&Vec3::new(0.0, 0.2, -5.0), &Vec3::z()).unwrap();
        assert!((t - (5.0 - 0.15)).abs() < 1e-9);
        let t = torso.intersect(&Vec3::new(0.0, 5.0, 0.0), &-Vec3::y()).unwrap();
        assert!((t - (5.0 - 0.47 - 0.15)).abs() < 1e-9);
        assert!(torso.intersect(&Vec3::new(1.0, 0.2, -5.0), &Vec3::z()).is_none());
    }

    #[test]
    fn frame_zero_is_rest() {
        let m = Motion::default();
        assert_eq!(m.pose(0, 60), Pose::identity(11));
        assert_ne!(m.pose(7, 60), Pose::identity(11));
    }
}
