use std::io::{Read, Write};
use std::path::Path;

use super::fk::forward_kinematics;
use super::lbs::lbs_points;
use crate::error::{Error, Result};
use crate::scene::{Pose, SkinnedTemplate, Vec3, WeightMatrix};

/// Which face (if any) covers each texel, with barycentric coordinates.
/// Texel `(i, j)` is column `i`, row `j`, sampled at
/// `((i + 0.5) / W, (j + 0.5) / H)` in UV space.
#[derive(Clone, Debug)]
pub struct UvCoverage {
    pub width: usize,
    pub height: usize,
    pub face: Vec<Option<u32>>,
    pub bary: Vec<[f64; 3]>,
    /// Texels claimed by more than one face (the last face wins).
    pub overlaps: usize,
}

// A point exactly on an edge belongs to the triangle that contains it after an
// infinitesimal shift along +u (then +v), so shared edges and vertices of a
// watertight chart are covered exactly once.
fn owns_edge(du: f64, dv: f64) -> bool {
    dv < 0.0 || (dv == 0.0 && du > 0.0)
}

pub fn rasterize_uv(template: &SkinnedTemplate, width: usize, height: usize) -> Result<UvCoverage> {
    if template.uv.is_empty() || template.uv.len() != template.vertices.len() {
        return Err(Error::validation("template has no uv coordinates"));
    }
    if width == 0 || height == 0 {
        return Err(Error::Bounds("uv map resolution must be positive".into()));
    }
    let mut cov = UvCoverage {
        width,
        height,
        face: vec![None; width * height],
        bary: vec![[0.0; 3]; width * height],
        overlaps: 0,
    };
    for (fi, f) in template.faces.iter().enumerate() {
        let mut p = f.map(|v| {
            let uv = template.uv[v as usize];
            [uv[0] * width as f64, uv[1] * height as f64]
        });
        let mut perm = [0usize, 1, 2];
        let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        if area == 0.0 {
            continue;
        }
        if area < 0.0 {
            p.swap(1, 2);
            perm.swap(1, 2);
        }
        let area = area.abs();
        let lo_u = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
        let hi_u = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
        let lo_v = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
        let hi_v = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
        let i0 = (lo_u - 0.5).floor().max(0.0) as usize;
        let i1 = ((hi_u - 0.5).ceil().max(0.0) as usize).min(width - 1);
        let j0 = (lo_v - 0.5).floor().max(0.0) as usize;
        let j1 = ((hi_v - 0.5).ceil().max(0.0) as usize).min(height - 1);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let (u, v) = (i as f64 + 0.5, j as f64 + 0.5);
                let mut w = [0.0; 3];
                let mut inside = true;
                for e in 0..3 {
                    let a = p[(e + 1) % 3];
                    let b = p[(e + 2) % 3];
                    let (du, dv) = (b[0] - a[0], b[1] - a[1]);
                    let edge = du * (v - a[1]) - dv * (u - a[0]);
                    if edge < 0.0 || (edge == 0.0 && !owns_edge(du, dv)) {
                        inside = false;
                        break;
                    }
                    w[e] = edge / area;
                }
                if !inside {
                    continue;
                }
                let t = j * width + i;
                if cov.face[t].is_some() {
                    cov.overlaps += 1;
                }
                cov.face[t] = Some(fi as u32);
                let mut b = [0.0; 3];
                for e in 0..3 {
                    b[perm[e]] = w[e];
                }
                cov.bary[t] = b;
            }
        }
    }
    Ok(cov)
}

/// Texture-space image of surface positions with a validity channel.
/// Invalid texels hold zero position, zero normal and zero weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalUvMap {
    pub width: usize,
    pub height: usize,
    pub positions: Vec<Vec3>,
    pub valid: Vec<bool>,
    /// Interpolated vertex normals (rest bakes only; empty otherwise).
    pub normals: Vec<Vec3>,
    /// Interpolated blend weights (rest bakes only).
    pub weights: Option<WeightMatrix>,
}

impl PositionalUvMap {
    pub fn texel(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len() as f64
    }

    /// `(column, row)` of every valid texel in row-major order.
    pub fn valid_texels(&self) -> Vec<[u32; 2]> {
        let mut out = Vec::new();
        for j in 0..self.height {
            for i in 0..self.width {
                if self.valid[self.texel(i, j)] {
                    out.push([i as u32, j as u32]);
                }
            }
        }
        out
    }

    /// Box-averages `factor x factor` blocks over their valid texels. A block
    /// is valid when any of its texels is.
    pub fn downsample(&self, factor: usize) -> Result<PositionalUvMap> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::validation(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let joints = self.weights.as_ref().map(|m| m.cols());
        let mut out = PositionalUvMap {
            width: w,
            height: h,
            positions: vec![Vec3::zeros(); w * h],
            valid: vec![false; w * h],
            normals: if self.normals.is_empty() { Vec::new() } else { vec![Vec3::zeros(); w * h] },
            weights: joints.map(|j| WeightMatrix::zeros(w * h, j)),
        };
        for bj in 0..h {
            for bi in 0..w {
                let o = bj * w + bi;
                let mut count = 0usize;
                for j in bj * factor..(bj + 1) * factor {
                    for i in bi * factor..(bi + 1) * factor {
                        let t = self.texel(i, j);
                        if !self.valid[t] {
                            continue;
                        }
                        count += 1;
                        out.positions[o] += self.positions[t];
                        if !self.normals.is_empty() {
                            out.normals[o] += self.normals[t];
                        }
                        if let (Some(src), Some(dst)) = (&self.weights, &mut out.weights) {
                            for (d, s) in dst.row_mut(o).iter_mut().zip(src.row(t)) {
                                *d += s;
                            }
                        }
                    }
                }
                if count == 0 {
                    continue;
                }
                let inv = 1.0 / count as f64;
                out.valid[o] = true;
                out.positions[o] *= inv;
                if !out.normals.is_empty() {
                    let n = out.normals[o];
                    out.normals[o] = if n.norm() > 1e-12 { n.normalize() } else { Vec3::new(0.0, 0.0, -1.0) };
                }
                if let Some(dst) = &mut out.weights {
                    dst.row_mut(o).iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))
    }

    /// `AVUV1` container: header, then per texel a validity byte followed by
    /// position, optional normal and optional weights as `f32` little-endian.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(UV_MAGIC)?;
        let joints = self.weights.as_ref().map_or(0, |m| m.cols());
        for v in [self.width, self.height, joints] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[!self.normals.is_empty() as u8])?;
        for t in 0..self.valid.len() {
            w.write_all(&[self.valid[t] as u8])?;
            let mut vals: Vec<f64> = self.positions[t].iter().copied().collect();
            if !self.normals.is_empty() {
                vals.extend(self.normals[t].iter());
            }
            if let Some(m) = &self.weights {
                vals.extend(m.row(t));
            }
            for v in vals {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != UV_MAGIC {
            return Err(bad("not an AVUV1 file"));
        }
        let mut u = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> std::io::Result<usize> {
            r.read_exact(&mut u)?;
            Ok(u32::from_le_bytes(u) as usize)
        };
        let width = next_u32(r)?;
        let height = next_u32(r)?;
        let joints = next_u32(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let has_normals = flag[0] != 0;
        let n = width.checked_mul(height).ok_or_else(|| bad("size overflow"))?;
        let mut map = PositionalUvMap {
            width,
            height,
            positions: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            normals: Vec::new(),
            weights: (joints > 0).then(|| WeightMatrix::zeros(0, joints)),
        };
        let mut f = [0u8; 4];
        let mut next_f32 = |r: &mut R| -> std::io::Result<f64> {
            r.read_exact(&mut f)?;
            Ok(f32::from_le_bytes(f) as f64)
        };
        for _ in 0..n {
            r.read_exact(&mut flag)?;
            map.valid.push(flag[0] != 0);
            map.positions.push(Vec3::new(next_f32(r)?, next_f32(r)?, next_f32(r)?));
            if has_normals {
                map.normals.push(Vec3::new(next_f32(r)?, next_f32(r)?, next_f32(r)?));
            }
            if let Some(m) = &mut map.weights {
                let row = (0..joints).map(|_| next_f32(r)).collect::<std::io::Result<Vec<_>>>()?;
                m.push_row(&row);
            }
        }
        Ok(map)
    }
}

const UV_MAGIC: &[u8; 8] = b"AVUV1\0\0\0";

impl UvCoverage {
    /// Interpolates per-vertex `positions` over the covered texels.
    pub fn interpolate(&self, template: &SkinnedTemplate, positions: &[Vec3]) -> PositionalUvMap {
        let n = self.width * self.height;
        let mut map = PositionalUvMap {
            width: self.width,
            height: self.height,
            positions: vec![Vec3::zeros(); n],
            valid: vec![false; n],
            normals: Vec::new(),
            weights: None,
        };
        for t in 0..n {
            if let Some(fi) = self.face[t] {
                let f = template.faces[fi as usize];
                let b = self.bary[t];
                map.valid[t] = true;
                map.positions[t] = (0..3).map(|k| positions[f[k] as usize] * b[k]).sum();
            }
        }
        map
    }

    /// Rest bake with interpolated normals and blend weights.
    pub fn interpolate_rest(&self, template: &SkinnedTemplate) -> PositionalUvMap {
        let mut map = self.interpolate(template, &template.vertices);
        let vn = template.vertex_normals();
        let joints = template.joint_count();
        let mut weights = WeightMatrix::zeros(map.valid.len(), joints);
        map.normals = vec![Vec3::zeros(); map.valid.len()];
        for t in 0..map.valid.len() {
            let Some(fi) = self.face[t] else { continue };
            let f = template.faces[fi as usize];
            let b = self.bary[t];
            let n: Vec3 = (0..3).map(|k| vn[f[k] as usize] * b[k]).sum();
            map.normals[t] = if n.norm() > 1e-12 { n.normalize() } else { vn[f[0] as usize] };
            let row = weights.row_mut(t);
            for k in 0..3 {
                for (d, s) in row.iter_mut().zip(template.blend_weights.row(f[k] as usize)) {
                    *d += b[k] * s;
                }
            }
        }
        map.weights = Some(weights);
        map
    }
}

/// Rest-pose positional map with normals and blend weights at `resolution`².
pub fn bake_positional_uv(template: &SkinnedTemplate, resolution: usize) -> Result<PositionalUvMap> {
    let cov = rasterize_uv(template, resolution, resolution)?;
    if cov.overlaps > 0 {
        log::warn!("{} uv texels covered by more than one face", cov.overlaps);
    }
    Ok(cov.interpolate_rest(template))
}

/// Positional map of the template's vertices posed by `pose`.
pub fn bake_pose_uv(template: &SkinnedTemplate, pose: &Pose, resolution: usize) -> Result<PositionalUvMap> {
    let cov = rasterize_uv(template, resolution, resolution)?;
    posed_map(template, &cov, pose)
}

pub fn posed_map(template: &SkinnedTemplate, coverage: &UvCoverage, pose: &Pose) -> Result<PositionalUvMap> {
    let transforms = forward_kinematics(template, pose)?;
    let posed = lbs_points(&template.vertices, &transforms, &template.blend_weights)?;
    Ok(coverage.interpolate(template, &posed))
}
