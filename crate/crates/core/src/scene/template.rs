use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Vec3;
use crate::error::{Error, Result};

/// Dense row-major `rows x cols` matrix of skinning weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        WeightMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} weights"), format!("{} values", data.len())));
        }
        Ok(WeightMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Rows whose sum differs from one by more than `tol`, with their sums.
    pub fn check_rows_normalized(&self, tol: f64) -> Result<()> {
        for r in 0..self.rows {
            let row = self.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol || row.iter().any(|w| !(*w >= 0.0)) {
                return Err(Error::validation(format!(
                    "blend-weight row {r} sums to {sum} (tolerance {tol}) or has negative entries"
                )));
            }
        }
        Ok(())
    }
}

/// Rest-pose mesh with a joint tree and per-vertex skinning weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SkinnedTemplate {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub uv: Vec<[f64; 2]>,
    pub joint_parents: Vec<i32>,
    pub rest_joints: Vec<Vec3>,
    pub blend_weights: WeightMatrix,
}

const MAGIC: &[u8; 8] = b"AVFT1\0\0\0";

impl SkinnedTemplate {
    pub fn joint_count(&self) -> usize {
        self.joint_parents.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        let j = self.joint_parents.len();
        if j == 0 {
            return Err(Error::validation("template has no joints"));
        }
        if self.rest_joints.len() != j {
            return Err(Error::shape(format!("{j} rest joints"), self.rest_joints.len()));
        }
        if !self.uv.is_empty() && self.uv.len() != n {
            return Err(Error::shape(format!("{n} uv coordinates"), self.uv.len()));
        }
        if self.blend_weights.rows() != n || self.blend_weights.cols() != j {
            return Err(Error::shape(
                format!("{n}x{j} blend weights"),
                format!("{}x{}", self.blend_weights.rows(), self.blend_weights.cols()),
            ));
        }
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i as usize >= n)) {
            return Err(Error::validation(format!("face {f:?} references a vertex >= {n}")));
        }
        if self.uv.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::validation("uv coordinates must lie in [0,1]^2"));
        }
        self.blend_weights.check_rows_normalized(1e-5)?;
        self.joint_order()?;
        Ok(())
    }

    /// Joint indices ordered so every parent precedes its children.
    pub fn joint_order(&self) -> Result<Vec<usize>> {
        joint_order(&self.joint_parents)
    }

    /// Area-weighted vertex normals; vertices sharing an exact position
    /// (UV seams, poles) are welded before averaging.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut group: HashMap<[u64; 3], usize> = HashMap::new();
        let ids: Vec<usize> = self
            .vertices
            .iter()
            .map(|v| {
                let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
                let next = group.len();
                *group.entry(key).or_insert(next)
            })
            .collect();
        let mut acc = vec![Vec3::zeros(); group.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| i as usize);
            let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
            for v in [a, b, c] {
                acc[ids[v]] += n;
            }
        }
        ids.iter()
            .map(|&g| {
                let n = acc[g];
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::new(0.0, 0.0, -1.0)
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let t = Self::read_from(&mut bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))?;
        t.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(t)
    }

    /// Binary layout: magic `AVFT1\0\0\0`, then little-endian u32 counts
    /// `N, M, J`, then f32 vertices (N*3), u32 faces (M*3), f32 uv (N*2),
    /// i32 parents (J), f32 rest joints (J*3), f32 weights (N*J, row-major).
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let n = self.vertices.len();
        let uv: Vec<[f64; 2]> = if self.uv.is_empty() { vec![[0.0; 2]; n] } else { self.uv.clone() };
        for count in [n, self.faces.len(), self.joint_parents.len()] {
            w.write_all(&(count as u32).to_le_bytes())?;
        }
        for v in &self.vertices {
            write_f32s(w, v.iter().copied())?;
        }
        for f in &self.faces {
            for i in f {
                w.write_all(&i.to_le_bytes())?;
            }
        }
        for t in &uv {
            write_f32s(w, t.iter().copied())?;
        }
        for p in &self.joint_parents {
            w.write_all(&p.to_le_bytes())?;
        }
        for j in &self.rest_joints {
            write_f32s(w, j.iter().copied())?;
        }
        write_f32s(w, self.blend_weights.data().iter().copied())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "missing AVFT1 header"));
        }
        let n = read_u32(r)? as usize;
        let m = read_u32(r)? as usize;
        let j = read_u32(r)? as usize;
        let vertices = (0..n).map(|_| read_vec3(r)).collect::<std::io::Result<Vec<_>>>()?;
        let faces = (0..m)
            .map(|_| Ok([read_u32(r)?, read_u32(r)?, read_u32(r)?]))
            .collect::<std::io::Result<Vec<_>>>()?;
        let uv = (0..n)
            .map(|_| Ok([read_f32(r)?, read_f32(r)?]))
            .collect::<std::io::Result<Vec<_>>>()?;
        let joint_parents = (0..j)
            .map(|_| read_u32(r).map(|v| v as i32))
            .collect::<std::io::Result<Vec<_>>>()?;
        let rest_joints = (0..j).map(|_| read_vec3(r)).collect::<std::io::Result<Vec<_>>>()?;
        let weights = (0..n * j).map(|_| read_f32(r)).collect::<std::io::Result<Vec<_>>>()?;
        Ok(SkinnedTemplate {
            vertices,
            faces,
            uv,
            joint_parents,
            rest_joints,
            blend_weights: WeightMatrix {
                rows: n,
                cols: j,
                data: weights,
            },
        })
    }

    /// Rounds every stored value to f32 precision so that save/load is lossless.
    pub fn quantize_to_f32(&mut self) {
        let q = |v: f64| v as f32 as f64;
        for v in self.vertices.iter_mut().chain(self.rest_joints.iter_mut()) {
            v.apply(|c| *c = q(*c));
        }
        for t in &mut self.uv {
            *t = [q(t[0]), q(t[1])];
        }
        for w in &mut self.blend_weights.data {
            *w = q(*w);
        }
    }
}

pub(crate) fn joint_order(parents: &[i32]) -> Result<Vec<usize>> {
    let j = parents.len();
    let roots = parents.iter().filter(|&&p| p < 0).count();
    if roots != 1 {
        return Err(Error::validation(format!("joint tree must have exactly one root, found {roots}")));
    }
    if let Some(p) = parents.iter().find(|&&p| p >= j as i32) {
        return Err(Error::validation(format!("joint parent index {p} out of range")));
    }
    let mut children = vec![Vec::new(); j];
    let mut root = 0;
    for (i, &p) in parents.iter().enumerate() {
        if p < 0 {
            root = i;
        } else {
            children[p as usize].push(i);
        }
    }
    let mut order = Vec::with_capacity(j);
    let mut stack = vec![root];
    while let Some(i) = stack.pop() {
        order.push(i);
        stack.extend(children[i].iter().rev());
    }
    if order.len() != j {
        return Err(Error::validation("joint parent array contains a cycle"));
    }
    Ok(order)
}

fn write_f32s<W: Write>(w: &mut W, values: impl Iterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b) as f64)
}

fn read_vec3<R: Read>(r: &mut R) -> std::io::Result<Vec3> {
    Ok(Vec3::new(read_f32(r)?, read_f32(r)?, read_f32(r)?))
}
