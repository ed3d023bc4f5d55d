use crate::error::{Error, Result};
use crate::scene::{Vec3, WeightMatrix};

/// Per-Gaussian attributes of a splat cloud. Indices are stable: posing a set
/// produces a new set whose entry `k` is the deformed canonical Gaussian `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub centers: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub opacities: Vec<f64>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub blend_weights: WeightMatrix,
    pub visibility: Vec<bool>,
    /// Source texel `(column, row)` in the positional UV map.
    pub uv_texel: Vec<[u32; 2]>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Empty set whose blend weights have `joints` columns.
    pub fn empty(joints: usize) -> Self {
        GaussianSet {
            centers: Vec::new(),
            colors: Vec::new(),
            opacities: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            normals: Vec::new(),
            blend_weights: WeightMatrix::zeros(0, joints),
            visibility: Vec::new(),
            uv_texel: Vec::new(),
        }
    }

    /// Appends one Gaussian with identity rotation and a single-joint weight.
    pub fn push_simple(&mut self, center: Vec3, color: Vec3, opacity: f64, scale: Vec3) {
        let joints = self.blend_weights.cols().max(1);
        if self.blend_weights.cols() == 0 {
            self.blend_weights = WeightMatrix::zeros(0, 1);
        }
        let mut w = vec![0.0; joints];
        w[0] = 1.0;
        self.centers.push(center);
        self.colors.push(color);
        self.opacities.push(opacity);
        self.rotations.push([1.0, 0.0, 0.0, 0.0]);
        self.scales.push(scale);
        self.normals.push(Vec3::new(0.0, 0.0, -1.0));
        self.blend_weights.push_row(&w);
        self.visibility.push(false);
        self.uv_texel.push([0, 0]);
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        let lens = [
            self.colors.len(),
            self.opacities.len(),
            self.rotations.len(),
            self.scales.len(),
            self.normals.len(),
            self.blend_weights.rows(),
            self.visibility.len(),
            self.uv_texel.len(),
        ];
        if lens.iter().any(|&l| l != k) {
            return Err(Error::shape(format!("{k} entries per attribute"), format!("{lens:?}")));
        }
        for i in 0..k {
            if !self.centers[i].iter().all(|v| v.is_finite()) {
                return Err(Error::validation(format!("gaussian {i}: non-finite center")));
            }
            if !self.scales[i].iter().all(|&s| s > 0.0 && s.is_finite()) {
                return Err(Error::validation(format!("gaussian {i}: scales must be positive")));
            }
            let q = self.rotations[i];
            let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (qn - 1.0).abs() > 1e-5 {
                return Err(Error::validation(format!("gaussian {i}: quaternion norm {qn}")));
            }
            if (self.normals[i].norm() - 1.0).abs() > 1e-4 {
                return Err(Error::validation(format!("gaussian {i}: normal is not unit length")));
            }
            if !(0.0..=1.0).contains(&self.opacities[i]) {
                return Err(Error::validation(format!("gaussian {i}: opacity outside [0,1]")));
            }
        }
        self.blend_weights.check_rows_normalized(1e-5)
    }

    /// Copy of the set restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> GaussianSet {
        let mut w = WeightMatrix::zeros(0, self.blend_weights.cols());
        for &i in indices {
            w.push_row(self.blend_weights.row(i));
        }
        GaussianSet {
            centers: indices.iter().map(|&i| self.centers[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            opacities: indices.iter().map(|&i| self.opacities[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            scales: indices.iter().map(|&i| self.scales[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            blend_weights: w,
            visibility: indices.iter().map(|&i| self.visibility[i]).collect(),
            uv_texel: indices.iter().map(|&i| self.uv_texel[i]).collect(),
        }
    }
}

/// Gradients of a scalar objective with respect to the rendered parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub d_centers: Vec<Vec3>,
    pub d_colors: Vec<Vec3>,
    pub d_scales: Vec<Vec3>,
    pub d_opacities: Vec<f64>,
    /// Present when the rendered attribute was the normal.
    pub d_normals: Option<Vec<Vec3>>,
}

impl ParamGrads {
    pub fn zeros(k: usize) -> Self {
        ParamGrads {
            d_centers: vec![Vec3::zeros(); k],
            d_colors: vec![Vec3::zeros(); k],
            d_scales: vec![Vec3::zeros(); k],
            d_opacities: vec![0.0; k],
            d_normals: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        let v3 = |v: &Vec<Vec3>| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
        v3(&self.d_centers)
            && v3(&self.d_colors)
            && v3(&self.d_scales)
            && self.d_opacities.iter().all(|v| v.is_finite())
            && self.d_normals.as_ref().map_or(true, v3)
    }
}
