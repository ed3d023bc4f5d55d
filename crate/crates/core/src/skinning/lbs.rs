use super::fk::JointTransforms;
use crate::error::{Error, Result};
use crate::raster::GaussianSet;
use crate::scene::{Mat3, Mat4, Vec3, WeightMatrix};

const WEIGHT_TOLERANCE: f64 = 1e-3;

fn check_weights(count: usize, transforms: &JointTransforms, weights: &WeightMatrix) -> Result<()> {
    if weights.rows() != count || weights.cols() != transforms.len() {
        return Err(Error::shape(
            format!("{count}x{} weights", transforms.len()),
            format!("{}x{}", weights.rows(), weights.cols()),
        ));
    }
    weights.check_rows_normalized(WEIGHT_TOLERANCE)
}

/// `sum_j w_j (G_j - I)`: blending the deviation from identity keeps the
/// identity pose exact even when a weight row sums to 1 only approximately.
fn blend(transforms: &JointTransforms, w: &[f64]) -> Mat4 {
    let mut m = Mat4::zeros();
    for (j, &wj) in w.iter().enumerate() {
        if wj != 0.0 {
            m += (transforms.matrices[j] - Mat4::identity()) * wj;
        }
    }
    m
}

fn apply(m: &Mat4, x: &Vec3) -> Vec3 {
    x + m.fixed_view::<3, 3>(0, 0) * x + m.fixed_view::<3, 1>(0, 3)
}

/// `x_o = (sum_j w_j G_j) [x_c; 1]`.
pub fn lbs_points(points: &[Vec3], transforms: &JointTransforms, weights: &WeightMatrix) -> Result<Vec<Vec3>> {
    check_weights(points.len(), transforms, weights)?;
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, x)| apply(&blend(transforms, weights.row(i)), x))
        .collect())
}

/// Normals transformed by the blended rotation blocks and renormalized.
#[derive(Clone, Debug)]
pub struct PosedNormals {
    pub normals: Vec<Vec3>,
    /// Entries whose blended normal vanished and kept their input value.
    pub degenerate: usize,
}

pub fn lbs_normals(normals: &[Vec3], transforms: &JointTransforms, weights: &WeightMatrix) -> Result<PosedNormals> {
    check_weights(normals.len(), transforms, weights)?;
    let mut degenerate = 0;
    let out = normals
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let m = n + blend(transforms, weights.row(i)).fixed_view::<3, 3>(0, 0) * n;
            let len = m.norm();
            if len < 1e-12 {
                degenerate += 1;
                *n
            } else {
                m / len
            }
        })
        .collect();
    Ok(PosedNormals {
        normals: out,
        degenerate,
    })
}

/// Poses centers and normals; scale, opacity, rotation and the remaining
/// attributes are carried over unchanged.
pub fn pose_gaussians(canonical: &GaussianSet, transforms: &JointTransforms) -> Result<GaussianSet> {
    let mut posed = canonical.clone();
    posed.centers = lbs_points(&canonical.centers, transforms, &canonical.blend_weights)?;
    let n = lbs_normals(&canonical.normals, transforms, &canonical.blend_weights)?;
    if n.degenerate > 0 {
        log::warn!("{} gaussians had degenerate blended normals", n.degenerate);
    }
    posed.normals = n.normals;
    Ok(posed)
}

/// Gradients flowing back through [`pose_gaussians`].
#[derive(Clone, Debug)]
pub struct LbsGrads {
    pub d_points: Vec<Vec3>,
    pub d_normals: Vec<Vec3>,
    /// Gradient on each skinning matrix (top 3x4 block populated).
    pub d_matrices: Vec<Mat4>,
}

/// Reverse pass for posed centers and normals. `d_posed_normals` may be
/// empty when no normal gradient exists.
pub fn lbs_backward(
    points: &[Vec3],
    normals: &[Vec3],
    transforms: &JointTransforms,
    weights: &WeightMatrix,
    d_posed_points: &[Vec3],
    d_posed_normals: &[Vec3],
) -> Result<LbsGrads> {
    check_weights(points.len(), transforms, weights)?;
    if d_posed_points.len() != points.len() {
        return Err(Error::shape(format!("{} point gradients", points.len()), d_posed_points.len()));
    }
    let with_normals = !d_posed_normals.is_empty();
    if with_normals && (d_posed_normals.len() != normals.len() || normals.len() != points.len()) {
        return Err(Error::shape(format!("{} normal gradients", points.len()), d_posed_normals.len()));
    }
    let j = transforms.len();
    let mut d_matrices = vec![Mat4::zeros(); j];
    let mut d_points = Vec::with_capacity(points.len());
    let mut d_normals = vec![Vec3::zeros(); if with_normals { points.len() } else { 0 }];
    for i in 0..points.len() {
        let w = weights.row(i);
        let m = blend(transforms, w);
        let rot: Mat3 = m.fixed_view::<3, 3>(0, 0) + Mat3::identity();
        let g = d_posed_points[i];
        d_points.push(rot.transpose() * g);
        let mut d_rot = g * points[i].transpose();
        let d_t = g;
        if with_normals {
            let n = normals[i];
            let v = rot * n;
            let len = v.norm();
            if len >= 1e-12 {
                let u = v / len;
                let dv = (d_posed_normals[i] - u * u.dot(&d_posed_normals[i])) / len;
                d_normals[i] = rot.transpose() * dv;
                d_rot += dv * n.transpose();
            }
        }
        for (k, &wk) in w.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let mut blk = d_matrices[k].fixed_view_mut::<3, 3>(0, 0);
            blk += d_rot * wk;
            let mut col = d_matrices[k].fixed_view_mut::<3, 1>(0, 3);
            col += d_t * wk;
        }
    }
    Ok(LbsGrads {
        d_points,
        d_normals,
        d_matrices,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fk::forward_kinematics;
    use super::*;
    use crate::scene::{Pose, SkinnedTemplate};

    fn one_joint() -> SkinnedTemplate {
        SkinnedTemplate {
            vertices: vec![],
            faces: vec![],
            uv: vec![],
            joint_parents: vec![-1],
            rest_joints: vec![Vec3::zeros()],
            blend_weights: WeightMatrix::zeros(0, 1),
        }
    }

    #[test]
    fn global_rotation_maps_x_to_y() {
        let mut pose = Pose::identity(1);
        pose.joint_rotations[0] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let t = forward_kinematics(&one_joint(), &pose).unwrap();
        let w = WeightMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let out = lbs_points(&[Vec3::x()], &t, &w).unwrap();
        assert!((out[0] - Vec3::y()).norm() < 1e-12);
        let n = lbs_normals(&[Vec3::x()], &t, &w).unwrap();
        assert!((n.normals[0] - Vec3::y()).norm() < 1e-12);
    }

    #[test]
    fn unnormalized_weights_are_rejected() {
        let t = forward_kinematics(&one_joint(), &Pose::identity(1)).unwrap();
        let w = WeightMatrix::from_vec(1, 1, vec![0.9]).unwrap();
        assert!(lbs_points(&[Vec3::x()], &t, &w).unwrap_err().is_validation());
    }

    #[test]
    fn vanishing_blend_keeps_input_normal() {
        let mut tmpl = one_joint();
        tmpl.joint_parents = vec![-1, 0];
        tmpl.rest_joints.push(Vec3::zeros());
        let mut pose = Pose::identity(2);
        pose.joint_rotations[1] = [0.0, std::f64::consts::PI, 0.0];
        let t = forward_kinematics(&tmpl, &pose).unwrap();
        let w = WeightMatrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
        let n = lbs_normals(&[Vec3::x()], &t, &w).unwrap();
        assert_eq!(n.degenerate, 1);
        assert_eq!(n.normals[0], Vec3::x());
    }
}
