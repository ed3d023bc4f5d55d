use crate::error::Result;
use crate::scene::{Mat3, Mat4, Pose, SkinnedTemplate, Vec3};

/// Per-joint skinning matrices `G_j = W_j(p) * W_j(rest)^-1` together with
/// the intermediates needed to differentiate them with respect to the pose.
#[derive(Clone, Debug)]
pub struct JointTransforms {
    pub matrices: Vec<Mat4>,
    order: Vec<usize>,
    parents: Vec<i32>,
    local_rotations: Vec<Mat3>,
    world_rotations: Vec<Mat3>,
    offsets: Vec<Vec3>,
    rest: Vec<Vec3>,
    pose: Pose,
}

impl JointTransforms {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    /// Rotation block of joint `j`.
    pub fn rotation(&self, j: usize) -> Mat3 {
        self.matrices[j].fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self, j: usize) -> Vec3 {
        self.matrices[j].fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from an axis-angle vector to a rotation matrix.
pub fn rodrigues(theta: &Vec3) -> Mat3 {
    let angle = theta.norm();
    let k = skew(theta);
    if angle < 1e-12 {
        return Mat3::identity() + k;
    }
    let (s, c) = angle.sin_cos();
    Mat3::identity() + k * (s / angle) + k * k * ((1.0 - c) / (angle * angle))
}

/// Partial derivatives `dR/dtheta_i`, i = 0..3.
pub fn rodrigues_jacobian(theta: &Vec3) -> [Mat3; 3] {
    let sq = theta.norm_squared();
    let e = [Vec3::x(), Vec3::y(), Vec3::z()];
    if sq < 1e-16 {
        return e.map(|ei| skew(&ei));
    }
    let r = rodrigues(theta);
    let k = skew(theta);
    let i_minus_r = Mat3::identity() - r;
    e.map(|ei| {
        let v = theta.cross(&(i_minus_r * ei));
        (k * theta.dot(&ei) + skew(&v)) * r / sq
    })
}

fn rigid(r: &Mat3, t: &Vec3) -> Mat4 {
    let mut m = Mat4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Composes local joint transforms root-to-leaf. The root's local transform
/// is `T(rest_root + translation) R(theta_root)`; every other joint uses
/// `T(rest_j - rest_parent) R(theta_j)`.
pub fn forward_kinematics(template: &SkinnedTemplate, pose: &Pose) -> Result<JointTransforms> {
    let parents = template.joint_parents.clone();
    let order = template.joint_order()?;
    pose.validate(parents.len())?;
    let j = parents.len();
    let mut local_rotations = vec![Mat3::identity(); j];
    let mut world_rotations = vec![Mat3::identity(); j];
    let mut world_t = vec![Vec3::zeros(); j];
    let mut offsets = vec![Vec3::zeros(); j];
    for &k in &order {
        let r = rodrigues(&pose.rotation(k));
        local_rotations[k] = r;
        if parents[k] < 0 {
            offsets[k] = template.rest_joints[k] + pose.translation();
            world_rotations[k] = r;
            world_t[k] = offsets[k];
        } else {
            let p = parents[k] as usize;
            offsets[k] = template.rest_joints[k] - template.rest_joints[p];
            world_rotations[k] = world_rotations[p] * r;
            world_t[k] = world_rotations[p] * offsets[k] + world_t[p];
        }
    }
    let matrices = (0..j)
        .map(|k| {
            let a = world_rotations[k];
            rigid(&a, &(world_t[k] - a * template.rest_joints[k]))
        })
        .collect();
    Ok(JointTransforms {
        matrices,
        order,
        parents,
        local_rotations,
        world_rotations,
        offsets,
        rest: template.rest_joints.clone(),
        pose: pose.clone(),
    })
}

/// Reverse pass of [`forward_kinematics`]: maps gradients on the top 3x4
/// blocks of the skinning matrices to a pose-shaped gradient.
pub fn fk_backward(transforms: &JointTransforms, d_matrices: &[Mat4]) -> Pose {
    let j = transforms.len();
    let mut d_a = vec![Mat3::zeros(); j];
    let mut d_b = vec![Vec3::zeros(); j];
    for k in 0..j {
        let dg = &d_matrices[k];
        let dg_r: Mat3 = dg.fixed_view::<3, 3>(0, 0).into_owned();
        let dg_t: Vec3 = dg.fixed_view::<3, 1>(0, 3).into_owned();
        d_a[k] = dg_r - dg_t * transforms.rest[k].transpose();
        d_b[k] = dg_t;
    }
    let mut grad = Pose::identity(j);
    for &k in transforms.order.iter().rev() {
        let d_local = if transforms.parents[k] < 0 {
            grad.root_translation = d_b[k].into();
            d_a[k]
        } else {
            let p = transforms.parents[k] as usize;
            let a_p = transforms.world_rotations[p];
            let (da_k, db_k) = (d_a[k], d_b[k]);
            d_a[p] += da_k * transforms.local_rotations[k].transpose() + db_k * transforms.offsets[k].transpose();
            d_b[p] += db_k;
            a_p.transpose() * da_k
        };
        let jac = rodrigues_jacobian(&transforms.pose.rotation(k));
        for i in 0..3 {
            grad.joint_rotations[k][i] = d_local.component_mul(&jac[i]).sum();
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::WeightMatrix;

    fn chain() -> SkinnedTemplate {
        SkinnedTemplate {
            vertices: vec![Vec3::zeros()],
            faces: vec![],
            uv: vec![],
            joint_parents: vec![-1, 0],
            rest_joints: vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
            blend_weights: WeightMatrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
        }
    }

    #[test]
    fn identity_pose_gives_identity_matrices() {
        let t = forward_kinematics(&chain(), &Pose::identity(2)).unwrap();
        assert!(t.matrices.iter().all(|m| *m == Mat4::identity()));
    }

    #[test]
    fn child_rotation_about_z() {
        let mut pose = Pose::identity(2);
        pose.joint_rotations[1] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let t = forward_kinematics(&chain(), &pose).unwrap();
        // (1,0,0) relative to the child joint sits at (2,0,0) and swings to (1,1,0).
        let p = t.matrices[1] * nalgebra::Vector4::new(2.0, 0.0, 0.0, 1.0);
        assert!((p - nalgebra::Vector4::new(1.0, 1.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn rodrigues_matches_nalgebra() {
        let th = Vec3::new(0.3, -1.2, 0.7);
        let ours = rodrigues(&th);
        let theirs = *nalgebra::Rotation3::new(th).matrix();
        assert!((ours - theirs).norm() < 1e-12);
    }

    #[test]
    fn rodrigues_jacobian_matches_finite_differences() {
        for th in [Vec3::new(0.3, -1.2, 0.7), Vec3::zeros(), Vec3::new(1e-9, 0.0, 0.0)] {
            let jac = rodrigues_jacobian(&th);
            for i in 0..3 {
                let mut e = Vec3::zeros();
                e[i] = 1e-6;
                let fd = (rodrigues(&(th + e)) - rodrigues(&(th - e))) / 2e-6;
                assert!((fd - jac[i]).norm() < 1e-7, "{th:?} axis {i}");
            }
        }
    }

    #[test]
    fn cyclic_tree_is_rejected() {
        let mut t = chain();
        t.joint_parents = vec![1, 0];
        assert!(forward_kinematics(&t, &Pose::identity(2)).unwrap_err().is_validation());
    }
}
