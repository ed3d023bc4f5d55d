//! Forward kinematics, linear blend skinning and positional UV maps.

mod fk;
mod init;
mod lbs;
mod uvmap;

pub use fk::{fk_backward, forward_kinematics, rodrigues, rodrigues_jacobian, skew, JointTransforms};
pub use init::{init_gaussians_from_uv, texel_spacing};
pub use lbs::{lbs_backward, lbs_normals, lbs_points, pose_gaussians, LbsGrads, PosedNormals};
pub use uvmap::{bake_pose_uv, bake_positional_uv, posed_map, rasterize_uv, PositionalUvMap, UvCoverage};
