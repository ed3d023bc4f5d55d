//! Geometric and image value types shared across the engine.

mod camera;
mod image;
mod template;

pub use camera::{Camera, Intrinsics, Ray};
pub use image::ImageBuffer;
pub use template::{SkinnedTemplate, WeightMatrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat4 = nalgebra::Matrix4<f64>;

/// Skeleton pose: one axis-angle rotation per joint plus a root translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joint_rotations: Vec<[f64; 3]>,
    pub root_translation: [f64; 3],
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Pose {
            joint_rotations: vec![[0.0; 3]; joints],
            root_translation: [0.0; 3],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rotations.len()
    }

    pub fn rotation(&self, j: usize) -> Vec3 {
        Vec3::from(self.joint_rotations[j])
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::from(self.root_translation)
    }

    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.joint_rotations.len() != joints {
            return Err(Error::shape(
                format!("{joints} joint rotations"),
                format!("{}", self.joint_rotations.len()),
            ));
        }
        let finite = self
            .joint_rotations
            .iter()
            .flatten()
            .chain(&self.root_translation)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("pose contains non-finite values"));
        }
        Ok(())
    }

    /// Componentwise sum, used to apply refinement offsets.
    pub fn offset_by(&self, delta: &Pose) -> Pose {
        Pose {
            joint_rotations: self
                .joint_rotations
                .iter()
                .zip(&delta.joint_rotations)
                .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
                .collect(),
            root_translation: [
                self.root_translation[0] + delta.root_translation[0],
                self.root_translation[1] + delta.root_translation[1],
                self.root_translation[2] + delta.root_translation[2],
            ],
        }
    }

    /// Flattened `[rot_0 .. rot_{J-1}, translation]` parameter vector.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.joint_rotations.iter().flatten().copied().collect();
        v.extend_from_slice(&self.root_translation);
        v
    }

    pub fn from_flat(values: &[f64]) -> Pose {
        let joints = values.len() / 3 - 1;
        Pose {
            joint_rotations: (0..joints)
                .map(|j| [values[3 * j], values[3 * j + 1], values[3 * j + 2]])
                .collect(),
            root_translation: [values[3 * joints], values[3 * joints + 1], values[3 * joints + 2]],
        }
    }
}
