//! Rigid transforms as unit quaternion + translation.

use nalgebra::{Matrix3, UnitQuaternion};

use crate::geom::{Point3, Vec3};

/// A rigid transform: `p -> R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Pose {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Pose {
        Pose {
            rotation,
            translation,
        }
    }

    /// From a rotation matrix that may carry small numeric drift; the closest
    /// unit quaternion is used.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Pose {
        Pose {
            rotation: UnitQuaternion::from_matrix(rotation),
            translation,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vec(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Row-major 3x4 `[R | t]`, the on-disk transform layout.
    pub fn to_matrix3x4_rows(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_matrix3x4_rows(m: &[f64; 12]) -> Pose {
        let rot = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Pose::from_matrix(&rot, Vec3::new(m[3], m[7], m[11]))
    }

    /// Rotation angle in radians relative to `other`.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    /// Euclidean distance between the two translations.
    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}
