//! Geometric types and algorithms shared by every pipeline stage.

mod chamfer;
mod cloud;
mod hull;
mod index;
mod normals;
mod plane;
mod pose;
mod sor;
mod voxel;

pub use chamfer::chamfer_distance;
pub use cloud::{Label, Point3, PointCloud, Vec3};
pub use hull::{hull_crop, hull_of, HullPolygon};
pub use index::SpatialIndex;
pub use normals::estimate_normals;
pub use plane::{ransac_plane, PlaneModel};
pub use pose::Pose;
pub use sor::{statistical_outlier_removal, statistical_outlier_removal_keep};
pub use voxel::{voxel_downsample, voxel_key};
