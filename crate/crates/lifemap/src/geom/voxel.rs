//! Voxel hashing and centroid downsampling.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, Vec3};

/// Integer cell coordinates of a point on a cubic grid.
///
/// Keys use `floor(coord / voxel_size)` in f64, so a point exactly on a cell
/// boundary belongs to the higher cell and negative coordinates round toward
/// negative infinity.
pub fn voxel_key(p: &Point3, voxel_size: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    )
}

/// Replaces every occupied voxel by the centroid of its points.
///
/// Output order is sorted by voxel key, so the result is independent of the
/// input ordering. Labels are dropped: a centroid is not one of the inputs.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "voxel_size must be positive and finite, got {voxel_size}"
        )));
    }
    let mut cells: HashMap<(i64, i64, i64), (Vec3, usize)> = HashMap::new();
    for p in cloud.points() {
        let e = cells
            .entry(voxel_key(p, voxel_size))
            .or_insert((Vec3::zeros(), 0));
        e.0 += p.coords;
        e.1 += 1;
    }
    let mut keyed: Vec<((i64, i64, i64), Point3)> = cells
        .into_iter()
        .map(|(k, (sum, n))| (k, Point3::from(sum / n as f64)))
        .collect();
    keyed.sort_unstable_by_key(|(k, _)| *k);
    PointCloud::new(keyed.into_iter().map(|(_, p)| p).collect())
}
