//! Point-cloud and session file formats.
//!
//! Clouds travel as PCD v0.7 (ascii or binary little-endian, `x y z` float32
//! with an optional `label` uint8) or ascii PLY. Trajectories are plain text,
//! one `timestamp tx ty tz qx qy qz qw` line per frame. Sessions live in a
//! directory of per-frame scans plus a pose file, described by a checksummed
//! manifest.

pub(crate) mod pcd;
mod ply;
mod poses;
mod session;

pub use pcd::{read_pcd, write_pcd, PcdEncoding};
pub use ply::{read_ply, write_ply};
pub use poses::{read_poses, write_poses};
pub use session::{
    assemble_map, read_session_dir, write_session_dir, SessionManifest, SessionMap,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Reads a cloud, picking the parser from the file extension
/// (`.pcd` or `.ply`).
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match extension(path) {
        Some("pcd") => read_pcd(path),
        Some("ply") => read_ply(path),
        _ => Err(Error::UnsupportedFormat(format!(
            "cannot infer cloud format from path {}",
            path.display()
        ))),
    }
}

/// Writes a cloud, picking the format from the file extension. PCD files use
/// the requested encoding; PLY is always ascii.
pub fn write_cloud(cloud: &PointCloud, path: &Path, encoding: PcdEncoding) -> Result<()> {
    match extension(path) {
        Some("pcd") => write_pcd(cloud, path, encoding),
        Some("ply") => write_ply(cloud, path),
        _ => Err(Error::UnsupportedFormat(format!(
            "cannot infer cloud format from path {}",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}
