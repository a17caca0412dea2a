//! Session directories: per-frame scans, a pose file, and a checksummed
//! manifest tying them together.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Pose};
use crate::io::pcd::{read_pcd, write_pcd, PcdEncoding};
use crate::io::poses::{read_poses, write_poses};

/// One mapping run: ordered frames of (world pose, sensor-frame scan).
#[derive(Debug, Clone)]
pub struct SessionMap {
    pub id: String,
    pub frames: Vec<(Pose, PointCloud)>,
    pub metadata: BTreeMap<String, String>,
}

impl SessionMap {
    pub fn new(id: impl Into<String>, frames: Vec<(Pose, PointCloud)>) -> Result<SessionMap> {
        if frames.is_empty() {
            return Err(Error::InvalidCloud("a session needs at least one frame".into()));
        }
        Ok(SessionMap {
            id: id.into(),
            frames,
            metadata: BTreeMap::new(),
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// World-frame map: every scan transformed by its pose, concatenated in
/// frame order. Labels survive when every scan carries them.
pub fn assemble_map(session: &SessionMap) -> PointCloud {
    let transformed: Vec<PointCloud> = session
        .frames
        .iter()
        .map(|(pose, scan)| scan.transform(pose))
        .collect();
    let refs: Vec<&PointCloud> = transformed.iter().collect();
    PointCloud::concat(&refs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionManifest {
    pub id: String,
    pub frame_count: usize,
    pub pose_file: String,
    pub scan_files: Vec<String>,
    /// sha256 hex digest per file path (relative to the session dir).
    pub checksums: BTreeMap<String, String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn manifest_err(dir: &Path, msg: String) -> Error {
    Error::Parse {
        path: dir.join("session.json"),
        line: 0,
        msg,
    }
}

/// Writes scans, poses, and manifest under `dir` (created if missing).
/// Frame timestamps are the frame indices.
pub fn write_session_dir(
    session: &SessionMap,
    dir: &Path,
    encoding: PcdEncoding,
) -> Result<SessionManifest> {
    let scans_dir = dir.join("scans");
    fs::create_dir_all(&scans_dir)
        .map_err(|e| Error::io(format!("creating {}", scans_dir.display()), e))?;

    let mut checksums = BTreeMap::new();
    let mut scan_files = Vec::with_capacity(session.frames.len());
    for (i, (_, scan)) in session.frames.iter().enumerate() {
        let rel = format!("scans/{i:06}.pcd");
        let path = dir.join(&rel);
        write_pcd(scan, &path, encoding)?;
        let bytes =
            fs::read(&path).map_err(|e| Error::io(format!("reading back {rel}"), e))?;
        checksums.insert(rel.clone(), sha256_hex(&bytes));
        scan_files.push(rel);
    }

    let poses: Vec<(f64, Pose)> = session
        .frames
        .iter()
        .enumerate()
        .map(|(i, (pose, _))| (i as f64, pose.clone()))
        .collect();
    let pose_path = dir.join("poses.txt");
    write_poses(&poses, &pose_path)?;
    let pose_bytes =
        fs::read(&pose_path).map_err(|e| Error::io("reading back poses.txt".to_string(), e))?;
    checksums.insert("poses.txt".into(), sha256_hex(&pose_bytes));

    let manifest = SessionManifest {
        id: session.id.clone(),
        frame_count: session.frames.len(),
        pose_file: "poses.txt".into(),
        scan_files,
        checksums,
        metadata: session.metadata.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(dir.join("session.json"), json)
        .map_err(|e| Error::io("writing session.json".to_string(), e))?;
    Ok(manifest)
}

/// Loads a session directory, verifying every checksum in the manifest.
pub fn read_session_dir(dir: &Path) -> Result<SessionMap> {
    let manifest_path = dir.join("session.json");
    let json = fs::read(&manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let manifest: SessionManifest = serde_json::from_slice(&json)?;

    for (rel, expect) in &manifest.checksums {
        let path = dir.join(rel);
        let bytes =
            fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if &sha256_hex(&bytes) != expect {
            return Err(Error::ChecksumMismatch(path));
        }
    }

    let poses = read_poses(&dir.join(&manifest.pose_file))?;
    if poses.len() != manifest.scan_files.len() {
        return Err(manifest_err(
            dir,
            format!(
                "{} poses but {} scan files",
                poses.len(),
                manifest.scan_files.len()
            ),
        ));
    }
    if manifest.frame_count != manifest.scan_files.len() {
        return Err(manifest_err(
            dir,
            format!(
                "frame_count {} does not match {} scan files",
                manifest.frame_count,
                manifest.scan_files.len()
            ),
        ));
    }

    let mut frames = Vec::with_capacity(poses.len());
    for ((_, pose), rel) in poses.into_iter().zip(&manifest.scan_files) {
        frames.push((pose, read_pcd(&dir.join(rel))?));
    }
    let mut session = SessionMap::new(manifest.id, frames)?;
    session.metadata = manifest.metadata;
    Ok(session)
}
