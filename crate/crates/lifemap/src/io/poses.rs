//! Trajectory text files: `timestamp tx ty tz qx qy qz qw` per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geom::{Pose, Vec3};

pub fn write_poses(poses: &[(f64, Pose)], path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in poses {
        let q = pose.rotation.quaternion();
        let tr = &pose.translation;
        let _ = writeln!(out, "{t} {} {} {} {} {} {} {}", tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w);
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parses a trajectory file. `#` starts a comment; blank lines are skipped.
/// Quaternions are normalized on load; a deviation from unit norm beyond
/// 1e-3 is reported on stderr but still accepted.
pub fn read_poses(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(format!("non-numeric value in {line:?}")))?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 values, got {}", vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if q.norm() < 1e-9 {
            return Err(err("zero quaternion cannot be normalized".into()));
        }
        if (q.norm() - 1.0).abs() > 1e-3 {
            eprintln!(
                "warning: {}:{line_no}: quaternion norm {:.6} off unit, normalizing",
                path.display(),
                q.norm()
            );
        }
        let rotation = UnitQuaternion::from_quaternion(q);
        let translation = Vec3::new(vals[1], vals[2], vals[3]);
        out.push((vals[0], Pose::new(rotation, translation)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn identity_line_parses() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.txt");
        fs::write(&path, "0.0 0 0 0 0 0 0 1\n").unwrap();
        let poses = read_poses(&path).unwrap();
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].0, 0.0);
        assert!(poses[0].1.rotation_angle_to(&Pose::identity()) < 1e-12);
        assert!(poses[0].1.translation.norm() < 1e-12);
    }

    #[test]
    fn comment_only_file_is_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "# nothing here\n\n# still nothing\n").unwrap();
        assert!(read_poses(&path).unwrap().is_empty());
    }

    #[test]
    fn off_unit_quaternion_is_normalized() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("q.txt");
        fs::write(&path, "1.5 1 2 3 0 0 0 2\n").unwrap();
        let poses = read_poses(&path).unwrap();
        let q = poses[0].1.rotation;
        assert!((q.norm() - 1.0).abs() < 1e-12);
        assert!(poses[0].1.rotation_angle_to(&Pose::identity()) < 1e-12);
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "0 0 0 0 0 0 0 1\n0 0 zero 0 0 0 0 1\n").unwrap();
        match read_poses(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rt.txt");
        let poses = vec![
            (0.0, Pose::identity()),
            (
                0.1,
                Pose::new(
                    UnitQuaternion::from_euler_angles(0.1, -0.2, 0.7),
                    Vec3::new(4.0, -2.0, 0.5),
                ),
            ),
        ];
        write_poses(&poses, &path).unwrap();
        let back = read_poses(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((ta, pa), (tb, pb)) in poses.iter().zip(&back) {
            assert_eq!(ta, tb);
            assert!(pa.rotation_angle_to(pb) < 1e-12);
            assert!(pa.translation_distance_to(pb) < 1e-12);
        }
    }
}
