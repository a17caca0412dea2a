//! Minimal ascii PLY support: `element vertex` with float/double x y z.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex_element = false;
    let mut header_lines = 0usize;

    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => header_lines += 1,
        _ => return Err(err(1, "missing ply magic line".into())),
    }
    for (i, line) in lines.by_ref() {
        header_lines += 1;
        let line = line.trim();
        let line_no = i + 1;
        if line.starts_with("comment") || line.is_empty() {
            continue;
        }
        if line == "end_header" {
            break;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", other, ..] => {
                return Err(Error::UnsupportedFormat(format!(
                    "PLY format {other}, only ascii supported"
                )))
            }
            ["element", "vertex", n] => {
                in_vertex_element = true;
                vertex_count =
                    Some(n.parse().map_err(|_| err(line_no, format!("bad vertex count {n}")))?);
            }
            ["element", name, _] => {
                return Err(Error::UnsupportedFormat(format!(
                    "PLY element {name}, only vertex supported"
                )))
            }
            ["property", ty, name] if in_vertex_element => {
                if *ty != "float" && *ty != "double" && *ty != "float32" && *ty != "float64" {
                    return Err(Error::UnsupportedFormat(format!(
                        "PLY vertex property type {ty}"
                    )));
                }
                properties.push(name.to_string());
            }
            _ => return Err(err(line_no, format!("unrecognized header line {line:?}"))),
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| err(header_lines, "no vertex element".into()))?;
    if properties != ["x", "y", "z"] {
        return Err(Error::UnsupportedFormat(format!(
            "PLY vertex properties {properties:?}, expected x y z"
        )));
    }

    let mut points = Vec::with_capacity(vertex_count);
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut vals = [0f64; 3];
        let mut it = line.split_whitespace();
        for v in vals.iter_mut() {
            *v = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| err(line_no, format!("bad vertex line {line:?}")))?;
        }
        if it.next().is_some() {
            return Err(err(line_no, "trailing values on vertex line".into()));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    if points.len() != vertex_count {
        return Err(err(
            header_lines,
            format!("declared {vertex_count} vertices, found {}", points.len()),
        ));
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn single_vertex_parses() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n\
             property float y\nproperty float z\nend_header\n1.0 2.0 3.0\n",
        )
        .unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.points()[0], Point3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.ply");
        let cloud = PointCloud::new(vec![
            Point3::new(0.5, -1.25, 2.0),
            Point3::new(4.0, 5.0, 6.0),
        ]);
        let cloud = cloud.unwrap();
        write_ply(&cloud, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cloud.points().iter().zip(back.points()) {
            assert_eq!(a.x as f32, b.x as f32);
        }
    }

    #[test]
    fn binary_ply_is_unsupported() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.ply");
        fs::write(
            &path,
            "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn vertex_count_mismatch_is_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ply");
        fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n\
             property float y\nproperty float z\nend_header\n1 2 3\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(Error::Parse { .. })));
    }
}
