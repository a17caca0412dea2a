//! PCD v0.7 reader and writer.
//!
//! Supported layout: FIELDS `x y z` (float32) with an optional trailing
//! `label` (uint8). DATA may be `ascii` or `binary` (little-endian). Binary
//! round trips are bit-exact; ascii writes use the shortest digit string
//! that reparses to the same float32, so ascii round trips are bit-exact too.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Label, Point3, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcdEncoding {
    Ascii,
    Binary,
}

pub fn write_pcd(cloud: &PointCloud, path: &Path, encoding: PcdEncoding) -> Result<()> {
    let bytes = encode_pcd(cloud, encoding);
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// In-memory PCD encoding; the store uses this to size files without
/// touching disk.
pub(crate) fn encode_pcd(cloud: &PointCloud, encoding: PcdEncoding) -> Vec<u8> {
    let labeled = cloud.labels().is_some();
    let n = cloud.len();
    let mut head = String::new();
    head.push_str("# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\n");
    if labeled {
        head.push_str("FIELDS x y z label\nSIZE 4 4 4 1\nTYPE F F F U\nCOUNT 1 1 1 1\n");
    } else {
        head.push_str("FIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n");
    }
    let _ = write!(
        head,
        "WIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA {}\n",
        match encoding {
            PcdEncoding::Ascii => "ascii",
            PcdEncoding::Binary => "binary",
        }
    );

    let mut out = head.into_bytes();
    let labels = cloud.labels();
    match encoding {
        PcdEncoding::Ascii => {
            let mut body = String::new();
            for (i, p) in cloud.points().iter().enumerate() {
                let _ = write!(body, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
                if let Some(ls) = labels {
                    let _ = write!(body, " {}", ls[i].as_u8());
                }
                body.push('\n');
            }
            out.extend_from_slice(body.as_bytes());
        }
        PcdEncoding::Binary => {
            out.reserve(n * if labeled { 13 } else { 12 });
            for (i, p) in cloud.points().iter().enumerate() {
                out.extend_from_slice(&(p.x as f32).to_le_bytes());
                out.extend_from_slice(&(p.y as f32).to_le_bytes());
                out.extend_from_slice(&(p.z as f32).to_le_bytes());
                if let Some(ls) = labels {
                    out.push(ls[i].as_u8());
                }
            }
        }
    }
    out
}

pub fn read_pcd(path: &Path) -> Result<PointCloud> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_pcd(&bytes, path)
}

struct Header {
    labeled: bool,
    points: usize,
    encoding: PcdEncoding,
    /// Byte offset of the first payload byte.
    data_start: usize,
    /// 1-based line number of the first payload line (ascii payloads).
    data_line: usize,
}

pub(crate) fn decode_pcd(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let header = parse_header(bytes, path)?;
    match header.encoding {
        PcdEncoding::Ascii => decode_ascii(bytes, &header, path),
        PcdEncoding::Binary => decode_binary(bytes, &header, path),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let mut fields: Option<Vec<String>> = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut types: Option<Vec<String>> = None;
    let mut counts: Option<Vec<usize>> = None;
    let mut width: Option<usize> = None;
    let mut height: Option<usize> = None;
    let mut points: Option<usize> = None;

    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p)
            .unwrap_or(bytes.len());
        let raw = &bytes[offset..end];
        let next_offset = (end + 1).min(bytes.len());
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(path, line_no, "header line is not valid UTF-8"))?
            .trim();
        offset = next_offset;

        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap().to_ascii_uppercase();
        let rest: Vec<&str> = it.collect();
        let one = |rest: &[&str]| -> Result<usize> {
            rest.first()
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| parse_err(path, line_no, format!("expected one integer after {key}")))
        };
        match key.as_str() {
            "VERSION" => {
                if rest.first() != Some(&"0.7") && rest.first() != Some(&".7") {
                    return Err(Error::UnsupportedFormat(format!(
                        "PCD version {:?}, only 0.7 supported",
                        rest.first().copied().unwrap_or("")
                    )));
                }
            }
            "FIELDS" => fields = Some(rest.iter().map(|s| s.to_string()).collect()),
            "SIZE" => {
                sizes = Some(
                    rest.iter()
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| parse_err(path, line_no, "bad SIZE entry"))?,
                )
            }
            "TYPE" => types = Some(rest.iter().map(|s| s.to_ascii_uppercase()).collect()),
            "COUNT" => {
                counts = Some(
                    rest.iter()
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| parse_err(path, line_no, "bad COUNT entry"))?,
                )
            }
            "WIDTH" => width = Some(one(&rest)?),
            "HEIGHT" => height = Some(one(&rest)?),
            "VIEWPOINT" => {}
            "POINTS" => points = Some(one(&rest)?),
            "DATA" => {
                let enc = match rest.first().map(|s| s.to_ascii_lowercase()).as_deref() {
                    Some("ascii") => PcdEncoding::Ascii,
                    Some("binary") => PcdEncoding::Binary,
                    other => {
                        return Err(Error::UnsupportedFormat(format!(
                            "PCD DATA encoding {:?}",
                            other.unwrap_or("missing")
                        )))
                    }
                };
                let fields =
                    fields.ok_or_else(|| parse_err(path, line_no, "missing FIELDS line"))?;
                let labeled = match fields.iter().map(String::as_str).collect::<Vec<_>>()[..] {
                    ["x", "y", "z"] => false,
                    ["x", "y", "z", "label"] => true,
                    _ => {
                        return Err(Error::UnsupportedFormat(format!(
                            "unsupported PCD fields {fields:?}, expected x y z [label]"
                        )))
                    }
                };
                let expect_sizes: &[usize] = if labeled { &[4, 4, 4, 1] } else { &[4, 4, 4] };
                let expect_types: &[&str] = if labeled {
                    &["F", "F", "F", "U"]
                } else {
                    &["F", "F", "F"]
                };
                if let Some(s) = &sizes {
                    if s != expect_sizes {
                        return Err(Error::UnsupportedFormat(format!(
                            "unsupported PCD SIZE {s:?}, coordinates must be float32"
                        )));
                    }
                }
                if let Some(t) = &types {
                    if t.iter().map(String::as_str).ne(expect_types.iter().copied()) {
                        return Err(Error::UnsupportedFormat(format!(
                            "unsupported PCD TYPE {t:?}"
                        )));
                    }
                }
                if let Some(c) = &counts {
                    if c.iter().any(|&x| x != 1) {
                        return Err(Error::UnsupportedFormat(
                            "multi-count PCD fields are not supported".into(),
                        ));
                    }
                }
                let points =
                    points.ok_or_else(|| parse_err(path, line_no, "missing POINTS line"))?;
                if let (Some(w), Some(h)) = (width, height) {
                    if w * h != points {
                        return Err(parse_err(
                            path,
                            line_no,
                            format!("WIDTH*HEIGHT = {} but POINTS = {points}", w * h),
                        ));
                    }
                }
                return Ok(Header {
                    labeled,
                    points,
                    encoding: enc,
                    data_start: offset,
                    data_line: line_no + 1,
                });
            }
            other => {
                return Err(parse_err(path, line_no, format!("unknown header key {other}")));
            }
        }
    }
    Err(parse_err(path, line_no, "header ended before DATA line"))
}

fn decode_ascii(bytes: &[u8], header: &Header, path: &Path) -> Result<PointCloud> {
    let text = std::str::from_utf8(&bytes[header.data_start..])
        .map_err(|_| parse_err(path, header.data_line, "ascii payload is not valid UTF-8"))?;
    let mut points = Vec::with_capacity(header.points);
    let mut labels = if header.labeled {
        Some(Vec::with_capacity(header.points))
    } else {
        None
    };
    let want = if header.labeled { 4 } else { 3 };
    for (i, line) in text.lines().enumerate() {
        let line_no = header.data_line + i;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != want {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {want} values per point, got {}", tokens.len()),
            ));
        }
        let mut coord = [0f32; 3];
        for a in 0..3 {
            coord[a] = tokens[a]
                .parse::<f32>()
                .map_err(|_| parse_err(path, line_no, format!("bad float {:?}", tokens[a])))?;
        }
        points.push(Point3::new(coord[0] as f64, coord[1] as f64, coord[2] as f64));
        if let Some(ls) = labels.as_mut() {
            let raw = tokens[3]
                .parse::<u8>()
                .map_err(|_| parse_err(path, line_no, format!("bad label {:?}", tokens[3])))?;
            ls.push(
                Label::from_u8(raw)
                    .map_err(|_| parse_err(path, line_no, format!("label {raw} outside 0..=2")))?,
            );
        }
    }
    if points.len() != header.points {
        return Err(parse_err(
            path,
            header.data_line,
            format!("POINTS = {} but payload has {} points", header.points, points.len()),
        ));
    }
    finish(points, labels, path)
}

fn decode_binary(bytes: &[u8], header: &Header, path: &Path) -> Result<PointCloud> {
    let stride = if header.labeled { 13 } else { 12 };
    let payload = &bytes[header.data_start..];
    if payload.len() < header.points * stride {
        return Err(parse_err(
            path,
            header.data_line,
            format!(
                "binary payload holds {} bytes, need {} for {} points",
                payload.len(),
                header.points * stride,
                header.points
            ),
        ));
    }
    let mut points = Vec::with_capacity(header.points);
    let mut labels = if header.labeled {
        Some(Vec::with_capacity(header.points))
    } else {
        None
    };
    for i in 0..header.points {
        let at = i * stride;
        let f = |o: usize| {
            f32::from_le_bytes([
                payload[at + o],
                payload[at + o + 1],
                payload[at + o + 2],
                payload[at + o + 3],
            ])
        };
        points.push(Point3::new(f(0) as f64, f(4) as f64, f(8) as f64));
        if let Some(ls) = labels.as_mut() {
            let raw = payload[at + 12];
            ls.push(Label::from_u8(raw).map_err(|_| {
                parse_err(path, header.data_line, format!("label {raw} outside 0..=2"))
            })?);
        }
    }
    finish(points, labels, path)
}

fn finish(points: Vec<Point3>, labels: Option<Vec<Label>>, path: &Path) -> Result<PointCloud> {
    let cloud = PointCloud::new(points)
        .map_err(|e| parse_err(path, 0, format!("invalid coordinates: {e}")))?;
    match labels {
        Some(ls) => cloud.relabeled(ls),
        None => Ok(cloud),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample() -> PointCloud {
        PointCloud::new(vec![
            Point3::new(1.5, -2.25, 3.125),
            Point3::new(0.1, 0.2, 0.3),
            Point3::new(-7.0, 1e-3, 4.0e4),
        ])
        .unwrap()
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pcd");
        let cloud = sample();
        write_pcd(&cloud, &path, PcdEncoding::Binary).unwrap();
        let back = read_pcd(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in cloud.points().iter().zip(back.points()) {
            assert_eq!((a.x as f32).to_bits(), (b.x as f32).to_bits());
            assert_eq!((a.y as f32).to_bits(), (b.y as f32).to_bits());
            assert_eq!((a.z as f32).to_bits(), (b.z as f32).to_bits());
        }
        // A second write of the re-read cloud reproduces the same bytes.
        let path2 = dir.path().join("c2.pcd");
        write_pcd(&back, &path2, PcdEncoding::Binary).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn ascii_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pcd");
        let cloud = sample();
        write_pcd(&cloud, &path, PcdEncoding::Ascii).unwrap();
        let back = read_pcd(&path).unwrap();
        for (a, b) in cloud.points().iter().zip(back.points()) {
            assert_eq!((a.x as f32).to_bits(), (b.x as f32).to_bits());
        }
    }

    #[test]
    fn labels_survive_both_encodings() {
        let dir = tempdir().unwrap();
        let cloud = sample()
            .relabeled(vec![Label::Static, Label::Dynamic, Label::Unknown])
            .unwrap();
        for (name, enc) in [("l1.pcd", PcdEncoding::Ascii), ("l2.pcd", PcdEncoding::Binary)] {
            let path = dir.path().join(name);
            write_pcd(&cloud, &path, enc).unwrap();
            let back = read_pcd(&path).unwrap();
            assert_eq!(back.labels().unwrap(), cloud.labels().unwrap());
        }
    }

    #[test]
    fn width_points_mismatch_is_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.pcd");
        std::fs::write(
            &path,
            "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n\
             WIDTH 2\nHEIGHT 1\nPOINTS 3\nDATA ascii\n0 0 0\n1 1 1\n2 2 2\n",
        )
        .unwrap();
        match read_pcd(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_binary_payload_is_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.pcd");
        write_pcd(&sample(), &path, PcdEncoding::Binary).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_pcd(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn double_precision_pcd_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.pcd");
        std::fs::write(
            &path,
            "VERSION 0.7\nFIELDS x y z\nSIZE 8 8 8\nTYPE F F F\nCOUNT 1 1 1\n\
             WIDTH 1\nHEIGHT 1\nPOINTS 1\nDATA ascii\n0 0 0\n",
        )
        .unwrap();
        assert!(matches!(read_pcd(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn extra_fields_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("rgb.pcd");
        std::fs::write(
            &path,
            "VERSION 0.7\nFIELDS x y z rgb\nSIZE 4 4 4 4\nTYPE F F F F\nCOUNT 1 1 1 1\n\
             WIDTH 1\nHEIGHT 1\nPOINTS 1\nDATA ascii\n0 0 0 0\n",
        )
        .unwrap();
        assert!(matches!(read_pcd(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn bad_float_reports_its_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.pcd");
        std::fs::write(
            &path,
            "VERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\nTYPE F F F\nCOUNT 1 1 1\n\
             WIDTH 2\nHEIGHT 1\nPOINTS 2\nDATA ascii\n0 0 0\n0 zero 0\n",
        )
        .unwrap();
        match read_pcd(&path) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 11);
                assert!(msg.contains("zero"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_cloud_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.pcd");
        write_pcd(&PointCloud::empty(), &path, PcdEncoding::Binary).unwrap();
        assert_eq!(read_pcd(&path).unwrap().len(), 0);
    }
}
