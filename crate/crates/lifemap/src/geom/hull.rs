//! 2D convex hulls over the ground-plane projection of a cloud.
//!
//! Session boundaries are polygons in the xy plane; clouds are assumed
//! gravity aligned, so projecting away z is sufficient.

use crate::error::{Error, Result};
use crate::geom::PointCloud;

/// Convex polygon with vertices in counterclockwise order.
#[derive(Debug, Clone, PartialEq)]
pub struct HullPolygon {
    vertices: Vec<[f64; 2]>,
}

impl HullPolygon {
    /// Builds from an existing CCW vertex list (e.g. read back from disk).
    pub fn from_vertices(vertices: Vec<[f64; 2]>) -> Result<HullPolygon> {
        if vertices.len() < 3 {
            return Err(Error::DegenerateInput(format!(
                "hull needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let hull = HullPolygon { vertices };
        if hull.area() <= 0.0 {
            return Err(Error::DegenerateInput(
                "hull vertices are not in counterclockwise order or enclose no area".into(),
            ));
        }
        Ok(hull)
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Signed area by the shoelace formula; positive for CCW polygons.
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        let mut acc = 0.0;
        for i in 0..n {
            let j = (i + 1) % n;
            acc += v[i][0] * v[j][1] - v[j][0] * v[i][1];
        }
        acc / 2.0
    }

    /// Point-in-polygon test, inclusive of the boundary.
    ///
    /// Uses a relative tolerance so points that sit exactly on an edge after
    /// f32 round-trips are still counted as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.vertices;
        let n = v.len();
        for i in 0..n {
            let j = (i + 1) % n;
            let ex = v[j][0] - v[i][0];
            let ey = v[j][1] - v[i][1];
            let px = x - v[i][0];
            let py = y - v[i][1];
            let cross = ex * py - ey * px;
            let scale = (ex * ex + ey * ey).sqrt() * (px * px + py * py).sqrt();
            if cross < -1e-9 * (1.0 + scale) {
                return false;
            }
        }
        true
    }
}

/// Convex hull of the xy projection of `cloud`.
///
/// Fails with [`Error::DegenerateInput`] when all points are collinear in
/// the projection (no enclosing area exists).
pub fn hull_of(cloud: &PointCloud) -> Result<HullPolygon> {
    let mut xy: Vec<[f64; 2]> = cloud.points().iter().map(|p| [p.x, p.y]).collect();
    xy.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    xy.dedup();
    if xy.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "hull needs at least 3 distinct xy positions, got {}",
            xy.len()
        )));
    }

    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| -> f64 {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };

    // Monotone chain: lower hull then upper hull, collinear points dropped.
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * xy.len());
    for p in xy.iter() {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in xy.iter().rev() {
        while hull.len() >= lower_len && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();

    if hull.len() < 3 {
        return Err(Error::DegenerateInput(
            "projected points are collinear, hull has no area".into(),
        ));
    }
    HullPolygon::from_vertices(hull)
}

/// Keeps the points whose xy projection falls inside the hull (boundary
/// inclusive). Labels survive the crop.
pub fn hull_crop(cloud: &PointCloud, hull: &HullPolygon) -> PointCloud {
    let keep: Vec<usize> = cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| hull.contains(p.x, p.y))
        .map(|(i, _)| i)
        .collect();
    cloud.select(&keep)
}
