//! Map change detection between a base map and an aligned session map.
//!
//! Points shared by both maps (within a small radius) form the coexist set;
//! the remainder of each map is its diff set, split again into overlap
//! (near coexist structure, i.e. observed by both sessions) and nonoverlap
//! (new or abandoned territory). Overlap diffs are then compared through
//! bird's-eye-view max-height images: base pixels the session saw
//! differently become negative differences (ND, things that vanished),
//! session pixels the base lacks become positive differences (PD, things
//! that appeared).

use std::io::Write as _;
use std::path::Path;

use nalgebra::Unit;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geom::{ransac_plane, PlaneModel, Point3, PointCloud, SpatialIndex, Vec3};
use crate::{Error, Result};

/// RANSAC budget for fitting the shared BEV ground plane.
pub const PLANE_RANSAC_ITERATIONS: usize = 200;
/// Inlier distance for the BEV ground-plane fit (m).
pub const PLANE_INLIER_THR: f64 = 0.1;

/// Which reference image positive differences are compared against.
///
/// The symmetric construction mirrors ND exactly (session overlap against
/// the full base map). `BaseOverlap` instead reuses the base overlap image
/// as the reference for both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub enum PdReference {
    #[default]
    FullBase,
    BaseOverlap,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ChangeParams {
    /// First spatial filter: base/session points with a cross-map neighbor
    /// closer than this coexist in both maps (m).
    pub r_coexist: f64,
    /// Second filter: diff points with a coexist neighbor closer than this
    /// were inside the commonly observed region (m).
    pub r_overlap: f64,
    /// BEV pixel size (m). Precise work wants 0.05-0.15, fast work 0.5-2.0.
    pub bev_res: f64,
    /// Two occupied pixels differ when their max heights disagree by more
    /// than this (m).
    pub h_thr: f64,
    /// When set, slice the height axis into bands of this size and compare
    /// per band (multi-story structures).
    pub layer_height: Option<f64>,
    pub pd_reference: PdReference,
    /// Seeds the ground-plane RANSAC.
    pub seed: u64,
}

/// Band size used when multi-layer mode is switched on without an explicit
/// height.
pub const DEFAULT_LAYER_HEIGHT: f64 = 3.0;

impl Default for ChangeParams {
    fn default() -> Self {
        ChangeParams {
            r_coexist: 0.3,
            r_overlap: 1.0,
            bev_res: 0.1,
            h_thr: 0.3,
            layer_height: None,
            pd_reference: PdReference::FullBase,
            seed: 0,
        }
    }
}

impl ChangeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_coexist > 0.0 && self.r_overlap > 0.0) {
            return Err(Error::InvalidParameter("change radii must be positive".into()));
        }
        let res = self.bev_res;
        let precise = (0.05..=0.15).contains(&res);
        let efficient = (0.5..=2.0).contains(&res);
        if !(precise || efficient) {
            return Err(Error::InvalidParameter(format!(
                "bev_res {res} outside supported ranges [0.05, 0.15] and [0.5, 2.0]"
            )));
        }
        if !(self.h_thr >= 0.0) {
            return Err(Error::InvalidParameter("h_thr must be non-negative".into()));
        }
        if let Some(h) = self.layer_height {
            if !(h > 0.0) {
                return Err(Error::InvalidParameter("layer_height must be positive".into()));
            }
        }
        Ok(())
    }
}

/// First spatial filter. Returns `(base_diff, coexist, session_diff)`;
/// the coexist output is the base-side copy of the shared structure.
pub fn spatial_partition(
    base: &PointCloud,
    session: &PointCloud,
    r_coexist: f64,
) -> (PointCloud, PointCloud, PointCloud) {
    let near = |cloud: &PointCloud, other: &PointCloud| -> Vec<bool> {
        if other.is_empty() {
            return vec![false; cloud.len()];
        }
        let index = SpatialIndex::build(other);
        cloud
            .points()
            .par_iter()
            .map(|p| index.has_neighbor_within(p, r_coexist))
            .collect()
    };
    let base_near = near(base, session);
    let session_near = near(session, base);

    let split = |cloud: &PointCloud, keep: &[bool]| -> (PointCloud, PointCloud) {
        let mut yes = Vec::new();
        let mut no = Vec::new();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                yes.push(i);
            } else {
                no.push(i);
            }
        }
        (cloud.select(&yes), cloud.select(&no))
    };
    let (coexist, base_diff) = split(base, &base_near);
    let (_, session_diff) = split(session, &session_near);
    (base_diff, coexist, session_diff)
}

/// Second spatial filter: diff points near the coexist structure were
/// inside the region both sessions observed.
pub fn overlap_split(
    diff: &PointCloud,
    coexist: &PointCloud,
    r_overlap: f64,
) -> (PointCloud, PointCloud) {
    if coexist.is_empty() {
        return (
            PointCloud::new(Vec::new()).expect("empty cloud"),
            diff.clone(),
        );
    }
    let index = SpatialIndex::build(coexist);
    let near: Vec<bool> = diff
        .points()
        .par_iter()
        .map(|p| index.has_neighbor_within(p, r_overlap))
        .collect();
    let mut overlap = Vec::new();
    let mut nonoverlap = Vec::new();
    for (i, &k) in near.iter().enumerate() {
        if k {
            overlap.push(i);
        } else {
            nonoverlap.push(i);
        }
    }
    (diff.select(&overlap), diff.select(&nonoverlap))
}

/// Shared projection frame: a plane with a fixed in-plane basis and a pixel
/// grid covering every cloud it was built from.
#[derive(Debug, Clone, Copy)]
pub struct BevFrame {
    pub plane: PlaneModel,
    u_axis: Vec3,
    v_axis: Vec3,
    origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
}

impl BevFrame {
    /// Frame covering the union of `clouds`, pixel size `resolution`.
    pub fn covering(clouds: &[&PointCloud], plane: &PlaneModel, resolution: f64) -> Result<BevFrame> {
        if !(resolution > 0.0) {
            return Err(Error::InvalidParameter("bev resolution must be positive".into()));
        }
        // Deterministic in-plane basis from the dominant world axis.
        let n = plane.normal.into_inner();
        let pick = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u_axis = (pick - n * pick.dot(&n)).normalize();
        let v_axis = n.cross(&u_axis);
        let anchor = Point3::from(-plane.d * n);

        let mut min_u = f64::INFINITY;
        let mut min_v = f64::INFINITY;
        let mut max_u = f64::NEG_INFINITY;
        let mut max_v = f64::NEG_INFINITY;
        for cloud in clouds {
            for p in cloud.points() {
                let rel = p - anchor;
                let u = rel.dot(&u_axis);
                let v = rel.dot(&v_axis);
                min_u = min_u.min(u);
                max_u = max_u.max(u);
                min_v = min_v.min(v);
                max_v = max_v.max(v);
            }
        }
        if !min_u.is_finite() {
            // No points anywhere: a 1x1 frame keeps the algebra total.
            (min_u, min_v, max_u, max_v) = (0.0, 0.0, 0.0, 0.0);
        }
        let width = (((max_u - min_u) / resolution).floor() as usize) + 1;
        let height = (((max_v - min_v) / resolution).floor() as usize) + 1;
        Ok(BevFrame {
            plane: *plane,
            u_axis,
            v_axis,
            origin: [min_u, min_v],
            resolution,
            width,
            height,
        })
    }

    /// Pixel of a point, or `None` outside the grid. The height is the
    /// signed distance above the plane.
    fn locate(&self, p: &Point3) -> Option<(usize, f64)> {
        let anchor = Point3::from(-self.plane.d * self.plane.normal.into_inner());
        let rel = p - anchor;
        let i = ((rel.dot(&self.u_axis) - self.origin[0]) / self.resolution).floor() as isize;
        let j = ((rel.dot(&self.v_axis) - self.origin[1]) / self.resolution).floor() as isize;
        if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
            return None;
        }
        Some((j as usize * self.width + i as usize, self.plane.signed_distance(p)))
    }

    fn same_grid(&self, other: &BevFrame) -> bool {
        self.origin == other.origin
            && self.resolution == other.resolution
            && self.width == other.width
            && self.height == other.height
            && self.plane.normal == other.plane.normal
            && self.plane.d == other.plane.d
            && self.u_axis == other.u_axis
    }
}

/// Max-height image of a cloud in a [`BevFrame`].
#[derive(Debug, Clone)]
pub struct BevImage {
    pub frame: BevFrame,
    /// Row-major; `None` marks pixels no point fell into.
    pub cells: Vec<Option<f64>>,
}

/// Projects a cloud into an existing frame: each occupied pixel keeps the
/// maximum signed height of its points.
pub fn bev_project_in(cloud: &PointCloud, frame: &BevFrame) -> BevImage {
    let mut cells = vec![None::<f64>; frame.width * frame.height];
    for p in cloud.points() {
        if let Some((idx, h)) = frame.locate(p) {
            cells[idx] = Some(cells[idx].map_or(h, |prev: f64| prev.max(h)));
        }
    }
    BevImage {
        frame: *frame,
        cells,
    }
}

/// Convenience: frame the cloud by itself and project. Images meant to be
/// compared must instead share one frame built with [`BevFrame::covering`].
pub fn bev_project(cloud: &PointCloud, plane: &PlaneModel, bev_res: f64) -> Result<BevImage> {
    let frame = BevFrame::covering(&[cloud], plane, bev_res)?;
    Ok(bev_project_in(cloud, &frame))
}

/// Points of `source` that fall into changed pixels.
///
/// A pixel is changed when image `a` is occupied and `b` is not, or both
/// are occupied and their heights differ by more than `h_thr`. Occupancy in
/// `b` alone never flags: `a` is the diff-side image and only its content
/// can be returned.
pub fn bev_change(
    a: &BevImage,
    b: &BevImage,
    h_thr: f64,
    source: &PointCloud,
) -> Result<PointCloud> {
    if !a.frame.same_grid(&b.frame) {
        return Err(Error::GridMismatch(format!(
            "{}x{} at {} vs {}x{} at {}",
            a.frame.width,
            a.frame.height,
            a.frame.resolution,
            b.frame.width,
            b.frame.height,
            b.frame.resolution
        )));
    }
    let changed: Vec<bool> = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(ca, cb)| match (ca, cb) {
            (Some(ha), Some(hb)) => (ha - hb).abs() > h_thr,
            (Some(_), None) => true,
            _ => false,
        })
        .collect();
    let picked: Vec<usize> = source
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| match a.frame.locate(p) {
            Some((idx, _)) if changed[idx] => Some(i),
            _ => None,
        })
        .collect();
    Ok(source.select(&picked))
}

/// Full partition of a base/session pair plus the extracted differences.
#[derive(Debug, Clone)]
pub struct DiffResult {
    /// Base-side copy of the structure present in both maps.
    pub coexist: PointCloud,
    pub base_diff: PointCloud,
    pub session_diff: PointCloud,
    pub base_overlap: PointCloud,
    pub base_nonoverlap: PointCloud,
    pub session_overlap: PointCloud,
    pub session_nonoverlap: PointCloud,
    /// Negative differences: base structure the session no longer sees.
    pub base_nd: PointCloud,
    /// Positive differences: session structure the base never had.
    pub session_pd: PointCloud,
}

/// Splits a cloud by height band; band `k` covers `[k*h, (k+1)*h)`.
fn height_bands(cloud: &PointCloud, plane: &PlaneModel, h: f64) -> Vec<(i64, Vec<usize>)> {
    let mut bands: std::collections::BTreeMap<i64, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let band = (plane.signed_distance(p) / h).floor() as i64;
        bands.entry(band).or_default().push(i);
    }
    bands.into_iter().collect()
}

/// Compares diff-side points against a reference cloud through max-height
/// images, optionally per height band, and returns the changed points.
fn bev_compare(
    diff_side: &PointCloud,
    reference: &PointCloud,
    frame: &BevFrame,
    h_thr: f64,
    layer_height: Option<f64>,
) -> Result<PointCloud> {
    match layer_height {
        None => {
            let img_a = bev_project_in(diff_side, frame);
            let img_b = bev_project_in(reference, frame);
            bev_change(&img_a, &img_b, h_thr, diff_side)
        }
        Some(h) => {
            let diff_bands = height_bands(diff_side, &frame.plane, h);
            let ref_bands: std::collections::HashMap<i64, Vec<usize>> =
                height_bands(reference, &frame.plane, h).into_iter().collect();
            let empty: Vec<usize> = Vec::new();
            let mut parts: Vec<PointCloud> = Vec::new();
            for (band, idx) in &diff_bands {
                let layer_diff = diff_side.select(idx);
                let layer_ref = reference.select(ref_bands.get(band).unwrap_or(&empty));
                let img_a = bev_project_in(&layer_diff, frame);
                let img_b = bev_project_in(&layer_ref, frame);
                parts.push(bev_change(&img_a, &img_b, h_thr, &layer_diff)?);
            }
            let refs: Vec<&PointCloud> = parts.iter().collect();
            Ok(PointCloud::concat(&refs))
        }
    }
}

/// Runs the complete change-detection pipeline on two aligned maps.
pub fn detect_changes(
    base: &PointCloud,
    session: &PointCloud,
    params: &ChangeParams,
) -> Result<DiffResult> {
    params.validate()?;
    let (base_diff, coexist, session_diff) = spatial_partition(base, session, params.r_coexist);
    let (base_overlap, base_nonoverlap) = overlap_split(&base_diff, &coexist, params.r_overlap);
    let (session_overlap, session_nonoverlap) =
        overlap_split(&session_diff, &coexist, params.r_overlap);

    let empty = || PointCloud::new(Vec::new()).expect("empty cloud");
    let union = PointCloud::concat(&[base, session]);
    let (base_nd, session_pd) = if union.len() < 3 {
        (empty(), empty())
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut plane = ransac_plane(&union, PLANE_RANSAC_ITERATIONS, PLANE_INLIER_THR, &mut rng)
            .map(|(p, _)| p)
            .ok_or_else(|| {
                Error::DegenerateInput("no dominant plane for BEV projection".into())
            })?;
        // Height-band indices use the signed distance, so the plane must face
        // the bulk of the structure; RANSAC orients its normal arbitrarily.
        let mean_h: f64 = union
            .points()
            .iter()
            .map(|p| plane.signed_distance(p))
            .sum::<f64>()
            / union.len() as f64;
        if mean_h < 0.0 {
            plane = PlaneModel {
                normal: Unit::new_unchecked(-plane.normal.into_inner()),
                d: -plane.d,
            };
        }
        let frame = BevFrame::covering(&[base, session], &plane, params.bev_res)?;
        let nd = bev_compare(&base_overlap, session, &frame, params.h_thr, params.layer_height)?;
        let pd_reference = match params.pd_reference {
            PdReference::FullBase => base,
            PdReference::BaseOverlap => &base_overlap,
        };
        let pd = bev_compare(
            &session_overlap,
            pd_reference,
            &frame,
            params.h_thr,
            params.layer_height,
        )?;
        (nd, pd)
    };

    Ok(DiffResult {
        coexist,
        base_diff,
        session_diff,
        base_overlap,
        base_nonoverlap,
        session_overlap,
        session_nonoverlap,
        base_nd,
        session_pd,
    })
}

/// Precision/recall of a detected change set against ground truth.
///
/// A detected point counts as true when a truth point lies within
/// `match_radius`; recall counts truth points covered by a detection.
/// `None` marks an undefined ratio (nothing detected, or empty truth).
pub fn eval_change_pr(
    detected: &PointCloud,
    truth: &PointCloud,
    match_radius: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    if !(match_radius > 0.0) {
        return Err(Error::InvalidParameter("match_radius must be positive".into()));
    }
    let precision = if detected.is_empty() {
        None
    } else if truth.is_empty() {
        Some(0.0)
    } else {
        let index = SpatialIndex::build(truth);
        let hits = detected
            .points()
            .par_iter()
            .filter(|p| index.has_neighbor_within(p, match_radius))
            .count();
        Some(hits as f64 / detected.len() as f64)
    };
    let recall = if truth.is_empty() {
        None
    } else if detected.is_empty() {
        Some(0.0)
    } else {
        let index = SpatialIndex::build(detected);
        let hits = truth
            .points()
            .par_iter()
            .filter(|p| index.has_neighbor_within(p, match_radius))
            .count();
        Some(hits as f64 / truth.len() as f64)
    };
    Ok((precision, recall))
}

/// Writes the image as an 8-bit PGM: unoccupied pixels are black, occupied
/// heights scale linearly into 1..=255.
pub fn write_bev_pgm(image: &BevImage, path: &Path) -> Result<()> {
    let occupied: Vec<f64> = image.cells.iter().filter_map(|c| *c).collect();
    let (lo, hi) = occupied.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = (hi - lo).max(1e-12);
    let mut buf = Vec::with_capacity(image.cells.len() + 64);
    let w = image.frame.width;
    let h = image.frame.height;
    write!(&mut buf, "P5\n{w} {h}\n255\n").expect("in-memory write");
    // PGM rows run top to bottom; flip v so larger v is up.
    for j in (0..h).rev() {
        for i in 0..w {
            let byte = match image.cells[j * w + i] {
                Some(v) => 1 + ((v - lo) / span * 254.0).round() as u8,
                None => 0,
            };
            buf.push(byte);
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Unit;
    use rand::prelude::*;

    fn ground_plane() -> PlaneModel {
        PlaneModel {
            normal: Unit::new_normalize(Vec3::z()),
            d: 0.0,
        }
    }

    fn grid_cloud(x0: f64, x1: f64, y0: f64, y1: f64, z: f64, step: f64) -> Vec<Point3> {
        let mut pts = Vec::new();
        let nx = ((x1 - x0) / step).round() as usize;
        let ny = ((y1 - y0) / step).round() as usize;
        for i in 0..=nx {
            for j in 0..=ny {
                pts.push(Point3::new(x0 + i as f64 * step, y0 + j as f64 * step, z));
            }
        }
        pts
    }

    fn box_shell(cx: f64, cy: f64, sx: f64, sy: f64, h: f64, step: f64) -> Vec<Point3> {
        let mut pts = Vec::new();
        let (x0, x1) = (cx - sx / 2.0, cx + sx / 2.0);
        let (y0, y1) = (cy - sy / 2.0, cy + sy / 2.0);
        let nz = (h / step).round() as usize;
        let nx = (sx / step).round() as usize;
        let ny = (sy / step).round() as usize;
        for k in 0..=nz {
            let z = k as f64 * h / nz as f64;
            for i in 0..=nx {
                let x = x0 + i as f64 * sx / nx as f64;
                pts.push(Point3::new(x, y0, z));
                pts.push(Point3::new(x, y1, z));
            }
            for j in 0..=ny {
                let y = y0 + j as f64 * sy / ny as f64;
                pts.push(Point3::new(x0, y, z));
                pts.push(Point3::new(x1, y, z));
            }
        }
        // Roof.
        for i in 0..=nx {
            for j in 0..=ny {
                pts.push(Point3::new(
                    x0 + i as f64 * sx / nx as f64,
                    y0 + j as f64 * sy / ny as f64,
                    h,
                ));
            }
        }
        pts
    }

    #[test]
    fn identical_maps_fully_coexist() {
        let cloud = PointCloud::new(grid_cloud(0.0, 2.0, 0.0, 2.0, 0.0, 0.2)).unwrap();
        let (base_diff, coexist, session_diff) = spatial_partition(&cloud, &cloud, 0.3);
        assert_eq!(coexist.len(), cloud.len());
        assert!(base_diff.is_empty());
        assert!(session_diff.is_empty());
    }

    #[test]
    fn disjoint_maps_have_empty_coexist() {
        let a = PointCloud::new(grid_cloud(0.0, 1.0, 0.0, 1.0, 0.0, 0.5)).unwrap();
        let b = PointCloud::new(grid_cloud(10.0, 11.0, 0.0, 1.0, 0.0, 0.5)).unwrap();
        let (base_diff, coexist, session_diff) = spatial_partition(&a, &b, 0.3);
        assert!(coexist.is_empty());
        assert_eq!(base_diff.len(), a.len());
        assert_eq!(session_diff.len(), b.len());
    }

    #[test]
    fn inserted_box_lands_in_base_diff() {
        let ground = grid_cloud(-5.0, 5.0, -5.0, 5.0, 0.0, 0.2);
        let box_pts = box_shell(0.0, 0.0, 2.0, 1.0, 1.5, 0.2);
        let mut base_pts = ground.clone();
        base_pts.extend(box_pts.iter().filter(|p| p.z > 0.4).copied());
        let base = PointCloud::new(base_pts).unwrap();
        let session = PointCloud::new(ground).unwrap();
        let (base_diff, coexist, _) = spatial_partition(&base, &session, 0.3);
        // Everything in base_diff is elevated box structure.
        assert!(!base_diff.is_empty());
        assert!(base_diff.points().iter().all(|p| p.z > 0.4));
        assert_eq!(coexist.len() + base_diff.len(), base.len());
    }

    #[test]
    fn overlap_split_separates_by_coexist_proximity() {
        let coexist = PointCloud::new(grid_cloud(0.0, 4.0, 0.0, 4.0, 0.0, 0.2)).unwrap();
        // Low object inside the coexist footprint: every point within reach
        // of the ground below it.
        let mut diff_pts = box_shell(2.0, 2.0, 1.0, 1.0, 0.8, 0.25);
        let far_start = diff_pts.len();
        diff_pts.extend(grid_cloud(50.0, 51.0, 0.0, 1.0, 0.0, 0.5));
        let diff = PointCloud::new(diff_pts).unwrap();
        let (overlap, nonoverlap) = overlap_split(&diff, &coexist, 1.0);
        assert_eq!(overlap.len(), far_start);
        assert_eq!(nonoverlap.len(), diff.len() - far_start);
        assert!(nonoverlap.points().iter().all(|p| p.x >= 50.0));
    }

    #[test]
    fn empty_diff_splits_to_empty() {
        let coexist = PointCloud::new(grid_cloud(0.0, 1.0, 0.0, 1.0, 0.0, 0.5)).unwrap();
        let diff = PointCloud::new(Vec::new()).unwrap();
        let (overlap, nonoverlap) = overlap_split(&diff, &coexist, 1.0);
        assert!(overlap.is_empty() && nonoverlap.is_empty());
    }

    #[test]
    fn single_point_occupies_one_pixel_at_its_height() {
        let cloud = PointCloud::new(vec![Point3::new(0.33, 0.21, 1.7)]).unwrap();
        let img = bev_project(&cloud, &ground_plane(), 0.1).unwrap();
        let occupied: Vec<f64> = img.cells.iter().filter_map(|c| *c).collect();
        assert_eq!(occupied, vec![1.7]);
    }

    #[test]
    fn pixel_takes_maximum_height() {
        let cloud = PointCloud::new(vec![
            Point3::new(0.02, 0.02, 0.3),
            Point3::new(0.03, 0.04, 1.1),
        ])
        .unwrap();
        let img = bev_project(&cloud, &ground_plane(), 0.1).unwrap();
        let occupied: Vec<f64> = img.cells.iter().filter_map(|c| *c).collect();
        assert_eq!(occupied, vec![1.1]);
    }

    #[test]
    fn planar_cloud_projects_to_zero_heights() {
        let cloud = PointCloud::new(grid_cloud(0.0, 3.0, 0.0, 3.0, 0.0, 0.1)).unwrap();
        let plane = PlaneModel::fit(cloud.points()).unwrap();
        let img = bev_project(&cloud, &plane, 0.1).unwrap();
        for c in img.cells.iter().flatten() {
            assert!(c.abs() < 1e-9);
        }
    }

    #[test]
    fn identical_images_produce_no_change() {
        let cloud = PointCloud::new(box_shell(1.0, 1.0, 1.0, 1.0, 1.0, 0.2)).unwrap();
        let frame = BevFrame::covering(&[&cloud], &ground_plane(), 0.1).unwrap();
        let img = bev_project_in(&cloud, &frame);
        let out = bev_change(&img, &img, 0.3, &cloud).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn occupied_versus_empty_flags_the_points() {
        let a_cloud = PointCloud::new(vec![Point3::new(0.5, 0.5, 1.5)]).unwrap();
        let b_cloud = PointCloud::new(vec![Point3::new(3.5, 3.5, 0.1)]).unwrap();
        let frame = BevFrame::covering(&[&a_cloud, &b_cloud], &ground_plane(), 0.1).unwrap();
        let img_a = bev_project_in(&a_cloud, &frame);
        let img_b = bev_project_in(&b_cloud, &frame);
        let out = bev_change(&img_a, &img_b, 0.3, &a_cloud).unwrap();
        assert_eq!(out.len(), 1);
        // The reverse direction never flags b-only occupancy.
        let out_rev = bev_change(&img_b, &img_a, 0.3, &b_cloud).unwrap();
        assert_eq!(out_rev.len(), 1); // b's pixel is empty in a, so it flags for b.
    }

    #[test]
    fn small_height_difference_is_not_a_change() {
        let a_cloud = PointCloud::new(vec![Point3::new(0.5, 0.5, 1.50)]).unwrap();
        let b_cloud = PointCloud::new(vec![Point3::new(0.52, 0.51, 1.45)]).unwrap();
        let frame = BevFrame::covering(&[&a_cloud, &b_cloud], &ground_plane(), 0.1).unwrap();
        let img_a = bev_project_in(&a_cloud, &frame);
        let img_b = bev_project_in(&b_cloud, &frame);
        let out = bev_change(&img_a, &img_b, 0.3, &a_cloud).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = PointCloud::new(grid_cloud(0.0, 1.0, 0.0, 1.0, 0.0, 0.5)).unwrap();
        let img1 = bev_project(&a, &ground_plane(), 0.1).unwrap();
        let img2 = bev_project(&a, &ground_plane(), 0.5).unwrap();
        match bev_change(&img1, &img2, 0.3, &a) {
            Err(Error::GridMismatch(_)) => {}
            other => panic!("expected GridMismatch, got {other:?}"),
        }
    }

    /// Scene pair: ground everywhere, a box that exists only in base
    /// (removed) and another only in session (added).
    fn mutation_scene() -> (PointCloud, PointCloud, Vec<Point3>, Vec<Point3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut jitter = |pts: Vec<Point3>| -> Vec<Point3> {
            pts.into_iter()
                .map(|p| {
                    Point3::new(
                        p.x + rng.gen_range(-0.01..0.01),
                        p.y + rng.gen_range(-0.01..0.01),
                        p.z + rng.gen_range(-0.01..0.01),
                    )
                })
                .collect()
        };
        let ground_a = jitter(grid_cloud(-10.0, 10.0, -10.0, 10.0, 0.0, 0.15));
        let ground_b = jitter(grid_cloud(-10.0, 10.0, -10.0, 10.0, 0.0, 0.15));
        let removed = jitter(box_shell(-4.0, -3.0, 2.0, 1.2, 1.4, 0.12));
        let added = jitter(box_shell(5.0, 4.0, 1.5, 1.5, 2.0, 0.12));

        let mut base_pts = ground_a;
        base_pts.extend(removed.iter().copied());
        let mut session_pts = ground_b;
        session_pts.extend(added.iter().copied());
        // Shell points within the coexistence radius of the surviving ground
        // merge into the shared structure; only the rest is observable truth.
        let observable = |pts: &[Point3]| -> Vec<Point3> {
            pts.iter().filter(|p| p.z > 0.35).copied().collect()
        };
        (
            PointCloud::new(base_pts).unwrap(),
            PointCloud::new(session_pts).unwrap(),
            observable(&removed),
            observable(&added),
        )
    }

    /// Objects up to 2 m tall need a wider overlap radius: a roof point's
    /// nearest coexist ground sits roughly its own height away.
    fn tall_object_params() -> ChangeParams {
        ChangeParams {
            r_overlap: 2.5,
            ..Default::default()
        }
    }

    #[test]
    fn removed_and_added_objects_are_detected() {
        let (base, session, removed, added) = mutation_scene();
        let result = detect_changes(&base, &session, &tall_object_params()).unwrap();

        let removed_cloud = PointCloud::new(removed).unwrap();
        let (p_nd, r_nd) = eval_change_pr(&result.base_nd, &removed_cloud, 0.2).unwrap();
        assert!(p_nd.unwrap() >= 0.9, "nd precision {:?}", p_nd);
        assert!(r_nd.unwrap() >= 0.9, "nd recall {:?}", r_nd);

        let added_cloud = PointCloud::new(added).unwrap();
        let (p_pd, r_pd) = eval_change_pr(&result.session_pd, &added_cloud, 0.2).unwrap();
        assert!(p_pd.unwrap() >= 0.9, "pd precision {:?}", p_pd);
        assert!(r_pd.unwrap() >= 0.9, "pd recall {:?}", r_pd);
    }

    #[test]
    fn partition_identities_hold_exactly() {
        let (base, session, _, _) = mutation_scene();
        let r = detect_changes(&base, &session, &ChangeParams::default()).unwrap();
        let key = |p: &Point3| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        let multiset = |clouds: &[&PointCloud]| {
            let mut v: Vec<_> = clouds
                .iter()
                .flat_map(|c| c.points().iter().map(key))
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(
            multiset(&[&r.coexist, &r.base_diff]),
            multiset(&[&base]),
            "base partition broken"
        );
        assert_eq!(
            multiset(&[&r.base_overlap, &r.base_nonoverlap]),
            multiset(&[&r.base_diff])
        );
        assert_eq!(
            multiset(&[&r.session_overlap, &r.session_nonoverlap]),
            multiset(&[&r.session_diff])
        );
        // Containment of the extracted differences.
        let overlap_set: std::collections::HashSet<_> =
            r.base_overlap.points().iter().map(key).collect();
        assert!(r.base_nd.points().iter().all(|p| overlap_set.contains(&key(p))));
        let s_overlap_set: std::collections::HashSet<_> =
            r.session_overlap.points().iter().map(key).collect();
        assert!(r.session_pd.points().iter().all(|p| s_overlap_set.contains(&key(p))));
    }

    #[test]
    fn self_comparison_detects_nothing() {
        let (base, _, _, _) = mutation_scene();
        let r = detect_changes(&base, &base, &ChangeParams::default()).unwrap();
        assert!(r.base_nd.is_empty());
        assert!(r.session_pd.is_empty());
        assert!(r.base_diff.is_empty());
    }

    #[test]
    fn raising_h_thr_never_enlarges_the_changes() {
        let (base, session, _, _) = mutation_scene();
        let lo = detect_changes(
            &base,
            &session,
            &ChangeParams {
                h_thr: 0.2,
                ..Default::default()
            },
        )
        .unwrap();
        let hi = detect_changes(
            &base,
            &session,
            &ChangeParams {
                h_thr: 0.8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(hi.base_nd.len() <= lo.base_nd.len());
        assert!(hi.session_pd.len() <= lo.session_pd.len());
    }

    #[test]
    fn multi_layer_mode_sees_changes_hidden_under_a_ceiling() {
        // Shared structure: a large ground patch and a ceiling slab at 6 m.
        // Base additionally holds rack contents hanging 0.2 m below the slab;
        // the session lost them. A flat max-height comparison sees 5.8 against
        // the surviving 6.0 ceiling (within h_thr) and stays silent; 3 m bands
        // put the rack (band 1) and the slab (band 2) in separate images.
        let mut shared = grid_cloud(0.0, 6.0, 0.0, 6.0, 0.0, 0.1);
        shared.extend(grid_cloud(0.0, 4.0, 0.0, 4.0, 6.0, 0.1));
        let rack: Vec<Point3> = grid_cloud(1.2, 1.8, 1.2, 1.8, 5.8, 0.1);
        let rack_count = rack.len();

        let mut base_pts = shared.clone();
        base_pts.extend(rack.iter().copied());
        let base = PointCloud::new(base_pts).unwrap();
        let session = PointCloud::new(shared).unwrap();

        // The rack hangs 0.2 m under the slab, so the coexistence radius must
        // stay below that gap or the rack merges into the shared structure.
        let params = ChangeParams {
            r_coexist: 0.1,
            ..Default::default()
        };
        let flat = detect_changes(&base, &session, &params).unwrap();
        assert!(
            flat.base_nd.is_empty(),
            "flat comparison should be masked by the ceiling, got {}",
            flat.base_nd.len()
        );

        let layered = detect_changes(
            &base,
            &session,
            &ChangeParams {
                layer_height: Some(DEFAULT_LAYER_HEIGHT),
                ..params
            },
        )
        .unwrap();
        assert_eq!(layered.base_nd.len(), rack_count);
        assert!(layered.base_nd.points().iter().all(|p| (p.z - 5.8).abs() < 1e-9));
    }

    #[test]
    fn pd_reference_switch_changes_only_the_reference() {
        let (base, session, _, added) = mutation_scene();
        let with_base = detect_changes(&base, &session, &tall_object_params()).unwrap();
        let with_overlap = detect_changes(
            &base,
            &session,
            &ChangeParams {
                pd_reference: PdReference::BaseOverlap,
                ..tall_object_params()
            },
        )
        .unwrap();
        // ND identical under either switch value.
        assert_eq!(with_base.base_nd.len(), with_overlap.base_nd.len());
        // Both still find the added box.
        let added_cloud = PointCloud::new(added).unwrap();
        let (_, r1) = eval_change_pr(&with_base.session_pd, &added_cloud, 0.2).unwrap();
        let (_, r2) = eval_change_pr(&with_overlap.session_pd, &added_cloud, 0.2).unwrap();
        assert!(r1.unwrap() >= 0.9);
        assert!(r2.unwrap() >= 0.9);
    }

    #[test]
    fn eval_matches_hand_counts() {
        let truth = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
        ])
        .unwrap();
        let spurious = PointCloud::new(vec![
            Point3::new(50.0, 0.0, 0.0),
            Point3::new(60.0, 0.0, 0.0),
        ])
        .unwrap();
        let detected = PointCloud::concat(&[&truth, &spurious]);
        let (p, r) = eval_change_pr(&detected, &truth, 0.2).unwrap();
        assert_eq!(p, Some(0.5));
        assert_eq!(r, Some(1.0));

        let (p, r) = eval_change_pr(&truth, &truth, 0.2).unwrap();
        assert_eq!(p, Some(1.0));
        assert_eq!(r, Some(1.0));

        let empty = PointCloud::new(Vec::new()).unwrap();
        let (p, r) = eval_change_pr(&empty, &truth, 0.2).unwrap();
        assert_eq!(p, None);
        assert_eq!(r, Some(0.0));

        let (p, r) = eval_change_pr(&truth, &empty, 0.2).unwrap();
        assert_eq!(p, Some(0.0));
        assert_eq!(r, None);
    }

    #[test]
    fn resolution_modes_agree_on_object_points() {
        let (base, session, removed, _) = mutation_scene();
        let precise = detect_changes(&base, &session, &tall_object_params()).unwrap();
        let efficient = detect_changes(
            &base,
            &session,
            &ChangeParams {
                bev_res: 0.5,
                ..tall_object_params()
            },
        )
        .unwrap();
        let removed_cloud = PointCloud::new(removed).unwrap();
        let (_, r_precise) = eval_change_pr(&precise.base_nd, &removed_cloud, 0.2).unwrap();
        let (_, r_efficient) = eval_change_pr(&efficient.base_nd, &removed_cloud, 0.2).unwrap();
        assert!(r_precise.unwrap() >= 0.8);
        assert!(r_efficient.unwrap() >= 0.8);
    }

    #[test]
    fn out_of_range_resolution_is_rejected() {
        let p = ChangeParams {
            bev_res: 0.3,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let q = ChangeParams {
            bev_res: 3.0,
            ..Default::default()
        };
        assert!(q.validate().is_err());
    }

    #[test]
    fn pgm_export_writes_a_valid_header() {
        let cloud = PointCloud::new(box_shell(1.0, 1.0, 1.0, 1.0, 1.0, 0.2)).unwrap();
        let img = bev_project(&cloud, &ground_plane(), 0.1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bev.pgm");
        write_bev_pgm(&img, &path).unwrap();
        let data = std::fs::read(&path).unwrap();
        assert!(data.starts_with(b"P5\n"));
        let header = format!("P5\n{} {}\n255\n", img.frame.width, img.frame.height);
        assert_eq!(data.len(), header.len() + img.frame.width * img.frame.height);
    }
}
