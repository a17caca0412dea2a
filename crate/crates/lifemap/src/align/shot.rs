//! SHOT-style local descriptors with pairwise PCA compression.
//!
//! Each keypoint gets a 352-value histogram: the support sphere is cut into
//! 32 spatial sectors (8 azimuth x 2 elevation x 2 radial shells) in a local
//! reference frame derived from the neighborhood covariance, and each sector
//! histograms the cosine between neighbor normals and the frame's z axis
//! into 11 bins. Soft quadrilinear binning keeps the histogram stable under
//! rigid motion. Raw histograms from both clouds of a pair are then
//! projected onto their shared top-50 principal components.

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Unit};
use rayon::prelude::*;

use crate::geom::{Point3, PointCloud, SpatialIndex, Vec3};

pub const RAW_DIM: usize = 352;
pub const COMPRESSED_DIM: usize = 50;

const AZIMUTH_BINS: usize = 8;
const COS_BINS: usize = 11;
/// Fewer support neighbors than this and the descriptor is skipped.
const MIN_SUPPORT: usize = 5;

pub type RawDescriptor = Box<[f64; RAW_DIM]>;
pub type Descriptor = SVector<f64, COMPRESSED_DIM>;

/// Local reference frame from the distance-weighted neighborhood covariance.
///
/// x follows the largest spread, z the smallest; both signs are fixed by
/// majority vote of the neighbor offsets, y completes the right-handed
/// frame. `None` when the neighborhood is too small.
fn local_reference_frame(center: &Point3, neighbors: &[Point3], radius: f64) -> Option<Matrix3<f64>> {
    if neighbors.len() < 3 {
        return None;
    }
    let mut cov = Matrix3::zeros();
    let mut weight_sum = 0.0;
    for p in neighbors {
        let d = p - center;
        let w = (radius - d.norm()).max(0.0);
        cov += w * d * d.transpose();
        weight_sum += w;
    }
    if weight_sum <= 1e-12 {
        return None;
    }
    cov /= weight_sum;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut x: Vec3 = eig.eigenvectors.column(order[0]).into();
    let mut z: Vec3 = eig.eigenvectors.column(order[2]).into();
    if x.norm() < 1e-12 || z.norm() < 1e-12 {
        return None;
    }
    x.normalize_mut();
    z.normalize_mut();

    let orient = |axis: &mut Vec3| {
        let mut pos = 0usize;
        let mut neg = 0usize;
        let mut dot_sum = 0.0;
        for p in neighbors {
            let d = (p - center).dot(axis);
            dot_sum += d;
            if d >= 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        if neg > pos || (neg == pos && dot_sum < 0.0) {
            *axis = -*axis;
        }
    };
    orient(&mut x);
    orient(&mut z);
    let y = z.cross(&x);
    Some(Matrix3::from_columns(&[x, y, z]))
}

/// Weights of a value over two adjacent bins, clamped at the range ends.
fn soft_pair(coord: f64, bins: usize) -> [(usize, f64); 2] {
    let b = (coord.floor() as isize).clamp(0, bins as isize - 1) as usize;
    let f = coord - b as f64 - 0.5;
    let other = if f >= 0.0 { b as isize + 1 } else { b as isize - 1 };
    let w = f.abs().min(1.0);
    if other < 0 || other >= bins as isize {
        [(b, 1.0), (b, 0.0)]
    } else {
        [(b, 1.0 - w), (other as usize, w)]
    }
}

/// Same, but the bin topology wraps (azimuth).
fn soft_pair_wrap(coord: f64, bins: usize) -> [(usize, f64); 2] {
    let b = (coord.floor() as isize).rem_euclid(bins as isize) as usize;
    let f = coord - coord.floor() - 0.5;
    let other = if f >= 0.0 { (b + 1) % bins } else { (b + bins - 1) % bins };
    let w = f.abs();
    [(b, 1.0 - w), (other, w)]
}

/// Raw SHOT histograms for every keypoint, `None` where the support is too
/// thin. `normals` must align with `cloud` (one entry per point).
pub fn raw_descriptors(
    cloud: &PointCloud,
    normals: &[Option<Unit<Vec3>>],
    keypoints: &PointCloud,
    fd_r: f64,
) -> Vec<Option<RawDescriptor>> {
    assert_eq!(cloud.len(), normals.len(), "one normal slot per support point");
    let index = SpatialIndex::build(cloud);
    let pts = cloud.points();
    keypoints
        .points()
        .par_iter()
        .map(|kp| {
            let nbrs = index.radius_neighbors(kp, fd_r);
            let offsets: Vec<usize> = nbrs
                .into_iter()
                .filter(|&i| (pts[i] - kp).norm() > 1e-12)
                .collect();
            if offsets.len() < MIN_SUPPORT {
                return None;
            }
            let neighbor_pts: Vec<Point3> = offsets.iter().map(|&i| pts[i]).collect();
            let frame = local_reference_frame(kp, &neighbor_pts, fd_r)?;
            let mut hist = Box::new([0.0f64; RAW_DIM]);
            let inv = frame.transpose();
            let z_axis: Vec3 = frame.column(2).into();
            for &i in &offsets {
                let Some(n) = normals[i] else { continue };
                let local = inv * (pts[i] - kp);
                let r = local.norm();
                if r <= 1e-12 || r > fd_r {
                    continue;
                }
                let azimuth = local.y.atan2(local.x);
                let az_coord =
                    (azimuth + std::f64::consts::PI) / std::f64::consts::TAU * AZIMUTH_BINS as f64;
                let el_coord = (local.z / r + 1.0).clamp(0.0, 2.0);
                let rad_coord = (2.0 * r / fd_r).clamp(0.0, 2.0);
                let cos_theta = n.dot(&z_axis).clamp(-1.0, 1.0);
                let cos_coord = (cos_theta + 1.0) / 2.0 * COS_BINS as f64;

                let az = soft_pair_wrap(az_coord, AZIMUTH_BINS);
                let el = soft_pair(el_coord, 2);
                let rad = soft_pair(rad_coord, 2);
                let cos = soft_pair(cos_coord, COS_BINS);
                for (ab, aw) in az {
                    for (eb, ew) in el {
                        for (rb, rw) in rad {
                            for (cb, cw) in cos {
                                let spatial = (ab * 2 + eb) * 2 + rb;
                                hist[spatial * COS_BINS + cb] += aw * ew * rw * cw;
                            }
                        }
                    }
                }
            }
            let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return None;
            }
            for v in hist.iter_mut() {
                *v /= norm;
            }
            Some(hist)
        })
        .collect()
}

/// Keypoint indices with their compressed descriptors.
#[derive(Debug, Clone)]
pub struct DescriptorSet {
    pub keypoint_index: Vec<usize>,
    pub vectors: Vec<Descriptor>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// Projects both sides' raw histograms onto the principal components of
/// their union, fitted fresh for this pair.
pub fn compress_pair(
    raw_a: &[Option<RawDescriptor>],
    raw_b: &[Option<RawDescriptor>],
) -> (DescriptorSet, DescriptorSet) {
    let all: Vec<&RawDescriptor> = raw_a
        .iter()
        .chain(raw_b.iter())
        .filter_map(|d| d.as_ref())
        .collect();
    let n = all.len();
    if n == 0 {
        let empty = DescriptorSet {
            keypoint_index: Vec::new(),
            vectors: Vec::new(),
        };
        return (empty.clone(), empty);
    }

    let mut mean = DVector::<f64>::zeros(RAW_DIM);
    for d in &all {
        for (m, v) in mean.iter_mut().zip(d.iter()) {
            *m += v;
        }
    }
    mean /= n as f64;

    let mut cov = DMatrix::<f64>::zeros(RAW_DIM, RAW_DIM);
    for d in &all {
        let centered = DVector::from_iterator(RAW_DIM, d.iter().copied()) - &mean;
        cov.ger(1.0 / n as f64, &centered, &centered, 1.0);
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..RAW_DIM).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    // Basis rows: top principal directions.
    let mut basis = DMatrix::<f64>::zeros(COMPRESSED_DIM, RAW_DIM);
    for (row, &col) in order.iter().take(COMPRESSED_DIM).enumerate() {
        basis.row_mut(row).copy_from(&eig.eigenvectors.column(col).transpose());
    }

    let project = |raw: &[Option<RawDescriptor>]| {
        let mut keypoint_index = Vec::new();
        let mut vectors = Vec::new();
        for (i, d) in raw.iter().enumerate() {
            let Some(d) = d else { continue };
            let centered = DVector::from_iterator(RAW_DIM, d.iter().copied()) - &mean;
            let proj = &basis * centered;
            keypoint_index.push(i);
            vectors.push(Descriptor::from_iterator(proj.iter().copied()));
        }
        DescriptorSet {
            keypoint_index,
            vectors,
        }
    };
    (project(raw_a), project(raw_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{estimate_normals, Pose};
    use nalgebra::UnitQuaternion;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Two walls meeting at a corner plus a floor patch: anisotropic
    /// neighborhoods with well-conditioned reference frames.
    fn corner_cloud(seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        for _ in 0..800 {
            let (u, v): (f64, f64) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.5));
            pts.push(Point3::new(u, 0.0, v));
        }
        for _ in 0..800 {
            let (u, v): (f64, f64) = (rng.gen_range(0.0..1.2), rng.gen_range(0.0..1.5));
            pts.push(Point3::new(0.0, u, v));
        }
        for _ in 0..600 {
            let (u, v): (f64, f64) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..1.2));
            pts.push(Point3::new(u, v, 0.0));
        }
        PointCloud::new(pts).unwrap()
    }

    fn descriptors_at(cloud: &PointCloud, keypoints: &PointCloud) -> Vec<Option<RawDescriptor>> {
        let centroid = cloud.centroid().unwrap();
        let viewpoint = Point3::new(centroid.x + 3.0, centroid.y + 3.0, centroid.z + 5.0);
        let normals = estimate_normals(cloud, 30, &viewpoint);
        raw_descriptors(cloud, &normals, keypoints, 1.0)
    }

    #[test]
    fn identical_neighborhoods_give_identical_descriptors() {
        let base = corner_cloud(1);
        // Duplicate the whole structure far away; same local geometry.
        let shifted = PointCloud::new(
            base.points().iter().map(|p| Point3::new(p.x + 100.0, p.y, p.z)).collect(),
        )
        .unwrap();
        let both = PointCloud::concat(&[&base, &shifted]);
        let kp = PointCloud::new(vec![
            Point3::new(0.3, 0.0, 0.4),
            Point3::new(100.3, 0.0, 0.4),
        ])
        .unwrap();
        // Normals estimated once on the base copy and reused for the clone,
        // so both keypoints see literally identical geometry and normals.
        let centroid = base.centroid().unwrap();
        let viewpoint = Point3::new(centroid.x + 3.0, centroid.y + 3.0, centroid.z + 5.0);
        let base_normals = estimate_normals(&base, 30, &viewpoint);
        let mut normals = base_normals.clone();
        normals.extend(base_normals);
        let d = raw_descriptors(&both, &normals, &kp, 1.0);
        let (a, b) = (d[0].as_ref().unwrap(), d[1].as_ref().unwrap());
        let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff < 1e-6, "descriptor difference {diff}");
    }

    #[test]
    fn descriptors_are_rotation_invariant() {
        let cloud = corner_cloud(2);
        let kp_pts = vec![
            Point3::new(0.2, 0.2, 0.0),
            Point3::new(0.0, 0.3, 0.5),
            Point3::new(0.5, 0.0, 0.6),
        ];
        let kp = PointCloud::new(kp_pts.clone()).unwrap();
        let raw_a = descriptors_at(&cloud, &kp);

        let rot = Pose::new(
            UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1),
            Vec3::new(4.0, -7.0, 2.0),
        );
        let cloud_r = cloud.transform(&rot);
        let kp_r = kp.transform(&rot);
        // Same relative viewpoint: transform it along with the cloud.
        let centroid = cloud.centroid().unwrap();
        let viewpoint = rot.apply(&Point3::new(centroid.x + 3.0, centroid.y + 3.0, centroid.z + 5.0));
        let normals_r = estimate_normals(&cloud_r, 30, &viewpoint);
        let raw_b = raw_descriptors(&cloud_r, &normals_r, &kp_r, 1.0);

        for (a, b) in raw_a.iter().zip(&raw_b) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            let max_diff = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(max_diff < 1e-3, "rotation changed a descriptor by {max_diff}");
        }
    }

    #[test]
    fn sparse_support_is_skipped() {
        let pts = vec![
            Point3::origin(),
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(0.0, 0.1, 0.0),
        ];
        let cloud = PointCloud::new(pts).unwrap();
        let kp = PointCloud::new(vec![Point3::origin()]).unwrap();
        let normals = vec![Some(Unit::new_normalize(Vec3::z())); 3];
        let d = raw_descriptors(&cloud, &normals, &kp, 1.0);
        assert!(d[0].is_none());
    }

    #[test]
    fn descriptors_are_unit_length() {
        let cloud = corner_cloud(3);
        let kp = PointCloud::new(vec![Point3::new(0.4, 0.4, 0.0)]).unwrap();
        let d = descriptors_at(&cloud, &kp);
        let norm: f64 = d[0].as_ref().unwrap().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn compression_keeps_relative_distances_for_identical_inputs() {
        let cloud = corner_cloud(4);
        let kp = PointCloud::new(vec![
            Point3::new(0.2, 0.2, 0.0),
            Point3::new(0.0, 0.4, 0.7),
            Point3::new(1.2, 0.0, 0.3),
        ])
        .unwrap();
        let raw = descriptors_at(&cloud, &kp);
        let (a, b) = compress_pair(&raw, &raw);
        assert_eq!(a.len(), b.len());
        for (va, vb) in a.vectors.iter().zip(&b.vectors) {
            assert!((va - vb).norm() < 1e-9);
        }
    }
}
