//! Feature-based coarse registration: mutual nearest-neighbor descriptor
//! matches filtered by a rigid RANSAC fit.

use nalgebra::{Matrix3, Point3 as NaPoint3};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::shot::DescriptorSet;
use crate::geom::{Point3, PointCloud, Pose};
use crate::{Error, Result};

const RANSAC_ITERATIONS: usize = 2000;
/// Early exit once this fraction of the correspondences agrees with a model.
const EARLY_EXIT_INLIER_RATIO: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct CoarseResult {
    /// Maps source (session) coordinates into target (base) coordinates.
    pub pose: Pose,
    pub inliers: usize,
    pub correspondences: usize,
}

/// Descriptor matches kept only when each side is the other's nearest
/// neighbor. Returned as keypoint index pairs `(target, source)`.
pub fn mutual_matches(target: &DescriptorSet, source: &DescriptorSet) -> Vec<(usize, usize)> {
    if target.is_empty() || source.is_empty() {
        return Vec::new();
    }
    let nn = |from: &DescriptorSet, to: &DescriptorSet| -> Vec<usize> {
        from.vectors
            .par_iter()
            .map(|v| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (j, w) in to.vectors.iter().enumerate() {
                    let d = (v - w).norm_squared();
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let t_to_s = nn(target, source);
    let s_to_t = nn(source, target);
    let mut pairs = Vec::new();
    for (ti, &si) in t_to_s.iter().enumerate() {
        if s_to_t[si] == ti {
            pairs.push((target.keypoint_index[ti], source.keypoint_index[si]));
        }
    }
    pairs
}

/// Least-squares rigid motion taking `src` onto `dst`. `None` when the
/// points do not pin down a rotation (fewer than 3, or collinear).
pub fn fit_rigid(src: &[Point3], dst: &[Point3]) -> Option<Pose> {
    if src.len() < 3 || src.len() != dst.len() {
        return None;
    }
    let n = src.len() as f64;
    let mut sc = NaPoint3::origin().coords;
    let mut dc = NaPoint3::origin().coords;
    for (s, d) in src.iter().zip(dst) {
        sc += s.coords;
        dc += d.coords;
    }
    sc /= n;
    dc /= n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - sc) * (d.coords - dc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let mut v_fix = v;
        v_fix.column_mut(2).neg_mut();
        r = v_fix * u.transpose();
    }
    // Collinear samples leave the rotation underdetermined. Planar samples
    // (rank 2, the generic case for 3 points) are fine: the reflection fix
    // above resolves the remaining ambiguity.
    if svd.singular_values[1] < 1e-9 * svd.singular_values[0].max(1e-300) {
        return None;
    }
    let t = dc - r * sc;
    Some(Pose::from_matrix(&r, t))
}

/// RANSAC over 3-point samples of the correspondence set.
///
/// `target_pts`/`source_pts` are the matched keypoint positions, index
/// aligned. An inlier is a correspondence whose source point, after the
/// candidate motion, lands within `inlier_thr` of its target point. Fails
/// when fewer than 3 correspondences exist or the best consensus stays
/// under `max(10, 5% of correspondences)`.
pub fn ransac_rigid(
    target_pts: &[Point3],
    source_pts: &[Point3],
    inlier_thr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CoarseResult> {
    let m = target_pts.len();
    assert_eq!(m, source_pts.len());
    if m < 3 {
        return Err(Error::DegenerateInput(format!(
            "{m} correspondences, need at least 3"
        )));
    }
    let thr_sq = inlier_thr * inlier_thr;
    let count_inliers = |pose: &Pose| -> usize {
        source_pts
            .iter()
            .zip(target_pts)
            .filter(|(s, t)| (pose.apply(s) - **t).norm_squared() <= thr_sq)
            .count()
    };

    let early_exit = (EARLY_EXIT_INLIER_RATIO * m as f64).ceil() as usize;
    let mut best: Option<(usize, Pose)> = None;
    for _ in 0..RANSAC_ITERATIONS {
        let sample = rand::seq::index::sample(rng, m, 3);
        let s: Vec<Point3> = sample.iter().map(|i| source_pts[i]).collect();
        let t: Vec<Point3> = sample.iter().map(|i| target_pts[i]).collect();
        let Some(pose) = fit_rigid(&s, &t) else { continue };
        let inliers = count_inliers(&pose);
        if best.as_ref().map_or(true, |(b, _)| inliers > *b) {
            best = Some((inliers, pose));
            if inliers >= early_exit {
                break;
            }
        }
    }

    let floor = 10.max((0.05 * m as f64).ceil() as usize);
    let Some((best_count, best_pose)) = best else {
        return Err(Error::DegenerateInput(
            "no valid rigid model from any sample".into(),
        ));
    };
    if best_count < floor {
        return Err(Error::DegenerateInput(format!(
            "best consensus {best_count} below floor {floor} ({m} correspondences)"
        )));
    }

    // Refit on the winning consensus set.
    let mut s_in = Vec::with_capacity(best_count);
    let mut t_in = Vec::with_capacity(best_count);
    for (s, t) in source_pts.iter().zip(target_pts) {
        if (best_pose.apply(s) - *t).norm_squared() <= thr_sq {
            s_in.push(*s);
            t_in.push(*t);
        }
    }
    let refit = fit_rigid(&s_in, &t_in).unwrap_or(best_pose);
    let inliers = count_inliers(&refit).max(best_count);
    Ok(CoarseResult {
        pose: refit,
        inliers,
        correspondences: m,
    })
}

/// Full coarse stage: match descriptors, then fit a rigid motion.
/// `inlier_thr` should scale with the keypoint spacing (twice the keypoint
/// voxel size works well).
pub fn coarse_align(
    target_kp: &PointCloud,
    target_desc: &DescriptorSet,
    source_kp: &PointCloud,
    source_desc: &DescriptorSet,
    inlier_thr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CoarseResult> {
    let pairs = mutual_matches(target_desc, source_desc);
    if pairs.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "{} mutual matches, need at least 3",
            pairs.len()
        )));
    }
    let t_pts: Vec<Point3> = pairs.iter().map(|&(t, _)| target_kp.points()[t]).collect();
    let s_pts: Vec<Point3> = pairs.iter().map(|&(_, s)| source_kp.points()[s]).collect();
    ransac_rigid(&t_pts, &s_pts, inlier_thr, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::prelude::*;

    fn scatter(seed: u64, n: usize) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(0.0..5.0),
                )
            })
            .collect()
    }

    fn test_pose() -> Pose {
        Pose::new(
            UnitQuaternion::from_euler_angles(0.02, -0.03, 0.4),
            Vector3::new(3.0, 1.0, -0.5),
        )
    }

    #[test]
    fn fit_rigid_recovers_exact_motion() {
        let src = scatter(7, 40);
        let pose = test_pose();
        let dst: Vec<Point3> = src.iter().map(|p| pose.apply(p)).collect();
        let fit = fit_rigid(&src, &dst).unwrap();
        assert!(fit.rotation_angle_to(&pose) < 1e-10);
        assert!(fit.translation_distance_to(&pose) < 1e-10);
    }

    #[test]
    fn fit_rigid_rejects_collinear() {
        let src: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let dst = src.clone();
        assert!(fit_rigid(&src, &dst).is_none());
    }

    #[test]
    fn ransac_survives_heavy_outlier_contamination() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src = scatter(8, 200);
        let pose = test_pose();
        let mut dst: Vec<Point3> = src.iter().map(|p| pose.apply(p)).collect();
        // Corrupt 70% of the correspondences.
        for i in 0..140 {
            dst[i] = Point3::new(
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-5.0..15.0),
            );
        }
        let result = ransac_rigid(&dst, &src, 0.2, &mut rng).unwrap();
        assert!(result.inliers >= 55, "found {} inliers", result.inliers);
        assert!(result.pose.rotation_angle_to(&pose) < 1e-3);
        assert!(result.pose.translation_distance_to(&pose) < 1e-2);
    }

    #[test]
    fn ransac_fails_on_pure_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = scatter(13, 300);
        let b = scatter(14, 300);
        assert!(ransac_rigid(&a, &b, 0.05, &mut rng).is_err());
    }

    #[test]
    fn ransac_needs_three_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = scatter(16, 2);
        let b = scatter(17, 2);
        assert!(ransac_rigid(&a, &b, 0.5, &mut rng).is_err());
    }

    #[test]
    fn mutual_matching_is_symmetric_filter() {
        use crate::align::shot::Descriptor;
        let mk = |seeds: &[u64]| DescriptorSet {
            keypoint_index: (0..seeds.len()).collect(),
            vectors: seeds
                .iter()
                .map(|&s| {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    Descriptor::from_fn(|_, _| rng.gen_range(-1.0..1.0))
                })
                .collect(),
        };
        // b reuses a's generator seeds, so each vector matches exactly one.
        let a = mk(&[1, 2, 3, 4]);
        let b = mk(&[3, 1, 4, 2]);
        let mut pairs = mutual_matches(&a, &b);
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 3), (2, 0), (3, 2)]);
    }
}
