//! RANSAC plane fitting with a least-squares refit.

use nalgebra::{Matrix3, Unit};
use rand::Rng;

use crate::geom::{Point3, PointCloud, Vec3};

/// Plane in Hessian normal form: `normal . p + d = 0`.
#[derive(Debug, Clone, Copy)]
pub struct PlaneModel {
    pub normal: Unit<Vec3>,
    pub d: f64,
}

impl PlaneModel {
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) + self.d
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        self.signed_distance(p).abs()
    }

    /// Projection of `p` onto the plane.
    pub fn project(&self, p: &Point3) -> Point3 {
        p - self.normal.into_inner() * self.signed_distance(p)
    }

    /// Least-squares plane through a set of points, `None` when they are
    /// rank deficient (fewer than 3, or collinear).
    pub fn fit(points: &[Point3]) -> Option<PlaneModel> {
        if points.len() < 3 {
            return None;
        }
        let mut mean = Vec3::zeros();
        for p in points {
            mean += p.coords;
        }
        mean /= points.len() as f64;
        let mut cov = Matrix3::zeros();
        for p in points {
            let dv = p.coords - mean;
            cov += dv * dv.transpose();
        }
        let eig = cov.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        // The two larger eigenvalues must be nonzero for a plane to exist.
        if eig.eigenvalues[order[1]] <= 1e-12 * eig.eigenvalues[order[2]].max(1e-300) {
            return None;
        }
        let n: Vec3 = eig.eigenvectors.column(order[0]).into();
        if n.norm() < 1e-9 {
            return None;
        }
        let normal = Unit::new_normalize(n);
        Some(PlaneModel {
            normal,
            d: -normal.dot(&mean),
        })
    }
}

/// Best-consensus plane found by sampling point triples.
///
/// Returns the refit plane and its inlier indices (`distance <= inlier_thr`),
/// or `None` when no sampled triple yields at least three inliers. The caller
/// supplies the RNG, so results are reproducible for a seeded generator.
pub fn ransac_plane(
    cloud: &PointCloud,
    iterations: usize,
    inlier_thr: f64,
    rng: &mut impl Rng,
) -> Option<(PlaneModel, Vec<usize>)> {
    let pts = cloud.points();
    if pts.len() < 3 {
        return None;
    }
    let mut best_count = 0usize;
    let mut best: Option<PlaneModel> = None;
    for _ in 0..iterations {
        let (a, b, c) = sample_triple(pts.len(), rng);
        let Some(plane) = plane_from_triple(&pts[a], &pts[b], &pts[c]) else {
            continue;
        };
        let count = pts.iter().filter(|p| plane.distance(p) <= inlier_thr).count();
        if count > best_count {
            best_count = count;
            best = Some(plane);
        }
    }
    let plane = best.filter(|_| best_count >= 3)?;

    let inliers: Vec<usize> = (0..pts.len())
        .filter(|&i| plane.distance(&pts[i]) <= inlier_thr)
        .collect();
    let refit_pts: Vec<Point3> = inliers.iter().map(|&i| pts[i]).collect();
    let refit = PlaneModel::fit(&refit_pts).unwrap_or(plane);
    let final_inliers: Vec<usize> = (0..pts.len())
        .filter(|&i| refit.distance(&pts[i]) <= inlier_thr)
        .collect();
    if final_inliers.len() < 3 {
        return None;
    }
    Some((refit, final_inliers))
}

fn sample_triple(n: usize, rng: &mut impl Rng) -> (usize, usize, usize) {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n);
    while b == a {
        b = rng.gen_range(0..n);
    }
    let mut c = rng.gen_range(0..n);
    while c == a || c == b {
        c = rng.gen_range(0..n);
    }
    (a, b, c)
}

fn plane_from_triple(a: &Point3, b: &Point3, c: &Point3) -> Option<PlaneModel> {
    let n = (b - a).cross(&(c - a));
    if n.norm() < 1e-12 {
        return None;
    }
    let normal = Unit::new_normalize(n);
    Some(PlaneModel {
        normal,
        d: -normal.dot(&a.coords),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noisy_ground(n: usize, noise: f64, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-noise..noise),
                )
            })
            .collect()
    }

    #[test]
    fn recovers_dominant_plane_with_outliers() {
        let mut pts = noisy_ground(400, 0.02, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..80 {
            pts.push(Point3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(1.0..5.0),
            ));
        }
        let cloud = PointCloud::new(pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (plane, inliers) = ransac_plane(&cloud, 100, 0.05, &mut rng).unwrap();
        assert!(plane.normal.z.abs() > 0.999);
        assert!(plane.d.abs() < 0.05);
        assert!(inliers.len() >= 380 && inliers.len() <= 410, "{}", inliers.len());
    }

    #[test]
    fn same_seed_same_result() {
        let cloud = PointCloud::new(noisy_ground(200, 0.05, 20)).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ransac_plane(&cloud, 50, 0.1, &mut rng).unwrap().1
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn too_few_points_is_none() {
        let cloud = PointCloud::new(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ransac_plane(&cloud, 10, 0.1, &mut rng).is_none());
    }

    #[test]
    fn fit_rejects_collinear_points() {
        let pts: Vec<Point3> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(PlaneModel::fit(&pts).is_none());
    }

    #[test]
    fn signed_distance_and_projection_agree() {
        let plane = PlaneModel {
            normal: Unit::new_normalize(Vec3::new(0.0, 0.0, 1.0)),
            d: -2.0,
        };
        let p = Point3::new(3.0, 1.0, 5.0);
        assert!((plane.signed_distance(&p) - 3.0).abs() < 1e-12);
        let proj = plane.project(&p);
        assert!((proj.z - 2.0).abs() < 1e-12);
        assert!(plane.distance(&proj) < 1e-12);
    }
}
