//! Per-point surface normals from local PCA.

use nalgebra::{Matrix3, Unit};
use rayon::prelude::*;

use crate::geom::{Point3, PointCloud, SpatialIndex, Vec3};

/// Estimates a unit normal for every point as the smallest eigenvector of
/// the covariance of its `k` nearest neighbors (the point itself included).
///
/// Normals are oriented toward `viewpoint`. A point gets `None` when its
/// neighborhood has fewer than three points or is rank deficient.
pub fn estimate_normals(
    cloud: &PointCloud,
    k: usize,
    viewpoint: &Point3,
) -> Vec<Option<Unit<Vec3>>> {
    let index = SpatialIndex::build(cloud);
    let pts = cloud.points();
    pts.par_iter()
        .map(|p| {
            let nn = index.knn(p, k.max(3));
            normal_from_neighborhood(pts, &nn, p, viewpoint)
        })
        .collect()
}

fn normal_from_neighborhood(
    pts: &[Point3],
    nn: &[(usize, f64)],
    at: &Point3,
    viewpoint: &Point3,
) -> Option<Unit<Vec3>> {
    if nn.len() < 3 {
        return None;
    }
    let mut mean = Vec3::zeros();
    for (i, _) in nn {
        mean += pts[*i].coords;
    }
    mean /= nn.len() as f64;
    let mut cov = Matrix3::zeros();
    for (i, _) in nn {
        let d = pts[*i].coords - mean;
        cov += d * d.transpose();
    }
    cov /= nn.len() as f64;

    let eig = cov.symmetric_eigen();
    let (mut smallest, mut val) = (0, eig.eigenvalues[0]);
    for a in 1..3 {
        if eig.eigenvalues[a] < val {
            smallest = a;
            val = eig.eigenvalues[a];
        }
    }
    let n: Vec3 = eig.eigenvectors.column(smallest).into();
    if !n.norm().is_finite() || n.norm() < 1e-9 {
        return None;
    }
    // Collinear neighborhoods have two near-zero eigenvalues; any vector in
    // the degenerate plane would do, so the normal is meaningless.
    let mut evs = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if evs[1] <= 1e-12 * evs[2].max(1e-300) {
        return None;
    }
    let mut n = Unit::new_normalize(n);
    if n.dot(&(viewpoint - at)) < 0.0 {
        n = -n;
    }
    Some(n)
}
