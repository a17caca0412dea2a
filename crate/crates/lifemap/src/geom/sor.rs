//! Statistical outlier removal.

use rayon::prelude::*;

use crate::geom::{PointCloud, SpatialIndex};

/// Indices of points that survive the filter.
///
/// For each point the mean distance to its `k` nearest neighbors (self
/// excluded) is computed; points whose mean exceeds the global
/// `mean + std_mul * stddev` are dropped. Clouds with at most `k` points are
/// returned unchanged since every point shares the same neighborhood.
pub fn statistical_outlier_removal_keep(cloud: &PointCloud, k: usize, std_mul: f64) -> Vec<usize> {
    let n = cloud.len();
    if n <= k || k == 0 {
        return (0..n).collect();
    }
    let index = SpatialIndex::build(cloud);
    let pts = cloud.points();
    let means: Vec<f64> = pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = index.knn(p, k + 1);
            let mut sum = 0.0;
            let mut cnt = 0usize;
            for &(j, d) in &nn {
                if j != i && cnt < k {
                    sum += d;
                    cnt += 1;
                }
            }
            sum / cnt as f64
        })
        .collect();

    let mu = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n as f64;
    let cutoff = mu + std_mul * var.sqrt();
    (0..n).filter(|&i| means[i] <= cutoff).collect()
}

/// The filtered cloud itself; labels of kept points are preserved.
pub fn statistical_outlier_removal(cloud: &PointCloud, k: usize, std_mul: f64) -> PointCloud {
    cloud.select(&statistical_outlier_removal_keep(cloud, k, std_mul))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dense_blob_with_strays(seed: u64) -> (PointCloud, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts: Vec<Point3> = (0..300)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let blob = pts.len();
        pts.push(Point3::new(50.0, 0.0, 0.0));
        pts.push(Point3::new(0.0, -60.0, 10.0));
        (PointCloud::new(pts).unwrap(), blob)
    }

    #[test]
    fn removes_isolated_points() {
        let (cloud, blob) = dense_blob_with_strays(1);
        let kept = statistical_outlier_removal_keep(&cloud, 12, 1.0);
        assert!(!kept.contains(&blob));
        assert!(!kept.contains(&(blob + 1)));
        assert!(kept.len() >= 280);
    }

    #[test]
    fn uniform_cloud_mostly_survives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = (0..500)
            .map(|_| {
                Point3::new(
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                    rng.gen_range(0.0..10.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let kept = statistical_outlier_removal_keep(&cloud, 12, 2.0);
        assert!(kept.len() as f64 >= 0.9 * cloud.len() as f64);
    }

    #[test]
    fn tiny_cloud_passes_through() {
        let cloud = PointCloud::new(vec![Point3::origin(), Point3::new(100.0, 0.0, 0.0)]).unwrap();
        assert_eq!(statistical_outlier_removal_keep(&cloud, 12, 1.0), vec![0, 1]);
    }

    #[test]
    fn preserves_labels_of_kept_points() {
        use crate::geom::Label;
        let (cloud, blob) = dense_blob_with_strays(3);
        let labels = vec![Label::Dynamic; blob + 2];
        let cloud = cloud.relabeled(labels).unwrap();
        let out = statistical_outlier_removal(&cloud, 12, 1.0);
        assert!(out.labels().unwrap().iter().all(|&l| l == Label::Dynamic));
    }
}
