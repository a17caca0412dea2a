//! Dynamic point removal.
//!
//! A session is folded into an occupancy grid, every map point is classified
//! by the accumulated evidence, and the verdicts are then repaired in order:
//! plane restoration (ground and walls misread as dynamic), an outlier sweep
//! over the dynamic set, k-NN voting for never-observed points, and a radial
//! pass that pulls isolated dynamic verdicts next to solid structure back to
//! static. The output is a clean static map plus the removed dynamic points.

mod grid;

pub use grid::{log_odds, OccupancyGrid};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{
    ransac_plane, statistical_outlier_removal_keep, Label, PointCloud, SpatialIndex,
};
use crate::io::SessionMap;

#[derive(Debug, Clone, serde::Serialize)]
pub struct DynRemovalParams {
    pub voxel_size: f64,
    pub p_hit: f64,
    pub p_miss: f64,
    /// Occupancy decision threshold, probability domain.
    pub p_occ: f64,
    /// Log-odds clamp bounds, probability domain.
    pub p_min: f64,
    pub p_max: f64,
    /// Rays longer than this integrate as misses only.
    pub max_range: f64,
    /// Frames per plane-restoration submap.
    pub submap_window: usize,
    /// RANSAC inlier distance for plane restoration.
    pub plane_dist_thr: f64,
    /// Minimum inliers / submap size for a non-largest plane to be restored.
    pub plane_ratio_thr: f64,
    /// Votes consulted per unknown point and the search radius.
    pub knn_k: usize,
    pub knn_radius: f64,
    /// Outlier sweep over the dynamic set.
    pub sor_k: usize,
    pub sor_std_mul: f64,
    /// Dynamic points with this many static neighbors this close flip back.
    pub reassign_radius: f64,
    pub reassign_min_neighbors: usize,
    /// Everything above this world height is declared static when set.
    pub height_cutoff: Option<f64>,
    pub seed: u64,
}

impl Default for DynRemovalParams {
    fn default() -> Self {
        DynRemovalParams {
            voxel_size: 0.2,
            p_hit: 0.7,
            p_miss: 0.4,
            p_occ: 0.5,
            p_min: 0.12,
            p_max: 0.97,
            max_range: 80.0,
            submap_window: 20,
            plane_dist_thr: 0.1,
            plane_ratio_thr: 0.10,
            knn_k: 7,
            knn_radius: 1.0,
            sor_k: 12,
            sor_std_mul: 1.0,
            reassign_radius: 0.1,
            reassign_min_neighbors: 2,
            height_cutoff: None,
            seed: 0,
        }
    }
}

impl DynRemovalParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("max_range", self.max_range),
            ("plane_dist_thr", self.plane_dist_thr),
            ("knn_radius", self.knn_radius),
            ("reassign_radius", self.reassign_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.submap_window == 0 {
            return Err(Error::InvalidParameter("submap_window must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.plane_ratio_thr) {
            return Err(Error::InvalidParameter(format!(
                "plane_ratio_thr must be in [0, 1], got {}",
                self.plane_ratio_thr
            )));
        }
        // Probability checks happen in OccupancyGrid::new.
        OccupancyGrid::new(self.voxel_size, self.p_hit, self.p_miss, self.p_min, self.p_max, self.p_occ)
            .map(|_| ())
    }

    fn grid(&self) -> Result<OccupancyGrid> {
        OccupancyGrid::new(self.voxel_size, self.p_hit, self.p_miss, self.p_min, self.p_max, self.p_occ)
    }
}

/// Outcome of [`remove_dynamic`].
#[derive(Debug, Clone)]
pub struct DynRemovalResult {
    /// The assembled world-frame map, input labels untouched.
    pub map: PointCloud,
    /// Final verdict per map point; never Unknown. Points dropped by the
    /// outlier sweep keep their Dynamic verdict here.
    pub labels: Vec<Label>,
    /// False for points dropped by the outlier sweep; such points appear in
    /// neither output map.
    pub kept: Vec<bool>,
    pub static_map: PointCloud,
    pub dynamic_map: PointCloud,
}

fn require_labels(cloud: &PointCloud) -> Result<&[Label]> {
    cloud
        .labels()
        .ok_or_else(|| Error::InvalidCloud("operation needs a labeled cloud".into()))
}

/// Labels every map point by its voxel's accumulated evidence: Static at or
/// above the occupancy threshold, Dynamic below it, Unknown if unobserved.
pub fn classify_by_occupancy(grid: &OccupancyGrid, map: &PointCloud) -> PointCloud {
    let labels = map
        .points()
        .par_iter()
        .map(|p| match grid.occupied(p) {
            Some(true) => Label::Static,
            Some(false) => Label::Dynamic,
            None => Label::Unknown,
        })
        .collect();
    map.relabeled(labels).expect("one label per point")
}

/// Iterative plane extraction over non-overlapping frame windows.
///
/// Within each window the maximum-consensus plane is restored to Static
/// unconditionally; further planes are restored while their inlier share of
/// the window is at least `plane_ratio_thr`, and extraction stops at the
/// first failure. Labels only ever move toward Static.
pub fn restore_planes(
    session: &SessionMap,
    labeled_map: &PointCloud,
    params: &DynRemovalParams,
) -> Result<PointCloud> {
    let mut labels = require_labels(labeled_map)?.to_vec();
    restore_planes_in_place(session, labeled_map, &mut labels, params)?;
    labeled_map.relabeled(labels)
}

const PLANE_RANSAC_ITERS: usize = 100;
const MAX_PLANES_PER_SUBMAP: usize = 8;

fn restore_planes_in_place(
    session: &SessionMap,
    map: &PointCloud,
    labels: &mut [Label],
    params: &DynRemovalParams,
) -> Result<()> {
    if map.len() != labels.len() {
        return Err(Error::InvalidCloud("label count does not match map".into()));
    }
    // The assembled map is frame-ordered, so a window of frames is a
    // contiguous index range.
    let mut frame_offsets = Vec::with_capacity(session.frames.len() + 1);
    let mut acc = 0usize;
    frame_offsets.push(0);
    for (_, scan) in &session.frames {
        acc += scan.len();
        frame_offsets.push(acc);
    }
    if acc != map.len() {
        return Err(Error::InvalidCloud(format!(
            "map has {} points but session scans total {acc}",
            map.len()
        )));
    }

    let windows: Vec<(usize, usize)> = (0..session.frames.len())
        .step_by(params.submap_window)
        .map(|f0| {
            let f1 = (f0 + params.submap_window).min(session.frames.len());
            (frame_offsets[f0], frame_offsets[f1])
        })
        .collect();

    let flips: Vec<Vec<usize>> = windows
        .par_iter()
        .enumerate()
        .map(|(wi, &(start, end))| {
            let submap_total = end - start;
            if submap_total < 3 {
                return Vec::new();
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(params.seed ^ (wi as u64).wrapping_mul(0x51_7C_C1_B7_27_22_0A_95));
            let mut working: Vec<usize> = (start..end).collect();
            let mut restored = Vec::new();
            for plane_rank in 0..MAX_PLANES_PER_SUBMAP {
                if working.len() < 3 {
                    break;
                }
                let sub = map.select(&working);
                let Some((_, inliers)) =
                    ransac_plane(&sub, PLANE_RANSAC_ITERS, params.plane_dist_thr, &mut rng)
                else {
                    break;
                };
                let accepted = plane_rank == 0
                    || inliers.len() as f64 / submap_total as f64 >= params.plane_ratio_thr;
                if !accepted {
                    break;
                }
                let mut inlier_flags = vec![false; working.len()];
                for &i in &inliers {
                    inlier_flags[i] = true;
                    restored.push(working[i]);
                }
                working = working
                    .iter()
                    .zip(&inlier_flags)
                    .filter(|(_, &f)| !f)
                    .map(|(&i, _)| i)
                    .collect();
            }
            restored
        })
        .collect();

    for flip in flips {
        for i in flip {
            labels[i] = Label::Static;
        }
    }
    Ok(())
}

/// Resolves Unknown labels by majority vote of the nearest labeled points
/// within `knn_radius` (at most `knn_k` voters); ties and empty
/// neighborhoods resolve to Static.
pub fn vote_unknown(labeled_map: &PointCloud, params: &DynRemovalParams) -> Result<PointCloud> {
    let mut labels = require_labels(labeled_map)?.to_vec();
    let alive = vec![true; labels.len()];
    vote_unknown_in_place(labeled_map, &mut labels, &alive, params);
    labeled_map.relabeled(labels)
}

fn vote_unknown_in_place(
    map: &PointCloud,
    labels: &mut [Label],
    alive: &[bool],
    params: &DynRemovalParams,
) {
    let voters: Vec<usize> = (0..labels.len())
        .filter(|&i| alive[i] && labels[i] != Label::Unknown)
        .collect();
    let voter_cloud = map.select(&voters);
    let index = SpatialIndex::build(&voter_cloud);
    let pts = map.points();
    let resolved: Vec<(usize, Label)> = (0..labels.len())
        .into_par_iter()
        .filter(|&i| labels[i] == Label::Unknown)
        .map(|i| {
            let mut s = 0usize;
            let mut d = 0usize;
            for (vi, dist) in index.knn(&pts[i], params.knn_k) {
                if dist > params.knn_radius {
                    break;
                }
                match labels[voters[vi]] {
                    Label::Static => s += 1,
                    Label::Dynamic => d += 1,
                    Label::Unknown => unreachable!("voters are labeled"),
                }
            }
            (i, if d > s { Label::Dynamic } else { Label::Static })
        })
        .collect();
    for (i, l) in resolved {
        labels[i] = l;
    }
}

/// Single-pass radial repair: a Dynamic point with enough Static neighbors
/// within `reassign_radius` becomes Static. Votes are counted against the
/// labels as they were before the pass, so flips do not cascade.
pub fn radial_reassign(labeled_map: &PointCloud, params: &DynRemovalParams) -> Result<PointCloud> {
    let mut labels = require_labels(labeled_map)?.to_vec();
    let alive = vec![true; labels.len()];
    radial_reassign_in_place(labeled_map, &mut labels, &alive, params);
    labeled_map.relabeled(labels)
}

fn radial_reassign_in_place(
    map: &PointCloud,
    labels: &mut [Label],
    alive: &[bool],
    params: &DynRemovalParams,
) {
    let statics: Vec<usize> = (0..labels.len())
        .filter(|&i| alive[i] && labels[i] == Label::Static)
        .collect();
    let static_cloud = map.select(&statics);
    let index = SpatialIndex::build(&static_cloud);
    let pts = map.points();
    let need = params.reassign_min_neighbors;
    let flips: Vec<usize> = (0..labels.len())
        .into_par_iter()
        .filter(|&i| alive[i] && labels[i] == Label::Dynamic)
        .filter(|&i| index.count_within(&pts[i], params.reassign_radius, need) >= need)
        .collect();
    for i in flips {
        labels[i] = Label::Static;
    }
}

/// Runs the full removal pipeline on a session.
pub fn remove_dynamic(session: &SessionMap, params: &DynRemovalParams) -> Result<DynRemovalResult> {
    params.validate()?;
    let mut grid = params.grid()?;

    // World-frame scans feed both the grid and the assembled map, in order.
    let world_scans: Vec<PointCloud> = session
        .frames
        .iter()
        .map(|(pose, scan)| scan.transform(pose))
        .collect();
    for ((pose, _), world) in session.frames.iter().zip(&world_scans) {
        if world.is_empty() {
            continue;
        }
        let origin = crate::geom::Point3::from(pose.translation);
        grid.integrate_scan(&origin, world, params.max_range);
    }
    let map = PointCloud::concat(&world_scans.iter().collect::<Vec<_>>());

    let labeled = classify_by_occupancy(&grid, &map);
    let mut labels = labeled.labels().expect("classification labels").to_vec();
    drop(labeled);

    if let Some(cutoff) = params.height_cutoff {
        for (i, p) in map.points().iter().enumerate() {
            if p.z > cutoff {
                labels[i] = Label::Static;
            }
        }
    }

    restore_planes_in_place(session, &map, &mut labels, params)?;

    // Outlier sweep over the dynamic set only; dropped points stay Dynamic
    // but are excluded from both outputs and all later neighbor queries.
    let dynamic_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Dynamic).collect();
    let mut alive = vec![true; labels.len()];
    if !dynamic_idx.is_empty() {
        let dyn_cloud = map.select(&dynamic_idx);
        let kept = statistical_outlier_removal_keep(&dyn_cloud, params.sor_k, params.sor_std_mul);
        let mut kept_flags = vec![false; dynamic_idx.len()];
        for k in kept {
            kept_flags[k] = true;
        }
        for (pos, &i) in dynamic_idx.iter().enumerate() {
            alive[i] = kept_flags[pos];
        }
    }

    vote_unknown_in_place(&map, &mut labels, &alive, params);
    radial_reassign_in_place(&map, &mut labels, &alive, params);

    debug_assert!(labels.iter().all(|&l| l != Label::Unknown));
    let static_idx: Vec<usize> = (0..labels.len())
        .filter(|&i| alive[i] && labels[i] == Label::Static)
        .collect();
    let dynamic_idx: Vec<usize> = (0..labels.len())
        .filter(|&i| alive[i] && labels[i] == Label::Dynamic)
        .collect();
    let static_map = map
        .select(&static_idx)
        .relabeled(vec![Label::Static; static_idx.len()])?;
    let dynamic_map = map
        .select(&dynamic_idx)
        .relabeled(vec![Label::Dynamic; dynamic_idx.len()])?;

    Ok(DynRemovalResult {
        map,
        labels,
        kept: alive,
        static_map,
        dynamic_map,
    })
}

/// Preservation rate, rejection rate, and their harmonic mean.
///
/// PR is the fraction of truly static points still labeled Static; RR the
/// fraction of truly dynamic points labeled Dynamic. A metric with a zero
/// denominator is `None`; F1 is `None` when either rate is, and 0 when both
/// rates are 0.
pub fn evaluate_pr_rr_f1(
    predicted: &[Label],
    truth: &[Label],
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidParameter(format!(
            "predicted {} labels, truth {}",
            predicted.len(),
            truth.len()
        )));
    }
    let mut true_static = 0usize;
    let mut preserved = 0usize;
    let mut true_dynamic = 0usize;
    let mut rejected = 0usize;
    for (&p, &t) in predicted.iter().zip(truth) {
        match t {
            Label::Static => {
                true_static += 1;
                if p == Label::Static {
                    preserved += 1;
                }
            }
            Label::Dynamic => {
                true_dynamic += 1;
                if p == Label::Dynamic {
                    rejected += 1;
                }
            }
            Label::Unknown => {}
        }
    }
    let pr = (true_static > 0).then(|| preserved as f64 / true_static as f64);
    let rr = (true_dynamic > 0).then(|| rejected as f64 / true_dynamic as f64);
    let f1 = match (pr, rr) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok((pr, rr, f1))
}
