//! Multi-session map alignment.
//!
//! Two maps of the same place, built in different coordinate frames, are
//! registered in two stages: a feature-based coarse fit (keypoints, local
//! descriptors, mutual matching, rigid RANSAC) followed by NDT refinement.
//! Because no single parameter set works across environments, a grid of
//! parameter candidates is evaluated and the winner is the candidate whose
//! aligned maps have the lowest truncated Chamfer distance.

mod coarse;
mod ndt;
mod shot;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use coarse::{coarse_align, fit_rigid, mutual_matches, ransac_rigid, CoarseResult};
pub use ndt::ndt_register;
pub use shot::{compress_pair, raw_descriptors, Descriptor, DescriptorSet, RawDescriptor};

use crate::geom::{
    chamfer_distance, estimate_normals, voxel_downsample, Point3, PointCloud, Pose, SpatialIndex,
};
use crate::{Error, Result};

/// Chamfer truncation radius used to score aligned candidates.
pub const CHAMFER_TAU: f64 = 0.5;

/// One alignment parameter candidate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AlignParams {
    /// Keypoint voxel radius (m).
    pub k_r: f64,
    /// Working-cloud downsample cell (m); descriptors and NDT run on this.
    pub pc_ds: f64,
    /// Neighbor count for normal estimation.
    pub n_n: usize,
    /// Descriptor support radius (m).
    pub fd_r: f64,
    /// NDT voxel resolution (m).
    pub ndt_r: f64,
    /// NDT maximum Newton step (m).
    pub ndt_ss: f64,
}

pub const KEYPOINT_RADII: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];
pub const DOWNSAMPLE_CELLS: [f64; 4] = [0.1, 0.2, 0.3, 1.0];
pub const NORMAL_NEIGHBORS: [usize; 2] = [200, 500];
pub const DESCRIPTOR_RADII: [f64; 4] = [5.0, 10.0, 20.0, 50.0];
pub const NDT_RESOLUTIONS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
pub const NDT_STEPS: [f64; 2] = [5.0, 10.0];

impl Default for AlignParams {
    fn default() -> Self {
        AlignParams {
            k_r: KEYPOINT_RADII[0],
            pc_ds: DOWNSAMPLE_CELLS[0],
            n_n: NORMAL_NEIGHBORS[0],
            fd_r: DESCRIPTOR_RADII[0],
            ndt_r: NDT_RESOLUTIONS[0],
            ndt_ss: NDT_STEPS[0],
        }
    }
}

impl AlignParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.k_r > 0.0
            && self.pc_ds > 0.0
            && self.n_n > 0
            && self.fd_r > 0.0
            && self.ndt_r > 0.0
            && self.ndt_ss > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "alignment parameters must be positive: {self:?}"
            )))
        }
    }
}

/// Full cross product of the candidate value lists, keypoint radius
/// outermost so neighbors in the list share expensive intermediates.
pub fn full_grid() -> Vec<AlignParams> {
    let mut grid = Vec::new();
    for &k_r in &KEYPOINT_RADII {
        for &pc_ds in &DOWNSAMPLE_CELLS {
            for &n_n in &NORMAL_NEIGHBORS {
                for &fd_r in &DESCRIPTOR_RADII {
                    for &ndt_r in &NDT_RESOLUTIONS {
                        for &ndt_ss in &NDT_STEPS {
                            grid.push(AlignParams {
                                k_r,
                                pc_ds,
                                n_n,
                                fd_r,
                                ndt_r,
                                ndt_ss,
                            });
                        }
                    }
                }
            }
        }
    }
    grid
}

/// Single candidate taking the first value of every list.
pub fn fast_grid() -> Vec<AlignParams> {
    vec![AlignParams::default()]
}

/// Voxel-downsamples at `k_r`, then snaps each cell centroid to the nearest
/// original point so keypoints stay on the measured surface.
pub fn select_keypoints(cloud: &PointCloud, k_r: f64) -> Result<PointCloud> {
    let centroids = voxel_downsample(cloud, k_r)?;
    if centroids.is_empty() {
        return PointCloud::new(Vec::new());
    }
    let index = SpatialIndex::build(cloud);
    let mut picked: Vec<usize> = centroids
        .points()
        .iter()
        .map(|c| index.nearest(c).expect("non-empty cloud").0)
        .collect();
    picked.sort_unstable();
    picked.dedup();
    Ok(cloud.select(&picked))
}

/// Raw 352-value descriptors for `keypoints`, computed on the
/// `pc_ds`-downsampled cloud with `n_n`-neighbor normals. Pair these with
/// [`compress_pair`] to get the 50-dimensional form used for matching.
pub fn compute_descriptors(
    cloud: &PointCloud,
    keypoints: &PointCloud,
    params: &AlignParams,
) -> Result<Vec<Option<RawDescriptor>>> {
    params.validate()?;
    let ds = voxel_downsample(cloud, params.pc_ds)?;
    let normals = estimate_normals(&ds, params.n_n, &normal_viewpoint(&ds));
    Ok(raw_descriptors(&ds, &normals, keypoints, params.fd_r))
}

/// A point far above the cloud: ground normals point up, wall normals
/// point horizontally outward toward the footprint center. The choice
/// moves rigidly with the map, so paired sessions orient consistently.
fn normal_viewpoint(cloud: &PointCloud) -> Point3 {
    let Some(centroid) = cloud.centroid() else {
        return Point3::new(0.0, 0.0, 1.0);
    };
    let max_z = cloud
        .points()
        .iter()
        .map(|p| p.z)
        .fold(f64::NEG_INFINITY, f64::max);
    Point3::new(centroid.x, centroid.y, max_z + 2.0 * (max_z - centroid.z).abs() + 10.0)
}

/// Per-candidate fate in the grid search.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    /// Descriptor matching / RANSAC produced no usable rigid fit.
    FailedCoarse,
    /// NDT could not run or the refined pose left no overlap within
    /// [`CHAMFER_TAU`].
    FailedFine,
    Succeeded { chamfer: f64 },
}

#[derive(Debug, Clone)]
pub struct CandidateLog {
    pub index: usize,
    pub params: AlignParams,
    pub outcome: StageOutcome,
}

#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// Maps session (mapB) coordinates into base (mapA) coordinates.
    pub transform: Pose,
    /// Truncated Chamfer distance of the winning candidate; always finite.
    pub chamfer: f64,
    /// Parameters of the winning candidate.
    pub params: AlignParams,
    /// Whether the winning candidate's NDT reached its step tolerance.
    pub converged: bool,
    /// Every candidate's outcome, ordered by grid index.
    pub stage_log: Vec<CandidateLog>,
}

/// Hashable identity of the coarse-stage parameters; candidates sharing it
/// reuse keypoints, descriptors, and the coarse pose.
fn coarse_key(p: &AlignParams) -> (u64, u64, usize, u64) {
    (p.k_r.to_bits(), p.pc_ds.to_bits(), p.n_n, p.fd_r.to_bits())
}

/// Runs every grid candidate and returns the success with the lowest
/// truncated Chamfer distance; `seed` fixes the RANSAC draws.
///
/// `map_a` is the reference (base) map, `map_b` the one being moved. The
/// stage log covers all candidates in grid order; with no success the call
/// fails with per-stage failure counts.
pub fn grid_search_align(
    map_a: &PointCloud,
    map_b: &PointCloud,
    grid: &[AlignParams],
    seed: u64,
) -> Result<AlignmentResult> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty alignment grid".into()));
    }
    for p in grid {
        p.validate()?;
    }

    // Group candidates that share the coarse stage, keeping grid order.
    let mut group_of: HashMap<(u64, u64, usize, u64), usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, p) in grid.iter().enumerate() {
        let gid = *group_of.entry(coarse_key(p)).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[gid].push(i);
    }

    // Shared intermediates, computed once per distinct value.
    let mut keypoints: HashMap<u64, (PointCloud, PointCloud)> = HashMap::new();
    for p in grid {
        keypoints.entry(p.k_r.to_bits()).or_insert_with(|| {
            (
                select_keypoints(map_a, p.k_r).expect("validated k_r"),
                select_keypoints(map_b, p.k_r).expect("validated k_r"),
            )
        });
    }
    let mut downsampled: HashMap<u64, (PointCloud, PointCloud)> = HashMap::new();
    for p in grid {
        downsampled.entry(p.pc_ds.to_bits()).or_insert_with(|| {
            (
                voxel_downsample(map_a, p.pc_ds).expect("validated pc_ds"),
                voxel_downsample(map_b, p.pc_ds).expect("validated pc_ds"),
            )
        });
    }
    type Normals = Vec<Option<nalgebra::Unit<crate::geom::Vec3>>>;
    let mut normals: HashMap<(u64, usize), (Normals, Normals)> = HashMap::new();
    for p in grid {
        normals.entry((p.pc_ds.to_bits(), p.n_n)).or_insert_with(|| {
            let (ds_a, ds_b) = &downsampled[&p.pc_ds.to_bits()];
            (
                estimate_normals(ds_a, p.n_n, &normal_viewpoint(ds_a)),
                estimate_normals(ds_b, p.n_n, &normal_viewpoint(ds_b)),
            )
        });
    }

    struct Evaluated {
        log: CandidateLog,
        pose: Option<(Pose, bool)>,
    }

    let evaluated: Vec<Evaluated> = groups
        .par_iter()
        .flat_map(|members| {
            let first = members[0];
            let p0 = grid[first];
            let (kp_a, kp_b) = &keypoints[&p0.k_r.to_bits()];
            let (ds_a, ds_b) = &downsampled[&p0.pc_ds.to_bits()];
            let (nrm_a, nrm_b) = &normals[&(p0.pc_ds.to_bits(), p0.n_n)];

            let raw_a = raw_descriptors(ds_a, nrm_a, kp_a, p0.fd_r);
            let raw_b = raw_descriptors(ds_b, nrm_b, kp_b, p0.fd_r);
            let (desc_a, desc_b) = compress_pair(&raw_a, &raw_b);

            // Seed by the first candidate index so the draw sequence does
            // not depend on scheduling.
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (first as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let coarse = coarse_align(kp_a, &desc_a, kp_b, &desc_b, 2.0 * p0.k_r, &mut rng);

            let coarse = match coarse {
                Ok(c) => c,
                Err(_) => {
                    return members
                        .iter()
                        .map(|&i| Evaluated {
                            log: CandidateLog {
                                index: i,
                                params: grid[i],
                                outcome: StageOutcome::FailedCoarse,
                            },
                            pose: None,
                        })
                        .collect::<Vec<_>>();
                }
            };

            members
                .par_iter()
                .map(|&i| {
                    let p = grid[i];
                    let fine = ndt_register(ds_b, ds_a, &coarse.pose, p.ndt_r, p.ndt_ss);
                    let (log, pose) = match fine {
                        Err(_) => (StageOutcome::FailedFine, None),
                        Ok((pose, converged)) => {
                            let moved = map_b.transform(&pose);
                            let chamfer = chamfer_distance(&moved, map_a, CHAMFER_TAU);
                            if chamfer.is_finite() {
                                (StageOutcome::Succeeded { chamfer }, Some((pose, converged)))
                            } else {
                                // Refined pose left no mutual overlap.
                                (StageOutcome::FailedFine, None)
                            }
                        }
                    };
                    Evaluated {
                        log: CandidateLog {
                            index: i,
                            params: p,
                            outcome: log,
                        },
                        pose,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut evaluated = evaluated;
    evaluated.sort_by_key(|e| e.log.index);

    let mut best: Option<(f64, usize)> = None;
    for (slot, e) in evaluated.iter().enumerate() {
        if let StageOutcome::Succeeded { chamfer } = e.log.outcome {
            if best.map_or(true, |(b, _)| chamfer < b) {
                best = Some((chamfer, slot));
            }
        }
    }
    let stage_log: Vec<CandidateLog> = evaluated.iter().map(|e| e.log.clone()).collect();
    match best {
        Some((chamfer, slot)) => {
            let e = &evaluated[slot];
            let (pose, converged) = e.pose.expect("succeeded candidates keep their pose");
            Ok(AlignmentResult {
                transform: pose,
                chamfer,
                params: e.log.params,
                converged,
                stage_log,
            })
        }
        None => {
            let coarse_failures = stage_log
                .iter()
                .filter(|l| l.outcome == StageOutcome::FailedCoarse)
                .count();
            Err(Error::AlignmentFailed {
                coarse_failures,
                fine_failures: stage_log.len() - coarse_failures,
            })
        }
    }
}
