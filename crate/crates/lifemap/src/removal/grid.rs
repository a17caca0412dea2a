//! Sparse log-odds occupancy grid with ray-walk integration.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::geom::{voxel_key, Point3, PointCloud};

/// Log-odds of a probability: `ln(p / (1 - p))`.
pub fn log_odds(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Sparse voxel grid accumulating occupancy evidence.
///
/// Voxels absent from the map have never been observed (neither hit nor
/// traversed) and classify as Unknown.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    voxel_size: f64,
    l_hit: f64,
    l_miss: f64,
    l_min: f64,
    l_max: f64,
    l_occ: f64,
    cells: HashMap<(i64, i64, i64), f64>,
}

impl OccupancyGrid {
    /// Builds a grid from probability-domain parameters. `p_hit` must exceed
    /// 0.5 and `p_miss` stay below it, so hits add and misses subtract
    /// evidence; values accumulate clamped to `[logit(p_min), logit(p_max)]`.
    pub fn new(voxel_size: f64, p_hit: f64, p_miss: f64, p_min: f64, p_max: f64, p_occ: f64) -> Result<OccupancyGrid> {
        if !(0.5 < p_hit && p_hit < 1.0) {
            return Err(Error::InvalidParameter(format!("p_hit must be in (0.5, 1), got {p_hit}")));
        }
        if !(0.0 < p_miss && p_miss < 0.5) {
            return Err(Error::InvalidParameter(format!("p_miss must be in (0, 0.5), got {p_miss}")));
        }
        if !(0.0 < p_min && p_min < p_max && p_max < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "clamp probabilities must satisfy 0 < p_min < p_max < 1, got [{p_min}, {p_max}]"
            )));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::InvalidParameter(format!("voxel_size must be positive, got {voxel_size}")));
        }
        Ok(OccupancyGrid {
            voxel_size,
            l_hit: log_odds(p_hit),
            l_miss: log_odds(p_miss),
            l_min: log_odds(p_min),
            l_max: log_odds(p_max),
            l_occ: log_odds(p_occ),
            cells: HashMap::new(),
        })
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn key_of(&self, p: &Point3) -> (i64, i64, i64) {
        voxel_key(p, self.voxel_size)
    }

    /// Accumulated log-odds of the voxel containing `p`, if ever observed.
    pub fn log_odds_at(&self, p: &Point3) -> Option<f64> {
        self.cells.get(&self.key_of(p)).copied()
    }

    /// Whether the voxel holding `p` counts as occupied (log-odds at or
    /// above the occupancy threshold). `None` for unobserved voxels.
    pub fn occupied(&self, p: &Point3) -> Option<bool> {
        self.log_odds_at(p).map(|l| l >= self.l_occ)
    }

    fn bump(&mut self, key: (i64, i64, i64), delta: f64) {
        let e = self.cells.entry(key).or_insert(0.0);
        *e = (*e + delta).clamp(self.l_min, self.l_max);
    }

    /// Folds one scan into the grid.
    ///
    /// Every scan point contributes a hit to its endpoint voxel and a miss
    /// to each voxel the ray crosses strictly between the origin voxel and
    /// the endpoint voxel. Within one scan a voxel is updated at most once
    /// as a hit and once as a miss, and a hit suppresses a miss on the same
    /// voxel. Points beyond `max_range` contribute misses along the
    /// truncated ray and no hit.
    pub fn integrate_scan(&mut self, origin: &Point3, scan_world: &PointCloud, max_range: f64) {
        let mut hits: HashSet<(i64, i64, i64)> = HashSet::new();
        let mut misses: HashSet<(i64, i64, i64)> = HashSet::new();
        for p in scan_world.points() {
            let dir = p - origin;
            let range = dir.norm();
            if range < 1e-12 {
                hits.insert(self.key_of(p));
                continue;
            }
            if range <= max_range {
                hits.insert(self.key_of(p));
                walk_between(origin, p, self.voxel_size, |k| {
                    misses.insert(k);
                });
            } else {
                let clipped = origin + dir * (max_range / range);
                walk_between(origin, &clipped, self.voxel_size, |k| {
                    misses.insert(k);
                });
            }
        }
        for k in misses {
            if !hits.contains(&k) {
                self.bump(k, self.l_miss);
            }
        }
        for k in hits {
            self.bump(k, self.l_hit);
        }
    }
}

/// Visits every voxel the segment crosses strictly between (and excluding)
/// the start and end voxels, in order of traversal.
pub(crate) fn walk_between(
    start: &Point3,
    end: &Point3,
    voxel: f64,
    mut visit: impl FnMut((i64, i64, i64)),
) {
    let key0 = voxel_key(start, voxel);
    let key1 = voxel_key(end, voxel);
    if key0 == key1 {
        return;
    }
    let d = end - start;
    let mut current = key0;
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if d[a] > 0.0 {
            step[a] = 1;
            let boundary = (key0_axis(key0, a) + 1) as f64 * voxel;
            t_max[a] = (boundary - start[a]) / d[a];
            t_delta[a] = voxel / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            let boundary = key0_axis(key0, a) as f64 * voxel;
            t_max[a] = (boundary - start[a]) / d[a];
            t_delta[a] = -voxel / d[a];
        }
    }
    // Cap iterations defensively; exact arithmetic should hit key1 first.
    let limit = 4 * (3.0 + d.norm() / voxel) as usize + 16;
    for _ in 0..limit {
        let axis = (0..3).min_by(|&a, &b| t_max[a].partial_cmp(&t_max[b]).unwrap()).unwrap();
        if t_max[axis] > 1.0 {
            return;
        }
        t_max[axis] += t_delta[axis];
        match axis {
            0 => current.0 += step[0],
            1 => current.1 += step[1],
            _ => current.2 += step[2],
        }
        if current == key1 {
            return;
        }
        visit(current);
    }
}

fn key0_axis(key: (i64, i64, i64), axis: usize) -> i64 {
    match axis {
        0 => key.0,
        1 => key.1,
        _ => key.2,
    }
}
