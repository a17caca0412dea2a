//! Normal distributions transform registration.
//!
//! The target map is summarized as one Gaussian per voxel; the source cloud
//! is moved to maximize the sum of Gaussian responses at its points. The
//! optimizer is Newton's method over a 6-dof twist with analytic gradient
//! and Hessian, a steepest-descent fallback when the Hessian is not
//! positive definite, a step-norm cap, and backtracking line search.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix3x6, Matrix6, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;

use crate::geom::{voxel_key, Point3, PointCloud, Pose, Vec3};
use crate::{Error, Result};

/// Gaussians need at least this many points to be trustworthy.
const MIN_VOXEL_POINTS: usize = 5;
/// Eigenvalues of a voxel covariance are floored at this fraction of the
/// squared voxel size, so flat neighborhoods keep an invertible Gaussian.
const EIGENVALUE_FLOOR_RATIO: f64 = 1e-3;
const MAX_ITERATIONS: usize = 60;
const STEP_TOLERANCE: f64 = 1e-4;
/// Responses beyond this Mahalanobis distance are numerically zero
/// (exp(-90) ~ 1e-40); skipping them keeps far points from costing time.
const MAHALANOBIS_CUTOFF: f64 = 180.0;

struct VoxelGaussian {
    mean: Vec3,
    info: Matrix3<f64>,
}

struct NdtMap {
    resolution: f64,
    cells: HashMap<(i64, i64, i64), VoxelGaussian>,
}

impl NdtMap {
    fn build(target: &PointCloud, resolution: f64) -> NdtMap {
        let mut groups: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in target.points().iter().enumerate() {
            groups.entry(voxel_key(p, resolution)).or_default().push(i);
        }
        let floor = EIGENVALUE_FLOOR_RATIO * resolution * resolution;
        let pts = target.points();
        let cells = groups
            .into_iter()
            .filter(|(_, idx)| idx.len() >= MIN_VOXEL_POINTS)
            .map(|(key, idx)| {
                let n = idx.len() as f64;
                let mut mean = Vec3::zeros();
                for &i in &idx {
                    mean += pts[i].coords;
                }
                mean /= n;
                let mut cov = Matrix3::zeros();
                for &i in &idx {
                    let d = pts[i].coords - mean;
                    cov += d * d.transpose();
                }
                cov /= n - 1.0;
                let mut eig = cov.symmetric_eigen();
                for v in eig.eigenvalues.iter_mut() {
                    *v = v.max(floor);
                }
                let info = eig.eigenvectors
                    * Matrix3::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v))
                    * eig.eigenvectors.transpose();
                (key, VoxelGaussian { mean, info })
            })
            .collect();
        NdtMap { resolution, cells }
    }

    /// The point's own voxel plus its six face neighbors, when present.
    fn lookup(&self, x: &Point3) -> impl Iterator<Item = &VoxelGaussian> {
        const OFFSETS: [(i64, i64, i64); 7] = [
            (0, 0, 0),
            (1, 0, 0),
            (-1, 0, 0),
            (0, 1, 0),
            (0, -1, 0),
            (0, 0, 1),
            (0, 0, -1),
        ];
        let key = voxel_key(x, self.resolution);
        OFFSETS
            .iter()
            .filter_map(move |o| self.cells.get(&(key.0 + o.0, key.1 + o.1, key.2 + o.2)))
    }
}

/// Skew-symmetric generators of so(3); rotation derivatives of x are
/// E_k * x.
fn generator(k: usize) -> Matrix3<f64> {
    match k {
        0 => Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        1 => Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0),
        _ => Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    }
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Sum of Gaussian responses at the transformed source points, negated so
/// smaller is better.
fn negative_score(map: &NdtMap, source: &[Point3], pose: &Pose) -> f64 {
    // Fixed chunking plus a sequential combine makes the summation order
    // scheduling-independent, so identical inputs score bit-identically.
    let partials: Vec<f64> = source
        .par_chunks(512)
        .map(|chunk| {
            let mut s = 0.0;
            for p in chunk {
                let x = pose.apply(p);
                for g in map.lookup(&x) {
                    let q = x.coords - g.mean;
                    let mahal = (q.transpose() * g.info * q)[(0, 0)];
                    if mahal <= MAHALANOBIS_CUTOFF {
                        s += (-0.5 * mahal).exp();
                    }
                }
            }
            s
        })
        .collect();
    -partials.iter().sum::<f64>()
}

struct Derivatives {
    gradient: Vector6<f64>,
    hessian: Matrix6<f64>,
    score: f64,
}

fn derivatives(map: &NdtMap, source: &[Point3], pose: &Pose) -> Derivatives {
    // Same fixed-chunk discipline as negative_score: the accumulation
    // order must not depend on work stealing.
    let partials: Vec<(Vector6<f64>, Matrix6<f64>, f64)> = source
        .par_chunks(512)
        .map(|chunk| {
            let mut acc = (Vector6::zeros(), Matrix6::zeros(), 0.0f64);
            for p in chunk {
                let (g, h, s) = &mut acc;
                let x = pose.apply(p);
                for gauss in map.lookup(&x) {
                    let q = x.coords - gauss.mean;
                    let a = gauss.info * q;
                    let mahal = q.dot(&a);
                    if mahal > MAHALANOBIS_CUTOFF {
                        continue;
                    }
                    let e = (-0.5 * mahal).exp();
                    *s += e;

                    let mut jac = Matrix3x6::zeros();
                    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                    jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&x.coords)));
                    let jta: Vector6<f64> = jac.transpose() * a;

                    // Minimizing -score: gradient +e*(J^T a), Hessian
                    // e*(J^T info J + a.z_ab - (J^T a)(J^T a)^T).
                    *g += e * jta;
                    let mut hp = jac.transpose() * gauss.info * jac;
                    hp -= jta * jta.transpose();
                    for r in 0..3 {
                        for c in r..3 {
                            let z = 0.5
                                * ((generator(r) * generator(c) + generator(c) * generator(r))
                                    * x.coords);
                            let v = a.dot(&z);
                            hp[(3 + r, 3 + c)] += v;
                            if r != c {
                                hp[(3 + c, 3 + r)] += v;
                            }
                        }
                    }
                    *h += e * hp;
                }
            }
            acc
        })
        .collect();
    let folded = partials.iter().fold(
        (Vector6::zeros(), Matrix6::zeros(), 0.0f64),
        |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
    );
    Derivatives {
        gradient: folded.0,
        hessian: folded.1,
        score: -folded.2,
    }
}

fn apply_twist(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let dt = Vector3::new(delta[0], delta[1], delta[2]);
    let dr = UnitQuaternion::from_scaled_axis(Vector3::new(delta[3], delta[4], delta[5]));
    Pose::new(dr * pose.rotation, dr * pose.translation + dt)
}

/// Refines `init` so that `source` lands on `target`. Returns the pose and
/// whether the optimizer reached its step tolerance within the iteration
/// budget. `max_step` caps the Newton step norm per iteration.
pub fn ndt_register(
    source: &PointCloud,
    target: &PointCloud,
    init: &Pose,
    resolution: f64,
    max_step: f64,
) -> Result<(Pose, bool)> {
    if resolution <= 0.0 || max_step <= 0.0 {
        return Err(Error::InvalidParameter(
            "ndt resolution and step cap must be positive".into(),
        ));
    }
    let map = NdtMap::build(target, resolution);
    if map.cells.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "no voxel at resolution {resolution} holds {MIN_VOXEL_POINTS} points"
        )));
    }
    let src = source.points();
    let mut pose = *init;
    let mut converged = false;

    for _ in 0..MAX_ITERATIONS {
        let d = derivatives(&map, src, &pose);
        let grad_norm = d.gradient.norm();
        if grad_norm < 1e-12 {
            converged = true;
            break;
        }
        let mut step = match d.hessian.cholesky() {
            Some(chol) => -chol.solve(&d.gradient),
            // Not positive definite: fall back to steepest descent with a
            // voxel-sized trial step, so the search stays in the local basin.
            None => -d.gradient * (resolution.min(max_step) / grad_norm),
        };
        let norm = step.norm();
        if norm > max_step {
            step *= max_step / norm;
        }

        // Backtracking line search on the negated score.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let candidate = apply_twist(&pose, &(step * alpha));
            if negative_score(&map, src, &candidate) < d.score {
                accepted = Some((candidate, alpha));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((next, alpha)) => {
                pose = next;
                if (step * alpha).norm() < STEP_TOLERANCE {
                    converged = true;
                    break;
                }
            }
            None => {
                // No direction of improvement at any tested scale: treat the
                // current pose as a stationary point.
                converged = true;
                break;
            }
        }
    }
    Ok((pose, converged))
}
