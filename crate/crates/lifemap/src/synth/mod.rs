//! Synthetic scenes and a ray-cast LiDAR simulator.
//!
//! Scenes are a ground plane plus axis-aligned boxes, some static and some
//! moving along per-frame trajectories. The simulator produces sensor-frame
//! scans with ground-truth static/dynamic labels, and scene mutation yields
//! ground-truth change regions, so every pipeline stage can be scored
//! against an exact oracle at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{Label, PlaneModel, Point3, PointCloud, Pose, Vec3};
use crate::io::SessionMap;

/// Axis-aligned box; `extents` are full side lengths.
#[derive(Debug, Clone)]
pub struct Box3 {
    pub id: String,
    pub center: Point3,
    pub extents: Vec3,
}

impl Box3 {
    pub fn new(id: impl Into<String>, center: Point3, extents: Vec3) -> Box3 {
        Box3 {
            id: id.into(),
            center,
            extents,
        }
    }

    /// A box of footprint `sx` x `sy` and height `h` resting on z = 0.
    pub fn on_ground(id: impl Into<String>, x: f64, y: f64, sx: f64, sy: f64, h: f64) -> Box3 {
        Box3::new(id, Point3::new(x, y, h / 2.0), Vec3::new(sx, sy, h))
    }
}

/// A box that moves: extents fixed, one pose per frame (box-local frame is
/// centered at the origin).
#[derive(Debug, Clone)]
pub struct DynamicBox {
    pub id: String,
    pub extents: Vec3,
    pub poses: Vec<Pose>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub ground: PlaneModel,
    pub static_objects: Vec<Box3>,
    pub dynamic_objects: Vec<DynamicBox>,
}

impl Scene {
    /// Flat ground at z = 0 with no objects.
    pub fn flat() -> Scene {
        Scene {
            ground: PlaneModel {
                normal: nalgebra::Unit::new_normalize(Vec3::z()),
                d: 0.0,
            },
            static_objects: Vec::new(),
            dynamic_objects: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub horizontal_rays: usize,
    pub vertical_rays: usize,
    /// Total vertical field of view in degrees, centered on the horizon.
    pub vertical_fov_deg: f64,
    pub max_range: f64,
    /// Standard deviation of along-ray range noise, meters.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizontal_rays: 360,
            vertical_rays: 16,
            vertical_fov_deg: 30.0,
            max_range: 50.0,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

/// First intersection of the ray `origin + t * dir` with an origin-centered
/// box of the given half extents, for t >= t_min.
fn ray_box(origin: &Point3, dir: &Vec3, half: &Vec3, t_min: f64) -> Option<f64> {
    let mut t0 = t_min;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut ta = (-half[a] - origin[a]) * inv;
        let mut tb = (half[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

fn ray_plane(origin: &Point3, dir: &Vec3, plane: &PlaneModel, t_min: f64) -> Option<f64> {
    let denom = plane.normal.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = -(plane.normal.dot(&origin.coords) + plane.d) / denom;
    (t >= t_min).then_some(t)
}

/// Casts one full scan from `pose` at `frame_index` and returns the hits in
/// the sensor frame with truth labels (Dynamic iff the ray hit a moving box).
///
/// Ray order is elevation-major then azimuth, so output order is stable. The
/// range noise stream is derived from `cfg.seed` and the frame index only.
pub fn raycast_scan(scene: &Scene, frame_index: usize, pose: &Pose, cfg: &SimConfig) -> PointCloud {
    let mut rng = frame_rng(cfg.seed, frame_index);
    let origin = Point3::from(pose.translation);
    let inv = pose.inverse();

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let vfov = cfg.vertical_fov_deg.to_radians();
    for vi in 0..cfg.vertical_rays {
        let elevation = if cfg.vertical_rays == 1 {
            0.0
        } else {
            -vfov / 2.0 + vfov * vi as f64 / (cfg.vertical_rays - 1) as f64
        };
        for hi in 0..cfg.horizontal_rays {
            let azimuth = std::f64::consts::TAU * hi as f64 / cfg.horizontal_rays as f64;
            let local = Vec3::new(
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            );
            let dir = pose.apply_vec(&local);

            let mut best_t = f64::INFINITY;
            let mut dynamic_hit = false;
            if let Some(t) = ray_plane(&origin, &dir, &scene.ground, 1e-6) {
                best_t = t;
            }
            for b in &scene.static_objects {
                let local_origin = Point3::from(origin - b.center);
                if let Some(t) = ray_box(&local_origin, &dir, &(b.extents / 2.0), 1e-6) {
                    if t < best_t {
                        best_t = t;
                        dynamic_hit = false;
                    }
                }
            }
            for d in &scene.dynamic_objects {
                let Some(box_pose) = d.poses.get(frame_index) else {
                    continue;
                };
                let binv = box_pose.inverse();
                let o_box = binv.apply(&origin);
                let d_box = binv.apply_vec(&dir);
                if let Some(t) = ray_box(&o_box, &d_box, &(d.extents / 2.0), 1e-6) {
                    if t < best_t {
                        best_t = t;
                        dynamic_hit = true;
                    }
                }
            }

            // The noise draw happens for every ray, hit or not, so the
            // stream stays aligned across scene variations.
            let noise: f64 = if cfg.noise_sigma > 0.0 {
                sample_gaussian(&mut rng) * cfg.noise_sigma
            } else {
                0.0
            };
            if best_t <= cfg.max_range {
                let world = origin + dir * (best_t + noise);
                points.push(inv.apply(&world));
                labels.push(if dynamic_hit { Label::Dynamic } else { Label::Static });
            }
        }
    }
    PointCloud::new(points)
        .expect("simulated coordinates are finite")
        .relabeled(labels)
        .expect("one label per simulated point")
}

fn frame_rng(seed: u64, frame_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (frame_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

fn sample_gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one draw per call is plenty here.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Simulates one scan per trajectory pose; dynamic boxes advance per frame.
pub fn make_session(scene: &Scene, trajectory: &[Pose], cfg: &SimConfig, id: &str) -> Result<SessionMap> {
    if trajectory.is_empty() {
        return Err(Error::InvalidParameter("trajectory must not be empty".into()));
    }
    let frames = trajectory
        .iter()
        .enumerate()
        .map(|(i, pose)| (pose.clone(), raycast_scan(scene, i, pose, cfg)))
        .collect();
    SessionMap::new(id, frames)
}

/// Spacing of ground-truth surface samples produced by [`mutate_scene`].
pub const TRUTH_SAMPLE_SPACING: f64 = 0.05;

/// Applies add/remove edits to the static objects and returns the mutated
/// scene with ground-truth change regions:
///
/// * positive truth (new content a later survey sees): surfaces of added
///   boxes plus the ground patches exposed where boxes were removed;
/// * negative truth (content that disappeared): surfaces of removed boxes
///   plus the ground patches hidden under added boxes.
///
/// Box bottoms are never sampled; they rest on the ground and no scan can
/// observe them.
pub fn mutate_scene(
    scene: &Scene,
    add: Vec<Box3>,
    remove_ids: &[&str],
) -> Result<(Scene, PointCloud, PointCloud)> {
    let mut removed = Vec::new();
    for id in remove_ids {
        if !scene.static_objects.iter().any(|b| b.id == *id) {
            return Err(Error::InvalidParameter(format!("no static object with id {id:?}")));
        }
    }
    let mut mutated = scene.clone();
    mutated.static_objects.retain(|b| {
        if remove_ids.contains(&b.id.as_str()) {
            removed.push(b.clone());
            false
        } else {
            true
        }
    });

    let mut pd = Vec::new();
    let mut nd = Vec::new();
    for b in &add {
        sample_box_surface(b, TRUTH_SAMPLE_SPACING, &mut pd);
        sample_ground_footprint(b, &scene.ground, TRUTH_SAMPLE_SPACING, &mut nd);
    }
    for b in &removed {
        sample_box_surface(b, TRUTH_SAMPLE_SPACING, &mut nd);
        sample_ground_footprint(b, &scene.ground, TRUTH_SAMPLE_SPACING, &mut pd);
    }
    mutated.static_objects.extend(add);

    Ok((mutated, PointCloud::new(pd)?, PointCloud::new(nd)?))
}

/// Grid samples of the five visible faces (four sides and the top).
fn sample_box_surface(b: &Box3, spacing: f64, out: &mut Vec<Point3>) {
    let h = b.extents / 2.0;
    let c = b.center;
    let steps = |len: f64| ((len / spacing).ceil() as usize).max(1);
    let (nx, ny, nz) = (steps(b.extents.x), steps(b.extents.y), steps(b.extents.z));
    let lerp = |lo: f64, hi: f64, i: usize, n: usize| {
        lo + (hi - lo) * (i as f64 + 0.5) / n as f64
    };
    for i in 0..nx {
        for j in 0..ny {
            let (x, y) = (lerp(c.x - h.x, c.x + h.x, i, nx), lerp(c.y - h.y, c.y + h.y, j, ny));
            out.push(Point3::new(x, y, c.z + h.z));
        }
    }
    for i in 0..nx {
        for k in 0..nz {
            let (x, z) = (lerp(c.x - h.x, c.x + h.x, i, nx), lerp(c.z - h.z, c.z + h.z, k, nz));
            out.push(Point3::new(x, c.y - h.y, z));
            out.push(Point3::new(x, c.y + h.y, z));
        }
    }
    for j in 0..ny {
        for k in 0..nz {
            let (y, z) = (lerp(c.y - h.y, c.y + h.y, j, ny), lerp(c.z - h.z, c.z + h.z, k, nz));
            out.push(Point3::new(c.x - h.x, y, z));
            out.push(Point3::new(c.x + h.x, y, z));
        }
    }
}

/// Grid samples of the ground plane inside a box footprint.
fn sample_ground_footprint(b: &Box3, ground: &PlaneModel, spacing: f64, out: &mut Vec<Point3>) {
    if ground.normal.z.abs() < 1e-6 {
        return;
    }
    let h = b.extents / 2.0;
    let steps = |len: f64| ((len / spacing).ceil() as usize).max(1);
    let (nx, ny) = (steps(b.extents.x), steps(b.extents.y));
    for i in 0..nx {
        for j in 0..ny {
            let x = b.center.x - h.x + b.extents.x * (i as f64 + 0.5) / nx as f64;
            let y = b.center.y - h.y + b.extents.y * (j as f64 + 0.5) / ny as f64;
            let z = -(ground.d + ground.normal.x * x + ground.normal.y * y) / ground.normal.z;
            out.push(Point3::new(x, y, z));
        }
    }
}

/// Circle of poses at a fixed height, yaw following the tangent.
pub fn circle_trajectory(
    center: Point3,
    radius: f64,
    height: f64,
    frames: usize,
) -> Vec<Pose> {
    (0..frames)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / frames as f64;
            let position = Vec3::new(
                center.x + radius * a.cos(),
                center.y + radius * a.sin(),
                height,
            );
            let yaw = a + std::f64::consts::FRAC_PI_2;
            Pose::new(
                nalgebra::UnitQuaternion::from_axis_angle(&nalgebra::Vector3::z_axis(), yaw),
                position,
            )
        })
        .collect()
}

/// Straight-line poses from `start` to `end` (inclusive), identity rotation.
pub fn line_trajectory(start: Point3, end: Point3, frames: usize) -> Vec<Pose> {
    (0..frames)
        .map(|i| {
            let s = if frames == 1 {
                0.0
            } else {
                i as f64 / (frames - 1) as f64
            };
            Pose::new(
                nalgebra::UnitQuaternion::identity(),
                start.coords + (end - start) * s,
            )
        })
        .collect()
}

/// Per-frame poses moving a box from `start` to `end` at constant speed.
pub fn linear_track(start: Point3, end: Point3, frames: usize) -> Vec<Pose> {
    line_trajectory(start, end, frames)
}

/// The standard benchmark scene: flat ground, six static boxes of varied
/// size, and two boxes that drive through the mapped area.
pub fn demo_scene(frames: usize) -> Scene {
    let mut scene = Scene::flat();
    scene.static_objects = vec![
        Box3::on_ground("building-a", 10.0, 0.0, 4.0, 6.0, 5.0),
        Box3::on_ground("building-b", -9.0, 7.0, 5.0, 4.0, 4.0),
        Box3::on_ground("shed", -8.0, -8.0, 3.0, 3.0, 2.5),
        Box3::on_ground("kiosk", 2.0, 11.0, 2.0, 2.0, 2.2),
        Box3::on_ground("container", 1.0, -10.0, 4.0, 2.0, 2.4),
        Box3::on_ground("booth", -13.0, -1.0, 2.0, 2.5, 2.0),
    ];
    scene.dynamic_objects = vec![
        DynamicBox {
            id: "car".into(),
            extents: Vec3::new(4.0, 1.8, 1.5),
            poses: linear_track(Point3::new(-18.0, 3.0, 0.75), Point3::new(18.0, 3.0, 0.75), frames),
        },
        DynamicBox {
            id: "van".into(),
            extents: Vec3::new(4.5, 2.0, 2.2),
            poses: linear_track(Point3::new(5.0, -16.0, 1.1), Point3::new(-5.0, 14.0, 1.1), frames),
        },
    ];
    scene
}

/// Scene timeline for multi-session benchmarks: entry 0 is [`demo_scene`],
/// each later entry has one box added and one removed relative to its
/// predecessor, paired with the truth change sets of that step (both empty
/// at entry 0). At most six steps, one per removable static object.
///
/// Every box stays inside a circle of radius 18 around the origin, so a
/// survey circling at that radius sees all faces of every change.
pub fn demo_sequence(
    steps: usize,
    frames: usize,
) -> Result<Vec<(Scene, PointCloud, PointCloud)>> {
    const ADDS: [(&str, f64, f64, f64, f64, f64); 6] = [
        ("crate-1", 7.0, -5.0, 2.0, 2.0, 1.8),
        ("crate-2", -4.0, -12.0, 2.5, 2.0, 1.6),
        ("crate-3", -14.0, 10.0, 2.0, 2.5, 2.0),
        ("crate-4", 12.0, 8.0, 2.0, 2.0, 1.7),
        ("crate-5", -14.0, -8.0, 2.2, 2.2, 1.9),
        ("crate-6", 5.0, 13.0, 2.0, 2.2, 1.5),
    ];
    const REMOVALS: [&str; 6] = ["booth", "kiosk", "shed", "container", "building-b", "building-a"];
    if steps > ADDS.len() {
        return Err(Error::InvalidParameter(format!(
            "scene timeline supports at most {} steps, asked for {steps}",
            ADDS.len()
        )));
    }
    let mut timeline = vec![(demo_scene(frames), PointCloud::empty(), PointCloud::empty())];
    for i in 0..steps {
        let (id, x, y, sx, sy, h) = ADDS[i];
        let (scene, pd, nd) = mutate_scene(
            &timeline[i].0,
            vec![Box3::on_ground(id, x, y, sx, sy, h)],
            &[REMOVALS[i]],
        )?;
        timeline.push((scene, pd, nd));
    }
    Ok(timeline)
}
