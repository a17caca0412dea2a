use lifemap::align::{fast_grid, grid_search_align, StageOutcome};
use lifemap::geom::{Pose, Vec3};
use lifemap::io::assemble_map;
use lifemap::synth::{circle_trajectory, demo_scene, make_session, SimConfig};
use lifemap::{Point3, PointCloud};
use nalgebra::{Unit, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn crop_x(map: &PointCloud, min_x: f64, max_x: f64) -> PointCloud {
    let idx: Vec<usize> = map
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.x >= min_x && p.x <= max_x)
        .map(|(i, _)| i)
        .collect();
    map.select(&idx)
}

fn main() -> lifemap::Result<()> {
    let frames = 30;
    let mut scene = demo_scene(frames);
    scene.dynamic_objects.clear();

    let mut worst_rot = 0.0f64;
    let mut worst_trans = 0.0f64;
    let mut worst_time = 0.0f64;
    for trial in 0..20u64 {
        let cfg = SimConfig {
            horizontal_rays: 180,
            vertical_rays: 8,
            max_range: 30.0,
            seed: trial,
            ..SimConfig::default()
        };
        let traj = circle_trajectory(Point3::origin(), 18.0, 1.6, frames);
        let map = assemble_map(&make_session(&scene, &traj, &cfg, "svy")?).without_labels();

        let map_a = crop_x(&map, f64::NEG_INFINITY, 12.0);
        let crop_b = crop_x(&map, -12.0, f64::INFINITY);
        let band = crop_x(&map, -12.0, 12.0);
        let ov_a = band.len() as f64 / map_a.len() as f64;
        let ov_b = band.len() as f64 / crop_b.len() as f64;

        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let axis = Unit::new_normalize(Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ));
        let angle = rng.gen_range(0.0..30f64.to_radians());
        let t = Vec3::new(
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-2.0..2.0),
        );
        let truth = Pose::new(UnitQuaternion::from_axis_angle(&axis, angle), t);
        let map_b = crop_b.transform(&truth.inverse());

        let start = std::time::Instant::now();
        let result = grid_search_align(&map_a, &map_b, &fast_grid(), trial);
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(r) => {
                let rot = r.transform.rotation_angle_to(&truth).to_degrees();
                let tr = r.transform.translation_distance_to(&truth);
                let min = r
                    .stage_log
                    .iter()
                    .filter_map(|l| match l.outcome {
                        StageOutcome::Succeeded { chamfer } => Some(chamfer),
                        _ => None,
                    })
                    .fold(f64::INFINITY, f64::min);
                println!(
                    "trial {trial:2}: map {} pts (A {}, B {}), ov {:.2}/{:.2}, rot {rot:.4} deg, trans {tr:.4} m, chamfer {:.6} (min ok {}), {secs:.1}s",
                    map.len(), map_a.len(), map_b.len(), ov_a, ov_b, r.chamfer, r.chamfer == min
                );
                worst_rot = worst_rot.max(rot);
                worst_trans = worst_trans.max(tr);
                worst_time = worst_time.max(secs);
            }
            Err(e) => {
                println!("trial {trial:2}: FAILED {e} ({secs:.1}s)");
                worst_rot = f64::INFINITY;
            }
        }
    }
    println!("worst: rot {worst_rot:.4} deg, trans {worst_trans:.4} m, time {worst_time:.1}s");
    Ok(())
}
