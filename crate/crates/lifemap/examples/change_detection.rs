//! Find what changed between two visits to the same site: a box was added
//! and the booth was torn down between the surveys. Both maps are compared
//! through spatial coexistence filters and a bird's-eye-view max-height
//! image; the simulator's truth change sets grade the output.

use lifemap::change::{detect_changes, eval_change_pr, ChangeParams};
use lifemap::io::assemble_map;
use lifemap::synth::{circle_trajectory, demo_sequence, make_session, SimConfig};
use lifemap::{Point3, PointCloud};

fn main() -> lifemap::Result<()> {
    let frames = 50;
    // Step 0 is the pristine site; step 1 adds a crate and removes the
    // booth. The paired clouds are the ground-truth changes of that step.
    let timeline = demo_sequence(1, frames)?;
    let (scene_before, _, _) = &timeline[0];
    let (scene_after, truth_added, truth_removed) = &timeline[1];

    let cfg = SimConfig {
        horizontal_rays: 240,
        vertical_rays: 12,
        seed: 5,
        ..SimConfig::default()
    };
    let survey = |scene: &lifemap::synth::Scene, seed: u64| -> lifemap::Result<PointCloud> {
        let mut scene = scene.clone();
        scene.dynamic_objects.clear(); // pretend cleaning already happened
        let traj = circle_trajectory(Point3::origin(), 18.0, 1.6, frames);
        let cfg = SimConfig { seed, ..cfg };
        Ok(assemble_map(&make_session(&scene, &traj, &cfg, "svy")?).without_labels())
    };
    let base = survey(scene_before, 5)?;
    let session = survey(scene_after, 6)?;
    println!("base {} points, session {} points", base.len(), session.len());

    // Boxes here are up to 2 m tall, so the overlap radius must reach from
    // a roof point down to surviving ground nearby.
    let params = ChangeParams {
        r_overlap: 2.5,
        seed: 7,
        ..ChangeParams::default()
    };
    let diff = detect_changes(&base, &session, &params)?;
    println!("coexisting structure: {} points", diff.coexist.len());
    println!(
        "negative changes (in base, gone now):   {} points",
        diff.base_nd.len()
    );
    println!(
        "positive changes (new in session):      {} points",
        diff.session_pd.len()
    );

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let (p_nd, r_nd) = eval_change_pr(&diff.base_nd, truth_removed, 0.2)?;
    let (p_pd, r_pd) = eval_change_pr(&diff.session_pd, truth_added, 0.2)?;
    println!("ND vs truth: precision {} recall {}", fmt(p_nd), fmt(r_nd));
    println!("PD vs truth: precision {} recall {}", fmt(p_pd), fmt(r_pd));
    Ok(())
}
