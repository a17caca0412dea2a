//! Simulate a LiDAR survey of the built-in demo scene and write it out as a
//! session directory (per-frame scans, poses, checksummed manifest, truth
//! labels riding along in every scan).

use lifemap::io::{assemble_map, write_session_dir, PcdEncoding};
use lifemap::synth::{circle_trajectory, demo_scene, make_session, SimConfig};
use lifemap::{Label, Point3};

fn main() -> lifemap::Result<()> {
    let frames = 120;
    let scene = demo_scene(frames);
    println!(
        "scene: {} static boxes, {} moving boxes on a ground plane",
        scene.static_objects.len(),
        scene.dynamic_objects.len()
    );

    // A sensor circling the site at radius 18 m, mounted 1.6 m up.
    let trajectory = circle_trajectory(Point3::origin(), 18.0, 1.6, frames);
    let cfg = SimConfig {
        seed: 42,
        ..SimConfig::default()
    };
    let session = make_session(&scene, &trajectory, &cfg, "demo-survey")?;

    let map = assemble_map(&session);
    let dynamic = map
        .labels()
        .map(|ls| ls.iter().filter(|l| **l == Label::Dynamic).count())
        .unwrap_or(0);
    println!(
        "simulated {} frames, {} points total, {} of them on moving objects",
        session.frame_count(),
        map.len(),
        dynamic
    );

    let out = std::path::Path::new("target/example-out/synth_scene/session");
    write_session_dir(&session, out, PcdEncoding::Binary)?;
    println!("wrote session to {}", out.display());
    println!("try: cargo run --example dynamic_removal");
    Ok(())
}
