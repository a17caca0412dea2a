//! Keep years of surveys without keeping years of maps. A store holds one
//! evolving base map plus per-session change sets; committing a raw survey
//! runs the whole pipeline (dynamic removal, alignment, change detection)
//! and any historic session can be rebuilt or diffed afterwards.

use lifemap::align::AlignParams;
use lifemap::change::ChangeParams;
use lifemap::io::assemble_map;
use lifemap::removal::{remove_dynamic, DynRemovalParams};
use lifemap::store::init_store;
use lifemap::synth::{circle_trajectory, demo_sequence, make_session, SimConfig};
use lifemap::Point3;

fn main() -> lifemap::Result<()> {
    let frames = 40;
    // Three states of the site; each step adds one box and razes another.
    let timeline = demo_sequence(2, frames)?;

    let survey = |step: usize, seed: u64| -> lifemap::Result<_> {
        let traj = circle_trajectory(Point3::origin(), 18.0, 1.6, frames);
        let cfg = SimConfig {
            max_range: 40.0,
            seed,
            ..SimConfig::default()
        };
        make_session(&timeline[step].0, &traj, &cfg, &format!("visit-{step}"))
    };

    let root = std::path::Path::new("target/example-out/version_store/store");
    if root.exists() {
        std::fs::remove_dir_all(root).expect("clearing previous example run");
    }

    let dyn_params = DynRemovalParams {
        seed: 9,
        ..DynRemovalParams::default()
    };
    let chg_params = ChangeParams {
        r_overlap: 2.5, // boxes up to 2 m tall
        seed: 9,
        ..ChangeParams::default()
    };
    let grid = vec![AlignParams {
        pc_ds: 0.2,
        n_n: 60,
        ndt_r: 1.0,
        ..AlignParams::default()
    }];

    // The store starts from an already-clean map; later commits take raw
    // sessions and clean them internally.
    let session0 = survey(0, 10)?;
    let clean0 = remove_dynamic(&session0, &dyn_params)?.static_map.without_labels();
    let mut store = init_store(root, &clean0, "visit-0")?;
    println!("initialized store with {} points", store.base_map().len());

    for step in 1..timeline.len() {
        let session = survey(step, 10 + step as u64)?;
        let start = std::time::Instant::now();
        let sref = store.commit(&session, &dyn_params, &grid, &chg_params)?;
        let rec = store.sessions().last().unwrap();
        println!(
            "committed {} as session {} in {:.1}s: {} points removed, {} added",
            sref.id,
            sref.index,
            start.elapsed().as_secs_f64(),
            rec.nd_points.unwrap_or(0),
            rec.pd_points.unwrap_or(0)
        );
    }

    // Any historic state is reconstructable from base + diffs + boundary.
    let as_of_1 = store.reconstruct(1)?;
    println!(
        "reconstructed session 1: {} points (base map is {} now)",
        as_of_1.len(),
        store.base_map().len()
    );

    // And any two states can be diffed, not just adjacent ones.
    let drift = store.diff_between(0, 2, &chg_params)?;
    println!(
        "site drift over both edits: {} points vanished, {} appeared",
        drift.base_nd.len(),
        drift.session_pd.len()
    );

    let stats = store.stats()?;
    println!(
        "storage: {} bytes kept vs {} bytes for full maps ({:.1}% saved)",
        stats.ours_bytes,
        stats.all_maps_bytes,
        stats.efficiency * 100.0
    );

    // This session map never touched the store.
    let discarded = assemble_map(&survey(2, 99)?);
    println!(
        "(a full session map would have been {} points every visit)",
        discarded.len()
    );
    Ok(())
}
