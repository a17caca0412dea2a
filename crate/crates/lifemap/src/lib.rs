//! Lifelong 3D mapping for LiDAR session maps.
//!
//! A mapping session is a sequence of sensor poses and scans. This crate turns
//! raw sessions into a maintained, queryable map history:
//!
//! - [`removal`] strips dynamic objects (vehicles, pedestrians) from a session
//!   using probabilistic occupancy, plane restoration and radial filtering,
//!   without assuming anything about the sensor mount or motion.
//! - [`align`] registers a clean session map against the current base map with
//!   a two-stage pipeline (keypoint descriptor matching, then fine NDT
//!   registration) driven by a hyper-parameter grid search.
//! - [`change`] partitions two aligned maps into coexisting and differing
//!   regions and extracts positive/negative changes via bird's-eye-view
//!   max-height descriptors.
//! - [`store`] keeps one evolving base map plus per-session diffs and
//!   footprint boundaries, so any historic session can be reconstructed and
//!   any two sessions diffed without retaining the input maps.
//! - [`synth`] generates synthetic scenes with ground-truth labels and change
//!   sets, used throughout the test suite.
//!
//! Geometry primitives live in [`geom`], file formats in [`io`], and the
//! `lifemap` binary is a thin wrapper over [`cli`].
//!
//! Runnable walkthroughs for each stage are in `examples/`:
//!
//! ```bash
//! cargo run --release --example synth_scene
//! cargo run --release --example dynamic_removal
//! cargo run --release --example align_sessions
//! cargo run --release --example change_detection
//! cargo run --release --example version_store
//! ```

pub mod align;
pub mod change;
pub mod cli;
pub mod error;
pub mod geom;
pub mod io;
pub mod removal;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use geom::{Label, Point3, PointCloud, Pose};
