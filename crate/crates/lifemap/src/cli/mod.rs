//! Command-line driver: one subcommand per pipeline stage plus store
//! queries.
//!
//! Exit codes: 0 success; 1 usage errors (unknown flags, out-of-range
//! parameters); 2 broken input data (unreadable or malformed files,
//! checksum mismatches, missing sessions); 3 pipeline failures (no
//! alignment candidate succeeded, degenerate geometry).
//!
//! Numeric parameters resolve as flag > config file > built-in default.
//! The config file is flat `key = value` text with `#` comments; keys are
//! the parameter names used across the crate (`voxel_size`, `r_overlap`,
//! `k_r`, ...). A key that no subcommand knows is rejected; a known key
//! that the current subcommand does not consume is ignored, so one file
//! can configure a whole workflow.
//!
//! `--report` writes a JSON run report `{command, params, metrics,
//! timings, outputs}`. The timings object is deliberately left empty and
//! wall-clock numbers go to standard output instead: identical
//! invocations must produce byte-identical reports.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::align::{
    fast_grid, full_grid, grid_search_align, AlignParams, CandidateLog, StageOutcome,
};
use crate::change::{
    detect_changes, eval_change_pr, write_bev_pgm, bev_project_in, BevFrame, ChangeParams,
    PdReference, PLANE_INLIER_THR, PLANE_RANSAC_ITERATIONS,
};
use crate::error::{Error, Result};
use crate::geom::{ransac_plane, Label, Point3, PointCloud, Pose};
use crate::io::{
    assemble_map, read_cloud, read_session_dir, write_cloud, write_poses, write_session_dir,
    PcdEncoding,
};
use crate::removal::{evaluate_pr_rr_f1, remove_dynamic, DynRemovalParams};
use crate::store::{init_store, open_store};
use crate::synth::{circle_trajectory, demo_sequence, make_session, SimConfig};

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code. Never panics on bad input; all failures map to exit codes.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here; they are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.global.threads {
        // Best effort: in-process callers may have sized the pool already.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidParameter(_) => 1,
        Error::AlignmentFailed { .. } | Error::DegenerateInput(_) | Error::GridMismatch(_) => 3,
        _ => 2,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "lifemap",
    version,
    about = "Lifelong LiDAR map maintenance: clean, align, diff and version session maps"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Seed for every stochastic stage (simulator noise, RANSAC draws).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write a machine-readable JSON run report to this path.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Flat key=value parameter file; explicit flags win over file entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic survey with truth labels and change sets.
    Synth(SynthArgs),
    /// Remove dynamic points from a session, producing a static map.
    Clean(CleanArgs),
    /// Register one map onto another via the two-stage grid search.
    Align(AlignArgs),
    /// Create a map version store from an initial clean map.
    Init(InitArgs),
    /// Clean, align and fold a session into a store.
    Commit(CommitArgs),
    /// Rebuild the map as it looked at session <INDEX>.
    Checkout(CheckoutArgs),
    /// Extract the changes between two stored sessions.
    Diff(DiffArgs),
    /// List committed sessions.
    Log(StoreOnlyArgs),
    /// Storage accounting: stored bytes vs keeping every session in full.
    Stats(StoreOnlyArgs),
    /// Quality metrics against ground-truth files.
    Eval(EvalArgs),
    /// Convert KITTI-style pose rows (12 numbers, row-major 3x4) to the
    /// `timestamp tx ty tz qx qy qz qw` pose format.
    ConvertPoses(ConvertPosesArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Session directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Scene timeline step: 0 is the pristine demo scene; each later step
    /// has one box added and one removed. The truth change files describe
    /// this step against the previous one.
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Scans in the survey.
    #[arg(long)]
    frames: Option<usize>,
    /// Survey circle radius (m).
    #[arg(long)]
    radius: Option<f64>,
    /// Sensor height above ground (m).
    #[arg(long)]
    height: Option<f64>,
    #[arg(long)]
    horizontal_rays: Option<usize>,
    #[arg(long)]
    vertical_rays: Option<usize>,
    /// Total vertical field of view, centered on the horizon (degrees).
    #[arg(long)]
    vertical_fov_deg: Option<f64>,
    #[arg(long)]
    max_range: Option<f64>,
    /// Along-ray range noise sigma (m).
    #[arg(long)]
    noise_sigma: Option<f64>,
}

/// Dynamic-removal flags shared by `clean` and `commit`. The config file
/// can set every removal parameter; these cover the commonly swept ones.
#[derive(Args, Debug)]
struct RemovalFlags {
    /// Occupancy voxel size (m).
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Rays longer than this only carve free space (m).
    #[arg(long)]
    max_range: Option<f64>,
    /// Frames per plane-restoration submap.
    #[arg(long)]
    submap_window: Option<usize>,
    /// Declare everything above this world height static (m).
    #[arg(long)]
    height_cutoff: Option<f64>,
}

/// Change-detection flags shared by `diff` and `commit`.
#[derive(Args, Debug)]
struct ChangeFlags {
    /// Cross-map coexistence radius (m).
    #[arg(long)]
    r_coexist: Option<f64>,
    /// Radius separating commonly observed from frontier structure (m).
    #[arg(long)]
    r_overlap: Option<f64>,
    /// BEV pixel size (m); supported in [0.05, 0.15] and [0.5, 2.0].
    #[arg(long)]
    bev_res: Option<f64>,
    /// Max-height disparity that flags an occupied pixel pair (m).
    #[arg(long)]
    h_thr: Option<f64>,
    /// Compare per height band of this size instead of one flat image (m).
    #[arg(long)]
    layer_height: Option<f64>,
    /// Reference image for positive differences.
    #[arg(long, value_enum)]
    pd_reference: Option<PdRefChoice>,
}

#[derive(Args, Debug)]
struct CleanArgs {
    /// Session directory (scans + poses + manifest).
    #[arg(long)]
    session: PathBuf,
    /// Output directory: labeled.pcd, static.pcd, dynamic.pcd.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    removal: RemovalFlags,
}

#[derive(Args, Debug)]
struct AlignArgs {
    /// Reference map (PCD or PLY).
    #[arg(long)]
    map_a: PathBuf,
    /// Map to move into the reference frame.
    #[arg(long)]
    map_b: PathBuf,
    /// Output directory: transform.txt, stage_log.csv, aligned.pcd.
    #[arg(long)]
    out: PathBuf,
    /// Candidate grid size.
    #[arg(long, value_enum)]
    grid: Option<GridChoice>,
}

#[derive(Args, Debug)]
struct InitArgs {
    /// Directory to create the store in (must be empty or absent).
    #[arg(long)]
    store: PathBuf,
    /// Clean map the store starts from.
    #[arg(long)]
    map: PathBuf,
    /// Session id recorded for the initial map (default: map file stem).
    #[arg(long)]
    id: Option<String>,
}

#[derive(Args, Debug)]
struct CommitArgs {
    #[arg(long)]
    store: PathBuf,
    /// Raw session directory to clean, align and commit.
    #[arg(long)]
    session: PathBuf,
    /// Alignment candidate grid size.
    #[arg(long, value_enum)]
    grid: Option<GridChoice>,
    #[command(flatten)]
    removal: RemovalFlags,
    #[command(flatten)]
    change: ChangeFlags,
}

#[derive(Args, Debug)]
struct CheckoutArgs {
    /// Session index to reconstruct.
    index: usize,
    #[arg(long)]
    store: PathBuf,
    /// Output map file (.pcd or .ply).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiffArgs {
    /// Older session index.
    a: usize,
    /// Newer session index.
    b: usize,
    #[arg(long)]
    store: PathBuf,
    /// Output directory: base_nd.pcd, session_pd.pcd, summary.txt.
    #[arg(long)]
    out: PathBuf,
    /// Also export BEV max-height images as PGM for inspection.
    #[arg(long)]
    bev: bool,
    #[command(flatten)]
    change: ChangeFlags,
}

#[derive(Args, Debug)]
struct StoreOnlyArgs {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(subcommand)]
    which: EvalCommand,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Static/dynamic labeling quality: PR, RR and their harmonic mean F1.
    /// Both files must be labeled clouds over the same points in the same
    /// order (the truth file from `synth`, the labeled map from `clean`).
    Labels {
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Change-set quality: precision and recall under a match radius.
    Changes {
        /// Detected change cloud (e.g. base_nd.pcd from `diff`).
        #[arg(long)]
        detected: PathBuf,
        /// Ground-truth change cloud (e.g. truth_nd.pcd from `synth`).
        #[arg(long)]
        truth: PathBuf,
        /// A detection is correct if truth lies within this distance (m).
        #[arg(long)]
        match_radius: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct ConvertPosesArgs {
    /// Input file: one pose per line as 12 whitespace-separated numbers.
    #[arg(long)]
    kitti: PathBuf,
    /// Output pose file (`timestamp tx ty tz qx qy qz qw` lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GridChoice {
    /// One default candidate.
    Fast,
    /// The whole candidate cross product.
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PdRefChoice {
    /// Compare the session overlap against the whole base map.
    FullBase,
    /// Compare it against the base overlap region only.
    BaseOverlap,
}

impl From<PdRefChoice> for PdReference {
    fn from(c: PdRefChoice) -> PdReference {
        match c {
            PdRefChoice::FullBase => PdReference::FullBase,
            PdRefChoice::BaseOverlap => PdReference::BaseOverlap,
        }
    }
}

// ---------------------------------------------------------------------------
// Config file

/// Every key any subcommand consumes. Unknown keys in a config file are
/// typos until proven otherwise, so they fail fast.
const KNOWN_KEYS: &[&str] = &[
    // dynamic removal
    "voxel_size",
    "p_hit",
    "p_miss",
    "p_occ",
    "p_min",
    "p_max",
    "max_range",
    "submap_window",
    "plane_dist_thr",
    "plane_ratio_thr",
    "knn_k",
    "knn_radius",
    "sor_k",
    "sor_std_mul",
    "reassign_radius",
    "reassign_min_neighbors",
    "height_cutoff",
    // change detection
    "r_coexist",
    "r_overlap",
    "bev_res",
    "h_thr",
    "layer_height",
    "pd_reference",
    // alignment
    "grid",
    "k_r",
    "pc_ds",
    "n_n",
    "fd_r",
    "ndt_r",
    "ndt_ss",
    // evaluation
    "match_radius",
    // simulator
    "frames",
    "radius",
    "height",
    "horizontal_rays",
    "vertical_rays",
    "vertical_fov_deg",
    "noise_sigma",
    // global
    "seed",
];

#[derive(Debug, Default)]
struct Config {
    values: BTreeMap<String, String>,
}

fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    let mut values = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::InvalidParameter(format!(
                "unknown config key {key:?} in {}",
                path.display()
            )));
        }
        values.insert(key.to_string(), value.to_string());
    }
    Ok(Config { values })
}

impl Config {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidParameter(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    /// Getter for optional numeric parameters where the literal `none`
    /// switches the feature off.
    fn get_opt_f64(&self, key: &str) -> Result<Option<Option<f64>>> {
        match self.values.get(key).map(|s| s.as_str()) {
            None => Ok(None),
            Some("none") | Some("off") => Ok(Some(None)),
            Some(raw) => raw.parse::<f64>().map(|v| Some(Some(v))).map_err(|_| {
                Error::InvalidParameter(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    fn get_pd_reference(&self) -> Result<Option<PdReference>> {
        match self.values.get("pd_reference").map(|s| s.as_str()) {
            None => Ok(None),
            Some("full_base") | Some("full-base") => Ok(Some(PdReference::FullBase)),
            Some("base_overlap") | Some("base-overlap") => Ok(Some(PdReference::BaseOverlap)),
            Some(other) => Err(Error::InvalidParameter(format!(
                "config key pd_reference: expected full_base or base_overlap, got {other:?}"
            ))),
        }
    }

    fn get_grid(&self) -> Result<Option<GridChoice>> {
        match self.values.get("grid").map(|s| s.as_str()) {
            None => Ok(None),
            Some("fast") => Ok(Some(GridChoice::Fast)),
            Some("full") => Ok(Some(GridChoice::Full)),
            Some(other) => Err(Error::InvalidParameter(format!(
                "config key grid: expected fast or full, got {other:?}"
            ))),
        }
    }

    fn has_any(&self, keys: &[&str]) -> bool {
        keys.iter().any(|k| self.values.contains_key(*k))
    }
}

// ---------------------------------------------------------------------------
// Effective parameter assembly (flag > config > default)

fn removal_params(cfg: &Config, flags: &RemovalFlags, seed: u64) -> Result<DynRemovalParams> {
    let mut p = DynRemovalParams::default();
    if let Some(v) = cfg.get("voxel_size")? {
        p.voxel_size = v;
    }
    if let Some(v) = cfg.get("p_hit")? {
        p.p_hit = v;
    }
    if let Some(v) = cfg.get("p_miss")? {
        p.p_miss = v;
    }
    if let Some(v) = cfg.get("p_occ")? {
        p.p_occ = v;
    }
    if let Some(v) = cfg.get("p_min")? {
        p.p_min = v;
    }
    if let Some(v) = cfg.get("p_max")? {
        p.p_max = v;
    }
    if let Some(v) = cfg.get("max_range")? {
        p.max_range = v;
    }
    if let Some(v) = cfg.get("submap_window")? {
        p.submap_window = v;
    }
    if let Some(v) = cfg.get("plane_dist_thr")? {
        p.plane_dist_thr = v;
    }
    if let Some(v) = cfg.get("plane_ratio_thr")? {
        p.plane_ratio_thr = v;
    }
    if let Some(v) = cfg.get("knn_k")? {
        p.knn_k = v;
    }
    if let Some(v) = cfg.get("knn_radius")? {
        p.knn_radius = v;
    }
    if let Some(v) = cfg.get("sor_k")? {
        p.sor_k = v;
    }
    if let Some(v) = cfg.get("sor_std_mul")? {
        p.sor_std_mul = v;
    }
    if let Some(v) = cfg.get("reassign_radius")? {
        p.reassign_radius = v;
    }
    if let Some(v) = cfg.get("reassign_min_neighbors")? {
        p.reassign_min_neighbors = v;
    }
    if let Some(v) = cfg.get_opt_f64("height_cutoff")? {
        p.height_cutoff = v;
    }
    if let Some(v) = flags.voxel_size {
        p.voxel_size = v;
    }
    if let Some(v) = flags.max_range {
        p.max_range = v;
    }
    if let Some(v) = flags.submap_window {
        p.submap_window = v;
    }
    if let Some(v) = flags.height_cutoff {
        p.height_cutoff = Some(v);
    }
    p.seed = seed;
    p.validate()?;
    Ok(p)
}

fn change_params(cfg: &Config, flags: &ChangeFlags, seed: u64) -> Result<ChangeParams> {
    let mut p = ChangeParams::default();
    if let Some(v) = cfg.get("r_coexist")? {
        p.r_coexist = v;
    }
    if let Some(v) = cfg.get("r_overlap")? {
        p.r_overlap = v;
    }
    if let Some(v) = cfg.get("bev_res")? {
        p.bev_res = v;
    }
    if let Some(v) = cfg.get("h_thr")? {
        p.h_thr = v;
    }
    if let Some(v) = cfg.get_opt_f64("layer_height")? {
        p.layer_height = v;
    }
    if let Some(v) = cfg.get_pd_reference()? {
        p.pd_reference = v;
    }
    if let Some(v) = flags.r_coexist {
        p.r_coexist = v;
    }
    if let Some(v) = flags.r_overlap {
        p.r_overlap = v;
    }
    if let Some(v) = flags.bev_res {
        p.bev_res = v;
    }
    if let Some(v) = flags.h_thr {
        p.h_thr = v;
    }
    if let Some(v) = flags.layer_height {
        p.layer_height = Some(v);
    }
    if let Some(v) = flags.pd_reference {
        p.pd_reference = v.into();
    }
    p.seed = seed;
    p.validate()?;
    Ok(p)
}

const CANDIDATE_KEYS: &[&str] = &["k_r", "pc_ds", "n_n", "fd_r", "ndt_r", "ndt_ss"];

/// Builds the candidate list: `fast` (default) or `full`, or a single
/// custom candidate when any per-parameter key is set in the config.
fn alignment_grid(cfg: &Config, choice: Option<GridChoice>) -> Result<Vec<AlignParams>> {
    let custom = cfg.has_any(CANDIDATE_KEYS);
    let choice = match choice {
        Some(c) => c,
        None => cfg.get_grid()?.unwrap_or(GridChoice::Fast),
    };
    match (choice, custom) {
        (GridChoice::Full, true) => Err(Error::InvalidParameter(
            "candidate overrides (k_r, pc_ds, n_n, fd_r, ndt_r, ndt_ss) only \
             apply to the fast grid"
                .into(),
        )),
        (GridChoice::Full, false) => Ok(full_grid()),
        (GridChoice::Fast, false) => Ok(fast_grid()),
        (GridChoice::Fast, true) => {
            let mut p = AlignParams::default();
            if let Some(v) = cfg.get("k_r")? {
                p.k_r = v;
            }
            if let Some(v) = cfg.get("pc_ds")? {
                p.pc_ds = v;
            }
            if let Some(v) = cfg.get("n_n")? {
                p.n_n = v;
            }
            if let Some(v) = cfg.get("fd_r")? {
                p.fd_r = v;
            }
            if let Some(v) = cfg.get("ndt_r")? {
                p.ndt_r = v;
            }
            if let Some(v) = cfg.get("ndt_ss")? {
                p.ndt_ss = v;
            }
            p.validate()?;
            Ok(vec![p])
        }
    }
}

// ---------------------------------------------------------------------------
// Run report

#[derive(Serialize)]
struct ReportDoc<'a> {
    command: &'a str,
    params: &'a BTreeMap<String, Value>,
    metrics: &'a BTreeMap<String, Value>,
    timings: BTreeMap<String, Value>,
    outputs: &'a [String],
}

struct Report {
    command: &'static str,
    params: BTreeMap<String, Value>,
    metrics: BTreeMap<String, Value>,
    outputs: Vec<String>,
}

impl Report {
    fn new(command: &'static str) -> Report {
        Report {
            command,
            params: BTreeMap::new(),
            metrics: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn param(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.params.insert(key.to_string(), v);
    }

    fn metric(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        self.metrics.insert(key.to_string(), v);
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Timings stay empty on purpose: they are the one nondeterministic
    /// quantity, and reports must be byte-identical across identical runs.
    fn write(&self, path: &Path) -> Result<()> {
        let doc = ReportDoc {
            command: self.command,
            params: &self.params,
            metrics: &self.metrics,
            timings: BTreeMap::new(),
            outputs: &self.outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&doc)?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

// ---------------------------------------------------------------------------
// Dispatch

fn execute(cli: &Cli) -> Result<()> {
    let cfg = match &cli.global.config {
        Some(path) => load_config(path)?,
        None => Config::default(),
    };
    let seed = match cli.global.seed {
        Some(s) => s,
        None => cfg.get("seed")?.unwrap_or(0),
    };

    let mut report = Report::new(command_name(&cli.command));
    report.param("seed", seed);

    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg, seed, &mut report)?,
        Command::Clean(a) => cmd_clean(a, &cfg, seed, &mut report)?,
        Command::Align(a) => cmd_align(a, &cfg, seed, &mut report)?,
        Command::Init(a) => cmd_init(a, &mut report)?,
        Command::Commit(a) => cmd_commit(a, &cfg, seed, &mut report)?,
        Command::Checkout(a) => cmd_checkout(a, &mut report)?,
        Command::Diff(a) => cmd_diff(a, &cfg, seed, &mut report)?,
        Command::Log(a) => cmd_log(a, &mut report)?,
        Command::Stats(a) => cmd_stats(a, &mut report)?,
        Command::Eval(a) => cmd_eval(a, &cfg, &mut report)?,
        Command::ConvertPoses(a) => cmd_convert_poses(a, &mut report)?,
    }

    if let Some(path) = &cli.global.report {
        report.write(path)?;
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Clean(_) => "clean",
        Command::Align(_) => "align",
        Command::Init(_) => "init",
        Command::Commit(_) => "commit",
        Command::Checkout(_) => "checkout",
        Command::Diff(_) => "diff",
        Command::Log(_) => "log",
        Command::Stats(_) => "stats",
        Command::Eval(_) => "eval",
        Command::ConvertPoses(_) => "convert-poses",
    }
}

fn fmt_rate(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_synth(a: &SynthArgs, cfg: &Config, seed: u64, report: &mut Report) -> Result<()> {
    let frames = match a.frames {
        Some(v) => v,
        None => cfg.get("frames")?.unwrap_or(120),
    };
    let radius = match a.radius {
        Some(v) => v,
        None => cfg.get("radius")?.unwrap_or(18.0),
    };
    let height = match a.height {
        Some(v) => v,
        None => cfg.get("height")?.unwrap_or(1.6),
    };
    let mut sim = SimConfig {
        seed,
        ..SimConfig::default()
    };
    sim.horizontal_rays = match a.horizontal_rays {
        Some(v) => v,
        None => cfg.get("horizontal_rays")?.unwrap_or(sim.horizontal_rays),
    };
    sim.vertical_rays = match a.vertical_rays {
        Some(v) => v,
        None => cfg.get("vertical_rays")?.unwrap_or(sim.vertical_rays),
    };
    sim.vertical_fov_deg = match a.vertical_fov_deg {
        Some(v) => v,
        None => cfg.get("vertical_fov_deg")?.unwrap_or(sim.vertical_fov_deg),
    };
    sim.max_range = match a.max_range {
        Some(v) => v,
        None => cfg.get("max_range")?.unwrap_or(sim.max_range),
    };
    sim.noise_sigma = match a.noise_sigma {
        Some(v) => v,
        None => cfg.get("noise_sigma")?.unwrap_or(sim.noise_sigma),
    };

    if frames == 0 {
        return Err(Error::InvalidParameter("frames must be at least 1".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter("radius must be positive".into()));
    }
    if sim.horizontal_rays == 0 || sim.vertical_rays == 0 {
        return Err(Error::InvalidParameter("ray counts must be at least 1".into()));
    }
    if !(sim.max_range > 0.0) {
        return Err(Error::InvalidParameter("max_range must be positive".into()));
    }
    if !(sim.noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter("noise_sigma must be non-negative".into()));
    }
    if !(sim.vertical_fov_deg >= 0.0) {
        return Err(Error::InvalidParameter("vertical_fov_deg must be non-negative".into()));
    }

    let t0 = Instant::now();
    let timeline = demo_sequence(a.step, frames)?;
    let (scene, truth_pd, truth_nd) = &timeline[a.step];
    let trajectory = circle_trajectory(Point3::origin(), radius, height, frames);
    let mut session = make_session(scene, &trajectory, &sim, &format!("synth-step{}", a.step))?;
    session.metadata.insert("scene_step".into(), a.step.to_string());
    session.metadata.insert("seed".into(), seed.to_string());

    write_session_dir(&session, &a.out, PcdEncoding::Binary)?;
    let truth_map = assemble_map(&session);
    let labels_path = a.out.join("truth_labels.pcd");
    let pd_path = a.out.join("truth_pd.pcd");
    let nd_path = a.out.join("truth_nd.pcd");
    write_cloud(&truth_map, &labels_path, PcdEncoding::Binary)?;
    write_cloud(truth_pd, &pd_path, PcdEncoding::Binary)?;
    write_cloud(truth_nd, &nd_path, PcdEncoding::Binary)?;

    let dynamic_points = truth_map
        .labels()
        .map(|ls| ls.iter().filter(|l| **l == Label::Dynamic).count())
        .unwrap_or(0);
    println!(
        "synthesized step {} survey: {} frames, {} points ({} dynamic) in {:.1}s",
        a.step,
        frames,
        truth_map.len(),
        dynamic_points,
        t0.elapsed().as_secs_f64()
    );
    println!(
        "wrote {} (session), truth_labels.pcd, truth_pd.pcd ({} pts), truth_nd.pcd ({} pts)",
        a.out.display(),
        truth_pd.len(),
        truth_nd.len()
    );

    report.param("step", a.step);
    report.param("frames", frames);
    report.param("radius", radius);
    report.param("height", height);
    report.param("horizontal_rays", sim.horizontal_rays);
    report.param("vertical_rays", sim.vertical_rays);
    report.param("vertical_fov_deg", sim.vertical_fov_deg);
    report.param("max_range", sim.max_range);
    report.param("noise_sigma", sim.noise_sigma);
    report.metric("points", truth_map.len());
    report.metric("dynamic_points", dynamic_points);
    report.metric("truth_pd_points", truth_pd.len());
    report.metric("truth_nd_points", truth_nd.len());
    report.output(&a.out);
    report.output(&labels_path);
    report.output(&pd_path);
    report.output(&nd_path);
    Ok(())
}

fn cmd_clean(a: &CleanArgs, cfg: &Config, seed: u64, report: &mut Report) -> Result<()> {
    let params = removal_params(cfg, &a.removal, seed)?;
    let session = read_session_dir(&a.session)?;

    let t0 = Instant::now();
    let result = remove_dynamic(&session, &params)?;
    let elapsed = t0.elapsed().as_secs_f64();

    fs::create_dir_all(&a.out)
        .map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    let labeled = result.map.relabeled(result.labels.clone())?;
    let labeled_path = a.out.join("labeled.pcd");
    let static_path = a.out.join("static.pcd");
    let dynamic_path = a.out.join("dynamic.pcd");
    write_cloud(&labeled, &labeled_path, PcdEncoding::Binary)?;
    write_cloud(&result.static_map, &static_path, PcdEncoding::Binary)?;
    write_cloud(&result.dynamic_map, &dynamic_path, PcdEncoding::Binary)?;

    let dropped = result.kept.iter().filter(|k| !**k).count();
    println!(
        "cleaned {} points in {elapsed:.1}s: {} static, {} dynamic, {} dropped as outliers",
        result.map.len(),
        result.static_map.len(),
        result.dynamic_map.len(),
        dropped
    );

    report.param("removal", serde_json::to_value(&params)?);
    report.metric("points", result.map.len());
    report.metric("static_points", result.static_map.len());
    report.metric("dynamic_points", result.dynamic_map.len());
    report.metric("dropped_points", dropped);

    // Scans that carry truth labels (synthetic surveys) self-grade.
    if let Some(truth) = result.map.labels() {
        let (pr, rr, f1) = evaluate_pr_rr_f1(&result.labels, truth)?;
        println!(
            "against embedded truth labels: PR {}  RR {}  F1 {}",
            fmt_rate(pr),
            fmt_rate(rr),
            fmt_rate(f1)
        );
        report.metric("pr", pr);
        report.metric("rr", rr);
        report.metric("f1", f1);
    }

    report.output(&labeled_path);
    report.output(&static_path);
    report.output(&dynamic_path);
    Ok(())
}

fn stage_log_csv(log: &[CandidateLog]) -> String {
    let mut s = String::from("index,k_r,pc_ds,n_n,fd_r,ndt_r,ndt_ss,outcome,chamfer\n");
    for entry in log {
        let p = &entry.params;
        let (outcome, chamfer) = match &entry.outcome {
            StageOutcome::Succeeded { chamfer } => ("succeeded", format!("{chamfer}")),
            StageOutcome::FailedCoarse => ("failed_coarse", String::new()),
            StageOutcome::FailedFine => ("failed_fine", String::new()),
        };
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            entry.index, p.k_r, p.pc_ds, p.n_n, p.fd_r, p.ndt_r, p.ndt_ss, outcome, chamfer
        )
        .expect("in-memory write");
    }
    s
}

fn cmd_align(a: &AlignArgs, cfg: &Config, seed: u64, report: &mut Report) -> Result<()> {
    let grid = alignment_grid(cfg, a.grid)?;
    let map_a = read_cloud(&a.map_a)?;
    let map_b = read_cloud(&a.map_b)?;

    let t0 = Instant::now();
    let result = grid_search_align(&map_a, &map_b, &grid, seed)?;
    let elapsed = t0.elapsed().as_secs_f64();

    fs::create_dir_all(&a.out)
        .map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    let transform_path = a.out.join("transform.txt");
    let log_path = a.out.join("stage_log.csv");
    let aligned_path = a.out.join("aligned.pcd");
    let m = result.transform.to_matrix3x4_rows();
    let mut text = String::new();
    for row in m.chunks(4) {
        writeln!(text, "{} {} {} {}", row[0], row[1], row[2], row[3]).expect("in-memory write");
    }
    fs::write(&transform_path, text)
        .map_err(|e| Error::io(format!("writing {}", transform_path.display()), e))?;
    fs::write(&log_path, stage_log_csv(&result.stage_log))
        .map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
    write_cloud(&map_b.transform(&result.transform), &aligned_path, PcdEncoding::Binary)?;

    let succeeded = result
        .stage_log
        .iter()
        .filter(|e| matches!(e.outcome, StageOutcome::Succeeded { .. }))
        .count();
    let p = &result.params;
    println!(
        "aligned in {elapsed:.1}s: chamfer {:.6} with k_r={} pc_ds={} n_n={} fd_r={} ndt_r={} ndt_ss={} ({}/{} candidates succeeded)",
        result.chamfer, p.k_r, p.pc_ds, p.n_n, p.fd_r, p.ndt_r, p.ndt_ss,
        succeeded,
        result.stage_log.len()
    );

    report.param("grid_candidates", grid.len());
    report.param("winning_params", serde_json::to_value(p)?);
    report.metric("chamfer", result.chamfer);
    report.metric("converged", result.converged);
    report.metric("candidates", result.stage_log.len());
    report.metric("succeeded", succeeded);
    report.output(&transform_path);
    report.output(&log_path);
    report.output(&aligned_path);
    Ok(())
}

fn cmd_init(a: &InitArgs, report: &mut Report) -> Result<()> {
    let map = read_cloud(&a.map)?;
    let id = a.id.clone().unwrap_or_else(|| {
        a.map
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "session-0".to_string())
    });
    let store = init_store(&a.store, &map, &id)?;
    println!(
        "initialized store at {} with base map of {} points (session 0 = {id:?})",
        a.store.display(),
        store.base_map().len()
    );
    report.param("id", id);
    report.metric("base_points", store.base_map().len());
    report.output(&a.store);
    Ok(())
}

fn cmd_commit(a: &CommitArgs, cfg: &Config, seed: u64, report: &mut Report) -> Result<()> {
    let dyn_params = removal_params(cfg, &a.removal, seed)?;
    let chg_params = change_params(cfg, &a.change, seed)?;
    let grid = alignment_grid(cfg, a.grid)?;
    let mut store = open_store(&a.store)?;
    let session = read_session_dir(&a.session)?;

    let t0 = Instant::now();
    let sref = store.commit(&session, &dyn_params, &grid, &chg_params)?;
    let elapsed = t0.elapsed().as_secs_f64();

    let record = store
        .sessions()
        .last()
        .expect("commit just appended a record");
    println!(
        "committed session {} ({:?}) in {elapsed:.1}s: {} ND, {} PD, base map now {} points",
        sref.index,
        sref.id,
        record.nd_points.unwrap_or(0),
        record.pd_points.unwrap_or(0),
        store.base_map().len()
    );

    report.param("removal", serde_json::to_value(&dyn_params)?);
    report.param("change", serde_json::to_value(&chg_params)?);
    report.param("grid_candidates", grid.len());
    report.metric("index", sref.index);
    report.metric("nd_points", record.nd_points);
    report.metric("pd_points", record.pd_points);
    report.metric("session_points", record.session_points);
    report.metric("base_points", store.base_map().len());
    report.output(&a.store);
    Ok(())
}

fn cmd_checkout(a: &CheckoutArgs, report: &mut Report) -> Result<()> {
    let store = open_store(&a.store)?;
    let map = store.reconstruct(a.index)?;
    write_cloud(&map, &a.out, PcdEncoding::Binary)?;
    println!(
        "reconstructed session {}: {} points -> {}",
        a.index,
        map.len(),
        a.out.display()
    );
    report.param("index", a.index);
    report.metric("points", map.len());
    report.output(&a.out);
    Ok(())
}

fn cmd_diff(a: &DiffArgs, cfg: &Config, seed: u64, report: &mut Report) -> Result<()> {
    let params = change_params(cfg, &a.change, seed)?;
    let store = open_store(&a.store)?;

    let t0 = Instant::now();
    let map_a = store.reconstruct(a.a)?;
    let map_b = store.reconstruct(a.b)?;
    let diff = detect_changes(&map_a, &map_b, &params)?;
    let elapsed = t0.elapsed().as_secs_f64();

    fs::create_dir_all(&a.out)
        .map_err(|e| Error::io(format!("creating {}", a.out.display()), e))?;
    let nd_path = a.out.join("base_nd.pcd");
    let pd_path = a.out.join("session_pd.pcd");
    write_cloud(&diff.base_nd, &nd_path, PcdEncoding::Binary)?;
    write_cloud(&diff.session_pd, &pd_path, PcdEncoding::Binary)?;

    let counts: [(&str, usize); 9] = [
        ("coexist", diff.coexist.len()),
        ("base_diff", diff.base_diff.len()),
        ("session_diff", diff.session_diff.len()),
        ("base_overlap", diff.base_overlap.len()),
        ("base_nonoverlap", diff.base_nonoverlap.len()),
        ("session_overlap", diff.session_overlap.len()),
        ("session_nonoverlap", diff.session_nonoverlap.len()),
        ("base_nd", diff.base_nd.len()),
        ("session_pd", diff.session_pd.len()),
    ];
    let mut summary = format!("diff of sessions {} -> {}\n", a.a, a.b);
    for (name, n) in counts {
        writeln!(summary, "{name:<19} {n}").expect("in-memory write");
    }
    let summary_path = a.out.join("summary.txt");
    fs::write(&summary_path, &summary)
        .map_err(|e| Error::io(format!("writing {}", summary_path.display()), e))?;

    print!("{summary}");
    println!("({elapsed:.1}s)");

    if a.bev {
        // Inspection images share one grid frame so they overlay pixel for
        // pixel. The plane fit mirrors the detection pipeline's.
        let union = PointCloud::concat(&[&map_a, &map_b]);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let plane = ransac_plane(&union, PLANE_RANSAC_ITERATIONS, PLANE_INLIER_THR, &mut rng)
            .map(|(p, _)| p)
            .ok_or_else(|| Error::DegenerateInput("no dominant plane for BEV export".into()))?;
        let frame = BevFrame::covering(&[&map_a, &map_b], &plane, params.bev_res)?;
        for (name, cloud) in [
            ("bev_a.pgm", &map_a),
            ("bev_b.pgm", &map_b),
            ("bev_nd.pgm", &diff.base_nd),
            ("bev_pd.pgm", &diff.session_pd),
        ] {
            let path = a.out.join(name);
            write_bev_pgm(&bev_project_in(cloud, &frame), &path)?;
            report.output(&path);
        }
        println!("wrote BEV images to {}", a.out.display());
    }

    report.param("a", a.a);
    report.param("b", a.b);
    report.param("change", serde_json::to_value(&params)?);
    for (name, n) in counts {
        report.metric(name, n);
    }
    report.output(&nd_path);
    report.output(&pd_path);
    report.output(&summary_path);
    Ok(())
}

/// Seconds since the Unix epoch as `YYYY-MM-DDTHH:MM:SSZ`.
fn format_utc(secs: u64) -> String {
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let (hh, mm, ss) = (rem / 3600, (rem / 60) % 60, rem % 60);
    // Civil-from-days on the proleptic Gregorian calendar.
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{y:04}-{m:02}-{d:02}T{hh:02}:{mm:02}:{ss:02}Z")
}

fn cmd_log(a: &StoreOnlyArgs, report: &mut Report) -> Result<()> {
    let store = open_store(&a.store)?;
    for rec in store.sessions() {
        let nd = rec.nd_points.map_or("-".to_string(), |n| n.to_string());
        let pd = rec.pd_points.map_or("-".to_string(), |n| n.to_string());
        println!(
            "{:>4}  {}  {:<24} {:>10} pts  nd {:>8}  pd {:>8}",
            rec.index,
            format_utc(rec.timestamp),
            rec.id,
            rec.session_points,
            nd,
            pd
        );
    }
    report.metric("sessions", store.session_count());
    Ok(())
}

fn cmd_stats(a: &StoreOnlyArgs, report: &mut Report) -> Result<()> {
    let store = open_store(&a.store)?;
    let s = store.stats()?;
    println!("sessions        {}", s.sessions);
    println!("base map        {:>12} bytes", s.base_bytes);
    println!("diffs           {:>12} bytes", s.diff_bytes);
    println!("boundaries      {:>12} bytes", s.boundary_bytes);
    println!("stored total    {:>12} bytes", s.ours_bytes);
    println!("all sessions    {:>12} bytes", s.all_maps_bytes);
    println!("saved           {:>11.1}%", s.efficiency * 100.0);
    report.metric("sessions", s.sessions);
    report.metric("base_bytes", s.base_bytes);
    report.metric("diff_bytes", s.diff_bytes);
    report.metric("boundary_bytes", s.boundary_bytes);
    report.metric("ours_bytes", s.ours_bytes);
    report.metric("all_maps_bytes", s.all_maps_bytes);
    report.metric("efficiency", s.efficiency);
    Ok(())
}

fn cmd_eval(a: &EvalArgs, cfg: &Config, report: &mut Report) -> Result<()> {
    match &a.which {
        EvalCommand::Labels { predicted, truth } => {
            let p = read_cloud(predicted)?;
            let t = read_cloud(truth)?;
            let lp = p
                .labels()
                .ok_or_else(|| Error::InvalidCloud(format!("{} has no labels", predicted.display())))?;
            let lt = t
                .labels()
                .ok_or_else(|| Error::InvalidCloud(format!("{} has no labels", truth.display())))?;
            let (pr, rr, f1) = evaluate_pr_rr_f1(lp, lt)?;
            println!("PR {}  RR {}  F1 {}", fmt_rate(pr), fmt_rate(rr), fmt_rate(f1));
            report.param("predicted", predicted.display().to_string());
            report.param("truth", truth.display().to_string());
            report.metric("pr", pr);
            report.metric("rr", rr);
            report.metric("f1", f1);
        }
        EvalCommand::Changes {
            detected,
            truth,
            match_radius,
        } => {
            let radius = match match_radius {
                Some(v) => *v,
                None => cfg.get("match_radius")?.unwrap_or(0.2),
            };
            let d = read_cloud(detected)?;
            let t = read_cloud(truth)?;
            let (precision, recall) = eval_change_pr(&d, &t, radius)?;
            println!(
                "precision {}  recall {}  ({} detected, {} truth, match radius {radius})",
                fmt_rate(precision),
                fmt_rate(recall),
                d.len(),
                t.len()
            );
            report.param("detected", detected.display().to_string());
            report.param("truth", truth.display().to_string());
            report.param("match_radius", radius);
            report.metric("precision", precision);
            report.metric("recall", recall);
            report.metric("detected_points", d.len());
            report.metric("truth_points", t.len());
        }
    }
    Ok(())
}

fn cmd_convert_poses(a: &ConvertPosesArgs, report: &mut Report) -> Result<()> {
    let text = fs::read_to_string(&a.kitti)
        .map_err(|e| Error::io(format!("reading {}", a.kitti.display()), e))?;
    let mut poses: Vec<(f64, Pose)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(|t| t.parse::<f64>()).collect();
        let nums = nums.map_err(|_| Error::Parse {
            path: a.kitti.clone(),
            line: i + 1,
            msg: format!("expected 12 numbers, got {line:?}"),
        })?;
        if nums.len() != 12 {
            return Err(Error::Parse {
                path: a.kitti.clone(),
                line: i + 1,
                msg: format!("expected 12 numbers, got {}", nums.len()),
            });
        }
        let mut m = [0.0; 12];
        m.copy_from_slice(&nums);
        poses.push((poses.len() as f64, Pose::from_matrix3x4_rows(&m)));
    }
    write_poses(&poses, &a.out)?;
    println!("converted {} poses -> {}", poses.len(), a.out.display());
    report.metric("poses", poses.len());
    report.output(&a.out);
    Ok(())
}
