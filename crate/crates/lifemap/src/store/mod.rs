//! Diff-based version control for an evolving base map.
//!
//! A store keeps exactly one full point cloud, the current base map. Every
//! committed session contributes only its differences: the base-side points
//! the session no longer sees (`nd.pcd`), the session-side points the base
//! never had (`pd.pcd`), and the convex footprint boundary of the aligned
//! session (`boundary.txt`). Any historic session map is rebuilt on demand by
//! replaying those diffs backwards from the current base and cropping to the
//! session's footprint; the input session maps themselves are never retained.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! manifest.json            index of sessions, checksums, storage counters
//! base_map.pcd             current base map (binary, float32)
//! sessions/<t>/boundary.txt   one "x y" hull vertex per line, CCW
//! sessions/<t>/transform.txt  3x4 row-major alignment into the base frame
//! sessions/<t>/meta.json      the session's manifest record
//! sessions/<t>/nd.pcd         base-side losses    (absent for t = 0)
//! sessions/<t>/pd.pcd         session-side gains  (absent for t = 0)
//! ```
//!
//! Commits are serialized through an advisory lock file (`.lock`); readers
//! refuse to open a locked store. A commit that fails mid-pipeline (for
//! example, when alignment finds no acceptable pose) writes nothing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{grid_search_align, AlignParams};
use crate::change::{detect_changes, ChangeParams, DiffResult};
use crate::geom::{hull_crop, hull_of, HullPolygon, PointCloud, Pose, SpatialIndex};
use crate::io::pcd::{decode_pcd, encode_pcd, PcdEncoding};
use crate::io::SessionMap;
use crate::removal::{remove_dynamic, DynRemovalParams};
use crate::{Error, Result};

/// Radius used when subtracting stored diff files from a map. Diffs are
/// bit-exact float32 copies of the points they remove, so matches are exact
/// and this is only a safety margin.
pub const EPS_RM: f64 = 1e-3;

const MANIFEST_FILE: &str = "manifest.json";
const BASE_MAP_FILE: &str = "base_map.pcd";
const LOCK_FILE: &str = ".lock";
const SCHEMA_VERSION: u32 = 1;

/// Handle to one committed session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRef {
    /// Commit ordinal; session 0 is the one the store was initialized with.
    pub index: usize,
    pub id: String,
}

/// Manifest entry for one committed session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionRecord {
    pub index: usize,
    pub id: String,
    /// Seconds since the Unix epoch at commit time.
    pub timestamp: u64,
    /// Point count of the aligned clean session map (not retained on disk).
    pub session_points: u64,
    /// Alignment into the base frame, 3x4 row-major.
    pub transform: [f64; 12],
    /// CCW xy vertices of the base map's own footprint after this commit.
    /// Kept for completeness; no query currently consumes it.
    pub base_hull: Vec<[f64; 2]>,
    pub boundary_file: String,
    pub transform_file: String,
    pub meta_file: String,
    pub nd_file: Option<String>,
    pub nd_points: Option<u64>,
    pub pd_file: Option<String>,
    pub pd_points: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    /// Running total of the bytes every committed clean session map would
    /// occupy as a standalone binary PCD. Counted at commit time; the maps
    /// themselves are discarded.
    all_maps_bytes: u64,
    sessions: Vec<SessionRecord>,
    /// sha256 hex digest per file, keyed by path relative to the root.
    checksums: BTreeMap<String, String>,
}

/// Storage accounting; see [`Store::stats`].
#[derive(Debug, Clone, Serialize)]
pub struct StoreStats {
    pub sessions: usize,
    pub base_bytes: u64,
    pub diff_bytes: u64,
    pub boundary_bytes: u64,
    /// base + diffs + boundaries.
    pub ours_bytes: u64,
    /// What storing every clean session map in full would have cost.
    pub all_maps_bytes: u64,
    /// `1 - ours/all`; grows toward 1 as sessions accumulate.
    pub efficiency: f64,
}

/// A map version store rooted at one directory.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    manifest: Manifest,
    base_map: PointCloud,
}

/// Advisory write lock; the file's existence marks a commit in progress.
/// Dropped (and deleted) when the guard goes out of scope.
struct StoreLock {
    path: PathBuf,
}

impl StoreLock {
    fn acquire(root: &Path) -> Result<StoreLock> {
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(StoreLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                format!(
                    "store {} is locked; another commit is running (or crashed; \
                     remove {} to recover)",
                    root.display(),
                    path.display()
                ),
                e,
            )),
            Err(e) => Err(Error::io(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_epoch_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes through a sibling temp file and renames into place, so observers
/// only ever see the old or the new content.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path)
        .map_err(|e| Error::io(format!("renaming {} into place", path.display()), e))
}

fn boundary_to_text(hull: &HullPolygon) -> String {
    let mut out = String::new();
    for v in hull.vertices() {
        out.push_str(&format!("{} {}\n", v[0], v[1]));
    }
    out
}

fn boundary_from_text(text: &str, path: &Path) -> Result<HullPolygon> {
    let mut vertices = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<f64> {
            tok.and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `x y`, got {line:?}"),
            })
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected exactly two values, got {line:?}"),
            });
        }
        vertices.push([x, y]);
    }
    HullPolygon::from_vertices(vertices)
}

fn transform_to_text(pose: &Pose) -> String {
    let m = pose.to_matrix3x4_rows();
    let mut out = String::new();
    for row in m.chunks(4) {
        out.push_str(&format!("{} {} {} {}\n", row[0], row[1], row[2], row[3]));
    }
    out
}

/// Removes from `a` every point within `eps_rm` of any point of `b`.
pub fn point_subtract(a: &PointCloud, b: &PointCloud, eps_rm: f64) -> Result<PointCloud> {
    if !(eps_rm > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eps_rm must be positive, got {eps_rm}"
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(a.clone());
    }
    let index = SpatialIndex::build(b);
    let keep: Vec<usize> = a
        .points()
        .par_iter()
        .enumerate()
        .filter(|(_, p)| !index.has_neighbor_within(p, eps_rm))
        .map(|(i, _)| i)
        .collect();
    Ok(a.select(&keep))
}

/// Builds the next base map from one change-detection run: the five
/// additive sets are concatenated in order, then the base-side losses are
/// subtracted. Everything else from the run is discarded.
pub fn forward_update(
    coexist: &PointCloud,
    base_overlap: &PointCloud,
    base_nonoverlap: &PointCloud,
    session_nonoverlap: &PointCloud,
    session_pd: &PointCloud,
    base_nd: &PointCloud,
    eps_rm: f64,
) -> Result<PointCloud> {
    let merged = PointCloud::concat(&[
        coexist,
        base_overlap,
        base_nonoverlap,
        session_nonoverlap,
        session_pd,
    ]);
    point_subtract(&merged, base_nd, eps_rm)
}

/// Creates a store at `root` (which must be empty or absent) with
/// `clean_session0` as the first base map.
pub fn init_store(root: &Path, clean_session0: &PointCloud, id: &str) -> Result<Store> {
    match fs::read_dir(root) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(Error::StoreExists(root.to_path_buf()));
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            fs::create_dir_all(root)
                .map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        }
        Err(e) => return Err(Error::io(format!("inspecting {}", root.display()), e)),
    }

    // Session 0 is stored in full as the base map; its only per-session
    // artifacts are the boundary and the (identity) transform.
    let base = clean_session0.quantize_f32().without_labels();
    let boundary = hull_of(&base)?;
    let base_bytes = encode_pcd(&base, PcdEncoding::Binary);
    let mut store = Store {
        root: root.to_path_buf(),
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            all_maps_bytes: base_bytes.len() as u64,
            sessions: Vec::new(),
            checksums: BTreeMap::new(),
        },
        base_map: base,
    };
    let record = SessionRecord {
        index: 0,
        id: id.to_string(),
        timestamp: now_epoch_secs(),
        session_points: store.base_map.len() as u64,
        transform: Pose::identity().to_matrix3x4_rows(),
        base_hull: boundary.vertices().to_vec(),
        boundary_file: String::new(),
        transform_file: String::new(),
        meta_file: String::new(),
        nd_file: None,
        nd_points: None,
        pd_file: None,
        pd_points: None,
    };
    store.persist_session_dir(record, &boundary, &Pose::identity(), None, None)?;
    store.persist_base(&base_bytes)?;
    store.persist_manifest()?;
    Ok(store)
}

/// Opens an existing store, verifying the base map against its checksum.
pub fn open_store(root: &Path) -> Result<Store> {
    if root.join(LOCK_FILE).exists() {
        return Err(Error::io(
            format!(
                "store {} is locked; a commit is running (or crashed; remove {} to recover)",
                root.display(),
                root.join(LOCK_FILE).display()
            ),
            std::io::Error::new(std::io::ErrorKind::WouldBlock, "store locked"),
        ));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path)
        .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "store schema version {} (this build reads {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let mut store = Store {
        root: root.to_path_buf(),
        manifest,
        base_map: PointCloud::empty(),
    };
    store.base_map = store.read_cloud(BASE_MAP_FILE)?;
    Ok(store)
}

impl Store {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_map(&self) -> &PointCloud {
        &self.base_map
    }

    /// Committed sessions in commit order.
    pub fn sessions(&self) -> &[SessionRecord] {
        &self.manifest.sessions
    }

    pub fn session_count(&self) -> usize {
        self.manifest.sessions.len()
    }

    fn latest_index(&self) -> usize {
        self.manifest.sessions.len() - 1
    }

    fn record(&self, index: usize) -> Result<&SessionRecord> {
        self.manifest
            .sessions
            .get(index)
            .ok_or(Error::NoSuchSession(index))
    }

    /// Reads a stored file and verifies it against the manifest checksum.
    fn read_verified(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        let bytes =
            fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        match self.manifest.checksums.get(rel) {
            Some(expect) if &sha256_hex(&bytes) != expect => Err(Error::ChecksumMismatch(path)),
            _ => Ok(bytes),
        }
    }

    fn read_cloud(&self, rel: &str) -> Result<PointCloud> {
        let bytes = self.read_verified(rel)?;
        decode_pcd(&bytes, &self.root.join(rel))
    }

    fn read_boundary(&self, index: usize) -> Result<HullPolygon> {
        let record = self.record(index)?;
        let rel = record.boundary_file.clone();
        let bytes = self.read_verified(&rel)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Parse {
            path: self.root.join(&rel),
            line: 0,
            msg: "boundary file is not valid UTF-8".into(),
        })?;
        boundary_from_text(text, &self.root.join(&rel))
    }

    /// Commits a raw session: removes dynamic points, aligns the clean map
    /// into the base frame, extracts the changes, advances the base map, and
    /// persists only the diffs and the session boundary.
    ///
    /// Any failure before persistence (including alignment rejection) leaves
    /// the store untouched. `dyn_params.seed` also seeds the alignment
    /// search, so a commit is one seed away from being deterministic.
    pub fn commit(
        &mut self,
        session: &SessionMap,
        dyn_params: &DynRemovalParams,
        align_grid: &[AlignParams],
        change_params: &ChangeParams,
    ) -> Result<SessionRef> {
        let _lock = StoreLock::acquire(&self.root)?;

        let cleaned = remove_dynamic(session, dyn_params)?;
        let clean = cleaned.static_map.without_labels();
        let alignment = grid_search_align(&self.base_map, &clean, align_grid, dyn_params.seed)?;
        // Quantizing through f32 up front makes every derived cloud (diffs,
        // next base map) bit-identical to its own PCD round trip, which is
        // what lets reconstruction subtract stored files exactly.
        let aligned = clean.transform(&alignment.transform).quantize_f32();
        let boundary = hull_of(&aligned)?;

        let diff = detect_changes(&self.base_map, &aligned, change_params)?;
        let new_base = forward_update(
            &diff.coexist,
            &diff.base_overlap,
            &diff.base_nonoverlap,
            &diff.session_nonoverlap,
            &diff.session_pd,
            &diff.base_nd,
            EPS_RM,
        )?;
        let base_hull = hull_of(&new_base)?;

        let index = self.manifest.sessions.len();
        let record = SessionRecord {
            index,
            id: session.id.clone(),
            timestamp: now_epoch_secs(),
            session_points: aligned.len() as u64,
            transform: alignment.transform.to_matrix3x4_rows(),
            base_hull: base_hull.vertices().to_vec(),
            boundary_file: String::new(),
            transform_file: String::new(),
            meta_file: String::new(),
            nd_file: None,
            nd_points: Some(diff.base_nd.len() as u64),
            pd_file: None,
            pd_points: Some(diff.session_pd.len() as u64),
        };

        // The session map would have cost this much to store in full.
        let session_bytes = encode_pcd(&aligned, PcdEncoding::Binary).len() as u64;
        let base_bytes = encode_pcd(&new_base, PcdEncoding::Binary);

        // All computation succeeded; now write. Session dir first (staged,
        // then renamed), manifest last, so a crash mid-commit can leave
        // orphan files but never a manifest that points at missing ones.
        self.persist_session_dir(
            record,
            &boundary,
            &alignment.transform,
            Some(&diff.base_nd),
            Some(&diff.session_pd),
        )?;
        self.persist_base(&base_bytes)?;
        self.manifest.all_maps_bytes += session_bytes;
        self.persist_manifest()?;

        self.base_map = new_base;
        Ok(SessionRef {
            index,
            id: session.id.clone(),
        })
    }

    /// Stages `sessions/<t>` in a temp dir, renames it into place, and
    /// records the session in the in-memory manifest (not yet persisted).
    fn persist_session_dir(
        &mut self,
        mut record: SessionRecord,
        boundary: &HullPolygon,
        transform: &Pose,
        nd: Option<&PointCloud>,
        pd: Option<&PointCloud>,
    ) -> Result<()> {
        let index = record.index;
        let rel_dir = format!("sessions/{index}");
        let stage = self.root.join(format!("sessions/.stage-{index}"));
        let final_dir = self.root.join(&rel_dir);
        if final_dir.exists() {
            return Err(Error::io(
                format!("session directory {} already exists", final_dir.display()),
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "duplicate session"),
            ));
        }
        if stage.exists() {
            fs::remove_dir_all(&stage)
                .map_err(|e| Error::io(format!("clearing stale {}", stage.display()), e))?;
        }
        fs::create_dir_all(&stage)
            .map_err(|e| Error::io(format!("creating {}", stage.display()), e))?;

        let mut checksums: Vec<(String, String)> = Vec::new();
        let mut put = |name: &str, bytes: &[u8]| -> Result<String> {
            let path = stage.join(name);
            fs::write(&path, bytes)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            let rel = format!("{rel_dir}/{name}");
            checksums.push((rel.clone(), sha256_hex(bytes)));
            Ok(rel)
        };

        record.boundary_file = put("boundary.txt", boundary_to_text(boundary).as_bytes())?;
        record.transform_file = put("transform.txt", transform_to_text(transform).as_bytes())?;
        if let Some(nd) = nd {
            record.nd_file = Some(put("nd.pcd", &encode_pcd(nd, PcdEncoding::Binary))?);
        }
        if let Some(pd) = pd {
            record.pd_file = Some(put("pd.pcd", &encode_pcd(pd, PcdEncoding::Binary))?);
        }
        let meta = serde_json::to_vec_pretty(&record)?;
        record.meta_file = put("meta.json", &meta)?;

        fs::rename(&stage, &final_dir)
            .map_err(|e| Error::io(format!("renaming {} into place", final_dir.display()), e))?;

        for (rel, digest) in checksums {
            self.manifest.checksums.insert(rel, digest);
        }
        self.manifest.sessions.push(record);
        Ok(())
    }

    fn persist_base(&mut self, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(BASE_MAP_FILE), bytes)?;
        self.manifest
            .checksums
            .insert(BASE_MAP_FILE.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn persist_manifest(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(&self.root.join(MANIFEST_FILE), &json)
    }

    /// Rebuilds session `k`'s map: starting from the current base map, each
    /// step back in time re-adds what that commit deleted and deletes what it
    /// added, and the result is cropped to session `k`'s footprint.
    pub fn reconstruct(&self, k: usize) -> Result<PointCloud> {
        let t = self.latest_index();
        if k > t {
            return Err(Error::NoSuchSession(k));
        }
        let mut map = self.base_map.clone();
        for i in ((k + 1)..=t).rev() {
            let record = self.record(i)?;
            let nd_rel = record.nd_file.clone().ok_or(Error::NoSuchSession(i))?;
            let pd_rel = record.pd_file.clone().ok_or(Error::NoSuchSession(i))?;
            let nd = self.read_rel_cloud(&nd_rel)?;
            let pd = self.read_rel_cloud(&pd_rel)?;
            map = PointCloud::concat(&[&map, &nd]);
            map = point_subtract(&map, &pd, EPS_RM)?;
        }
        let boundary = self.read_boundary(k)?;
        Ok(hull_crop(&map, &boundary))
    }

    fn read_rel_cloud(&self, rel: &str) -> Result<PointCloud> {
        let bytes = self.read_verified(rel)?;
        decode_pcd(&bytes, &self.root.join(rel))
    }

    /// Change detection between two historic sessions, both rebuilt first.
    pub fn diff_between(
        &self,
        a: usize,
        b: usize,
        change_params: &ChangeParams,
    ) -> Result<DiffResult> {
        let map_a = self.reconstruct(a)?;
        let map_b = self.reconstruct(b)?;
        detect_changes(&map_a, &map_b, change_params)
    }

    /// Bytes actually stored (base + diffs + boundaries) against the bytes
    /// storing every session in full would have taken.
    pub fn stats(&self) -> Result<StoreStats> {
        let file_size = |rel: &str| -> Result<u64> {
            let path = self.root.join(rel);
            fs::metadata(&path)
                .map(|m| m.len())
                .map_err(|e| Error::io(format!("sizing {}", path.display()), e))
        };
        let base_bytes = file_size(BASE_MAP_FILE)?;
        let mut diff_bytes = 0;
        let mut boundary_bytes = 0;
        for record in &self.manifest.sessions {
            boundary_bytes += file_size(&record.boundary_file)?;
            if let Some(nd) = &record.nd_file {
                diff_bytes += file_size(nd)?;
            }
            if let Some(pd) = &record.pd_file {
                diff_bytes += file_size(pd)?;
            }
        }
        let ours_bytes = base_bytes + diff_bytes + boundary_bytes;
        let all = self.manifest.all_maps_bytes;
        let efficiency = efficiency_ratio(ours_bytes, all);
        Ok(StoreStats {
            sessions: self.manifest.sessions.len(),
            base_bytes,
            diff_bytes,
            boundary_bytes,
            ours_bytes,
            all_maps_bytes: all,
            efficiency,
        })
    }
}

/// Fraction of storage saved by keeping diffs instead of whole maps:
/// `1 - ours / all`. Zero when nothing would have been stored either way.
pub fn efficiency_ratio(ours_bytes: u64, all_maps_bytes: u64) -> f64 {
    if all_maps_bytes == 0 {
        0.0
    } else {
        1.0 - ours_bytes as f64 / all_maps_bytes as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignParams;
    use crate::change::eval_change_pr;
    use crate::geom::{Point3, Vec3};
    use crate::io::read_pcd;
    use crate::synth::{circle_trajectory, make_session, mutate_scene, Box3, Scene, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;
    use tempfile::TempDir;

    /// Single cheap candidate; the fixture sessions share a world frame, so
    /// a near-identity pose is always in reach.
    fn test_grid() -> Vec<AlignParams> {
        vec![AlignParams {
            k_r: 0.5,
            pc_ds: 0.2,
            n_n: 60,
            fd_r: 5.0,
            ndt_r: 1.0,
            ndt_ss: 5.0,
        }]
    }

    /// The fixture boxes stand up to 1.8 m, so diff points need a matching
    /// overlap reach to stay attributable.
    fn commit_change_params() -> ChangeParams {
        ChangeParams {
            r_overlap: 2.5,
            ..Default::default()
        }
    }

    fn scan_config(seed: u64) -> SimConfig {
        SimConfig {
            horizontal_rays: 240,
            vertical_rays: 8,
            vertical_fov_deg: 30.0,
            max_range: 30.0,
            noise_sigma: 0.004,
            seed,
        }
    }

    /// Three raycast surveys of one evolving yard committed into a store,
    /// with shadow copies of every base-map state. Built once; all tests
    /// that only read the store share it.
    struct Fixture {
        _dir: TempDir,
        root: PathBuf,
        /// Base map after init, after commit 1, after commit 2.
        shadows: Vec<PointCloud>,
        stats_trail: Vec<StoreStats>,
        /// Per commit: (negative truth, positive truth) from the mutation.
        truths: Vec<(PointCloud, PointCloud)>,
    }

    fn fixture() -> &'static Fixture {
        static FIXTURE: OnceLock<Fixture> = OnceLock::new();
        FIXTURE.get_or_init(|| {
            let mut scene0 = Scene::flat();
            scene0.static_objects = vec![
                Box3::on_ground("crate-a", 3.0, 2.0, 2.0, 2.0, 1.6),
                Box3::on_ground("crate-b", -3.0, 3.0, 2.0, 2.5, 1.8),
                Box3::on_ground("crate-c", -2.0, -4.0, 2.5, 2.0, 1.5),
                Box3::on_ground("crate-d", 3.0, -3.0, 2.0, 2.0, 1.4),
            ];
            let (scene1, pd1, nd1) = mutate_scene(
                &scene0,
                vec![Box3::on_ground("added-1", 0.0, 9.5, 2.0, 2.0, 1.6)],
                &["crate-b"],
            )
            .unwrap();
            let (scene2, pd2, nd2) = mutate_scene(
                &scene1,
                vec![Box3::on_ground("added-2", 9.5, 1.0, 2.0, 2.0, 1.8)],
                &["crate-c"],
            )
            .unwrap();

            let traj = circle_trajectory(Point3::origin(), 7.0, 1.6, 12);
            let s0 = make_session(&scene0, &traj, &scan_config(11), "s0").unwrap();
            let s1 = make_session(&scene1, &traj, &scan_config(22), "s1").unwrap();
            let s2 = make_session(&scene2, &traj, &scan_config(33), "s2").unwrap();

            let dir = TempDir::new().unwrap();
            let root = dir.path().join("store");
            let clean0 = remove_dynamic(&s0, &DynRemovalParams::default())
                .unwrap()
                .static_map
                .without_labels();
            let mut store = init_store(&root, &clean0, "s0").unwrap();

            let mut shadows = vec![store.base_map().clone()];
            let mut stats_trail = vec![store.stats().unwrap()];
            for s in [&s1, &s2] {
                store
                    .commit(s, &DynRemovalParams::default(), &test_grid(), &commit_change_params())
                    .unwrap();
                shadows.push(store.base_map().clone());
                stats_trail.push(store.stats().unwrap());
            }
            Fixture {
                _dir: dir,
                root,
                shadows,
                stats_trail,
                truths: vec![(nd1, pd1), (nd2, pd2)],
            }
        })
    }

    fn small_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(0.0..2.0),
                )
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn copy_dir(src: &Path, dst: &Path) {
        fs::create_dir_all(dst).unwrap();
        for entry in fs::read_dir(src).unwrap() {
            let entry = entry.unwrap();
            let to = dst.join(entry.file_name());
            if entry.file_type().unwrap().is_dir() {
                copy_dir(&entry.path(), &to);
            } else {
                fs::copy(entry.path(), &to).unwrap();
            }
        }
    }

    /// sha256 of every file under `root`, keyed by relative path.
    fn dir_digests(root: &Path) -> BTreeMap<String, String> {
        fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
            for entry in fs::read_dir(dir).unwrap() {
                let entry = entry.unwrap();
                let path = entry.path();
                if entry.file_type().unwrap().is_dir() {
                    walk(&path, root, out);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                    out.insert(rel, sha256_hex(&fs::read(&path).unwrap()));
                }
            }
        }
        let mut out = BTreeMap::new();
        walk(root, root, &mut out);
        out
    }

    fn sorted_bits(cloud: &PointCloud) -> Vec<(u64, u64, u64)> {
        let mut v: Vec<_> = cloud
            .points()
            .iter()
            .map(|p| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits()))
            .collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn init_writes_the_expected_layout() {
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("store");
        let cloud = small_cloud(1, 1000);
        let store = init_store(&root, &cloud, "first").unwrap();

        assert_eq!(store.base_map().len(), 1000);
        assert!(root.join("manifest.json").is_file());
        assert!(root.join("base_map.pcd").is_file());
        let mut names: Vec<String> = fs::read_dir(root.join("sessions/0"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, ["boundary.txt", "meta.json", "transform.txt"]);
        assert_eq!(store.session_count(), 1);
        assert!(store.sessions()[0].nd_file.is_none());
        assert!(store.sessions()[0].pd_file.is_none());
    }

    #[test]
    fn init_reconstructs_itself() {
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("store");
        let store = init_store(&root, &small_cloud(2, 500), "first").unwrap();
        let back = store.reconstruct(0).unwrap();
        assert_eq!(sorted_bits(&back), sorted_bits(store.base_map()));
    }

    #[test]
    fn init_twice_fails_with_store_exists() {
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("store");
        init_store(&root, &small_cloud(3, 100), "a").unwrap();
        match init_store(&root, &small_cloud(4, 100), "b") {
            Err(Error::StoreExists(p)) => assert_eq!(p, root),
            other => panic!("expected StoreExists, got {other:?}"),
        }
    }

    #[test]
    fn point_subtract_removes_matches_and_keeps_the_rest() {
        let a = small_cloud(5, 200);
        assert!(point_subtract(&a, &a, EPS_RM).unwrap().is_empty());
        assert_eq!(
            sorted_bits(&point_subtract(&a, &PointCloud::empty(), EPS_RM).unwrap()),
            sorted_bits(&a)
        );
        // Nudge half the points by more than the radius; only they survive.
        let half: Vec<Point3> = a.points()[..100]
            .iter()
            .map(|p| Point3::new(p.x + 0.5, p.y, p.z))
            .collect();
        let mut mixed: Vec<Point3> = a.points()[100..].to_vec();
        mixed.extend(half.iter().copied());
        let mixed = PointCloud::new(mixed).unwrap();
        let left = point_subtract(&mixed, &a, 1e-3).unwrap();
        assert_eq!(left.len(), 100);
        assert_eq!(sorted_bits(&left), sorted_bits(&PointCloud::new(half).unwrap()));
    }

    #[test]
    fn point_subtract_rejects_nonpositive_radius() {
        let a = small_cloud(6, 10);
        assert!(matches!(
            point_subtract(&a, &a, 0.0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn forward_update_concatenates_then_subtracts() {
        let base = small_cloud(7, 300);
        let coexist = base.select(&(0..150).collect::<Vec<_>>());
        let overlap = base.select(&(150..200).collect::<Vec<_>>());
        let nonoverlap = base.select(&(200..300).collect::<Vec<_>>());
        let empty = PointCloud::empty();

        // No changes: the base survives as a point set.
        let same =
            forward_update(&coexist, &overlap, &nonoverlap, &empty, &empty, &empty, EPS_RM)
                .unwrap();
        assert_eq!(sorted_bits(&same), sorted_bits(&base));

        // Gains are appended, losses disappear.
        let pd = small_cloud(8, 40).transform(&Pose::new(
            nalgebra::UnitQuaternion::identity(),
            Vec3::new(100.0, 0.0, 0.0),
        ));
        let nd = base.select(&(150..160).collect::<Vec<_>>());
        let next =
            forward_update(&coexist, &overlap, &nonoverlap, &empty, &pd, &nd, EPS_RM).unwrap();
        assert_eq!(next.len(), 300 + 40 - 10);
        let idx = SpatialIndex::build(&next);
        assert!(pd.points().iter().all(|p| idx.has_neighbor_within(p, 1e-9)));
        assert!(nd.points().iter().all(|p| !idx.has_neighbor_within(p, EPS_RM)));
    }

    #[test]
    fn boundary_text_round_trips_exactly() {
        let hull = hull_of(&small_cloud(9, 400)).unwrap();
        let text = boundary_to_text(&hull);
        let back = boundary_from_text(&text, Path::new("test")).unwrap();
        assert_eq!(back.vertices(), hull.vertices());
    }

    #[test]
    fn open_round_trips_the_committed_state() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        assert_eq!(store.session_count(), 3);
        assert_eq!(
            sorted_bits(store.base_map()),
            sorted_bits(f.shadows.last().unwrap())
        );
        let rec = &store.sessions()[1];
        let nd = read_pcd(&f.root.join(rec.nd_file.as_ref().unwrap())).unwrap();
        assert_eq!(rec.nd_points, Some(nd.len() as u64));
        for (i, rec) in store.sessions().iter().enumerate() {
            assert_eq!(rec.index, i);
        }
    }

    #[test]
    fn commits_store_only_diffs_and_boundaries() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        for t in [1usize, 2] {
            let mut names: Vec<String> = fs::read_dir(f.root.join(format!("sessions/{t}")))
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            assert_eq!(
                names,
                ["boundary.txt", "meta.json", "nd.pcd", "pd.pcd", "transform.txt"]
            );
            let rec = &store.sessions()[t];
            // The diffs are a small fraction of the session; the session map
            // itself is nowhere on disk.
            assert!(rec.nd_points.unwrap() < rec.session_points / 2);
            assert!(rec.pd_points.unwrap() < rec.session_points / 2);
            let pose = Pose::from_matrix3x4_rows(&rec.transform);
            assert!(pose.rotation_angle_to(&Pose::identity()) < 0.01);
            assert!(pose.translation_distance_to(&Pose::identity()) < 0.1);
        }
    }

    #[test]
    fn stored_diffs_recover_the_mutation_truth() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        for t in [1usize, 2] {
            let rec = &store.sessions()[t];
            let nd = read_pcd(&f.root.join(rec.nd_file.as_ref().unwrap())).unwrap();
            let pd = read_pcd(&f.root.join(rec.pd_file.as_ref().unwrap())).unwrap();
            let (nd_truth, pd_truth) = &f.truths[t - 1];

            let (p_nd, r_nd) = eval_change_pr(&nd, nd_truth, 0.2).unwrap();
            let (p_pd, r_pd) = eval_change_pr(&pd, pd_truth, 0.2).unwrap();
            // The circular survey never sees the outward-facing walls, so
            // recall against the full analytic truth stays moderate; the
            // acceptance suite covers the strict thresholds on a scene built
            // for full visibility.
            assert!(p_nd.unwrap() > 0.7, "commit {t} nd precision {p_nd:?}");
            assert!(p_pd.unwrap() > 0.7, "commit {t} pd precision {p_pd:?}");
            assert!(r_nd.unwrap() > 0.45, "commit {t} nd recall {r_nd:?}");
            assert!(r_pd.unwrap() > 0.45, "commit {t} pd recall {r_pd:?}");
        }
    }

    #[test]
    fn reconstruct_latest_is_the_cropped_base() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        let latest = store.reconstruct(2).unwrap();
        let boundary = store.read_boundary(2).unwrap();
        let expected = hull_crop(store.base_map(), &boundary);
        assert_eq!(sorted_bits(&latest), sorted_bits(&expected));
    }

    #[test]
    fn replay_covers_every_shadow_state() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        for k in 0..store.session_count() {
            let rebuilt = store.reconstruct(k).unwrap();
            let boundary = store.read_boundary(k).unwrap();
            let expected = hull_crop(&f.shadows[k], &boundary);
            assert!(!expected.is_empty());
            let idx = SpatialIndex::build(&rebuilt);
            let missed = expected
                .points()
                .iter()
                .filter(|p| !idx.has_neighbor_within(p, EPS_RM))
                .count();
            assert_eq!(missed, 0, "session {k}: {missed} shadow points unexplained");
        }
    }

    #[test]
    fn reconstruct_rejects_unknown_sessions() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        assert!(matches!(store.reconstruct(99), Err(Error::NoSuchSession(99))));
    }

    #[test]
    fn diff_of_a_session_with_itself_is_empty() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        let diff = store.diff_between(1, 1, &commit_change_params()).unwrap();
        assert!(diff.base_nd.is_empty());
        assert!(diff.session_pd.is_empty());
    }

    #[test]
    fn diff_between_adjacent_sessions_matches_the_stored_diffs() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        let diff = store.diff_between(0, 1, &commit_change_params()).unwrap();
        let rec = &store.sessions()[1];
        let nd = read_pcd(&f.root.join(rec.nd_file.as_ref().unwrap())).unwrap();
        let pd = read_pcd(&f.root.join(rec.pd_file.as_ref().unwrap())).unwrap();

        let (p_nd, r_nd) = eval_change_pr(&diff.base_nd, &nd, 0.2).unwrap();
        let (p_pd, r_pd) = eval_change_pr(&diff.session_pd, &pd, 0.2).unwrap();
        assert!(p_nd.unwrap() > 0.8, "nd precision {p_nd:?}");
        assert!(r_nd.unwrap() > 0.8, "nd recall {r_nd:?}");
        assert!(p_pd.unwrap() > 0.8, "pd precision {p_pd:?}");
        assert!(r_pd.unwrap() > 0.8, "pd recall {r_pd:?}");
    }

    #[test]
    fn failed_commit_is_a_no_op() {
        let f = fixture();
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("copy");
        copy_dir(&f.root, &root);
        let before = dir_digests(&root);

        let mut store = open_store(&root).unwrap();
        let base_before = sorted_bits(store.base_map());

        // A sparse survey far outside the mapped yard: every keypoint lacks
        // descriptor support, so no candidate can produce a pose.
        let cfg = SimConfig {
            horizontal_rays: 10,
            vertical_rays: 2,
            vertical_fov_deg: 30.0,
            max_range: 30.0,
            noise_sigma: 0.0,
            seed: 7,
        };
        let pose = Pose::new(
            nalgebra::UnitQuaternion::identity(),
            Vec3::new(400.0, 400.0, 1.6),
        );
        let far = make_session(&Scene::flat(), &[pose], &cfg, "far").unwrap();
        match store.commit(&far, &DynRemovalParams::default(), &test_grid(), &commit_change_params())
        {
            Err(Error::AlignmentFailed { .. }) => {}
            other => panic!("expected AlignmentFailed, got {other:?}"),
        }

        assert_eq!(dir_digests(&root), before);
        assert_eq!(sorted_bits(store.base_map()), base_before);
        assert_eq!(store.session_count(), 3);
    }

    #[test]
    fn lock_file_blocks_readers_and_writers() {
        let f = fixture();
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("copy");
        copy_dir(&f.root, &root);

        fs::write(root.join(LOCK_FILE), b"").unwrap();
        assert!(open_store(&root).is_err());
        fs::remove_file(root.join(LOCK_FILE)).unwrap();

        let mut store = open_store(&root).unwrap();
        fs::write(root.join(LOCK_FILE), b"").unwrap();
        let session = make_session(
            &Scene::flat(),
            &[Pose::identity()],
            &scan_config(1),
            "blocked",
        )
        .unwrap();
        assert!(store
            .commit(&session, &DynRemovalParams::default(), &test_grid(), &commit_change_params())
            .is_err());
        fs::remove_file(root.join(LOCK_FILE)).unwrap();
    }

    #[test]
    fn corruption_is_caught_by_checksums() {
        let f = fixture();
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("copy");
        copy_dir(&f.root, &root);

        // Flip one payload byte of a stored diff; opening still works but
        // any reconstruction that reads the file must refuse it.
        let nd_path = root.join("sessions/1/nd.pcd");
        let mut bytes = fs::read(&nd_path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        fs::write(&nd_path, bytes).unwrap();
        let store = open_store(&root).unwrap();
        assert!(matches!(
            store.reconstruct(0),
            Err(Error::ChecksumMismatch(p)) if p == nd_path
        ));

        // Corrupt the base map and the store will not even open.
        let base_path = root.join(BASE_MAP_FILE);
        let mut bytes = fs::read(&base_path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        fs::write(&base_path, bytes).unwrap();
        assert!(matches!(
            open_store(&root),
            Err(Error::ChecksumMismatch(p)) if p == base_path
        ));
    }

    #[test]
    fn stats_count_exactly_the_stored_bytes() {
        let f = fixture();
        let store = open_store(&f.root).unwrap();
        let stats = store.stats().unwrap();

        let size = |rel: &str| fs::metadata(f.root.join(rel)).unwrap().len();
        let expect_base = size(BASE_MAP_FILE);
        let mut expect_diffs = 0;
        let mut expect_bounds = 0;
        for rec in store.sessions() {
            expect_bounds += size(&rec.boundary_file);
            if let Some(nd) = &rec.nd_file {
                expect_diffs += size(nd);
            }
            if let Some(pd) = &rec.pd_file {
                expect_diffs += size(pd);
            }
        }
        assert_eq!(stats.base_bytes, expect_base);
        assert_eq!(stats.diff_bytes, expect_diffs);
        assert_eq!(stats.boundary_bytes, expect_bounds);
        assert_eq!(stats.ours_bytes, expect_base + expect_diffs + expect_bounds);
        let expect_eff = 1.0 - stats.ours_bytes as f64 / stats.all_maps_bytes as f64;
        assert!((stats.efficiency - expect_eff).abs() < 1e-12);
    }

    #[test]
    fn efficiency_grows_as_sessions_accumulate() {
        let f = fixture();
        let trail = &f.stats_trail;
        // One session: the base is that session, so nothing is saved yet.
        // The boundary file costs a few percent extra on a survey this
        // small, which is why the ratio starts slightly below zero.
        assert!(trail[0].efficiency.abs() < 0.1, "{}", trail[0].efficiency);
        assert!(trail[1].efficiency > trail[0].efficiency);
        assert!(trail[2].efficiency > trail[1].efficiency);
        // The two mutations touch a good share of this small yard, so the
        // saving stays below the ideal 1 - 1/3; it must still be clearly
        // ahead of storing all three surveys.
        assert!(trail[2].efficiency > 0.4, "{}", trail[2].efficiency);
    }
}
