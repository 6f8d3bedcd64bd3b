use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rng::{derive_seed, RNG_ALGORITHM};
use super::spec::DegradationKind;
use crate::error::{Error, Result};
use crate::imaging::{load_image, save_image, ImageBuffer};
use crate::parallel::par_map_range;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub clean_path: PathBuf,
    pub corrupted_path: PathBuf,
    pub task_id: String,
    pub seed: u64,
}

/// Listing of corrupted/clean pairs. Paths are relative to `root`, the
/// directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub rng_algorithm: String,
    pub global_seed: u64,
    /// Parameters of every task referenced by an entry.
    pub tasks: BTreeMap<String, DegradationKind>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn clean_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.clean_path)
    }

    pub fn corrupted_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.corrupted_path)
    }

    pub fn task(&self, task_id: &str) -> Result<&DegradationKind> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    /// Task ids in sorted order.
    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn entries_for<'a>(&'a self, task_id: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.task_id == task_id)
    }

    /// Hex SHA-256 of the serialized manifest.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex(&Sha256::digest(&json))
    }

    /// Rebuilds the exact (unquantized) corrupted image from the clean file.
    /// Noise stays unclamped here, unlike the PNG on disk.
    pub fn regenerate(&self, entry: &ManifestEntry, clean: &ImageBuffer) -> Result<ImageBuffer> {
        self.task(&entry.task_id)?.apply(clean, entry.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        crate::imaging::write_atomic(path, &json)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads and validates a manifest: version, known task ids, existing paths.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!(
            "{}: manifest version {} (expected {MANIFEST_VERSION})",
            path.display(),
            m.version
        )));
    }
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for kind in m.tasks.values() {
        kind.validate()?;
    }
    for e in &m.entries {
        m.task(&e.task_id)?;
        for p in [m.clean_path(e), m.corrupted_path(e)] {
            if !p.is_file() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by manifest"),
                ));
            }
        }
    }
    Ok(m)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|x| x.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Writes `out_dir/clean/{stem}.png`, `out_dir/{task}/{stem}.png` and
/// `out_dir/manifest.json`. Images are processed in parallel; each entry owns
/// a seed derived from `(global_seed, image index, task id)`.
pub fn synthesize_dataset(
    clean_dir: impl AsRef<Path>,
    tasks: &[DegradationKind],
    global_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let (clean_dir, out_dir) = (clean_dir.as_ref(), out_dir.as_ref());
    if tasks.is_empty() {
        return Err(Error::config("no tasks requested"));
    }
    for t in tasks {
        t.validate()?;
    }
    let mut registry = BTreeMap::new();
    for t in tasks {
        if registry.insert(t.task_id(), t.clone()).is_some() {
            return Err(Error::config(format!("task {} listed twice", t.task_id())));
        }
    }
    let inputs = list_pngs(clean_dir)?;
    if inputs.is_empty() {
        return Err(Error::contract(format!("{} contains no PNG files", clean_dir.display())));
    }
    fs::create_dir_all(out_dir.join("clean")).map_err(|e| Error::io(out_dir, e))?;
    for t in &registry {
        fs::create_dir_all(out_dir.join(t.0)).map_err(|e| Error::io(out_dir, e))?;
    }

    let per_image: Vec<Result<Option<Vec<ManifestEntry>>>> = par_map_range(inputs.len(), |i| {
        let src = &inputs[i];
        let clean = match load_image(src) {
            Ok(img) => img,
            Err(e) => {
                warn!("skipping {}: {e}", src.display());
                return Ok(None);
            }
        };
        let stem = format!("{}.png", clean.source_id);
        let clean_rel = Path::new("clean").join(&stem);
        save_image(&clean, out_dir.join(&clean_rel))?;
        let mut entries = Vec::with_capacity(tasks.len());
        for kind in tasks {
            let task_id = kind.task_id();
            let seed = derive_seed(global_seed, i as u64, &task_id);
            let corrupted = match kind.apply(&clean, seed) {
                Ok(c) => c,
                Err(e) => {
                    warn!("skipping {} for {task_id}: {e}", src.display());
                    continue;
                }
            };
            let rel = Path::new(&task_id).join(&stem);
            save_image(&corrupted, out_dir.join(&rel))?;
            entries.push(ManifestEntry {
                clean_path: clean_rel.clone(),
                corrupted_path: rel,
                task_id,
                seed,
            });
        }
        Ok(Some(entries))
    });

    let mut entries = Vec::new();
    for r in per_image {
        if let Some(es) = r? {
            entries.extend(es);
        }
    }
    if entries.is_empty() {
        return Err(Error::contract(format!(
            "no readable images in {}",
            clean_dir.display()
        )));
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        global_seed,
        tasks: registry,
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
