//! On-disk cache of distance tables.
//!
//! A file holds one header line `srotlab-cache 1 <key> <sha256 of body>` and a
//! JSON body in which every float is stored by its bit pattern, so a hit is
//! bit-identical to the computation that produced it. Writers hold an
//! advisory lock on `<key>.lock` and publish with a rename; readers take no
//! lock.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabError;
use crate::frames::{ControlFrame, Point};
use crate::kantorovich::DistanceTable;
use crate::metric::{DistanceOptions, Method};

pub const CACHE_ENV: &str = "SROTLAB_CACHE_DIR";
const MAGIC: &str = "srotlab-cache 1";

#[derive(Serialize, Deserialize)]
struct Stored {
    rows: usize,
    cols: usize,
    values: Vec<u64>,
    covectors: Vec<Vec<u64>>,
    methods: Vec<Method>,
    multiplicities: Vec<usize>,
}

impl From<&DistanceTable> for Stored {
    fn from(t: &DistanceTable) -> Self {
        Self {
            rows: t.rows,
            cols: t.cols,
            values: t.values.iter().map(|v| v.to_bits()).collect(),
            covectors: t.covectors.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect(),
            methods: t.methods.clone(),
            multiplicities: t.multiplicities.clone(),
        }
    }
}

impl From<Stored> for DistanceTable {
    fn from(s: Stored) -> Self {
        Self {
            rows: s.rows,
            cols: s.cols,
            values: s.values.into_iter().map(f64::from_bits).collect(),
            covectors: s.covectors.into_iter().map(|p| p.into_iter().map(f64::from_bits).collect()).collect(),
            methods: s.methods,
            multiplicities: s.multiplicities,
        }
    }
}

pub struct DistanceCache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> LabError {
    let context = context.into();
    move |source| LabError::Io { context, source }
}

impl DistanceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    /// `$SROTLAB_CACHE_DIR` when set, `fallback` otherwise.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(PathBuf::from(dir)),
            _ => Self::new(fallback),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    /// Hex SHA-256 over the frame id, both point sets and every solver option.
    pub fn key(frame: &ControlFrame, xs: &[Point], ys: &[Point], opts: &DistanceOptions) -> String {
        let mut h = Sha256::new();
        h.update(MAGIC.as_bytes());
        h.update(frame.name().as_bytes());
        h.update([0]);
        for set in [xs, ys] {
            h.update((set.len() as u64).to_le_bytes());
            for p in set {
                h.update((p.dim() as u64).to_le_bytes());
                for v in p.as_slice() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.update(serde_json::to_vec(opts).expect("options serialize"));
        hex::encode(h.finalize())
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    fn load(&self, key: &str) -> Option<DistanceTable> {
        let path = self.path(key);
        let bytes = fs::read(&path).ok()?;
        match decode(key, &bytes) {
            Some(t) => Some(t),
            None => {
                log::warn!("cache file {} is corrupted; recomputing", path.display());
                None
            }
        }
    }

    /// Returns the cached table for `key`, or runs `compute` and stores its
    /// result.
    pub fn get_or_compute(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<DistanceTable, LabError>,
    ) -> Result<DistanceTable, LabError> {
        if let Some(t) = self.load(key) {
            log::info!("cache hit {key}");
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(t);
        }
        fs::create_dir_all(&self.dir).map_err(io_err(format!("creating cache directory {}", self.dir.display())))?;
        let lock_path = self.dir.join(format!("{key}.lock"));
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(format!("opening {}", lock_path.display())))?;
        lock.lock().map_err(io_err(format!("locking {}", lock_path.display())))?;
        // another writer may have finished while we waited
        if let Some(t) = self.load(key) {
            log::info!("cache hit {key}");
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(t);
        }
        log::info!("cache miss {key}");
        self.misses.fetch_add(1, Ordering::Relaxed);
        let table = compute()?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io_err("creating cache temp file"))?;
        tmp.write_all(&encode(key, &table)).map_err(io_err("writing cache temp file"))?;
        tmp.as_file().sync_all().map_err(io_err("syncing cache temp file"))?;
        tmp.persist(self.path(key)).map_err(|e| LabError::Io { context: "publishing cache file".into(), source: e.error })?;
        drop(lock);
        Ok(table)
    }
}

fn encode(key: &str, table: &DistanceTable) -> Vec<u8> {
    let body = serde_json::to_vec(&Stored::from(table)).expect("table serializes");
    let mut out = format!("{MAGIC} {key} {}\n", hex::encode(Sha256::digest(&body))).into_bytes();
    out.extend_from_slice(&body);
    out
}

fn decode(key: &str, bytes: &[u8]) -> Option<DistanceTable> {
    let split = bytes.iter().position(|b| *b == b'\n')?;
    let header = std::str::from_utf8(&bytes[..split]).ok()?;
    let body = &bytes[split + 1..];
    let rest = header.strip_prefix(MAGIC)?.trim_start();
    let (stored_key, checksum) = rest.split_once(' ')?;
    if stored_key != key || checksum != hex::encode(Sha256::digest(body)) {
        return None;
    }
    let stored: Stored = serde_json::from_slice(body).ok()?;
    if stored.values.len() != stored.rows * stored.cols {
        return None;
    }
    Some(stored.into())
}
