//! Directory-tree storage: timestamped run directories, stamped JSON artifacts with optional
//! weight blobs, a pointer file naming the current output of each stage, and writer locks.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use chrono::{SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Stage;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{what} is missing: run `{command}` first")]
    Missing { what: String, command: &'static str },
    #[error(
        "{kind} at {path} was produced under config hash {found}, but the current config hashes to {expected}; \
         rerun the stage or restore the config it was built with"
    )]
    HashMismatch { kind: String, path: PathBuf, expected: String, found: String },
    #[error("{kind} at {path} was written by {found}, this build is {expected}")]
    VersionMismatch { kind: String, path: PathBuf, expected: String, found: String },
    #[error("{path} holds a {found} artifact, expected {expected}")]
    KindMismatch { path: PathBuf, expected: String, found: String },
    #[error("{path} failed its integrity check: stored digest {stored}, contents hash to {computed}")]
    Tampered { path: PathBuf, stored: String, computed: String },
    #[error("writer lock {path} is held by another writer")]
    Locked { path: PathBuf },
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> StoreError + '_ {
    move |source| StoreError::Json { path: path.to_path_buf(), source }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io(path))?;
    serde_json::from_slice(&bytes).map_err(json_err(path))
}

/// Pretty JSON with a trailing newline, written via a temporary file and a rename.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(json_err(path))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io(path))?))
}

/// Provenance written next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub kind: String,
    pub config_hash: String,
    pub code_version: String,
    pub created_at: String,
    /// SHA-256 over the stamp fields, the payload and the weight blob.
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    stamp: Stamp,
    payload: serde_json::Value,
}

fn digest(kind: &str, config_hash: &str, code_version: &str, created_at: &str, payload: &serde_json::Value, blob: Option<&[u8]>) -> String {
    let mut h = Sha256::new();
    for part in [kind, config_hash, code_version, created_at] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    h.update(serde_json::to_vec(payload).expect("json value serializes"));
    if let Some(b) = blob {
        h.update([0]);
        h.update(b);
    }
    hex::encode(h.finalize())
}

fn blob_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.weights"))
}

/// Write `<name>.json` (stamp and payload) and, if given, `<name>.weights`.
pub fn save_artifact<T: Serialize>(dir: &Path, name: &str, kind: &str, config_hash: &str, payload: &T, blob: Option<&[u8]>) -> Result<Stamp> {
    let path = dir.join(format!("{name}.json"));
    let payload = serde_json::to_value(payload).map_err(json_err(&path))?;
    let created_at = Utc::now().to_rfc3339_opts(SecondsFormat::Micros, true);
    let stamp = Stamp {
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        code_version: CODE_VERSION.to_string(),
        digest: digest(kind, config_hash, CODE_VERSION, &created_at, &payload, blob),
        created_at,
    };
    if let Some(b) = blob {
        let p = blob_path(dir, name);
        write_atomic(&p, b)?;
    }
    write_json(&path, &Envelope { stamp: stamp.clone(), payload })?;
    Ok(stamp)
}

pub struct Loaded<T> {
    pub stamp: Stamp,
    pub payload: T,
    pub blob: Option<Vec<u8>>,
}

/// Read an artifact back, refusing it unless kind, code version, config hash and digest all check out.
pub fn load_artifact<T: DeserializeOwned>(dir: &Path, name: &str, kind: &str, expected_hash: &str) -> Result<Loaded<T>> {
    let path = dir.join(format!("{name}.json"));
    let env: Envelope = read_json(&path)?;
    let bp = blob_path(dir, name);
    let blob = if bp.exists() { Some(fs::read(&bp).map_err(io(&bp))?) } else { None };
    let s = &env.stamp;
    let computed = digest(&s.kind, &s.config_hash, &s.code_version, &s.created_at, &env.payload, blob.as_deref());
    if computed != s.digest {
        return Err(StoreError::Tampered { path, stored: s.digest.clone(), computed });
    }
    if s.kind != kind {
        return Err(StoreError::KindMismatch { path, expected: kind.into(), found: s.kind.clone() });
    }
    if s.code_version != CODE_VERSION {
        return Err(StoreError::VersionMismatch { kind: kind.into(), path, expected: CODE_VERSION.into(), found: s.code_version.clone() });
    }
    if s.config_hash != expected_hash {
        return Err(StoreError::HashMismatch { kind: kind.into(), path, expected: expected_hash.into(), found: s.config_hash.clone() });
    }
    let payload = serde_json::from_value(env.payload).map_err(json_err(&path))?;
    Ok(Loaded { stamp: env.stamp, payload, blob })
}

/// Summary written as `run.json` in every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    /// Relative to the storage root.
    pub run_dir: PathBuf,
    pub started_at: String,
    pub wall_time_seconds: f64,
    pub config_hash: String,
    pub code_version: String,
    pub inputs: BTreeMap<String, String>,
    /// Files written by the run, relative to the run directory.
    pub outputs: Vec<String>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

pub struct Run {
    pub dir: PathBuf,
    pub record: RunRecord,
    started: Instant,
}

impl Run {
    pub fn input(&mut self, key: &str, value: impl ToString) {
        self.record.inputs.insert(key.to_string(), value.to_string());
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.record.outputs.push(rel.into());
    }

    /// Stamp `payload` into this run directory and list it as an output.
    pub fn save<T: Serialize>(&mut self, name: &str, kind: &str, payload: &T, blob: Option<&[u8]>) -> Result<Stamp> {
        let stamp = save_artifact(&self.dir, name, kind, &self.record.config_hash, payload, blob)?;
        self.output(format!("{name}.json"));
        if blob.is_some() {
            self.output(format!("{name}.weights"));
        }
        Ok(stamp)
    }

    pub fn finish(mut self, summary: serde_json::Value) -> Result<RunRecord> {
        self.record.wall_time_seconds = self.started.elapsed().as_secs_f64();
        self.record.summary = summary;
        self.record.outputs.sort();
        self.record.outputs.dedup();
        write_json(&self.dir.join("run.json"), &self.record)?;
        Ok(self.record)
    }
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

const CURRENT: &str = "current.json";

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["runs", "trials", "jobs"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn trial_dir(&self, trial_id: &str) -> PathBuf {
        self.root.join("trials").join(trial_id)
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join("jobs").join(job_id)
    }

    /// A fresh run directory `runs/<command>/<UTC timestamp>[-k]`; never reuses an existing one.
    pub fn begin_run(&self, command: &str, config_hash: &str) -> Result<Run> {
        let base = self.root.join("runs").join(command);
        fs::create_dir_all(&base).map_err(io(&base))?;
        let now = Utc::now();
        let stamp = now.format("%Y%m%dT%H%M%S%.6fZ").to_string();
        let mut k = 0;
        let dir = loop {
            let name = if k == 0 { stamp.clone() } else { format!("{stamp}-{k}") };
            let dir = base.join(name);
            match fs::create_dir(&dir) {
                Ok(()) => break dir,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(StoreError::Io { path: dir, source: e }),
            }
        };
        let rel = dir.strip_prefix(&self.root).expect("run dir under root").to_path_buf();
        Ok(Run {
            dir,
            record: RunRecord {
                command: command.to_string(),
                run_dir: rel,
                started_at: now.to_rfc3339_opts(SecondsFormat::Micros, true),
                wall_time_seconds: 0.0,
                config_hash: config_hash.to_string(),
                code_version: CODE_VERSION.to_string(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                summary: serde_json::Value::Null,
            },
            started: Instant::now(),
        })
    }

    fn current_map(&self) -> Result<BTreeMap<String, PathBuf>> {
        let p = self.root.join(CURRENT);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(BTreeMap::new())
        }
    }

    /// Point a stage at the run that now holds its output.
    pub fn publish(&self, stage: Stage, run: &RunRecord) -> Result<()> {
        let _lock = WriterLock::acquire(&self.root.join("current.lock"), Duration::from_secs(10))?;
        let mut map = self.current_map()?;
        map.insert(stage.name().to_string(), run.run_dir.clone());
        write_json(&self.root.join(CURRENT), &map)
    }

    /// Directory holding a stage's current output, or which command to run to produce it.
    pub fn current(&self, stage: Stage) -> Result<PathBuf> {
        let missing = || StoreError::Missing { what: format!("{} output", stage.name()), command: producer(stage) };
        let rel = self.current_map()?.remove(stage.name()).ok_or_else(missing)?;
        let dir = self.root.join(rel);
        if dir.is_dir() {
            Ok(dir)
        } else {
            Err(missing())
        }
    }

    /// Every run record under `runs/<command>`, oldest first.
    pub fn runs(&self, command: &str) -> Result<Vec<RunRecord>> {
        let base = self.root.join("runs").join(command);
        if !base.exists() {
            return Ok(Vec::new());
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(&base).map_err(io(&base))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        dirs.sort();
        dirs.iter().filter(|d| d.join("run.json").exists()).map(|d| read_json(&d.join("run.json"))).collect()
    }
}

pub fn producer(stage: Stage) -> &'static str {
    match stage {
        Stage::Dataset => "phantom-gen",
        Stage::Prepared => "preprocess",
        Stage::Segmenter => "train-seg",
        Stage::Classifiers => "train-clf",
        Stage::VaeGan => "train-vaegan",
    }
}

/// Exclusive lock file; removed when dropped.
#[derive(Debug)]
pub struct WriterLock {
    path: PathBuf,
}

impl WriterLock {
    pub fn try_acquire(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path: path.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(StoreError::Locked { path: path.to_path_buf() }),
            Err(e) => Err(StoreError::Io { path: path.to_path_buf(), source: e }),
        }
    }

    /// Retry until `timeout` elapses.
    pub fn acquire(path: &Path, timeout: Duration) -> Result<Self> {
        let start = Instant::now();
        loop {
            match Self::try_acquire(path) {
                Err(StoreError::Locked { .. }) if start.elapsed() < timeout => std::thread::sleep(Duration::from_millis(5)),
                other => return other,
            }
        }
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Thing {
        a: f64,
        b: Vec<u8>,
    }

    #[test]
    fn artifact_round_trip_and_refusals() {
        let dir = tempfile::tempdir().unwrap();
        let thing = Thing { a: 0.1 + 0.2, b: vec![1, 2] };
        save_artifact(dir.path(), "t", "thing", "h1", &thing, Some(b"blob")).unwrap();
        let back: Loaded<Thing> = load_artifact(dir.path(), "t", "thing", "h1").unwrap();
        assert_eq!((back.payload, back.blob.as_deref()), (thing, Some(&b"blob"[..])));
        assert!(matches!(load_artifact::<Thing>(dir.path(), "t", "thing", "h2"), Err(StoreError::HashMismatch { .. })));
        assert!(matches!(load_artifact::<Thing>(dir.path(), "t", "other", "h1"), Err(StoreError::KindMismatch { .. })));
        fs::write(dir.path().join("t.weights"), b"blob!").unwrap();
        assert!(matches!(load_artifact::<Thing>(dir.path(), "t", "thing", "h1"), Err(StoreError::Tampered { .. })));
    }

    #[test]
    fn runs_never_share_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.begin_run("x", "h").unwrap();
        let b = store.begin_run("x", "h").unwrap();
        assert_ne!(a.dir, b.dir);
        a.finish(serde_json::Value::Null).unwrap();
        b.finish(serde_json::Value::Null).unwrap();
        assert_eq!(store.runs("x").unwrap().len(), 2);
    }

    #[test]
    fn current_names_the_missing_producer() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let err = store.current(Stage::VaeGan).unwrap_err().to_string();
        assert!(err.contains("train-vaegan"), "{err}");
        let run = store.begin_run("train-vaegan", "h").unwrap().finish(serde_json::Value::Null).unwrap();
        store.publish(Stage::VaeGan, &run).unwrap();
        assert_eq!(store.current(Stage::VaeGan).unwrap(), dir.path().join(&run.run_dir));
    }

    #[test]
    fn lock_is_exclusive_until_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.lock");
        let l = WriterLock::try_acquire(&p).unwrap();
        assert!(matches!(WriterLock::try_acquire(&p), Err(StoreError::Locked { .. })));
        drop(l);
        WriterLock::try_acquire(&p).unwrap();
    }
}
