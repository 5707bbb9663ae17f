//! On-disk trial state and reader sessions under `trials/<id>/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use vbiopsy_core::phantom::CaseRecord;
use vbiopsy_core::trial::{trial_report, Decision, Phase, ReaderSession, TrialState};

use crate::config::{PipelineConfig, Stage};
use crate::store::{load_artifact, save_artifact, sha256_hex, Result, Store, StoreError, WriterLock};

const STATE: &str = "state";
const STATE_KIND: &str = "trial-state";
const SESSION_KIND: &str = "reader-session";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub trial_id: String,
    /// Bearer token the reader presents on every mutation of this session.
    pub token: String,
    pub started_at: i64,
    pub finalized_at: Option<i64>,
    pub session: ReaderSession,
}

/// Hash stamped on trial files: the trial settings plus the prepared cases they refer to.
pub fn trial_hash(cfg: &PipelineConfig) -> String {
    let trial = serde_json::to_string(&cfg.trial).expect("trial config serializes");
    sha256_hex(format!("{}|trial|{trial}", cfg.stage_hash(Stage::Prepared)).as_bytes())
}

/// Deterministic session id: one session per reader and phase.
pub fn session_id(trial_id: &str, reader: &str, phase: Phase) -> String {
    let phase = serde_json::to_string(&phase).expect("phase serializes");
    sha256_hex(format!("{trial_id}\0{reader}\0{phase}").as_bytes())[..16].to_string()
}

pub struct TrialFiles {
    pub dir: PathBuf,
    hash: String,
}

impl TrialFiles {
    pub fn new(store: &Store, trial_id: &str, hash: String) -> Self {
        Self { dir: store.trial_dir(trial_id), hash }
    }

    pub fn exists(&self) -> bool {
        self.dir.join(format!("{STATE}.json")).exists()
    }

    /// Serialises writers across processes; held for the duration of one mutation.
    pub fn lock(&self) -> Result<WriterLock> {
        WriterLock::acquire(&self.dir.join("writer.lock"), Duration::from_secs(10))
    }

    pub fn load_state(&self) -> Result<TrialState> {
        Ok(load_artifact(&self.dir, STATE, STATE_KIND, &self.hash)?.payload)
    }

    pub fn save_state(&self, state: &TrialState) -> Result<()> {
        save_artifact(&self.dir, STATE, STATE_KIND, &self.hash, state, None).map(|_| ())
    }

    pub fn load_session(&self, sid: &str) -> Result<Option<SessionRecord>> {
        let name = format!("session-{sid}");
        if !self.dir.join("sessions").join(format!("{name}.json")).exists() {
            return Ok(None);
        }
        Ok(Some(load_artifact(&self.dir.join("sessions"), &name, SESSION_KIND, &self.hash)?.payload))
    }

    pub fn save_session(&self, rec: &SessionRecord) -> Result<()> {
        save_artifact(&self.dir.join("sessions"), &format!("session-{}", rec.session_id), SESSION_KIND, &self.hash, rec, None).map(|_| ())
    }

    /// All sessions ordered by reader, then phase.
    pub fn sessions(&self) -> Result<Vec<SessionRecord>> {
        let dir = self.dir.join("sessions");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })? {
            let name = entry.map_err(|source| StoreError::Io { path: dir.clone(), source })?.file_name();
            let name = name.to_string_lossy();
            if let Some(sid) = name.strip_prefix("session-").and_then(|n| n.strip_suffix(".json")) {
                out.extend(self.load_session(sid)?);
            }
        }
        out.sort_by(|a, b| (&a.session.reader_id, a.session.phase).cmp(&(&b.session.reader_id, b.session.phase)));
        Ok(out)
    }

    pub fn finalized_sessions(&self) -> Result<Vec<ReaderSession>> {
        Ok(self.sessions()?.into_iter().filter(|s| s.finalized_at.is_some()).map(|s| s.session).collect())
    }
}

/// Ground truth decisions for the given cases.
pub fn ground_truth<'a>(records: impl IntoIterator<Item = &'a CaseRecord>) -> BTreeMap<String, Decision> {
    records.into_iter().map(|r| (r.case_id.clone(), Decision::from_high(r.risk.is_high()))).collect()
}

/// The report as served and stored: compact JSON of `trial_report`.
pub fn report_bytes(sessions: &[ReaderSession], truth: &BTreeMap<String, Decision>, ai: &BTreeMap<String, Decision>) -> anyhow::Result<Vec<u8>> {
    Ok(serde_json::to_vec(&trial_report(sessions, truth, ai)?)?)
}
