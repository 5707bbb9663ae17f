//! Reader-study harness: reading sessions, the per-phase report and the washout phase machine.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::cohens_kappa;

/// Sixty days.
pub const DEFAULT_WASHOUT_SECONDS: i64 = 60 * 24 * 3600;
/// Upper sanity bound on one reading, two hours.
pub const MAX_ELAPSED_SECONDS: f64 = 7200.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Experience {
    #[serde(rename = "<5y")]
    Under5,
    #[serde(rename = "5-10y")]
    From5To10,
    #[serde(rename = ">10y")]
    Over10,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Unaided,
    AiAssisted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Low,
    High,
}

impl Decision {
    pub fn from_high(high: bool) -> Self {
        if high {
            Self::High
        } else {
            Self::Low
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadingEntry {
    pub case_id: String,
    pub decision: Decision,
    pub elapsed_seconds: f64,
    pub ai_prediction_shown: bool,
}

/// Plausible reading time: positive, finite and under two hours.
pub fn check_elapsed(seconds: f64) -> Result<()> {
    if !(seconds.is_finite() && seconds > 0.0 && seconds < MAX_ELAPSED_SECONDS) {
        return Err(invalid(format!("elapsed_seconds = {seconds} outside (0, {MAX_ELAPSED_SECONDS})")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderSession {
    pub reader_id: String,
    pub experience: Experience,
    pub phase: Phase,
    pub entries: Vec<ReadingEntry>,
}

impl ReaderSession {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            check_elapsed(e.elapsed_seconds).map_err(|err| invalid(format!("{} / {}: {err}", self.reader_id, e.case_id)))?;
            if e.ai_prediction_shown != (self.phase == Phase::AiAssisted) {
                return Err(invalid(format!(
                    "{} / {}: ai_prediction_shown = {} in a {:?} session",
                    self.reader_id, e.case_id, e.ai_prediction_shown, self.phase
                )));
            }
            if !seen.insert(e.case_id.as_str()) {
                return Err(invalid(format!("{}: case {} read twice in one session", self.reader_id, e.case_id)));
            }
        }
        Ok(())
    }
}

/// Parse JSON-lines session fixtures, skipping blank lines.
pub fn sessions_from_jsonl(text: &str) -> Result<Vec<ReaderSession>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn sessions_to_jsonl(sessions: &[ReaderSession]) -> Result<String> {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReaderScore {
    pub reader_id: String,
    pub experience: Experience,
    pub cases: usize,
    pub accuracy: f64,
    pub kappa: f64,
    /// Kappa was fixed at 1 because chance agreement was 1.
    pub kappa_degenerate: bool,
    pub mean_minutes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeStats {
    pub n: usize,
    pub mean_minutes: f64,
    pub median_minutes: f64,
    pub min_minutes: f64,
    pub max_minutes: f64,
    /// Counts in one-minute bins starting at 0; the last bin holds everything beyond.
    pub histogram: Vec<usize>,
}

/// Number of one-minute bins in [`TimeStats::histogram`].
pub const TIME_BINS: usize = 15;

impl TimeStats {
    pub fn from_seconds(seconds: &[f64]) -> Option<Self> {
        if seconds.is_empty() {
            return None;
        }
        let mut m: Vec<f64> = seconds.iter().map(|s| s / 60.0).collect();
        m.sort_by(f64::total_cmp);
        let n = m.len();
        let median = if n % 2 == 1 { m[n / 2] } else { 0.5 * (m[n / 2 - 1] + m[n / 2]) };
        let mut histogram = vec![0; TIME_BINS];
        for v in &m {
            histogram[(v.floor() as usize).min(TIME_BINS - 1)] += 1;
        }
        Some(Self {
            n,
            mean_minutes: seconds.iter().sum::<f64>() / n as f64 / 60.0,
            median_minutes: median,
            min_minutes: m[0],
            max_minutes: m[n - 1],
            histogram,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub readers: usize,
    /// Mean over readers of each reader's accuracy.
    pub mean_accuracy: f64,
    /// Mean over readers of reader-vs-truth kappa.
    pub mean_kappa: f64,
    pub time: TimeStats,
    pub per_reader: Vec<ReaderScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AiSummary {
    pub cases: usize,
    pub accuracy: f64,
    pub kappa: f64,
    pub kappa_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceSummary {
    pub experience: Experience,
    pub phase: Phase,
    pub readers: usize,
    pub mean_accuracy: f64,
    pub mean_kappa: f64,
    pub mean_minutes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub kappa_convention: String,
    pub kappa_note: String,
    pub time_unit: String,
}

impl Default for ReportMetadata {
    fn default() -> Self {
        Self {
            kappa_convention: "reader_vs_truth_mean".into(),
            kappa_note: "Cohen's kappa of each reader against the reference labels, averaged over readers. \
                         Pairing with other readers (inter-reader agreement) would give different values and is not reported."
                .into(),
            time_unit: "minutes".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    /// Only phases with at least one session, unaided first.
    pub phases: Vec<PhaseSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ai_alone: Option<AiSummary>,
    pub by_experience: Vec<ExperienceSummary>,
    pub metadata: ReportMetadata,
}

impl TrialReport {
    pub fn phase(&self, phase: Phase) -> Option<&PhaseSummary> {
        self.phases.iter().find(|p| p.phase == phase)
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Per-phase reader accuracy, kappa and timing, plus the AI-alone reference.
pub fn trial_report(
    sessions: &[ReaderSession],
    truth: &BTreeMap<String, Decision>,
    ai_preds: &BTreeMap<String, Decision>,
) -> Result<TrialReport> {
    if sessions.is_empty() {
        return Err(invalid("trial report needs at least one session"));
    }
    // (phase, reader) -> (experience, entries)
    let mut grouped: BTreeMap<(Phase, &str), (Experience, Vec<&ReadingEntry>)> = BTreeMap::new();
    for s in sessions {
        s.validate()?;
        let slot = grouped.entry((s.phase, s.reader_id.as_str())).or_insert((s.experience, Vec::new()));
        if slot.0 != s.experience {
            return Err(invalid(format!("reader {} has inconsistent experience bands", s.reader_id)));
        }
        for e in &s.entries {
            if !truth.contains_key(&e.case_id) {
                return Err(invalid(format!("{}: case {} has no reference label", s.reader_id, e.case_id)));
            }
            if slot.1.iter().any(|o| o.case_id == e.case_id) {
                return Err(invalid(format!("{}: case {} read twice in {:?}", s.reader_id, e.case_id, s.phase)));
            }
            slot.1.push(e);
        }
    }

    let mut phases = Vec::new();
    for phase in [Phase::Unaided, Phase::AiAssisted] {
        let mut per_reader = Vec::new();
        let mut seconds = Vec::new();
        for ((_, reader), (experience, entries)) in grouped.range((phase, "")..).take_while(|((p, _), _)| *p == phase) {
            if entries.is_empty() {
                continue;
            }
            let said: Vec<Decision> = entries.iter().map(|e| e.decision).collect();
            let ref_: Vec<Decision> = entries.iter().map(|e| truth[&e.case_id]).collect();
            let k = cohens_kappa(&said, &ref_)?;
            let correct = said.iter().zip(&ref_).filter(|(a, b)| a == b).count();
            seconds.extend(entries.iter().map(|e| e.elapsed_seconds));
            per_reader.push(ReaderScore {
                reader_id: reader.to_string(),
                experience: *experience,
                cases: entries.len(),
                accuracy: correct as f64 / entries.len() as f64,
                kappa: k.kappa,
                kappa_degenerate: k.degenerate,
                mean_minutes: mean(entries.iter().map(|e| e.elapsed_seconds)) / 60.0,
            });
        }
        let Some(time) = TimeStats::from_seconds(&seconds) else { continue };
        phases.push(PhaseSummary {
            phase,
            readers: per_reader.len(),
            mean_accuracy: mean(per_reader.iter().map(|r| r.accuracy)),
            mean_kappa: mean(per_reader.iter().map(|r| r.kappa)),
            time,
            per_reader,
        });
    }

    let read: BTreeSet<&str> = grouped.values().flat_map(|(_, es)| es.iter().map(|e| e.case_id.as_str())).collect();
    let ai_alone = if ai_preds.is_empty() {
        None
    } else {
        let mut said = Vec::new();
        let mut ref_ = Vec::new();
        for id in &read {
            let p = ai_preds.get(*id).ok_or_else(|| invalid(format!("no AI prediction for case {id}")))?;
            said.push(*p);
            ref_.push(truth[*id]);
        }
        let k = cohens_kappa(&said, &ref_)?;
        let correct = said.iter().zip(&ref_).filter(|(a, b)| a == b).count();
        Some(AiSummary {
            cases: said.len(),
            accuracy: correct as f64 / said.len() as f64,
            kappa: k.kappa,
            kappa_degenerate: k.degenerate,
        })
    };

    let mut by_experience = Vec::new();
    for p in &phases {
        let mut bands: BTreeMap<Experience, Vec<&ReaderScore>> = BTreeMap::new();
        for r in &p.per_reader {
            bands.entry(r.experience).or_default().push(r);
        }
        for (experience, rs) in bands {
            by_experience.push(ExperienceSummary {
                experience,
                phase: p.phase,
                readers: rs.len(),
                mean_accuracy: mean(rs.iter().map(|r| r.accuracy)),
                mean_kappa: mean(rs.iter().map(|r| r.kappa)),
                mean_minutes: mean(rs.iter().map(|r| r.mean_minutes)),
            });
        }
    }
    Ok(TrialReport { phases, ai_alone, by_experience, metadata: ReportMetadata::default() })
}

/// Where a reader stands in the two-phase protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReaderStatus {
    Enrolled,
    Reading { phase: Phase, started_at: i64 },
    /// Unaided phase finished; assisted reading opens at `washout_until`.
    Washout { unaided_completed_at: i64, washout_until: i64 },
    Completed { completed_at: i64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReaderProgress {
    pub experience: Experience,
    pub status: ReaderStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("reader {0} is not enrolled")]
    UnknownReader(String),
    #[error("reader {0} is already enrolled")]
    AlreadyEnrolled(String),
    #[error("reader {reader}: assisted reading opens at {deadline} (washout not elapsed)")]
    Washout { reader: String, deadline: i64 },
    #[error("reader {reader}: {action} is not allowed while {state}")]
    IllegalTransition { reader: String, action: String, state: String },
}

impl From<ProtocolError> for Error {
    fn from(e: ProtocolError) -> Self {
        Error::Protocol(e.to_string())
    }
}

/// Actions a reader can take, with a timestamp in seconds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrialEvent {
    Enroll { reader: String, experience: Experience },
    Start { reader: String, phase: Phase, at: i64 },
    Finalize { reader: String, phase: Phase, at: i64 },
}

/// Per-reader phase machine: unaided, then a washout, then AI-assisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub trial_id: String,
    pub washout_seconds: i64,
    pub case_order: Vec<String>,
    pub readers: BTreeMap<String, ReaderProgress>,
}

fn describe(status: &ReaderStatus) -> String {
    match status {
        ReaderStatus::Enrolled => "enrolled".into(),
        ReaderStatus::Reading { phase, .. } => format!("reading {phase:?}"),
        ReaderStatus::Washout { .. } => "in washout".into(),
        ReaderStatus::Completed { .. } => "completed".into(),
    }
}

impl TrialState {
    pub fn new(trial_id: impl Into<String>, case_order: Vec<String>, washout_seconds: i64) -> Result<Self> {
        if washout_seconds < 0 {
            return Err(invalid("washout must be non-negative"));
        }
        Ok(Self { trial_id: trial_id.into(), washout_seconds, case_order, readers: BTreeMap::new() })
    }

    pub fn enroll(&mut self, reader: &str, experience: Experience) -> std::result::Result<(), ProtocolError> {
        if self.readers.contains_key(reader) {
            return Err(ProtocolError::AlreadyEnrolled(reader.into()));
        }
        self.readers.insert(reader.into(), ReaderProgress { experience, status: ReaderStatus::Enrolled });
        Ok(())
    }

    fn progress(&mut self, reader: &str) -> std::result::Result<&mut ReaderProgress, ProtocolError> {
        self.readers.get_mut(reader).ok_or_else(|| ProtocolError::UnknownReader(reader.into()))
    }

    pub fn start(&mut self, reader: &str, phase: Phase, at: i64) -> std::result::Result<(), ProtocolError> {
        let p = self.progress(reader)?;
        let next = match (&p.status, phase) {
            (ReaderStatus::Enrolled, Phase::Unaided) => ReaderStatus::Reading { phase, started_at: at },
            (ReaderStatus::Washout { washout_until, .. }, Phase::AiAssisted) => {
                if at < *washout_until {
                    return Err(ProtocolError::Washout { reader: reader.into(), deadline: *washout_until });
                }
                ReaderStatus::Reading { phase, started_at: at }
            }
            (s, _) => {
                return Err(ProtocolError::IllegalTransition {
                    reader: reader.into(),
                    action: format!("starting {phase:?}"),
                    state: describe(s),
                })
            }
        };
        p.status = next;
        Ok(())
    }

    pub fn finalize(&mut self, reader: &str, phase: Phase, at: i64) -> std::result::Result<(), ProtocolError> {
        let washout = self.washout_seconds;
        let p = self.progress(reader)?;
        let next = match &p.status {
            ReaderStatus::Reading { phase: current, started_at } if *current == phase && at >= *started_at => match phase {
                Phase::Unaided => ReaderStatus::Washout { unaided_completed_at: at, washout_until: at.saturating_add(washout) },
                Phase::AiAssisted => ReaderStatus::Completed { completed_at: at },
            },
            s => {
                return Err(ProtocolError::IllegalTransition {
                    reader: reader.into(),
                    action: format!("finalizing {phase:?} at {at}"),
                    state: describe(s),
                })
            }
        };
        p.status = next;
        Ok(())
    }

    /// Decisions may be recorded only inside an open session of that phase.
    pub fn check_can_record(&self, reader: &str, phase: Phase) -> std::result::Result<(), ProtocolError> {
        let p = self.readers.get(reader).ok_or_else(|| ProtocolError::UnknownReader(reader.into()))?;
        match &p.status {
            ReaderStatus::Reading { phase: current, .. } if *current == phase => Ok(()),
            s => Err(ProtocolError::IllegalTransition {
                reader: reader.into(),
                action: format!("recording a {phase:?} decision"),
                state: describe(s),
            }),
        }
    }

    pub fn apply(&mut self, event: &TrialEvent) -> std::result::Result<(), ProtocolError> {
        match event {
            TrialEvent::Enroll { reader, experience } => self.enroll(reader, *experience),
            TrialEvent::Start { reader, phase, at } => self.start(reader, *phase, *at),
            TrialEvent::Finalize { reader, phase, at } => self.finalize(reader, *phase, *at),
        }
    }
}
