//! JSON-over-HTTP service for the reader workbench.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vbiopsy_core::classifier::{ensemble_predict, ClassifierState, ClfSample, RiskPrediction};
use vbiopsy_core::counterfactual::VaeGanState;
use vbiopsy_core::imaging::Grid3;
use vbiopsy_core::nifti;
use vbiopsy_core::pipeline::PreparedCase;
use vbiopsy_core::segmenter::{gland_volume_cc, psa_density};
use vbiopsy_core::trial::{check_elapsed, Decision, Experience, Phase, ProtocolError, ReaderSession, ReadingEntry, TrialState};

use crate::commands::{self, JobSummary};
use crate::config::{PipelineConfig, Stage};
use crate::render::{mask_png, slice_png, Window};
use crate::store::sha256_hex;
use crate::trials::{self, SessionRecord, TrialFiles};
use crate::workspace::{member_predictions, Workspace};

/// Seconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> i64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        chrono::Utc::now().timestamp()
    }
}

/// Settable clock for driving washouts in tests and dry runs.
#[derive(Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(t: i64) -> Self {
        Self(AtomicI64::new(t))
    }

    pub fn set(&self, t: i64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct CaseEntry {
    pub case: PreparedCase,
    pub split: String,
    /// Gland volume from the mask the classifiers see.
    pub gland_volume_cc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub case_id: String,
    pub probability: f64,
    pub logit: f64,
    pub high_risk: bool,
    pub threshold: f64,
    pub model_tag: String,
    pub members: Vec<RiskPrediction>,
}

pub struct Models {
    pub ensemble: Vec<ClassifierState>,
    pub samples: Vec<BTreeMap<String, ClfSample>>,
    pub vae: Option<VaeGanState>,
}

struct Replay {
    fingerprint: String,
    status: StatusCode,
    body: Bytes,
}

pub struct AppState {
    pub cfg: PipelineConfig,
    pub ws: Workspace,
    pub cases: BTreeMap<String, CaseEntry>,
    pub predictions: BTreeMap<String, CasePrediction>,
    pub models: Option<Models>,
    pub clock: Arc<dyn Clock>,
    trial: TrialFiles,
    trial_lock: tokio::sync::Mutex<()>,
    jobs_lock: tokio::sync::Mutex<()>,
    idempotency: Mutex<HashMap<String, Replay>>,
}

impl AppState {
    /// Load cases and whatever models exist, and create the configured trial if it is new.
    pub fn load(cfg: PipelineConfig, clock: Arc<dyn Clock>) -> anyhow::Result<Self> {
        let ws = Workspace::open(cfg.clone())?;
        let (prepared, manifest) = ws.prepared()?;
        let segs = ws.mask_segmenters().ok().flatten();
        let models = match ws.store.current(Stage::Classifiers) {
            Err(_) => None,
            Ok(_) => {
                let ensemble = ws.ensemble()?;
                let segs = ws.mask_segmenters()?;
                let samples = ws.all_samples(&prepared, segs.as_ref())?;
                let vae = match ws.store.current(Stage::VaeGan) {
                    Err(_) => None,
                    Ok(_) => Some(ws.vaegan()?),
                };
                Some(Models { ensemble, samples, vae })
            }
        };
        let split_of: HashMap<&str, &str> = manifest.splits.iter().flat_map(|(s, ids)| ids.iter().map(move |id| (id.as_str(), s.as_str()))).collect();
        let mut cases = BTreeMap::new();
        for c in prepared {
            let gland = match &segs {
                Some(_) => ws.case_masks(&c, segs.as_ref())?.gland,
                None => c.gland.clone(),
            };
            let split = split_of.get(c.id()).copied().unwrap_or("unassigned").to_string();
            cases.insert(c.id().to_string(), CaseEntry { gland_volume_cc: gland_volume_cc(&gland), case: c, split });
        }
        let mut predictions = BTreeMap::new();
        if let Some(m) = &models {
            for id in cases.keys() {
                let members = member_predictions(&m.ensemble, &m.samples, id)?;
                let e = ensemble_predict(&members)?;
                predictions.insert(
                    id.clone(),
                    CasePrediction {
                        case_id: id.clone(),
                        probability: e.probability,
                        logit: e.logit,
                        high_risk: e.probability >= cfg.metrics.threshold,
                        threshold: cfg.metrics.threshold,
                        model_tag: e.model_tag,
                        members,
                    },
                );
            }
        }
        let trial = TrialFiles::new(&ws.store, &cfg.trial.id, trials::trial_hash(&cfg));
        {
            let _w = trial.lock()?;
            if trial.exists() {
                trial.load_state()?;
            } else {
                trial.save_state(&TrialState::new(&cfg.trial.id, manifest.test().to_vec(), cfg.trial.washout_seconds)?)?;
            }
        }
        Ok(Self {
            cfg,
            ws,
            cases,
            predictions,
            models,
            clock,
            trial,
            trial_lock: tokio::sync::Mutex::new(()),
            jobs_lock: tokio::sync::Mutex::new(()),
            idempotency: Mutex::new(HashMap::new()),
        })
    }

    fn truth(&self) -> BTreeMap<String, Decision> {
        trials::ground_truth(self.cases.values().map(|c| &c.case.record))
    }

    fn ai(&self) -> BTreeMap<String, Decision> {
        self.predictions.iter().map(|(k, p)| (k.clone(), Decision::from_high(p.high_risk))).collect()
    }

    /// Report bytes exactly as `GET /trial/{id}/report` serves them.
    pub fn report_bytes(&self) -> anyhow::Result<Vec<u8>> {
        trials::report_bytes(&self.trial.finalized_sessions()?, &self.truth(), &self.ai())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": code, "message": message.into() }) }
    }

    fn with(mut self, key: &str, v: impl Serialize) -> Self {
        self.body[key] = json!(v);
        self
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, &format!("unknown_{what}"), format!("no {what} {id:?}"))
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        Self::internal(format!("{e:#}"))
    }
}

impl From<crate::store::StoreError> for ApiError {
    fn from(e: crate::store::StoreError) -> Self {
        Self::internal(e)
    }
}

fn protocol_error(e: ProtocolError) -> ApiError {
    match &e {
        ProtocolError::Washout { reader, deadline } => ApiError::new(StatusCode::CONFLICT, "washout", e.to_string())
            .with("reader", reader)
            .with("deadline", deadline)
            .with("deadline_utc", chrono::DateTime::from_timestamp(*deadline, 0).map(|d| d.to_rfc3339())),
        ProtocolError::UnknownReader(r) => ApiError::new(StatusCode::NOT_FOUND, "unknown_reader", e.to_string()).with("reader", r),
        ProtocolError::AlreadyEnrolled(_) | ProtocolError::IllegalTransition { .. } => ApiError::new(StatusCode::CONFLICT, "phase_order", e.to_string()),
    }
}

type ApiResult = Result<Response, ApiError>;
type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}/volume", get(case_volume))
        .route("/cases/{id}/clinical", get(case_clinical))
        .route("/cases/{id}/prediction", get(case_prediction))
        .route("/counterfactual", post(create_counterfactual))
        .route("/counterfactual/{job}", get(get_counterfactual))
        .route("/counterfactual/{job}/files/{name}", get(counterfactual_file))
        .route("/trial/{id}/session", post(start_session))
        .route("/trial/{id}/report", get(trial_report))
        .route("/session/{sid}/decision", post(post_decision))
        .route("/session/{sid}/finalize", post(finalize_session))
        .with_state(state)
}

pub async fn serve(cfg: PipelineConfig) -> anyhow::Result<()> {
    let addr = format!("{}:{}", cfg.service.host, cfg.service.port);
    let state = tokio::task::spawn_blocking(move || AppState::load(cfg, Arc::new(SystemClock))).await??;
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    tracing::info!(%addr, cases = state.cases.len(), models = state.models.is_some(), "serving");
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}

fn case<'a>(st: &'a AppState, id: &str) -> Result<&'a CaseEntry, ApiError> {
    st.cases.get(id).ok_or_else(|| ApiError::not_found("case", id))
}

async fn list_cases(State(st): State<Shared>) -> Json<Value> {
    let list: Vec<Value> = st
        .cases
        .iter()
        .map(|(id, c)| json!({ "case_id": id, "split": c.split, "dims": c.case.image.dims(), "spacing": c.case.image.spacing() }))
        .collect();
    Json(json!(list))
}

#[derive(Debug, Default, Deserialize)]
struct VolumeQuery {
    /// `image` (default), `gland` or `zones`.
    kind: Option<String>,
    /// `png` (default), `nifti` or `json`.
    format: Option<String>,
    z: Option<usize>,
    level: Option<f64>,
    width: Option<f64>,
}

fn window_for(q: &VolumeQuery, data: &[f64]) -> Result<Window, ApiError> {
    match (q.level, q.width) {
        (None, None) => Ok(Window::full_range(data)),
        (Some(level), Some(width)) => Window::new(level, width).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_window", e.to_string())),
        _ => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_window", "give both level and width, or neither")),
    }
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn nifti_response(bytes: Vec<u8>, filename: &str) -> Response {
    let disposition = HeaderValue::from_str(&format!("attachment; filename=\"{filename}\"")).unwrap_or(HeaderValue::from_static("attachment"));
    ([(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream")), (header::CONTENT_DISPOSITION, disposition)], bytes).into_response()
}

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_request", e.to_string())
}

fn render_grid(grid: &Grid3<f64>, q: &VolumeQuery) -> Result<Vec<u8>, ApiError> {
    let z = q.z.unwrap_or(grid.dims()[2] / 2);
    slice_png(grid, z, window_for(q, grid.data())?).map_err(bad_request)
}

async fn case_volume(State(st): State<Shared>, Path(id): Path<String>, Query(q): Query<VolumeQuery>) -> ApiResult {
    let c = &case(&st, &id)?.case;
    let kind = q.kind.as_deref().unwrap_or("image");
    let mask = match kind {
        "image" => None,
        "gland" => Some(&c.gland),
        "zones" => Some(&c.zones),
        other => return Err(bad_request(format!("unknown volume kind {other:?}"))),
    };
    match q.format.as_deref().unwrap_or("png") {
        "png" => Ok(png_response(match mask {
            None => render_grid(&c.image.grid, &q)?,
            Some(m) => mask_png(&m.grid, q.z.unwrap_or(m.dims()[2] / 2), m.scheme.max_label()).map_err(bad_request)?,
        })),
        "nifti" => {
            let bytes = match mask {
                None => nifti::encode_volume(&c.image),
                Some(m) => nifti::encode_mask(m),
            }
            .map_err(ApiError::internal)?;
            Ok(nifti_response(bytes, &format!("{id}-{kind}.nii")))
        }
        "json" => {
            let data: Vec<f64> = match mask {
                None => c.image.grid.data().to_vec(),
                Some(m) => m.grid.data().iter().map(|&v| f64::from(v)).collect(),
            };
            Ok(Json(json!({
                "case_id": id, "kind": kind, "dims": c.image.dims(), "spacing": c.image.spacing(),
                "origin": c.image.geometry.origin, "order": "x-fastest", "data": data,
            }))
            .into_response())
        }
        other => Err(bad_request(format!("unknown format {other:?}"))),
    }
}

async fn case_clinical(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let c = case(&st, &id)?;
    let r = &c.case.record;
    // same derivation as the classifier's clinical input
    let density = psa_density(r.psa, c.gland_volume_cc).ok();
    Ok(Json(json!({ "case_id": id, "age": r.age, "psa": r.psa, "psa_density": density, "gland_volume_cc": c.gland_volume_cc })).into_response())
}

fn models_missing(command: &str) -> ApiError {
    ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models_missing", format!("model artifacts are missing: run `{command}` first"))
}

async fn case_prediction(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult {
    case(&st, &id)?;
    let p = st.predictions.get(&id).ok_or_else(|| models_missing("train-clf"))?;
    Ok(Json(p).into_response())
}

/// Replays the stored response for a repeated idempotency key; runs `f` otherwise and
/// remembers successful results.
async fn idempotent<F, Fut>(st: &AppState, headers: &HeaderMap, fingerprint: String, f: F) -> ApiResult
where
    F: FnOnce() -> Fut,
    Fut: std::future::Future<Output = Result<(StatusCode, Value), ApiError>>,
{
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string);
    if let Some(k) = &key {
        if let Some(r) = st.idempotency.lock().expect("idempotency map").get(k) {
            if r.fingerprint != fingerprint {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "idempotency_key_reused", "idempotency key was used for a different request"));
            }
            return Ok((r.status, [(header::CONTENT_TYPE, "application/json")], r.body.clone()).into_response());
        }
    }
    let (status, body) = f().await?;
    let bytes = Bytes::from(serde_json::to_vec(&body).map_err(ApiError::internal)?);
    if let Some(k) = key {
        st.idempotency.lock().expect("idempotency map").insert(k, Replay { fingerprint, status, body: bytes.clone() });
    }
    Ok((status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

fn fingerprint(parts: &[&str]) -> String {
    sha256_hex(parts.join("\0").as_bytes())
}

#[derive(Debug, Deserialize, Serialize)]
struct CounterfactualRequest {
    case_id: String,
    alpha_schedule: Option<Vec<f64>>,
}

async fn create_counterfactual(State(st): State<Shared>, headers: HeaderMap, Json(req): Json<CounterfactualRequest>) -> ApiResult {
    let fp = fingerprint(&["counterfactual", &serde_json::to_string(&req).map_err(ApiError::internal)?]);
    let st2 = st.clone();
    idempotent(&st, &headers, fp, || async move {
        let st = st2;
        case(&st, &req.case_id)?;
        let models = st.models.as_ref().ok_or_else(|| models_missing("train-clf"))?;
        let vae = models.vae.as_ref().ok_or_else(|| models_missing("train-vaegan"))?;
        let _ = vae;
        let cfg = commands::job_config(&st.cfg.counterfactual, req.alpha_schedule.clone())
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_alpha_schedule", format!("{e:#}")))?;
        let vae_hash = st.cfg.stage_hash(Stage::VaeGan);
        let id = commands::job_id(&vae_hash, &req.case_id, &cfg);
        let dir = st.ws.store.job_dir(&id);
        let body = |status| Ok((status, json!({ "job_id": id, "case_id": req.case_id, "status": "completed", "href": format!("/counterfactual/{id}") })));
        let _g = st.jobs_lock.lock().await;
        if commands::load_job(&dir, &vae_hash).is_ok() {
            return body(StatusCode::OK);
        }
        let worker = st.clone();
        let (case_id, job_id) = (req.case_id.clone(), id.clone());
        let outcome = tokio::task::spawn_blocking(move || -> Result<JobSummary, ApiError> {
            let m = worker.models.as_ref().expect("checked above");
            let explainer = worker.cfg.models.explainer;
            let sample = &m.samples[explainer][&case_id];
            let job = commands::compute_job(&case_id, sample, &m.ensemble[explainer], m.vae.as_ref().expect("checked above"), &cfg).map_err(|e| match e {
                vbiopsy_core::Error::FidelityGate { delta_p, threshold } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "fidelity_gate", e.to_string())
                    .with("case_id", &case_id)
                    .with("delta_p", delta_p)
                    .with("threshold", threshold),
                other => ApiError::internal(other),
            })?;
            Ok(commands::write_job(&worker.ws.store.job_dir(&job_id), &job_id, &worker.cfg.stage_hash(Stage::VaeGan), &job, sample)?)
        })
        .await
        .map_err(ApiError::internal)?;
        outcome?;
        body(StatusCode::CREATED)
    })
    .await
}

fn job(st: &AppState, id: &str) -> Result<JobSummary, ApiError> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(ApiError::not_found("job", id));
    }
    commands::load_job(&st.ws.store.job_dir(id), &st.cfg.stage_hash(Stage::VaeGan)).map_err(|_| ApiError::not_found("job", id))
}

async fn get_counterfactual(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult {
    let j = job(&st, &id)?;
    let base = format!("/counterfactual/{id}/files");
    Ok(Json(json!({
        "job": j,
        "links": {
            "reference": format!("{base}/{}", j.reference),
            "images": j.images.iter().map(|i| format!("{base}/{}", i.file)).collect::<Vec<_>>(),
            "heatmap_aggregate": format!("{base}/{}", j.heatmaps.aggregate),
            "heatmap_sequential": j.heatmaps.sequential.iter().map(|f| format!("{base}/{f}")).collect::<Vec<_>>(),
        }
    }))
    .into_response())
}

async fn counterfactual_file(State(st): State<Shared>, Path((id, name)): Path<(String, String)>, Query(q): Query<VolumeQuery>) -> ApiResult {
    let j = job(&st, &id)?;
    let listed = std::iter::once(&j.reference)
        .chain(j.images.iter().map(|i| &i.file))
        .chain(std::iter::once(&j.heatmaps.aggregate))
        .chain(&j.heatmaps.sequential)
        .any(|f| *f == name);
    if !listed {
        return Err(ApiError::not_found("file", &name));
    }
    let vol = nifti::read_volume(&st.ws.store.job_dir(&id).join(&name)).map_err(ApiError::internal)?;
    match q.format.as_deref().unwrap_or("nifti") {
        "nifti" => Ok(nifti_response(nifti::encode_volume(&vol).map_err(ApiError::internal)?, name.trim_end_matches(".gz"))),
        "png" => Ok(png_response(render_grid(&vol.grid, &q)?)),
        other => Err(bad_request(format!("unknown format {other:?}"))),
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct SessionRequest {
    reader: String,
    phase: Phase,
    /// Needed the first time a reader appears.
    experience: Option<Experience>,
}

fn check_trial(st: &AppState, id: &str) -> Result<(), ApiError> {
    if id == st.cfg.trial.id {
        Ok(())
    } else {
        Err(ApiError::not_found("trial", id))
    }
}

async fn start_session(State(st): State<Shared>, Path(trial_id): Path<String>, headers: HeaderMap, Json(req): Json<SessionRequest>) -> ApiResult {
    check_trial(&st, &trial_id)?;
    let fp = fingerprint(&["session", &trial_id, &serde_json::to_string(&req).map_err(ApiError::internal)?]);
    let _g = st.trial_lock.lock().await;
    idempotent(&st, &headers, fp, || async {
        if req.reader.trim().is_empty() {
            return Err(bad_request("reader must be non-empty"));
        }
        let _w = st.trial.lock()?;
        let mut state = st.trial.load_state()?;
        let now = st.clock.now();
        let experience = match (state.readers.get(&req.reader), req.experience) {
            (Some(p), _) => p.experience,
            (None, Some(e)) => {
                state.enroll(&req.reader, e).map_err(protocol_error)?;
                e
            }
            (None, None) => return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "experience_required", "first session of a reader must state its experience")),
        };
        state.start(&req.reader, req.phase, now).map_err(protocol_error)?;
        let sid = trials::session_id(&trial_id, &req.reader, req.phase);
        let rec = SessionRecord {
            session_id: sid.clone(),
            trial_id: trial_id.clone(),
            token: format!("{:032x}", rand::random::<u128>()),
            started_at: now,
            finalized_at: None,
            session: ReaderSession { reader_id: req.reader.clone(), experience, phase: req.phase, entries: Vec::new() },
        };
        st.trial.save_session(&rec)?;
        st.trial.save_state(&state)?;
        Ok((
            StatusCode::CREATED,
            json!({
                "session_id": sid, "token": rec.token, "trial_id": trial_id, "reader": req.reader, "phase": req.phase,
                "started_at": now, "case_order": state.case_order, "ai_assisted": req.phase == Phase::AiAssisted,
            }),
        ))
    })
    .await
}

fn authorize(headers: &HeaderMap, rec: &SessionRecord) -> Result<(), ApiError> {
    let token = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    if token == Some(rec.token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "bad_token", "missing or wrong reader token"))
    }
}

fn session(st: &AppState, sid: &str) -> Result<SessionRecord, ApiError> {
    if sid.is_empty() || !sid.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(ApiError::not_found("session", sid));
    }
    st.trial.load_session(sid)?.ok_or_else(|| ApiError::not_found("session", sid))
}

#[derive(Debug, Deserialize, Serialize)]
struct DecisionRequest {
    case_id: String,
    decision: Decision,
    elapsed_seconds: f64,
}

async fn post_decision(State(st): State<Shared>, Path(sid): Path<String>, headers: HeaderMap, Json(req): Json<DecisionRequest>) -> ApiResult {
    let fp = fingerprint(&["decision", &sid, &serde_json::to_string(&req).map_err(ApiError::internal)?]);
    let _g = st.trial_lock.lock().await;
    idempotent(&st, &headers, fp, || async {
        let _w = st.trial.lock()?;
        let mut rec = session(&st, &sid)?;
        authorize(&headers, &rec)?;
        if rec.finalized_at.is_some() {
            return Err(ApiError::new(StatusCode::CONFLICT, "session_finalized", "session is already finalized"));
        }
        let state = st.trial.load_state()?;
        if !state.case_order.contains(&req.case_id) {
            return Err(ApiError::not_found("case", &req.case_id));
        }
        check_elapsed(req.elapsed_seconds).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_elapsed", e.to_string()))?;
        if let Some(prior) = rec.session.entries.iter().find(|e| e.case_id == req.case_id) {
            return Err(ApiError::new(StatusCode::CONFLICT, "duplicate_decision", format!("case {} already decided in this session", req.case_id)).with("prior", prior));
        }
        state.check_can_record(&rec.session.reader_id, rec.session.phase).map_err(protocol_error)?;
        rec.session.entries.push(ReadingEntry {
            case_id: req.case_id.clone(),
            decision: req.decision,
            elapsed_seconds: req.elapsed_seconds,
            ai_prediction_shown: rec.session.phase == Phase::AiAssisted,
        });
        st.trial.save_session(&rec)?;
        let done = rec.session.entries.len();
        Ok((StatusCode::CREATED, json!({ "session_id": sid, "case_id": req.case_id, "recorded": done, "remaining": state.case_order.len() - done })))
    })
    .await
}

async fn finalize_session(State(st): State<Shared>, Path(sid): Path<String>, headers: HeaderMap) -> ApiResult {
    let fp = fingerprint(&["finalize", &sid]);
    let _g = st.trial_lock.lock().await;
    idempotent(&st, &headers, fp, || async {
        let _w = st.trial.lock()?;
        let mut rec = session(&st, &sid)?;
        authorize(&headers, &rec)?;
        if rec.finalized_at.is_some() {
            return Err(ApiError::new(StatusCode::CONFLICT, "session_finalized", "session is already finalized"));
        }
        let mut state = st.trial.load_state()?;
        let missing: Vec<&String> = state.case_order.iter().filter(|c| !rec.session.entries.iter().any(|e| &e.case_id == *c)).collect();
        if !missing.is_empty() {
            return Err(ApiError::new(StatusCode::CONFLICT, "incomplete", format!("{} cases have no decision", missing.len())).with("missing", &missing));
        }
        let now = st.clock.now();
        state.finalize(&rec.session.reader_id, rec.session.phase, now).map_err(protocol_error)?;
        rec.finalized_at = Some(now);
        st.trial.save_state(&state)?;
        st.trial.save_session(&rec)?;
        let washout_until = match rec.session.phase {
            Phase::Unaided => Some(now + state.washout_seconds),
            Phase::AiAssisted => None,
        };
        Ok((StatusCode::OK, json!({ "session_id": sid, "finalized_at": now, "assisted_opens_at": washout_until })))
    })
    .await
}

async fn trial_report(State(st): State<Shared>, Path(trial_id): Path<String>) -> ApiResult {
    check_trial(&st, &trial_id)?;
    let sessions = st.trial.finalized_sessions()?;
    if sessions.is_empty() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no_finalized_sessions", "the trial has no finalized sessions yet"));
    }
    let bytes = trials::report_bytes(&sessions, &st.truth(), &st.ai())?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}
