mod common;

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use vbiopsy_core::nifti;
use vbiopsy_service::server::{router, AppState, ManualClock};
use vbiopsy_service::workspace::member_predictions;
use vbiopsy_service::PipelineConfig;

const T0: i64 = 1_800_000_000;

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: PipelineConfig,
    clock: Arc<ManualClock>,
    state: Arc<AppState>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = common::tiny_config(dir.path());
        // two-epoch models reconstruct poorly; the gate itself is exercised separately
        cfg.counterfactual.fidelity_threshold = 1.0;
        cfg.trial.washout_seconds = 3600;
        common::full_pipeline(&cfg);
        let clock = Arc::new(ManualClock::new(T0));
        let state = Arc::new(AppState::load(cfg.clone(), clock.clone()).unwrap());
        Fixture { _dir: dir, cfg, clock, state }
    })
}

fn app() -> Router {
    router(fixture().state.clone())
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ctype)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>, Option<String>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = get(app, uri).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post(app: &Router, uri: &str, body: Value, headers: &[(&str, &str)]) -> (StatusCode, Value) {
    let mut req = Request::post(uri).header(header::CONTENT_TYPE, "application/json");
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let (s, b, _) = send(app, req.body(Body::from(body.to_string())).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn test_case() -> String {
    fixture().state.cases.iter().find(|(_, c)| c.split == "test").unwrap().0.clone()
}

#[tokio::test]
async fn case_listing_and_clinical_fields() {
    let app = app();
    let (s, list) = get_json(&app, "/cases").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), fixture().cfg.data.cohort.n);
    let id = test_case();
    let (s, c) = get_json(&app, &format!("/cases/{id}/clinical")).await;
    assert_eq!(s, StatusCode::OK);
    let vol = c["gland_volume_cc"].as_f64().unwrap();
    let psa = c["psa"].as_f64().unwrap();
    assert!(vol > 0.0);
    assert!((c["psa_density"].as_f64().unwrap() - psa / vol).abs() < 1e-12);

    for uri in ["/cases/nope/clinical", "/cases/nope/volume", "/cases/nope/prediction"] {
        let (s, e) = get_json(&app, uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(e["error"], "unknown_case");
    }
}

#[tokio::test]
async fn volumes_come_back_as_png_nifti_and_json() {
    let app = app();
    let id = test_case();
    let case = &fixture().state.cases[&id].case;
    let dims = case.image.dims();

    let (s, png, ct) = get(&app, &format!("/cases/{id}/volume?z=1&level=0&width=4")).await;
    assert_eq!((s, ct.as_deref()), (StatusCode::OK, Some("image/png")));
    let dec = png::Decoder::new(std::io::Cursor::new(png));
    let reader = dec.read_info().unwrap();
    assert_eq!((reader.info().width as usize, reader.info().height as usize), (dims[0], dims[1]));

    let (s, bytes, _) = get(&app, &format!("/cases/{id}/volume?format=nifti")).await;
    assert_eq!(s, StatusCode::OK);
    let vol = nifti::decode_volume(&bytes).unwrap();
    assert_eq!(vol.dims(), dims);
    assert_eq!(vol.spacing(), case.image.spacing());
    for (a, b) in vol.grid.data().iter().zip(case.image.grid.data()) {
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0));
    }

    let (s, j) = get_json(&app, &format!("/cases/{id}/volume?kind=zones&format=json")).await;
    assert_eq!(s, StatusCode::OK);
    let data: Vec<u8> = j["data"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() as u8).collect();
    assert_eq!(data, case.zones.grid.data());

    let (s, _, ct) = get(&app, &format!("/cases/{id}/volume?kind=gland")).await;
    assert_eq!((s, ct.as_deref()), (StatusCode::OK, Some("image/png")));
    for bad in ["kind=bone", "format=tiff", "z=999", "level=1", "level=0&width=0"] {
        let (s, _, _) = get(&app, &format!("/cases/{id}/volume?{bad}")).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{bad}");
    }
}

#[tokio::test]
async fn prediction_is_the_mean_of_the_members() {
    let app = app();
    let id = test_case();
    let (s, p) = get_json(&app, &format!("/cases/{id}/prediction")).await;
    assert_eq!(s, StatusCode::OK);

    // independent recomputation from the stored ensemble
    let ws = vbiopsy_service::workspace::Workspace::open(fixture().cfg.clone()).unwrap();
    let (cases, _) = ws.prepared().unwrap();
    let ensemble = ws.ensemble().unwrap();
    let samples = ws.all_samples(&cases, None).unwrap();
    let members = member_predictions(&ensemble, &samples, &id).unwrap();
    assert_eq!(members.len(), 3);
    let mean = members.iter().map(|m| m.probability).sum::<f64>() / 3.0;
    assert!((p["probability"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(p["members"].as_array().unwrap().len(), 3);
    assert_eq!(p["high_risk"], json!(mean >= 0.5));
}

#[tokio::test]
async fn counterfactual_jobs_are_created_once_and_served() {
    let app = app();
    let id = test_case();
    let (s, created) = post(&app, "/counterfactual", json!({ "case_id": id }), &[]).await;
    assert_eq!(s, StatusCode::CREATED, "{created}");
    let job = created["job_id"].as_str().unwrap().to_string();
    let (s, again) = post(&app, "/counterfactual", json!({ "case_id": id }), &[]).await;
    assert_eq!((s, &again["job_id"]), (StatusCode::OK, &created["job_id"]));

    let (s, summary) = get_json(&app, &format!("/counterfactual/{job}")).await;
    assert_eq!(s, StatusCode::OK);
    let images = summary["links"]["images"].as_array().unwrap();
    assert_eq!(images.len(), fixture().cfg.counterfactual.alphas.len());
    let trace = &summary["job"]["trace"];
    assert!(trace.is_object());

    let (s, bytes, _) = get(&app, summary["links"]["heatmap_aggregate"].as_str().unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let heat = nifti::decode_volume(&bytes).unwrap();
    assert!(heat.grid.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    let (s, _, ct) = get(&app, &format!("{}?format=png", images[0].as_str().unwrap())).await;
    assert_eq!((s, ct.as_deref()), (StatusCode::OK, Some("image/png")));

    for uri in [format!("/counterfactual/{job}/files/..%2Fjob.json"), format!("/counterfactual/{job}/files/job.json"), "/counterfactual/ffff".to_string(), "/counterfactual/..".to_string()] {
        let (s, _, _) = get(&app, &uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
    }
    let (s, e) = post(&app, "/counterfactual", json!({ "case_id": id, "alpha_schedule": [1.0, 2.0] }), &[]).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("bad_alpha_schedule")));
    let (s, _) = post(&app, "/counterfactual", json!({ "case_id": "nope" }), &[]).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn fidelity_gate_refuses_poor_reconstructions() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.counterfactual.fidelity_threshold = 0.0;
    let strict = router(Arc::new(AppState::load(cfg, f.clock.clone()).unwrap()));
    let (s, e) = post(&strict, "/counterfactual", json!({ "case_id": test_case() }), &[]).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["error"], "fidelity_gate");
    assert!(e["delta_p"].as_f64().unwrap() >= 0.0);
    assert_eq!(e["threshold"], json!(0.0));
}

#[tokio::test]
async fn untrained_models_give_service_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    common::prepare(&cfg);
    let bare = router(Arc::new(AppState::load(cfg, Arc::new(ManualClock::new(T0))).unwrap()));
    let (s, e) = get_json(&bare, "/cases/phantom-0000/prediction").await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert!(e["message"].as_str().unwrap().contains("train-clf"));
    let (s, _) = post(&bare, "/counterfactual", json!({ "case_id": "phantom-0000" }), &[]).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

async fn read_all(app: &Router, sid: &str, token: &str, cases: &[String]) {
    let auth = format!("Bearer {token}");
    for (i, c) in cases.iter().enumerate() {
        let decision = if i % 2 == 0 { "high" } else { "low" };
        let (s, r) = post(app, &format!("/session/{sid}/decision"), json!({ "case_id": c, "decision": decision, "elapsed_seconds": 20.0 + i as f64 }), &[("authorization", &auth)]).await;
        assert_eq!(s, StatusCode::CREATED, "{r}");
    }
}

#[tokio::test]
async fn reader_trial_flow() {
    let f = fixture();
    let app = app();
    let trial = &f.cfg.trial.id;
    let start = |reader: &str, phase: &str, exp: Option<&str>| {
        let mut b = json!({ "reader": reader, "phase": phase });
        if let Some(e) = exp {
            b["experience"] = json!(e);
        }
        b
    };

    let (s, _) = post(&app, "/trial/other/session", start("r1", "unaided", Some("<5y")), &[]).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, e) = post(&app, &format!("/trial/{trial}/session"), start("r1", "unaided", None), &[]).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("experience_required")));
    let (s, e) = post(&app, &format!("/trial/{trial}/session"), start("r1", "ai_assisted", Some("<5y")), &[]).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::CONFLICT, Some("phase_order")));

    let key = [("idempotency-key", "open-r1")];
    let (s, sess) = post(&app, &format!("/trial/{trial}/session"), start("r1", "unaided", Some("5-10y")), &key).await;
    assert_eq!(s, StatusCode::CREATED, "{sess}");
    let (s, replay) = post(&app, &format!("/trial/{trial}/session"), start("r1", "unaided", Some("5-10y")), &key).await;
    assert_eq!((s, &replay), (StatusCode::CREATED, &sess));
    let (s, e) = post(&app, &format!("/trial/{trial}/session"), start("r2", "unaided", Some("5-10y")), &key).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("idempotency_key_reused")));

    let sid = sess["session_id"].as_str().unwrap().to_string();
    let token = sess["token"].as_str().unwrap().to_string();
    let cases: Vec<String> = serde_json::from_value(sess["case_order"].clone()).unwrap();
    assert_eq!(cases.len(), f.state.cases.values().filter(|c| c.split == "test").count());
    let auth = format!("Bearer {token}");
    let decide = |case: &str, t: f64| json!({ "case_id": case, "decision": "high", "elapsed_seconds": t });

    let (s, _) = post(&app, &format!("/session/{sid}/decision"), decide(&cases[0], 10.0), &[("authorization", "Bearer nope")]).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = post(&app, "/session/0123456789abcdef/decision", decide(&cases[0], 10.0), &[("authorization", &auth)]).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(&app, &format!("/session/{sid}/decision"), decide("phantom-9999", 10.0), &[("authorization", &auth)]).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    for t in [0.0, -1.0, 7200.0] {
        let (s, _) = post(&app, &format!("/session/{sid}/decision"), decide(&cases[0], t), &[("authorization", &auth)]).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{t}");
    }
    let (s, e) = post(&app, &format!("/session/{sid}/finalize"), json!(null), &[("authorization", &auth)]).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::CONFLICT, Some("incomplete")));
    assert_eq!(e["missing"].as_array().unwrap().len(), cases.len());

    read_all(&app, &sid, &token, &cases).await;
    let (s, e) = post(&app, &format!("/session/{sid}/decision"), decide(&cases[0], 10.0), &[("authorization", &auth)]).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::CONFLICT, Some("duplicate_decision")));
    assert_eq!(e["prior"]["elapsed_seconds"], json!(20.0));

    let (s, _) = get_json(&app, &format!("/trial/{trial}/report")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, fin) = post(&app, &format!("/session/{sid}/finalize"), json!(null), &[("authorization", &auth)]).await;
    assert_eq!(s, StatusCode::OK, "{fin}");
    assert_eq!(fin["assisted_opens_at"], json!(T0 + 3600));
    let (s, _) = post(&app, &format!("/session/{sid}/decision"), decide(&cases[0], 10.0), &[("authorization", &auth)]).await;
    assert_eq!(s, StatusCode::CONFLICT);

    f.clock.advance(3599);
    let (s, e) = post(&app, &format!("/trial/{trial}/session"), start("r1", "ai_assisted", None), &[]).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::CONFLICT, Some("washout")));
    assert_eq!(e["deadline"], json!(T0 + 3600));
    assert!(e["deadline_utc"].as_str().unwrap().starts_with("2027-01-15"));
    f.clock.advance(1);
    let (s, assisted) = post(&app, &format!("/trial/{trial}/session"), start("r1", "ai_assisted", None), &[]).await;
    assert_eq!(s, StatusCode::CREATED, "{assisted}");
    assert_eq!(assisted["ai_assisted"], json!(true));
    let (asid, atok) = (assisted["session_id"].as_str().unwrap(), assisted["token"].as_str().unwrap());
    read_all(&app, asid, atok, &cases).await;
    let (s, _) = post(&app, &format!("/session/{asid}/finalize"), json!(null), &[("authorization", &format!("Bearer {atok}"))]).await;
    assert_eq!(s, StatusCode::OK);

    let (s, body, ct) = get(&app, &format!("/trial/{trial}/report")).await;
    assert_eq!((s, ct.as_deref()), (StatusCode::OK, Some("application/json")));
    assert_eq!(body, f.state.report_bytes().unwrap());
    let report: Value = serde_json::from_slice(&body).unwrap();
    assert!(report.is_object());
}
